#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"

namespace dkl::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

class Writer {
public:
    void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
    void u32(std::uint32_t v) { put(to_little(v)); }
    void f64(double v) { put(to_little(std::bit_cast<std::uint64_t>(v))); }
    [[nodiscard]] const std::vector<char>& bytes() const noexcept { return bytes_; }

private:
    template <typename T>
    void put(T v) {
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));
        bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
    }
    std::vector<char> bytes_;
};

class Reader {
public:
    Reader(const std::vector<char>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void expect_magic(std::string_view m) {
        need(m.size());
        require(std::string_view(bytes_.data() + pos_, m.size()) == m, ErrorCode::Format,
                what_ + ": bad magic, expected \"" + std::string(m) + "\"");
        pos_ += m.size();
    }
    std::uint32_t u32() { return to_little(get<std::uint32_t>()); }
    double f64() { return std::bit_cast<double>(to_little(get<std::uint64_t>())); }
    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        require(bytes_.size() - pos_ >= n, ErrorCode::Format, what_ + ": truncated payload");
    }
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    const std::vector<char>& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<char>& bytes);

}  // namespace dkl::io
