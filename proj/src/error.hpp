#pragma once

#include <stdexcept>
#include <string>

namespace dkl {

enum class ErrorCode {
    InvalidArgument = 1,
    ShapeMismatch = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Diverged = 6,
};

/// Every failure raised by the core carries one of the codes above so the C
/// boundary can translate it into a status without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) {
        fail(code, what);
    }
}

}  // namespace dkl
