#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dklcli {

/// Thrown for anything the user can fix: bad flags, config syntax, unknown keys.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Kind { UInt, Real, Bool, Text, UIntList };

struct KeySpec {
    std::string key;  // section.name
    Kind kind;
    std::string fallback;
    std::string help;
};

const std::vector<KeySpec>& schema();

/// Resolved section.key -> textual value. Every schema key is present.
class Settings {
public:
    Settings();

    /// INI-style document: [section] headers, `key = value` lines, '#' or ';'
    /// comments. Errors name the file, line and field.
    void load_file(const std::string& path);

    /// `--section.key value` or `--key value` pairs; a bare key must be unique
    /// among `sections` (`seed` always means train.seed).
    void apply_overrides(const std::vector<std::string>& args, const std::vector<std::string>& sections);

    void set(const std::string& key, const std::string& value, const std::string& origin);

    [[nodiscard]] std::uint64_t uint(const std::string& key) const;
    [[nodiscard]] double real(const std::string& key) const;
    [[nodiscard]] bool flag(const std::string& key) const;
    [[nodiscard]] const std::string& text(const std::string& key) const;
    [[nodiscard]] std::vector<std::size_t> uint_list(const std::string& key) const;

    /// Typed JSON object of the given sections, {section: {name: value}}.
    [[nodiscard]] nlohmann::ordered_json to_json(const std::vector<std::string>& sections) const;
    void load_json(const nlohmann::json& config);

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dklcli
