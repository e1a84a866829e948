#include "settings.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>

namespace dklcli {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

const KeySpec* find_spec(const std::string& key) {
    for (const auto& spec : schema()) {
        if (spec.key == key) {
            return &spec;
        }
    }
    return nullptr;
}

std::string section_of(const std::string& key) { return key.substr(0, key.find('.')); }

bool parse_uint(const std::string& text, std::uint64_t& out) {
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc() && ptr == end && !text.empty();
}

bool parse_real(const std::string& text, double& out) {
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc() && ptr == end && !text.empty() && std::isfinite(out);
}

bool parse_bool(const std::string& text, bool& out) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") {
        out = true;
        return true;
    }
    if (text == "false" || text == "0" || text == "no" || text == "off") {
        out = false;
        return true;
    }
    return false;
}

bool parse_list(const std::string& text, std::vector<std::size_t>& out) {
    out.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::uint64_t v = 0;
        if (!parse_uint(trim(item), v)) {
            return false;
        }
        out.push_back(static_cast<std::size_t>(v));
    }
    return !out.empty();
}

const char* kind_name(Kind kind) {
    switch (kind) {
        case Kind::UInt: return "a non-negative integer";
        case Kind::Real: return "a finite number";
        case Kind::Bool: return "true or false";
        case Kind::Text: return "text";
        case Kind::UIntList: return "a comma-separated list of integers";
    }
    return "a value";
}

void validate(const KeySpec& spec, const std::string& value, const std::string& origin) {
    bool ok = true;
    switch (spec.kind) {
        case Kind::UInt: {
            std::uint64_t v;
            ok = parse_uint(value, v);
            break;
        }
        case Kind::Real: {
            double v;
            ok = parse_real(value, v);
            break;
        }
        case Kind::Bool: {
            bool v;
            ok = parse_bool(value, v);
            break;
        }
        case Kind::UIntList: {
            std::vector<std::size_t> v;
            ok = parse_list(value, v);
            break;
        }
        case Kind::Text: break;
    }
    if (!ok) {
        throw UsageError(origin + ": field '" + spec.key + "' expects " + kind_name(spec.kind) + ", got '" + value +
                         "'");
    }
}

}  // namespace

const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> keys{
        {"data.source", Kind::Text, "gaussian", "gaussian or csv"},
        {"data.csv", Kind::Text, "", "CSV file when source = csv"},
        {"data.classes", Kind::UInt, "10", "gaussian: class count"},
        {"data.dim", Kind::UInt, "16", "gaussian: feature dimension"},
        {"data.per_class", Kind::UInt, "200", "gaussian: samples per class"},
        {"data.spread", Kind::Real, "0.3", "gaussian: noise standard deviation"},
        {"data.seed", Kind::UInt, "100", "gaussian: generator seed"},
        {"data.test_fraction", Kind::Real, "0.25", "stratified test share"},
        {"data.split_seed", Kind::UInt, "0", "split seed"},
        {"model.hidden", Kind::UIntList, "64", "hidden layer widths"},
        {"train.loss", Kind::Text, "kl", "ce, kl, dkl, ikl or jsd"},
        {"train.epochs", Kind::UInt, "10", ""},
        {"train.batch_size", Kind::UInt, "64", ""},
        {"train.lr", Kind::Real, "0.05", "base learning rate (cosine schedule)"},
        {"train.momentum", Kind::Real, "0.9", ""},
        {"train.weight_decay", Kind::Real, "0.0005", ""},
        {"train.seed", Kind::UInt, "0", "init, shuffling and attack seed"},
        {"loss.alpha", Kind::Real, "1", "wMSE weight"},
        {"loss.beta", Kind::Real, "1", "soft cross-entropy weight"},
        {"loss.detach_m", Kind::Bool, "false", ""},
        {"loss.break_asymmetry", Kind::Bool, "false", ""},
        {"loss.class_wise", Kind::Bool, "false", "class-wise weights (dkl)"},
        {"attack.epsilon", Kind::Real, "0.1", "L-infinity radius"},
        {"attack.step_size", Kind::Real, "0.025", ""},
        {"attack.iterations", Kind::UInt, "10", ""},
        {"attack.random_start", Kind::Bool, "true", ""},
        {"stats.temperature", Kind::Real, "4", "temperature of class statistics"},
        {"stats.momentum", Kind::Real, "0.9", "EMA momentum of class statistics"},
        {"kd.temperature", Kind::Real, "4", ""},
        {"kd.hard_label_weight", Kind::Real, "1", ""},
        {"kd.teacher_params", Kind::Text, "", "teacher params file"},
        {"kd.teacher_logits", Kind::Text, "", "teacher logits file (one row per training sample)"},
        {"adversarial.lambda", Kind::Real, "6", "weight of the clean-vs-adversarial term"},
        {"adversarial.eps_warmup_fraction", Kind::Real, "0.4", ""},
        {"adversarial.eval_robust", Kind::Bool, "true", ""},
        {"eval.params", Kind::Text, "", "params file to evaluate"},
        {"eval.split", Kind::Text, "test", "test, train or all"},
        {"eval.attack", Kind::Bool, "true", "measure PGD robustness"},
        {"eval.margins", Kind::Bool, "false", "print per-class margins"},
        {"eval.stats", Kind::Text, "", "stats table for the margins"},
        {"verify.classes", Kind::UIntList, "2,5,10,100", ""},
        {"verify.trials", Kind::UInt, "1000", "KL vs DKL equivalence trials per class count"},
        {"verify.check_trials", Kind::UInt, "20", "asymmetry and wMSE identity trials per class count"},
        {"verify.seed", Kind::UInt, "0", ""},
        {"verify.tolerance", Kind::Real, "1e-10", "KL vs DKL equivalence, asymmetry and wMSE identity tolerance"},
        {"verify.fd_max_classes", Kind::UInt, "10", "finite differences skip larger class counts"},
        {"verify.fd_trials", Kind::UInt, "20", "finite-difference trials per class count"},
        {"verify.fd_tolerance", Kind::Real, "1e-5", "relative, soft logits"},
        {"verify.saturated_tolerance", Kind::Real, "1e-4", "relative, saturated logits"},
        {"bench.classes", Kind::UIntList, "2,10,100,1000", ""},
        {"bench.batch", Kind::UInt, "64", ""},
        {"bench.repeats", Kind::UInt, "3", ""},
        {"bench.seed", Kind::UInt, "0", ""},
        {"bench.tolerance", Kind::Real, "1e-10", ""},
    };
    return keys;
}

Settings::Settings() {
    for (const auto& spec : schema()) {
        values_[spec.key] = spec.fallback;
    }
}

void Settings::set(const std::string& key, const std::string& value, const std::string& origin) {
    const KeySpec* spec = find_spec(key);
    if (!spec) {
        throw UsageError(origin + ": unknown field '" + key + "'");
    }
    validate(*spec, value, origin);
    values_[key] = value;
}

void Settings::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot read config file '" + path + "'");
    }
    std::string line;
    std::string section;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::string origin = path + ":" + std::to_string(number);
        std::string body = trim(line);
        if (body.empty() || body[0] == '#' || body[0] == ';') {
            continue;
        }
        if (const auto hash = body.find(" #"); hash != std::string::npos) {
            body = trim(body.substr(0, hash));
        }
        if (body.front() == '[') {
            if (body.back() != ']' || body.size() < 3) {
                throw UsageError(origin + ": malformed section header '" + body + "'");
            }
            section = trim(body.substr(1, body.size() - 2));
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw UsageError(origin + ": expected 'key = value', got '" + body + "'");
        }
        if (section.empty()) {
            throw UsageError(origin + ": field '" + trim(body.substr(0, eq)) + "' appears before any [section]");
        }
        set(section + "." + trim(body.substr(0, eq)), trim(body.substr(eq + 1)), origin);
    }
}

void Settings::apply_overrides(const std::vector<std::string>& args, const std::vector<std::string>& sections) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& arg = args[i];
        if (arg.rfind("--", 0) != 0 || arg.size() < 3) {
            throw UsageError("unexpected argument '" + arg + "'");
        }
        std::string name = arg.substr(2);
        std::optional<std::string> value;
        if (const auto eq = name.find('='); eq != std::string::npos) {
            value = name.substr(eq + 1);
            name = name.substr(0, eq);
        }
        std::replace(name.begin(), name.end(), '-', '_');
        std::string key;
        if (name.find('.') != std::string::npos) {
            key = name;
        } else if (name == "seed" && std::find(sections.begin(), sections.end(), "train") != sections.end()) {
            key = "train.seed";
        } else {
            std::vector<std::string> matches;
            for (const auto& spec : schema()) {
                const std::string sec = section_of(spec.key);
                if (spec.key.substr(sec.size() + 1) == name &&
                    std::find(sections.begin(), sections.end(), sec) != sections.end()) {
                    matches.push_back(spec.key);
                }
            }
            if (matches.empty()) {
                throw UsageError("unknown option '" + arg + "'");
            }
            if (matches.size() > 1) {
                std::string list;
                for (const auto& m : matches) {
                    list += (list.empty() ? "" : ", ") + ("--" + m);
                }
                throw UsageError("option '" + arg + "' is ambiguous; use one of " + list);
            }
            key = matches.front();
        }
        if (!value) {
            const KeySpec* spec = find_spec(key);
            const bool next_is_flag = i + 1 >= args.size() || args[i + 1].rfind("--", 0) == 0;
            if (spec && spec->kind == Kind::Bool && next_is_flag) {
                value = "true";
            } else if (i + 1 >= args.size()) {
                throw UsageError("option '" + arg + "' needs a value");
            } else {
                value = args[++i];
            }
        }
        set(key, *value, "option '" + arg + "'");
    }
}

std::uint64_t Settings::uint(const std::string& key) const {
    std::uint64_t v = 0;
    parse_uint(values_.at(key), v);
    return v;
}

double Settings::real(const std::string& key) const {
    double v = 0.0;
    parse_real(values_.at(key), v);
    return v;
}

bool Settings::flag(const std::string& key) const {
    bool v = false;
    parse_bool(values_.at(key), v);
    return v;
}

const std::string& Settings::text(const std::string& key) const { return values_.at(key); }

std::vector<std::size_t> Settings::uint_list(const std::string& key) const {
    std::vector<std::size_t> v;
    parse_list(values_.at(key), v);
    return v;
}

nlohmann::ordered_json Settings::to_json(const std::vector<std::string>& sections) const {
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& sec : sections) {
        nlohmann::ordered_json obj = nlohmann::ordered_json::object();
        for (const auto& spec : schema()) {
            if (section_of(spec.key) != sec) {
                continue;
            }
            const std::string name = spec.key.substr(sec.size() + 1);
            switch (spec.kind) {
                case Kind::UInt: obj[name] = uint(spec.key); break;
                case Kind::Real: obj[name] = real(spec.key); break;
                case Kind::Bool: obj[name] = flag(spec.key); break;
                case Kind::Text: obj[name] = text(spec.key); break;
                case Kind::UIntList: obj[name] = uint_list(spec.key); break;
            }
        }
        out[sec] = obj;
    }
    return out;
}

void Settings::load_json(const nlohmann::json& config) {
    if (!config.is_object()) {
        throw UsageError("manifest config is not an object");
    }
    for (const auto& [sec, fields] : config.items()) {
        if (!fields.is_object()) {
            throw UsageError("manifest section '" + sec + "' is not an object");
        }
        for (const auto& [name, value] : fields.items()) {
            const std::string key = sec + "." + name;
            std::string textual;
            if (value.is_string()) {
                textual = value.get<std::string>();
            } else if (value.is_boolean()) {
                textual = value.get<bool>() ? "true" : "false";
            } else if (value.is_array()) {
                for (const auto& item : value) {
                    textual += (textual.empty() ? "" : ",") + std::to_string(item.get<std::uint64_t>());
                }
            } else if (value.is_number_unsigned() || value.is_number_integer()) {
                textual = std::to_string(value.get<std::uint64_t>());
            } else if (value.is_number_float()) {
                char buf[64];
                auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value.get<double>());
                textual.assign(buf, ptr);
            } else {
                throw UsageError("manifest field '" + key + "' has an unsupported type");
            }
            set(key, textual, "manifest");
        }
    }
}

}  // namespace dklcli
