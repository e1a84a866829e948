#include "class_stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "error.hpp"
#include "numerics.hpp"

namespace dkl {

namespace {

void check_settings(std::size_t num_classes, double temperature, double momentum) {
    require(num_classes >= 2, ErrorCode::InvalidArgument, "class stats need at least 2 classes");
    require(std::isfinite(temperature) && temperature > 0.0, ErrorCode::InvalidArgument,
            "class stats temperature must be positive");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::InvalidArgument, "class stats momentum must be in [0, 1)");
}

void check_labels(std::span<const std::int32_t> labels, std::size_t rows, std::size_t num_classes) {
    require(labels.size() == rows, ErrorCode::ShapeMismatch,
            "label count " + std::to_string(labels.size()) + " != logits rows " + std::to_string(rows));
    for (auto y : labels) {
        require(y >= 0 && static_cast<std::size_t>(y) < num_classes, ErrorCode::InvalidArgument,
                "label " + std::to_string(y) + " out of range");
    }
}

// Per-class sums of softmax(o / temperature) and their sample counts.
std::pair<Matrix, std::vector<std::uint64_t>> class_sums(const Matrix& logits, std::span<const std::int32_t> labels,
                                                         std::size_t num_classes, double temperature) {
    Matrix sums(num_classes, logits.cols());
    std::vector<std::uint64_t> counts(num_classes, 0);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        const auto p = softmax(logits.row(i), temperature);
        auto dst = sums.row(y);
        for (std::size_t j = 0; j < p.size(); ++j) {
            dst[j] += p[j];
        }
        ++counts[y];
    }
    return {std::move(sums), std::move(counts)};
}

}  // namespace

ClassStatsTable::ClassStatsTable(Matrix rows, double temperature, double momentum)
    : rows_(std::move(rows)), counts_(rows_.rows(), 0), temperature_(temperature), momentum_(momentum) {}

ClassStatsTable ClassStatsTable::uniform(std::size_t num_classes, double temperature, double momentum) {
    check_settings(num_classes, temperature, momentum);
    return {Matrix(num_classes, num_classes, 1.0 / static_cast<double>(num_classes)), temperature, momentum};
}

ClassStatsTable ClassStatsTable::exact_recompute(const Matrix& logits, std::span<const std::int32_t> labels,
                                                 double temperature, double momentum) {
    const std::size_t c = logits.cols();
    check_settings(c, temperature, momentum);
    check_labels(labels, logits.rows(), c);
    auto [sums, counts] = class_sums(logits, labels, c, temperature);
    for (std::size_t y = 0; y < c; ++y) {
        require(counts[y] > 0, ErrorCode::InvalidArgument, "class " + std::to_string(y) + " has no samples");
        for (double& v : sums.row(y)) {
            v /= static_cast<double>(counts[y]);
        }
    }
    ClassStatsTable table(std::move(sums), temperature, momentum);
    table.counts_ = std::move(counts);
    return table;
}

void ClassStatsTable::update_batch(const Matrix& logits, std::span<const std::int32_t> labels) {
    const std::size_t c = num_classes();
    require(logits.cols() == c, ErrorCode::ShapeMismatch, "logits width does not match class stats");
    check_labels(labels, logits.rows(), c);
    const auto [sums, counts] = class_sums(logits, labels, c, temperature_);
    for (std::size_t y = 0; y < c; ++y) {
        if (counts[y] == 0) {
            continue;
        }
        auto dst = rows_.row(y);
        const auto src = sums.row(y);
        const double n = static_cast<double>(counts[y]);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            dst[j] = (1.0 - momentum_) * (src[j] / n) + momentum_ * dst[j];
            total += dst[j];
        }
        for (double& v : dst) {
            v /= total;
        }
        counts_[y] += counts[y];
    }
}

std::span<const double> ClassStatsTable::row(std::size_t y) const {
    require(y < num_classes(), ErrorCode::InvalidArgument, "class index " + std::to_string(y) + " out of range");
    return rows_.row(y);
}

std::uint64_t ClassStatsTable::count(std::size_t y) const {
    require(y < num_classes(), ErrorCode::InvalidArgument, "class index " + std::to_string(y) + " out of range");
    return counts_[y];
}

Matrix ClassStatsTable::class_weight_matrix(std::size_t y) const { return outer_weight(row(y)); }

double ClassStatsTable::margin(std::size_t y) const {
    const auto r = row(y);
    double rival = 0.0;
    for (std::size_t k = 0; k < r.size(); ++k) {
        if (k != y) {
            rival = std::max(rival, r[k]);
        }
    }
    return r[y] - rival;
}

std::vector<double> ClassStatsTable::margins() const {
    std::vector<double> out(num_classes());
    for (std::size_t y = 0; y < out.size(); ++y) {
        out[y] = margin(y);
    }
    return out;
}

double ClassStatsTable::mean_margin() const {
    const auto m = margins();
    double total = 0.0;
    for (double v : m) {
        total += v;
    }
    return total / static_cast<double>(m.size());
}

std::string ClassStatsTable::to_text() const {
    std::string out = "# dkl class stats\n";
    char buf[64];
    auto append = [&](double v) {
        auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        out.append(buf, end);
    };
    out += "# temperature ";
    append(temperature_);
    out += "\n# momentum ";
    append(momentum_);
    out += '\n';
    for (std::size_t y = 0; y < num_classes(); ++y) {
        const auto r = rows_.row(y);
        for (std::size_t j = 0; j < r.size(); ++j) {
            if (j) {
                out += ' ';
            }
            append(r[j]);
        }
        out += '\n';
    }
    return out;
}

ClassStatsTable ClassStatsTable::from_text(const std::string& text) {
    double temperature = 1.0;
    double momentum = 0.0;
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    auto parse = [&](std::string_view token) {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
        require(ec == std::errc() && ptr == token.data() + token.size(), ErrorCode::Format,
                "stats line " + std::to_string(line_no) + ": bad number '" + std::string(token) + "'");
        return v;
    };
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string token;
        if (!line.empty() && line[0] == '#') {
            fields >> token;  // '#'
            std::string key;
            std::string value;
            if (fields >> key >> value) {
                if (key == "temperature") {
                    temperature = parse(value);
                } else if (key == "momentum") {
                    momentum = parse(value);
                }
            }
            continue;
        }
        std::vector<double> row;
        while (fields >> token) {
            row.push_back(parse(token));
        }
        if (!row.empty()) {
            rows.push_back(std::move(row));
        }
    }
    const std::size_t c = rows.size();
    check_settings(c, temperature, momentum);
    Matrix m(c, c);
    for (std::size_t y = 0; y < c; ++y) {
        require(rows[y].size() == c, ErrorCode::Format,
                "stats row " + std::to_string(y) + " has " + std::to_string(rows[y].size()) + " columns, expected " +
                    std::to_string(c));
        check_probs(rows[y], 1e-9);
        std::copy(rows[y].begin(), rows[y].end(), m.row(y).begin());
    }
    return {std::move(m), temperature, momentum};
}

void ClassStatsTable::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    out << to_text();
    require(static_cast<bool>(out), ErrorCode::Io, "failed writing " + path.string());
}

ClassStatsTable ClassStatsTable::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str());
}

}  // namespace dkl
