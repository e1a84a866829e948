#include "data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include "binary_io.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace dkl {

namespace {

void rescale_columns(Matrix& features) {
    for (std::size_t d = 0; d < features.cols(); ++d) {
        double lo = features(0, d);
        double hi = lo;
        for (std::size_t i = 0; i < features.rows(); ++i) {
            lo = std::min(lo, features(i, d));
            hi = std::max(hi, features(i, d));
        }
        const double range = hi - lo;
        for (std::size_t i = 0; i < features.rows(); ++i) {
            features(i, d) = range > 0.0 ? (features(i, d) - lo) / range : 0.5;
        }
    }
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
        while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
        while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
        out.push_back(field);
        if (pos == std::string_view::npos) {
            return out;
        }
        start = pos + 1;
    }
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.features = Matrix(indices.size(), dim());
    out.labels.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = features.row(indices[i]);
        std::copy(src.begin(), src.end(), out.features.row(i).begin());
        out.labels.push_back(labels[indices[i]]);
    }
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto y : labels) {
        ++counts[static_cast<std::size_t>(y)];
    }
    return counts;
}

void Dataset::validate() const {
    require(num_classes >= 2, ErrorCode::InvalidArgument, "dataset needs at least 2 classes");
    require(features.rows() == labels.size(), ErrorCode::ShapeMismatch, "feature rows != label count");
    for (auto y : labels) {
        require(y >= 0 && static_cast<std::size_t>(y) < num_classes, ErrorCode::InvalidArgument,
                "label " + std::to_string(y) + " out of range");
    }
    const auto counts = class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        require(counts[c] > 0, ErrorCode::InvalidArgument, "class " + std::to_string(c) + " is empty");
    }
    for (double v : features.values()) {
        require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument, "feature outside [0, 1]");
    }
}

Dataset gaussian_mixture(std::size_t num_classes, std::size_t dim, std::size_t n_per_class, double spread,
                         std::uint64_t seed) {
    require(num_classes >= 2, ErrorCode::InvalidArgument, "need at least 2 classes");
    require(dim >= 2, ErrorCode::InvalidArgument, "need at least 2 feature dimensions");
    require(n_per_class >= 1, ErrorCode::InvalidArgument, "need at least 1 sample per class");
    require(std::isfinite(spread) && spread > 0.0, ErrorCode::InvalidArgument, "spread must be positive");

    Matrix means(num_classes, dim);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
        double norm = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double harmonic = static_cast<double>(d / 2 + 1);
            means(c, d) = d % 2 == 0 ? std::cos(harmonic * theta) : std::sin(harmonic * theta);
            norm += means(c, d) * means(c, d);
        }
        norm = std::sqrt(norm);
        for (double& v : means.row(c)) {
            v /= norm;
        }
    }

    Rng rng(seed, 0x474d4d);
    Dataset out;
    out.num_classes = num_classes;
    out.features = Matrix(num_classes * n_per_class, dim);
    out.labels.reserve(num_classes * n_per_class);
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            auto row = out.features.row(out.labels.size());
            for (std::size_t d = 0; d < dim; ++d) {
                row[d] = means(c, d) + spread * rng.normal();
            }
            out.labels.push_back(static_cast<std::int32_t>(c));
        }
    }
    rescale_columns(out.features);
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed) {
    require(test_fraction > 0.0 && test_fraction < 1.0, ErrorCode::InvalidArgument, "test fraction must be in (0, 1)");
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
    }
    Rng rng(seed, 0x53504c);
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& idx = by_class[c];
        require(idx.size() >= 2, ErrorCode::InvalidArgument,
                "class " + std::to_string(c) + " has " + std::to_string(idx.size()) + " samples, too few to stratify");
        shuffle(idx, rng);
        auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
        n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
        test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {data.subset(train), data.subset(test)};
}

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path.string());
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::Format, path.string() + ": empty file");
    const auto header = split_commas(line);
    std::size_t label_col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "label") {
            label_col = i;
        }
    }
    require(label_col < header.size(), ErrorCode::Format, path.string() + ": header has no 'label' column");
    const std::size_t dim = header.size() - 1;
    require(dim >= 1, ErrorCode::Format, path.string() + ": no feature columns");

    std::vector<double> values;
    std::vector<std::int32_t> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") {
            continue;
        }
        const auto fields = split_commas(line);
        require(fields.size() == header.size(), ErrorCode::Format,
                path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                    " fields, got " + std::to_string(fields.size()));
        for (std::size_t i = 0; i < fields.size(); ++i) {
            const auto f = fields[i];
            if (i == label_col) {
                std::int32_t y = 0;
                auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), y);
                require(ec == std::errc() && ptr == f.data() + f.size() && y >= 0, ErrorCode::Format,
                        path.string() + ":" + std::to_string(line_no) + ": bad label '" + std::string(f) + "'");
                labels.push_back(y);
            } else {
                double v = 0.0;
                auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
                require(ec == std::errc() && ptr == f.data() + f.size() && std::isfinite(v), ErrorCode::Format,
                        path.string() + ":" + std::to_string(line_no) + ": bad number '" + std::string(f) + "'");
                values.push_back(v);
            }
        }
    }
    require(!labels.empty(), ErrorCode::Format, path.string() + ": no data rows");
    Dataset out;
    out.features = Matrix(labels.size(), dim, std::move(values));
    out.labels = std::move(labels);
    out.num_classes = static_cast<std::size_t>(*std::max_element(out.labels.begin(), out.labels.end())) + 1;
    const bool in_unit_box = std::all_of(out.features.values().begin(), out.features.values().end(),
                                         [](double v) { return v >= 0.0 && v <= 1.0; });
    if (!in_unit_box) {
        rescale_columns(out.features);
    }
    out.validate();
    return out;
}

void save_csv(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    for (std::size_t d = 0; d < data.dim(); ++d) {
        out << 'x' << d << ',';
    }
    out << "label\n";
    char buf[64];
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (double v : data.features.row(i)) {
            auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
            out.write(buf, end - buf);
            out << ',';
        }
        out << data.labels[i] << '\n';
    }
    require(static_cast<bool>(out), ErrorCode::Io, "failed writing " + path.string());
}

void export_logits(const std::filesystem::path& path, const Matrix& logits) {
    for (double v : logits.values()) {
        require(std::isfinite(v), ErrorCode::Numeric, "refusing to export non-finite logits");
    }
    io::Writer w;
    w.magic("DKLL");
    w.u32(static_cast<std::uint32_t>(logits.rows()));
    w.u32(static_cast<std::uint32_t>(logits.cols()));
    for (double v : logits.values()) {
        w.f64(v);
    }
    io::write_file(path.string(), w.bytes());
}

Matrix import_logits(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path.string());
    io::Reader r(bytes, path.string());
    r.expect_magic("DKLL");
    const std::size_t n = r.u32();
    const std::size_t c = r.u32();
    require(r.remaining() == n * c * sizeof(double), ErrorCode::Format,
            path.string() + ": payload holds " + std::to_string(r.remaining()) + " bytes, header says " +
                std::to_string(n) + "x" + std::to_string(c) + " doubles");
    Matrix out(n, c);
    for (double& v : out.values()) {
        v = r.f64();
        require(std::isfinite(v), ErrorCode::Format, path.string() + ": non-finite logit");
    }
    return out;
}

}  // namespace dkl
