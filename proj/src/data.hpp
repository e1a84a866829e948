#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "matrix.hpp"

namespace dkl {

/// N x D features in [0, 1] with N labels in [0, C). Every class is nonempty.
struct Dataset {
    Matrix features;
    std::vector<std::int32_t> labels;
    std::size_t num_classes = 0;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t dim() const noexcept { return features.cols(); }
    [[nodiscard]] Dataset subset(const std::vector<std::size_t>& indices) const;
    [[nodiscard]] std::vector<std::size_t> class_counts() const;
    void validate() const;
};

/// Isotropic Gaussian classes around unit-norm means on a trigonometric
/// moment curve (mean_c[2i] = cos((i+1) theta_c), mean_c[2i+1] = sin(...),
/// theta_c = 2 pi c / C, scaled to norm 1), then min-max rescaled per
/// dimension to [0, 1]. Samples are ordered class-major.
Dataset gaussian_mixture(std::size_t num_classes, std::size_t dim, std::size_t n_per_class, double spread,
                         std::uint64_t seed);

/// Stratified split: round(test_fraction * n_c) samples of each class go to
/// the test side. Every class needs at least 2 samples and both sides keep at
/// least one sample per class.
std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed);

/// CSV with a header row naming the feature columns and one "label" column.
/// Parsing is locale-independent. Features outside [0, 1] are min-max
/// rescaled per column.
Dataset load_csv(const std::filesystem::path& path);
void save_csv(const Dataset& data, const std::filesystem::path& path);

/// "DKLL", u32 N, u32 C, then N*C little-endian f64 values.
void export_logits(const std::filesystem::path& path, const Matrix& logits);
Matrix import_logits(const std::filesystem::path& path);

}  // namespace dkl
