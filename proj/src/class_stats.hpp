#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "matrix.hpp"

namespace dkl {

/// Per-class mean probability vectors ("class-wise global information").
///
/// Row y holds the mean of softmax(o / temperature) over samples labelled y.
/// Rows are always valid distributions and are read by the losses as
/// constants; nothing differentiates through this table.
class ClassStatsTable {
public:
    /// Every row uniform, counts zero. Requires C >= 2, temperature > 0 and
    /// 0 <= momentum < 1.
    static ClassStatsTable uniform(std::size_t num_classes, double temperature = 4.0, double momentum = 0.9);

    /// Exact per-class mean over a full set of logits. Every class must have
    /// at least one sample.
    static ClassStatsTable exact_recompute(const Matrix& logits, std::span<const std::int32_t> labels,
                                           double temperature = 4.0, double momentum = 0.9);

    /// EMA step: for every class y present in the batch,
    /// row_y <- normalize((1 - momentum) * batch_mean_y + momentum * row_y).
    void update_batch(const Matrix& logits, std::span<const std::int32_t> labels);

    [[nodiscard]] std::size_t num_classes() const noexcept { return rows_.rows(); }
    [[nodiscard]] double temperature() const noexcept { return temperature_; }
    [[nodiscard]] double momentum() const noexcept { return momentum_; }
    [[nodiscard]] std::span<const double> row(std::size_t y) const;
    [[nodiscard]] const Matrix& rows() const noexcept { return rows_; }
    [[nodiscard]] std::uint64_t count(std::size_t y) const;

    /// outer_weight(row_y).
    [[nodiscard]] Matrix class_weight_matrix(std::size_t y) const;

    /// row_y[y] - max_{k != y} row_y[k], in [-1, 1].
    [[nodiscard]] double margin(std::size_t y) const;
    [[nodiscard]] std::vector<double> margins() const;
    [[nodiscard]] double mean_margin() const;

    /// Plain text: '#' header lines with temperature/momentum, then one
    /// whitespace-separated row of C probabilities per class.
    void save(const std::filesystem::path& path) const;
    static ClassStatsTable load(const std::filesystem::path& path);
    [[nodiscard]] std::string to_text() const;
    static ClassStatsTable from_text(const std::string& text);

private:
    ClassStatsTable(Matrix rows, double temperature, double momentum);

    Matrix rows_;
    std::vector<std::uint64_t> counts_;
    double temperature_ = 4.0;
    double momentum_ = 0.9;
};

}  // namespace dkl
