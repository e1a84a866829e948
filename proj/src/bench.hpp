#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dkl {

/// Dense vs memory-efficient wMSE on one random batch of B x C logits.
struct WmseBenchRow {
    std::size_t classes = 0;
    std::size_t batch = 0;
    double dense_seconds = 0.0;      // best of `repeats`
    double efficient_seconds = 0.0;  // best of `repeats`
    /// Doubles the dense route allocates: per-sample weight matrices
    /// (B * C^2), pairwise difference scratch (2 * C^2) and gradients (2 * B * C).
    std::size_t dense_transient_doubles = 0;
    std::size_t efficient_transient_doubles = 0;
    double value_diff = 0.0;  // |dense - efficient| / (1 + |dense|)
    double grad_diff = 0.0;   // max abs gradient difference
    bool values_equal = false;
    bool efficient_within_budget = false;  // efficient_transient_doubles <= 2 * B * C
};

/// Rows are produced in the order of `class_counts`. Throws on invalid sizes.
std::vector<WmseBenchRow> bench_wmse(const std::vector<std::size_t>& class_counts, std::size_t batch,
                                     std::size_t repeats, std::uint64_t seed, double tolerance = 1e-10);

std::string format_bench_table(const std::vector<WmseBenchRow>& rows);

}  // namespace dkl
