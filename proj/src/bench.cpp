#include "bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>

#include "error.hpp"
#include "losses.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace dkl {

namespace {

template <typename F>
double best_seconds(std::size_t repeats, F&& f) {
    double best = INFINITY;
    for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        const auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

}  // namespace

std::vector<WmseBenchRow> bench_wmse(const std::vector<std::size_t>& class_counts, std::size_t batch,
                                     std::size_t repeats, std::uint64_t seed, double tolerance) {
    require(batch >= 1, ErrorCode::InvalidArgument, "bench batch must be >= 1");
    require(repeats >= 1, ErrorCode::InvalidArgument, "bench repeats must be >= 1");
    std::vector<WmseBenchRow> rows;
    for (auto c : class_counts) {
        require(c >= 2, ErrorCode::InvalidArgument, "bench class count must be >= 2");
        Rng rng(seed, c);
        Matrix o_m(batch, c);
        Matrix o_n(batch, c);
        Matrix raw(batch, c);
        for (double& v : o_m.values()) v = rng.normal();
        for (double& v : o_n.values()) v = rng.normal();
        for (double& v : raw.values()) v = rng.normal();
        const Matrix scores = softmax_rows(raw);

        WmseBenchRow row;
        row.classes = c;
        row.batch = batch;
        LossOutput dense;
        LossOutput fast;
        row.dense_seconds = best_seconds(repeats, [&] {
            std::vector<Matrix> weights;
            weights.reserve(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                weights.push_back(outer_weight(scores.row(b)));
            }
            dense = wmse_dense(o_m, o_n, weights);
        });
        row.efficient_seconds = best_seconds(repeats, [&] { fast = wmse_efficient(o_m, o_n, scores); });
        row.dense_transient_doubles = batch * c * c + dense.transient_doubles;
        row.efficient_transient_doubles = fast.transient_doubles;
        row.value_diff = std::abs(dense.value - fast.value) / (1.0 + std::abs(dense.value));
        row.grad_diff = std::max(max_abs_diff(dense.grad_m, fast.grad_m), max_abs_diff(dense.grad_n, fast.grad_n));
        row.values_equal = row.value_diff <= tolerance && row.grad_diff <= tolerance;
        row.efficient_within_budget = row.efficient_transient_doubles <= 2 * batch * c;
        rows.push_back(row);
    }
    return rows;
}

std::string format_bench_table(const std::vector<WmseBenchRow>& rows) {
    std::string out = fmt::format("{:>6} {:>5} {:>12} {:>12} {:>14} {:>14} {:>11} {:>11} {:>6} {:>6}\n", "C", "B",
                                  "dense_s", "efficient_s", "dense_doubles", "effic_doubles", "value_diff",
                                  "grad_diff", "equal", "O(BC)");
    for (const auto& r : rows) {
        out += fmt::format("{:>6} {:>5} {:>12.6f} {:>12.6f} {:>14} {:>14} {:>11.3e} {:>11.3e} {:>6} {:>6}\n",
                           r.classes, r.batch, r.dense_seconds, r.efficient_seconds, r.dense_transient_doubles,
                           r.efficient_transient_doubles, r.value_diff, r.grad_diff, r.values_equal ? "yes" : "NO",
                           r.efficient_within_budget ? "yes" : "NO");
    }
    return out;
}

}  // namespace dkl
