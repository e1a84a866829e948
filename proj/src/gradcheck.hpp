#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "losses.hpp"
#include "matrix.hpp"

namespace dkl {

enum class Side { M, N };

/// Discrepancy summary for one certification run. `passed` is exactly
/// `max_abs_diff <= tolerance`; for finite-difference sweeps the diff is the
/// relative error ||analytic - numeric||_inf / max(||numeric||_inf, 1e-3).
struct GradReport {
    struct Row {
        std::size_t classes = 0;
        std::size_t trials = 0;
        double max_abs_diff = 0.0;
        double mean_abs_diff = 0.0;
    };

    std::string name;
    std::size_t trials = 0;
    std::vector<std::size_t> class_counts;
    std::vector<Row> rows;
    double max_abs_diff = 0.0;
    double mean_abs_diff = 0.0;
    double tolerance = 0.0;
    std::string worst_case;
    std::string note;
    bool passed = false;

    /// key=value lines, prefixed with `name.`.
    [[nodiscard]] std::string to_text() const;
};

using LossEvaluator = std::function<double(const Matrix& o_m, const Matrix& o_n)>;

/// Central differences (f(x+h) - f(x-h)) / 2h over every logit on one side.
/// Throws Numeric if the evaluator returns a non-finite value.
Matrix finite_diff(const LossEvaluator& loss, const Matrix& o_m, const Matrix& o_n, Side side, double h = 1e-5);

/// KL analytic gradients vs dkl_family(`dkl_cfg`) gradients on random batches.
/// The default config (alpha = beta = 1, sample-wise, full flow) is the exact
/// equivalence; other configs exist to show the check can fail.
GradReport check_kl_equivalence(std::size_t trials, const std::vector<std::size_t>& class_counts, std::uint64_t seed,
                          double tolerance, const LossConfig& dkl_cfg = {});

/// Detached-teacher mechanics of the wMSE term:
///  (a) without break_asymmetry grad_n is exactly the beta * CE gradient;
///  (b) with it, grad_n moves by alpha * sum_k w[j][k] (dn_jk - dm_jk) (pairwise route);
///  (c) two-sided wMSE gradients satisfy grad_m = -grad_n.
GradReport check_asymmetry(std::size_t trials, std::uint64_t seed, double tolerance = 1e-10,
                           const std::vector<std::size_t>& class_counts = {2, 5, 10, 100});

/// Names accepted by check_gradients.
const std::vector<std::string>& gradient_check_names();

/// Analytic gradient of the named loss vs central differences of its
/// stop-gradient surrogate objective. `saturated` draws logits at scale 5,
/// otherwise at scales 0.1 and 1.
GradReport check_gradients(const std::string& loss_name, std::size_t trials,
                           const std::vector<std::size_t>& class_counts, std::uint64_t seed, bool saturated,
                           double tolerance, double h = 1e-5);

/// err(h) / err(h / 2) of central differences against an analytic gradient;
/// about 4 when truncation error dominates.
double richardson_ratio(const LossEvaluator& loss, const Matrix& analytic, const Matrix& o_m, const Matrix& o_n,
                        Side side, double h);

/// Dense vs memory-efficient wMSE (values and both gradients) on random batches.
GradReport check_wmse_identity(std::size_t trials, const std::vector<std::size_t>& class_counts, std::uint64_t seed,
                               double tolerance = 1e-10);

/// JSD grad_n through a virtual logit vector log(M) with softmax = M:
/// (1/2) sum_j s_n^i s_n^j ((o_n^i - o_n^j) - (o'^i - o'^j)), divided by the batch size.
Matrix jsd_grad_n_virtual_logits(const Matrix& o_m, const Matrix& o_n);

}  // namespace dkl
