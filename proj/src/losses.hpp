#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "class_stats.hpp"
#include "matrix.hpp"

namespace dkl {

enum class WeightSource { SampleWise, ClassWise };

/// Knobs of the decoupled loss family. alpha multiplies the wMSE kernel
/// (which already carries the 1/4), beta multiplies the soft-label
/// cross-entropy. alpha = beta = 1 with both flags off reproduces KL
/// gradients exactly.
struct LossConfig {
    double alpha = 1.0;
    double beta = 1.0;
    /// o_m is a constant (knowledge distillation teacher).
    bool detach_m = false;
    /// Let the wMSE term push gradient into o_n as well.
    bool break_asymmetry = false;
    WeightSource weight_source = WeightSource::SampleWise;

    void validate() const;
};

/// Which sides of a loss receive gradient. Detached sides get zero-filled
/// gradient matrices of the right shape.
struct GradFlow {
    bool to_m = true;
    bool to_n = true;
};

/// Batch-mean loss value with gradients wrt both logit batches.
struct LossOutput {
    double value = 0.0;
    Matrix grad_m;
    Matrix grad_n;
    /// Component values (batch means, before alpha/beta) when the loss has them.
    double wmse = 0.0;
    double ce = 0.0;
    /// ||alpha * wMSE gradient on o_n||_inf (dkl_family only).
    double wmse_grad_n_max = 0.0;
    /// Doubles allocated by the kernel beyond its inputs, gradients included.
    std::size_t transient_doubles = 0;
};

/// mean_b sum_j s_m^j (log s_m^j - log s_n^j).
double kl_forward(const Matrix& o_m, const Matrix& o_n);

/// KL value plus gradients: grad_n = s_n - s_m and the pairwise form
/// grad_m[j] = sum_k (dm_jk - dn_jk) s_m^j s_m^k, both divided by the batch size.
LossOutput kl_backward(const Matrix& o_m, const Matrix& o_n);

/// mean_b (1/4) sum_{j,k} W_b[j][k] ((o_m^j - o_m^k) - (o_n^j - o_n^k))^2 with one
/// C x C weight matrix per sample. Materializes the pairwise differences.
LossOutput wmse_dense(const Matrix& o_m, const Matrix& o_n, std::span<const Matrix> weights, GradFlow flow = {});

/// Same quantity for W_b = outer(c_b, c_b) in O(C) memory per sample, using
/// sum_k c_k = 1: (1/4) sum_{jk} c_j c_k (d_j - d_k)^2 = (1/2) sum_j c_j (d_j - S)^2
/// with d = o_m - o_n and S = sum_j c_j d_j.
LossOutput wmse_efficient(const Matrix& o_m, const Matrix& o_n, const Matrix& class_scores, GradFlow flow = {});

/// mean_b -sum_j t_j log s_n^j. Only grad_n is populated (grad_m is zero).
LossOutput soft_ce(const Matrix& o_n, const Matrix& targets);

/// alpha * wMSE + beta * CE(S(s_m), s_n).
///
/// The wMSE weights come from s_m per sample, or from stats->row(label) for
/// WeightSource::ClassWise. The CE target is always a constant. wMSE sends
/// gradient to o_m unless detach_m and to o_n only with break_asymmetry.
LossOutput dkl_family(const Matrix& o_m, const Matrix& o_n, std::span<const std::int32_t> labels,
                      const LossConfig& cfg, const ClassStatsTable* stats = nullptr);

/// Jensen-Shannon divergence 1/2 KL(s_m || M) + 1/2 KL(s_n || M), M = (s_m + s_n) / 2,
/// with gradients wrt both sides.
LossOutput jsd_forward_backward(const Matrix& o_m, const Matrix& o_n);

}  // namespace dkl
