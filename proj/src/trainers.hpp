#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "class_stats.hpp"
#include "data.hpp"
#include "losses.hpp"
#include "matrix.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace dkl {

/// L-infinity PGD on [0, 1]-scaled features.
struct AttackConfig {
    double epsilon = 0.1;
    double step_size = 0.025;
    std::size_t iterations = 10;
    bool random_start = true;

    void validate() const;
    /// 8/255 radius, 2/255 step, 10 iterations: the usual image-data setting.
    static AttackConfig image_preset();
};

enum class AttackObjective { CrossEntropy, KL };

enum class LossKind { CrossEntropy, KL, DKL, IKL, JSD };

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

struct TrainConfig {
    std::vector<std::size_t> hidden{64};
    LossKind loss = LossKind::KL;
    /// alpha/beta and flags for DKL. IKL takes alpha/beta from here and forces
    /// class-wise weights with break_asymmetry; distillation always detaches o_m.
    LossConfig loss_cfg{};
    AttackConfig attack{};
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;
    double stats_temperature = 4.0;
    double stats_momentum = 0.9;
    /// Distillation only: both logit sets are divided by this before the
    /// divergence, whose value is then scaled by T^2.
    double kd_temperature = 4.0;
    /// Distillation only: weight of the hard-label cross-entropy.
    double hard_label_weight = 1.0;
    /// Adversarial only: weight of the clean-vs-adversarial divergence.
    double trades_lambda = 6.0;
    /// Adversarial only: epsilon ramps linearly over this fraction of all steps.
    double eps_warmup_fraction = 0.4;
    /// Evaluate PGD robustness on the test set after every epoch.
    bool eval_robust = true;

    void validate() const;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double epsilon = 0.0;
    double loss_total = 0.0;
    double loss_ce = 0.0;          // hard-label cross-entropy
    double loss_wmse = 0.0;        // wMSE component (DKL family)
    double loss_soft_ce = 0.0;     // soft-label cross-entropy component (DKL family)
    double loss_divergence = 0.0;  // the whole divergence term
    double train_acc = 0.0;
    double clean_acc = 0.0;
    std::optional<double> robust_acc;
    std::optional<double> agreement;  // student vs teacher argmax on the train set
    double mean_margin = 0.0;
    std::vector<double> margins;

    /// One JSON object, fixed key order, no trailing newline.
    [[nodiscard]] std::string to_json_line() const;
};

struct TrainResult {
    MlpParams params;
    std::vector<EpochMetrics> metrics;
    ClassStatsTable stats = ClassStatsTable::uniform(2);
    /// Optimizer steps taken, and steps in which the wMSE term sent a nonzero
    /// gradient into the student / adversarial logits.
    std::size_t steps = 0;
    std::size_t wmse_student_grad_steps = 0;
};

using MetricsSink = std::function<void(const EpochMetrics&)>;

struct EvalMetrics {
    double clean_acc = 0.0;
    std::optional<double> robust_acc;
    std::vector<double> margins;
    double mean_margin = 0.0;
};

/// Iterated signed-gradient ascent, x <- clip(x + step * sign(grad), x0 +- eps, [0, 1]).
/// CE ascends cross-entropy against `labels`; KL ascends KL(reference || f(x)).
Matrix pgd_attack(const MlpParams& params, const Matrix& batch, std::span<const std::int32_t> labels,
                  const Matrix* reference_logits, const AttackConfig& atk, AttackObjective objective, Rng& rng);

/// Clean accuracy and, with an attack, robust accuracy under CE-objective PGD.
/// A sample counts as robust only if both the clean and the attacked input
/// are classified correctly. Margins come from the exact per-class mean of
/// softmax(logits) (temperature 1) over `data`.
EvalMetrics evaluate(const MlpParams& params, const Dataset& data, const AttackConfig* atk, std::uint64_t seed);

TrainResult train_baseline(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                           const MetricsSink& sink = {});

/// `teacher_logits` holds one row per training sample.
TrainResult train_distill(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                          const Matrix& teacher_logits, const MetricsSink& sink = {});

TrainResult train_adversarial(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                              const MetricsSink& sink = {});

/// Forward over a whole dataset in fixed-size chunks.
Matrix predict_logits(const MlpParams& params, const Matrix& features);

}  // namespace dkl
