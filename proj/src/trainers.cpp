#include "trainers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <json.hpp>

#include "error.hpp"
#include "numerics.hpp"

namespace dkl {

namespace {

constexpr std::size_t kEvalChunk = 256;

// Independent RNG streams, so e.g. attack randomness never shifts the
// batch order.
enum Stream : std::uint64_t { kShuffle = 1, kAttack = 2, kEvalAttack = 3, kModelInit = 4 };

enum class Mode { Baseline, Distill, Adversarial };

Matrix one_hot(std::span<const std::int32_t> labels, std::size_t num_classes) {
    Matrix out(labels.size(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        out(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return out;
}

std::size_t argmax(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto src = m.row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

void scale_in_place(Matrix& m, double s) {
    for (double& v : m.values()) {
        v *= s;
    }
}

// o / T; identity for T = 1 so the KL/DKL paths stay bitwise comparable.
Matrix divide(const Matrix& m, double t) {
    Matrix out = m;
    if (t != 1.0) {
        for (double& v : out.values()) {
            v /= t;
        }
    }
    return out;
}

double accuracy(const Matrix& logits, std::span<const std::int32_t> labels) {
    if (labels.empty()) {
        return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        hits += argmax(logits.row(i)) == static_cast<std::size_t>(labels[i]);
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

// The divergence term between o_m and o_n for the configured loss kind.
LossOutput divergence(const TrainConfig& cfg, Mode mode, const Matrix& o_m, const Matrix& o_n,
                      std::span<const std::int32_t> labels, const ClassStatsTable& stats) {
    switch (cfg.loss) {
        case LossKind::CrossEntropy: {
            LossOutput out;
            out.grad_m = Matrix(o_m.rows(), o_m.cols());
            out.grad_n = Matrix(o_m.rows(), o_m.cols());
            return out;
        }
        case LossKind::KL:
            return kl_backward(o_m, o_n);
        case LossKind::JSD:
            return jsd_forward_backward(o_m, o_n);
        case LossKind::DKL: {
            LossConfig lc = cfg.loss_cfg;
            if (mode == Mode::Distill) {
                lc.detach_m = true;
            }
            return dkl_family(o_m, o_n, labels, lc, &stats);
        }
        case LossKind::IKL: {
            LossConfig lc = cfg.loss_cfg;
            lc.break_asymmetry = true;
            lc.weight_source = WeightSource::ClassWise;
            lc.detach_m = mode == Mode::Distill;
            return dkl_family(o_m, o_n, labels, lc, &stats);
        }
    }
    fail(ErrorCode::InvalidArgument, "unknown loss kind");
}

void check_finite(double v, std::size_t epoch, std::size_t step) {
    require(std::isfinite(v), ErrorCode::Diverged,
            "training diverged: non-finite value at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
}

struct Loop {
    const TrainConfig& cfg;
    Mode mode;
    const Dataset& train;
    const Dataset& test;
    const Matrix* teacher = nullptr;
    const MetricsSink& sink;

    TrainResult run() {
        cfg.validate();
        train.validate();
        test.validate();
        require(test.num_classes == train.num_classes && test.dim() == train.dim(), ErrorCode::ShapeMismatch,
                "train and test sets disagree on classes or feature dim");
        const std::size_t c = train.num_classes;
        if (teacher) {
            require(teacher->rows() == train.size() && teacher->cols() == c, ErrorCode::ShapeMismatch,
                    "teacher logits are " + std::to_string(teacher->rows()) + "x" + std::to_string(teacher->cols()) +
                        " but the training set is " + std::to_string(train.size()) + "x" + std::to_string(c));
        }

        std::vector<std::size_t> dims{train.dim()};
        dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
        dims.push_back(c);

        TrainResult result{MlpParams::init(dims, Rng::splitmix64(cfg.seed ^ kModelInit)), {},
                           ClassStatsTable::uniform(c, cfg.stats_temperature, cfg.stats_momentum)};
        if (mode == Mode::Distill) {
            // The teacher is fixed, so its class means are exact from the start.
            result.stats = ClassStatsTable::exact_recompute(*teacher, train.labels, cfg.stats_temperature,
                                                            cfg.stats_momentum);
        }
        MlpParams& params = result.params;
        SgdState sgd;
        Rng shuffle_rng(cfg.seed, kShuffle);
        Rng attack_rng(cfg.seed, kAttack);

        const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
        const std::size_t total_steps = batches * cfg.epochs;
        const std::size_t warmup_steps = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(cfg.eps_warmup_fraction * static_cast<double>(total_steps))));

        std::vector<std::size_t> order(train.size());
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            for (std::size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            shuffle(order, shuffle_rng);

            EpochMetrics m;
            m.epoch = epoch + 1;
            double seen = 0.0;
            for (std::size_t b = 0; b < batches; ++b, ++step) {
                const std::size_t lo = b * cfg.batch_size;
                const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
                const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
                const Matrix x = gather_rows(train.features, idx);
                std::vector<std::int32_t> y(idx.size());
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    y[i] = train.labels[idx[i]];
                }
                const double lr = cosine_lr(step, total_steps, cfg.lr);
                const double epsilon =
                    mode == Mode::Adversarial
                        ? cfg.attack.epsilon * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps))
                        : 0.0;
                m.lr = lr;
                m.epsilon = epsilon;

                ForwardCache nat_cache;
                const Matrix logits = forward(params, x, &nat_cache);
                for (double v : logits.values()) {
                    check_finite(v, epoch + 1, step);
                }
                const LossOutput ce = soft_ce(logits, one_hot(y, c));
                MlpGrads grads;
                double total = 0.0;
                LossOutput div;

                switch (mode) {
                    case Mode::Baseline: {
                        total = ce.value;
                        grads = backward(params, nat_cache, ce.grad_n);
                        break;
                    }
                    case Mode::Distill: {
                        const double t = cfg.kd_temperature;
                        const Matrix o_m = divide(gather_rows(*teacher, idx), t);
                        const Matrix o_n = divide(logits, t);
                        div = divergence(cfg, mode, o_m, o_n, y, result.stats);
                        // d(T^2 L(o / T)) / do = T * dL.
                        Matrix g = ce.grad_n;
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            g.values()[i] = cfg.hard_label_weight * g.values()[i] + t * div.grad_n.values()[i];
                        }
                        div.value *= t * t;
                        div.wmse *= t * t;
                        div.ce *= t * t;
                        total = cfg.hard_label_weight * ce.value + div.value;
                        grads = backward(params, nat_cache, g);
                        break;
                    }
                    case Mode::Adversarial: {
                        AttackConfig atk = cfg.attack;
                        atk.epsilon = epsilon;
                        const Matrix x_adv = pgd_attack(params, x, y, &logits, atk, AttackObjective::KL, attack_rng);
                        ForwardCache adv_cache;
                        const Matrix adv_logits = forward(params, x_adv, &adv_cache);
                        div = divergence(cfg, mode, logits, adv_logits, y, result.stats);
                        const double lambda = cfg.trades_lambda;
                        Matrix g_nat = ce.grad_n;
                        Matrix g_adv = div.grad_n;
                        for (std::size_t i = 0; i < g_nat.size(); ++i) {
                            g_nat.values()[i] += lambda * div.grad_m.values()[i];
                        }
                        scale_in_place(g_adv, lambda);
                        div.value *= lambda;
                        div.wmse *= lambda;
                        div.ce *= lambda;
                        total = ce.value + div.value;
                        grads = backward(params, nat_cache, g_nat);
                        accumulate(grads, backward(params, adv_cache, g_adv));
                        break;
                    }
                }
                check_finite(total, epoch + 1, step);

                const double weight = static_cast<double>(idx.size());
                seen += weight;
                m.loss_total += weight * total;
                m.loss_ce += weight * ce.value;
                m.loss_divergence += weight * div.value;
                m.loss_wmse += weight * div.wmse;
                m.loss_soft_ce += weight * div.ce;
                ++result.steps;
                if (div.wmse_grad_n_max > 0.0) {
                    ++result.wmse_student_grad_steps;
                }

                if (lr > 0.0) {
                    sgd_step(params, grads, sgd, lr, cfg.momentum, cfg.weight_decay);
                }
                if (mode == Mode::Adversarial) {
                    result.stats.update_batch(logits, y);
                }
            }
            for (double* v : {&m.loss_total, &m.loss_ce, &m.loss_divergence, &m.loss_wmse, &m.loss_soft_ce}) {
                *v /= seen;
            }

            const Matrix train_logits = predict_logits(params, train.features);
            m.train_acc = accuracy(train_logits, train.labels);
            if (teacher) {
                std::size_t agree = 0;
                for (std::size_t i = 0; i < train.size(); ++i) {
                    agree += argmax(train_logits.row(i)) == argmax(teacher->row(i));
                }
                m.agreement = static_cast<double>(agree) / static_cast<double>(train.size());
            }
            const bool robust = cfg.eval_robust && mode == Mode::Adversarial;
            const EvalMetrics ev = evaluate(params, test, robust ? &cfg.attack : nullptr, cfg.seed);
            m.clean_acc = ev.clean_acc;
            m.robust_acc = ev.robust_acc;
            if (mode == Mode::Adversarial) {
                m.margins = result.stats.margins();
                m.mean_margin = result.stats.mean_margin();
            } else {
                const auto table = ClassStatsTable::exact_recompute(train_logits, train.labels, cfg.stats_temperature);
                m.margins = table.margins();
                m.mean_margin = table.mean_margin();
            }
            result.metrics.push_back(m);
            if (sink) {
                sink(m);
            }
        }
        if (mode == Mode::Baseline) {
            result.stats = ClassStatsTable::exact_recompute(predict_logits(params, train.features), train.labels,
                                                            cfg.stats_temperature, cfg.stats_momentum);
        }
        return result;
    }
};

}  // namespace

void AttackConfig::validate() const {
    require(std::isfinite(epsilon) && epsilon >= 0.0, ErrorCode::InvalidArgument, "attack epsilon must be >= 0");
    require(std::isfinite(step_size) && step_size > 0.0, ErrorCode::InvalidArgument, "attack step size must be > 0");
    require(iterations >= 1, ErrorCode::InvalidArgument, "attack needs at least one iteration");
}

AttackConfig AttackConfig::image_preset() {
    return {.epsilon = 8.0 / 255.0, .step_size = 2.0 / 255.0, .iterations = 10, .random_start = true};
}

LossKind parse_loss_kind(const std::string& name) {
    if (name == "ce") return LossKind::CrossEntropy;
    if (name == "kl") return LossKind::KL;
    if (name == "dkl") return LossKind::DKL;
    if (name == "ikl") return LossKind::IKL;
    if (name == "jsd") return LossKind::JSD;
    fail(ErrorCode::InvalidArgument, "unknown loss '" + name + "' (expected ce, kl, dkl, ikl or jsd)");
}

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::CrossEntropy: return "ce";
        case LossKind::KL: return "kl";
        case LossKind::DKL: return "dkl";
        case LossKind::IKL: return "ikl";
        case LossKind::JSD: return "jsd";
    }
    return "?";
}

void TrainConfig::validate() const {
    loss_cfg.validate();
    attack.validate();
    require(epochs >= 1, ErrorCode::InvalidArgument, "epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::InvalidArgument, "batch size must be >= 1");
    require(std::isfinite(lr) && lr >= 0.0, ErrorCode::InvalidArgument, "learning rate must be >= 0");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::InvalidArgument, "momentum must be in [0, 1)");
    require(std::isfinite(weight_decay) && weight_decay >= 0.0, ErrorCode::InvalidArgument, "weight decay must be >= 0");
    require(std::isfinite(kd_temperature) && kd_temperature > 0.0, ErrorCode::InvalidArgument,
            "kd temperature must be > 0");
    require(std::isfinite(hard_label_weight) && hard_label_weight >= 0.0, ErrorCode::InvalidArgument,
            "hard-label weight must be >= 0");
    require(std::isfinite(trades_lambda) && trades_lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be >= 0");
    require(eps_warmup_fraction >= 0.0 && eps_warmup_fraction <= 1.0, ErrorCode::InvalidArgument,
            "epsilon warm-up fraction must be in [0, 1]");
    for (auto h : hidden) {
        require(h >= 1, ErrorCode::InvalidArgument, "hidden widths must be >= 1");
    }
    require(std::isfinite(stats_temperature) && stats_temperature > 0.0, ErrorCode::InvalidArgument,
            "stats temperature must be > 0");
    require(stats_momentum >= 0.0 && stats_momentum < 1.0, ErrorCode::InvalidArgument,
            "stats momentum must be in [0, 1)");
}

std::string EpochMetrics::to_json_line() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["epsilon"] = epsilon;
    j["loss_total"] = loss_total;
    j["loss_ce"] = loss_ce;
    j["loss_wmse"] = loss_wmse;
    j["loss_soft_ce"] = loss_soft_ce;
    j["loss_divergence"] = loss_divergence;
    j["train_acc"] = train_acc;
    j["clean_acc"] = clean_acc;
    j["robust_acc"] = robust_acc ? nlohmann::ordered_json(*robust_acc) : nlohmann::ordered_json(nullptr);
    j["agreement"] = agreement ? nlohmann::ordered_json(*agreement) : nlohmann::ordered_json(nullptr);
    j["mean_margin"] = mean_margin;
    j["margins"] = margins;
    return j.dump();
}

Matrix predict_logits(const MlpParams& params, const Matrix& features) {
    Matrix out(features.rows(), params.num_classes());
    for (std::size_t lo = 0; lo < features.rows(); lo += kEvalChunk) {
        const std::size_t hi = std::min(features.rows(), lo + kEvalChunk);
        Matrix chunk(hi - lo, features.cols());
        std::copy(features.row(lo).begin(), features.row(lo).begin() + static_cast<std::ptrdiff_t>((hi - lo) * features.cols()),
                  chunk.values().begin());
        const Matrix logits = forward(params, chunk);
        std::copy(logits.values().begin(), logits.values().end(), out.row(lo).begin());
    }
    return out;
}

Matrix pgd_attack(const MlpParams& params, const Matrix& batch, std::span<const std::int32_t> labels,
                  const Matrix* reference_logits, const AttackConfig& atk, AttackObjective objective, Rng& rng) {
    atk.validate();
    const std::size_t c = params.num_classes();
    Matrix targets;
    if (objective == AttackObjective::CrossEntropy) {
        require(labels.size() == batch.rows(), ErrorCode::ShapeMismatch, "CE attack needs one label per sample");
        targets = one_hot(labels, c);
    } else {
        require(reference_logits && reference_logits->rows() == batch.rows() && reference_logits->cols() == c,
                ErrorCode::ShapeMismatch, "KL attack needs reference logits for every sample");
        targets = softmax_rows(*reference_logits);
    }
    for (double v : batch.values()) {
        require(v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument, "attack input outside [0, 1]");
    }
    const double eps = atk.epsilon;
    Matrix lower(batch.rows(), batch.cols());
    Matrix upper(batch.rows(), batch.cols());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        lower.values()[i] = std::max(batch.values()[i] - eps, 0.0);
        upper.values()[i] = std::min(batch.values()[i] + eps, 1.0);
    }
    auto project = [&](Matrix& x) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.values()[i] = std::clamp(x.values()[i], lower.values()[i], upper.values()[i]);
        }
    };

    Matrix x = batch;
    if (eps == 0.0) {
        return x;
    }
    if (atk.random_start) {
        for (double& v : x.values()) {
            v += rng.uniform(-eps, eps);
        }
        project(x);
    }
    for (std::size_t it = 0; it < atk.iterations; ++it) {
        ForwardCache cache;
        const Matrix logits = forward(params, x, &cache);
        // Both objectives have logit gradient softmax(logits) - target
        // (up to the positive batch factor, which sign() ignores).
        Matrix g = softmax_rows(logits);
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.values()[i] -= targets.values()[i];
        }
        const MlpGrads grads = backward(params, cache, g);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = grads.input.values()[i];
            require(std::isfinite(d), ErrorCode::Numeric, "non-finite input gradient in PGD");
            x.values()[i] += atk.step_size * static_cast<double>((d > 0.0) - (d < 0.0));
        }
        project(x);
    }
    return x;
}

EvalMetrics evaluate(const MlpParams& params, const Dataset& data, const AttackConfig* atk, std::uint64_t seed) {
    require(data.dim() == params.input_dim() && data.num_classes == params.num_classes(), ErrorCode::ShapeMismatch,
            "dataset does not match the model's input or class count");
    EvalMetrics out;
    const Matrix logits = predict_logits(params, data.features);
    out.clean_acc = accuracy(logits, data.labels);
    if (atk) {
        Rng rng(seed, kEvalAttack);
        std::size_t hits = 0;
        for (std::size_t lo = 0; lo < data.size(); lo += kEvalChunk) {
            const std::size_t hi = std::min(data.size(), lo + kEvalChunk);
            std::vector<std::size_t> idx(hi - lo);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                idx[i] = lo + i;
            }
            const Matrix x = gather_rows(data.features, idx);
            const std::span<const std::int32_t> y(data.labels.data() + lo, hi - lo);
            const Matrix adv = forward(params, pgd_attack(params, x, y, nullptr, *atk, AttackObjective::CrossEntropy, rng));
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const auto label = static_cast<std::size_t>(y[i]);
                hits += argmax(adv.row(i)) == label && argmax(logits.row(lo + i)) == label;
            }
        }
        out.robust_acc = static_cast<double>(hits) / static_cast<double>(data.size());
    }
    const auto table = ClassStatsTable::exact_recompute(logits, data.labels, 1.0);
    out.margins = table.margins();
    out.mean_margin = table.mean_margin();
    return out;
}

TrainResult train_baseline(const TrainConfig& cfg, const Dataset& train, const Dataset& test, const MetricsSink& sink) {
    TrainConfig ce = cfg;
    ce.loss = LossKind::CrossEntropy;
    return Loop{ce, Mode::Baseline, train, test, nullptr, sink}.run();
}

TrainResult train_distill(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                          const Matrix& teacher_logits, const MetricsSink& sink) {
    return Loop{cfg, Mode::Distill, train, test, &teacher_logits, sink}.run();
}

TrainResult train_adversarial(const TrainConfig& cfg, const Dataset& train, const Dataset& test,
                              const MetricsSink& sink) {
    return Loop{cfg, Mode::Adversarial, train, test, nullptr, sink}.run();
}

}  // namespace dkl
