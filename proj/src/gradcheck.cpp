#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "error.hpp"
#include "numerics.hpp"
#include "rng.hpp"

namespace dkl {

namespace {

constexpr std::size_t kBatch = 4;
constexpr double kScales[] = {0.1, 1.0, 5.0};

Matrix draw(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    Matrix m(rows, cols);
    for (double& v : m.values()) {
        v = scale * rng.normal();
    }
    return m;
}

std::string serialize(const Matrix& m) {
    std::string out = "[";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        out += r ? ",[" : "[";
        out += fmt::format("{}", fmt::join(m.row(r), ","));
        out += "]";
    }
    return out + "]";
}

double rel_err(const Matrix& analytic, const Matrix& numeric) {
    return max_abs_diff(analytic, numeric) / std::max(1e-3, max_abs(numeric));
}

// Accumulates per-C rows and the global summary.
class ReportBuilder {
public:
    ReportBuilder(std::string name, const std::vector<std::size_t>& class_counts, double tolerance) {
        report_.name = std::move(name);
        report_.class_counts = class_counts;
        report_.tolerance = tolerance;
        for (auto c : class_counts) {
            report_.rows.push_back({.classes = c});
        }
    }

    void add(std::size_t row, double diff, const std::function<std::string()>& describe) {
        auto& r = report_.rows[row];
        ++r.trials;
        r.max_abs_diff = std::max(r.max_abs_diff, diff);
        r.mean_abs_diff += diff;
        ++report_.trials;
        total_ += diff;
        if (diff > report_.max_abs_diff || std::isnan(diff)) {
            report_.max_abs_diff = diff;
            if (!(diff <= report_.tolerance)) {
                report_.worst_case = describe();
            }
        }
    }

    GradReport finish(std::string note = {}) {
        for (auto& r : report_.rows) {
            if (r.trials) {
                r.mean_abs_diff /= static_cast<double>(r.trials);
            }
        }
        report_.mean_abs_diff = report_.trials ? total_ / static_cast<double>(report_.trials) : 0.0;
        report_.passed = report_.max_abs_diff <= report_.tolerance;
        report_.note = std::move(note);
        return report_;
    }

private:
    GradReport report_;
    double total_ = 0.0;
};

Matrix pairwise_student_term(const Matrix& o_m, const Matrix& o_n, const Matrix& scores, double alpha) {
    Matrix out(o_m.rows(), o_m.cols());
    const double scale = 1.0 / static_cast<double>(o_m.rows());
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const Matrix w = outer_weight(scores.row(b));
        const Matrix dm = pairwise_diff(o_m.row(b));
        const Matrix dn = pairwise_diff(o_n.row(b));
        for (std::size_t j = 0; j < o_m.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < o_m.cols(); ++k) {
                acc += w(j, k) * (dn(j, k) - dm(j, k));
            }
            out(b, j) = alpha * acc * scale;
        }
    }
    return out;
}

std::vector<Matrix> outer_weights(const Matrix& scores) {
    std::vector<Matrix> out;
    out.reserve(scores.rows());
    for (std::size_t b = 0; b < scores.rows(); ++b) {
        out.push_back(outer_weight(scores.row(b)));
    }
    return out;
}

Matrix uniform_random_probs(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (double& v : m.row(r)) {
            v = 0.05 + rng.uniform();
            total += v;
        }
        for (double& v : m.row(r)) {
            v /= total;
        }
    }
    return m;
}

// One gradient-checkable case: the analytic output and, per side, the
// surrogate objective whose plain derivative the analytic gradient claims
// to be (stop-gradient inputs frozen at their current values).
struct Case {
    LossOutput analytic;
    LossEvaluator objective_m;  // empty: grad_m must be exactly zero
    LossEvaluator objective_n;
};

Case make_case(const std::string& name, const Matrix& o_m, const Matrix& o_n, Rng& rng) {
    constexpr double alpha = 2.0;
    constexpr double beta = 3.0;
    const std::size_t c = o_m.cols();
    const Matrix s_m = softmax_rows(o_m);
    auto ce_n = [s_m](double scale) {
        return [s_m, scale](const Matrix&, const Matrix& x) { return scale * soft_ce(x, s_m).value; };
    };
    auto wmse_objective = [](std::vector<Matrix> w, double scale) {
        return [w = std::move(w), scale](const Matrix& a, const Matrix& b) { return scale * wmse_dense(a, b, w).value; };
    };
    auto sum = [](LossEvaluator f, LossEvaluator g) {
        return [f, g](const Matrix& a, const Matrix& b) { return f(a, b) + g(a, b); };
    };
    auto value_of = [](std::function<LossOutput(const Matrix&, const Matrix&)> f) {
        return [f](const Matrix& a, const Matrix& b) { return f(a, b).value; };
    };

    if (name == "kl") {
        LossEvaluator f = [](const Matrix& a, const Matrix& b) { return kl_forward(a, b); };
        return {kl_backward(o_m, o_n), f, f};
    }
    if (name == "jsd") {
        LossEvaluator f = value_of(jsd_forward_backward);
        return {jsd_forward_backward(o_m, o_n), f, f};
    }
    if (name == "soft_ce") {
        const Matrix targets = uniform_random_probs(rng, o_m.rows(), c);
        LossEvaluator f = [targets](const Matrix&, const Matrix& x) { return soft_ce(x, targets).value; };
        return {soft_ce(o_n, targets), {}, f};
    }
    if (name == "wmse_dense" || name == "wmse_efficient") {
        const Matrix scores = uniform_random_probs(rng, o_m.rows(), c);
        auto w = outer_weights(scores);
        LossOutput out = name == "wmse_dense" ? wmse_dense(o_m, o_n, w) : wmse_efficient(o_m, o_n, scores);
        LossEvaluator f = wmse_objective(std::move(w), 1.0);
        return {std::move(out), f, f};
    }
    if (name == "dkl") {
        LossConfig cfg{.alpha = alpha, .beta = beta};
        return {dkl_family(o_m, o_n, {}, cfg), wmse_objective(outer_weights(s_m), alpha), ce_n(beta)};
    }
    if (name == "dkl_kd") {
        LossConfig cfg{.alpha = alpha, .beta = beta, .detach_m = true};
        return {dkl_family(o_m, o_n, {}, cfg), {}, ce_n(beta)};
    }
    if (name == "ikl_kd") {
        LossConfig cfg{.alpha = alpha, .beta = beta, .detach_m = true, .break_asymmetry = true};
        return {dkl_family(o_m, o_n, {}, cfg), {}, sum(wmse_objective(outer_weights(s_m), alpha), ce_n(beta))};
    }
    if (name == "ikl") {
        // Class-wise weights from a random stats table.
        std::vector<std::int32_t> labels(o_m.rows());
        for (auto& y : labels) {
            y = static_cast<std::int32_t>(rng.below(c));
        }
        const Matrix pool = draw(rng, 2 * c, c, 1.0);
        std::vector<std::int32_t> pool_labels(2 * c);
        for (std::size_t i = 0; i < pool_labels.size(); ++i) {
            pool_labels[i] = static_cast<std::int32_t>(i % c);
        }
        const auto stats = ClassStatsTable::exact_recompute(pool, pool_labels, 4.0);
        Matrix scores(o_m.rows(), c);
        for (std::size_t b = 0; b < o_m.rows(); ++b) {
            const auto r = stats.row(static_cast<std::size_t>(labels[b]));
            std::copy(r.begin(), r.end(), scores.row(b).begin());
        }
        LossConfig cfg{.alpha = alpha, .beta = beta, .break_asymmetry = true, .weight_source = WeightSource::ClassWise};
        auto w = outer_weights(scores);
        return {dkl_family(o_m, o_n, labels, cfg, &stats), wmse_objective(w, alpha),
                sum(wmse_objective(w, alpha), ce_n(beta))};
    }
    fail(ErrorCode::InvalidArgument, "unknown gradient check '" + name + "'");
}

}  // namespace

std::string GradReport::to_text() const {
    std::string out;
    auto line = [&](std::string_view key, const auto& value) { out += fmt::format("{}.{}={}\n", name, key, value); };
    line("passed", passed ? "true" : "false");
    line("tolerance", fmt::format("{:.3e}", tolerance));
    line("trials", trials);
    line("classes", fmt::format("{}", fmt::join(class_counts, ",")));
    line("max_abs_diff", fmt::format("{:.6e}", max_abs_diff));
    line("mean_abs_diff", fmt::format("{:.6e}", mean_abs_diff));
    for (const auto& r : rows) {
        out += fmt::format("{}.C{}.trials={}\n", name, r.classes, r.trials);
        out += fmt::format("{}.C{}.max_abs_diff={:.6e}\n", name, r.classes, r.max_abs_diff);
        out += fmt::format("{}.C{}.mean_abs_diff={:.6e}\n", name, r.classes, r.mean_abs_diff);
    }
    if (!note.empty()) {
        line("note", note);
    }
    if (!worst_case.empty()) {
        line("worst_case", worst_case);
    }
    return out;
}

Matrix finite_diff(const LossEvaluator& loss, const Matrix& o_m, const Matrix& o_n, Side side, double h) {
    require(h > 0.0 && std::isfinite(h), ErrorCode::InvalidArgument, "finite-difference step must be positive");
    Matrix a = o_m;
    Matrix b = o_n;
    Matrix& x = side == Side::M ? a : b;
    Matrix grad(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x.values()[i];
        x.values()[i] = saved + h;
        const double up = loss(a, b);
        x.values()[i] = saved - h;
        const double down = loss(a, b);
        x.values()[i] = saved;
        require(std::isfinite(up) && std::isfinite(down), ErrorCode::Numeric, "loss is not finite under perturbation");
        grad.values()[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

double richardson_ratio(const LossEvaluator& loss, const Matrix& analytic, const Matrix& o_m, const Matrix& o_n,
                        Side side, double h) {
    const double coarse = max_abs_diff(finite_diff(loss, o_m, o_n, side, h), analytic);
    const double fine = max_abs_diff(finite_diff(loss, o_m, o_n, side, h / 2.0), analytic);
    return coarse / fine;
}

GradReport check_kl_equivalence(std::size_t trials, const std::vector<std::size_t>& class_counts, std::uint64_t seed,
                          double tolerance, const LossConfig& dkl_cfg) {
    ReportBuilder builder("kl_equivalence", class_counts, tolerance);
    for (std::size_t ci = 0; ci < class_counts.size(); ++ci) {
        const std::size_t c = class_counts[ci];
        Rng rng(seed, c);
        for (std::size_t t = 0; t < trials; ++t) {
            const double scale = kScales[t % 3];
            const Matrix o_m = draw(rng, kBatch, c, scale);
            const Matrix o_n = draw(rng, kBatch, c, scale);
            const auto kl = kl_backward(o_m, o_n);
            const auto dkl = dkl_family(o_m, o_n, {}, dkl_cfg);
            const double diff = std::max(max_abs_diff(kl.grad_m, dkl.grad_m), max_abs_diff(kl.grad_n, dkl.grad_n));
            builder.add(ci, diff, [&] {
                return fmt::format("C={} trial={} scale={} o_m={} o_n={}", c, t, scale, serialize(o_m), serialize(o_n));
            });
        }
    }
    return builder.finish(fmt::format("KL vs DKL(alpha={}, beta={}) gradients, batch {} per trial, logit scales 0.1/1/5",
                                      dkl_cfg.alpha, dkl_cfg.beta, kBatch));
}

GradReport check_asymmetry(std::size_t trials, std::uint64_t seed, double tolerance,
                           const std::vector<std::size_t>& class_counts) {
    ReportBuilder builder("asymmetry", class_counts, tolerance);
    for (std::size_t ci = 0; ci < class_counts.size(); ++ci) {
        const std::size_t c = class_counts[ci];
        Rng rng(seed, 1000 + c);
        for (std::size_t t = 0; t < trials; ++t) {
            const double scale = kScales[t % 3];
            const Matrix o_m = draw(rng, kBatch, c, scale);
            const Matrix o_n = draw(rng, kBatch, c, scale);
            const double alpha = 0.5 + 4.0 * rng.uniform();
            const double beta = 0.5 + 4.0 * rng.uniform();
            const Matrix s_m = softmax_rows(o_m);

            // (a) without break_asymmetry: only cross-entropy reaches o_n.
            LossConfig kd{.alpha = alpha, .beta = beta, .detach_m = true, .break_asymmetry = false};
            const auto plain = dkl_family(o_m, o_n, {}, kd);
            Matrix ce_only = soft_ce(o_n, s_m).grad_n;
            for (double& v : ce_only.values()) {
                v *= beta;
            }
            const double diff_a = std::max(max_abs_diff(plain.grad_n, ce_only), max_abs(plain.grad_m));

            // (b) with break_asymmetry: the difference is the pairwise wMSE term.
            kd.break_asymmetry = true;
            const auto broken = dkl_family(o_m, o_n, {}, kd);
            Matrix delta(o_m.rows(), c);
            for (std::size_t i = 0; i < delta.size(); ++i) {
                delta.values()[i] = broken.grad_n.values()[i] - plain.grad_n.values()[i];
            }
            const double diff_b = max_abs_diff(delta, pairwise_student_term(o_m, o_n, s_m, alpha));

            // (c) Two-sided wMSE is antisymmetric.
            const auto both = wmse_efficient(o_m, o_n, s_m);
            Matrix residual(o_m.rows(), c);
            for (std::size_t i = 0; i < residual.size(); ++i) {
                residual.values()[i] = both.grad_m.values()[i] + both.grad_n.values()[i];
            }
            const double diff_c = max_abs(residual);

            builder.add(ci, std::max({diff_a, diff_b, diff_c}), [&] {
                return fmt::format("C={} trial={} a={:.3e} b={:.3e} c={:.3e} o_m={} o_n={}", c, t, diff_a, diff_b,
                                   diff_c, serialize(o_m), serialize(o_n));
            });
        }
    }
    return builder.finish("max over (a) CE-only student grad, (b) wMSE term vs pairwise sum, (c) grad_m + grad_n");
}

const std::vector<std::string>& gradient_check_names() {
    static const std::vector<std::string> names{"kl",  "soft_ce", "wmse_dense", "wmse_efficient", "dkl",
                                                "dkl_kd", "ikl_kd", "ikl", "jsd"};
    return names;
}

GradReport check_gradients(const std::string& loss_name, std::size_t trials,
                           const std::vector<std::size_t>& class_counts, std::uint64_t seed, bool saturated,
                           double tolerance, double h) {
    ReportBuilder builder(fmt::format("fd.{}.{}", loss_name, saturated ? "saturated" : "soft"), class_counts,
                          tolerance);
    for (std::size_t ci = 0; ci < class_counts.size(); ++ci) {
        const std::size_t c = class_counts[ci];
        Rng rng(seed, 2000 + c);
        for (std::size_t t = 0; t < trials; ++t) {
            const double scale = saturated ? 5.0 : (t % 2 == 0 ? 0.1 : 1.0);
            const Matrix o_m = draw(rng, kBatch, c, scale);
            const Matrix o_n = draw(rng, kBatch, c, scale);
            const Case k = make_case(loss_name, o_m, o_n, rng);
            double diff = 0.0;
            if (k.objective_m) {
                diff = std::max(diff, rel_err(k.analytic.grad_m, finite_diff(k.objective_m, o_m, o_n, Side::M, h)));
            } else {
                diff = std::max(diff, max_abs(k.analytic.grad_m));
            }
            if (k.objective_n) {
                diff = std::max(diff, rel_err(k.analytic.grad_n, finite_diff(k.objective_n, o_m, o_n, Side::N, h)));
            } else {
                diff = std::max(diff, max_abs(k.analytic.grad_n));
            }
            builder.add(ci, diff, [&] {
                return fmt::format("C={} trial={} scale={} o_m={} o_n={}", c, t, scale, serialize(o_m), serialize(o_n));
            });
        }
    }
    return builder.finish(fmt::format("relative error vs central differences, h={:g}{}", h,
                                      saturated ? ", saturated regime (logit scale 5)" : ""));
}

GradReport check_wmse_identity(std::size_t trials, const std::vector<std::size_t>& class_counts, std::uint64_t seed,
                               double tolerance) {
    ReportBuilder builder("wmse_identity", class_counts, tolerance);
    for (std::size_t ci = 0; ci < class_counts.size(); ++ci) {
        const std::size_t c = class_counts[ci];
        Rng rng(seed, 3000 + c);
        for (std::size_t t = 0; t < trials; ++t) {
            const double scale = kScales[t % 3];
            const Matrix o_m = draw(rng, kBatch, c, scale);
            const Matrix o_n = draw(rng, kBatch, c, scale);
            const Matrix scores = t % 2 == 0 ? softmax_rows(draw(rng, kBatch, c, 1.0)) : uniform_random_probs(rng, kBatch, c);
            const auto dense = wmse_dense(o_m, o_n, outer_weights(scores));
            const auto fast = wmse_efficient(o_m, o_n, scores);
            const double diff =
                std::max({std::abs(dense.value - fast.value) / (1.0 + std::abs(dense.value)),
                          max_abs_diff(dense.grad_m, fast.grad_m), max_abs_diff(dense.grad_n, fast.grad_n)});
            builder.add(ci, diff, [&] {
                return fmt::format("C={} trial={} scale={} o_m={} o_n={}", c, t, scale, serialize(o_m), serialize(o_n));
            });
        }
    }
    return builder.finish("value diff relative to 1+|dense|, gradient diffs absolute");
}

Matrix jsd_grad_n_virtual_logits(const Matrix& o_m, const Matrix& o_n) {
    require(o_m.same_shape(o_n), ErrorCode::ShapeMismatch, "logit batches differ in shape");
    const std::size_t c = o_m.cols();
    Matrix out(o_m.rows(), c);
    const double scale = 1.0 / static_cast<double>(o_m.rows());
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const auto s_m = softmax(o_m.row(b));
        const auto s_n = softmax(o_n.row(b));
        std::vector<double> virtual_logits(c);
        for (std::size_t j = 0; j < c; ++j) {
            virtual_logits[j] = std::log(0.5 * (s_m[j] + s_n[j]));
        }
        const Matrix dn = pairwise_diff(o_n.row(b));
        const Matrix dv = pairwise_diff(virtual_logits);
        for (std::size_t i = 0; i < c; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                acc += s_n[i] * s_n[j] * (dn(i, j) - dv(i, j));
            }
            out(b, i) = 0.5 * acc * scale;
        }
    }
    return out;
}

}  // namespace dkl
