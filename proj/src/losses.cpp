#include "losses.hpp"

#include <cmath>
#include <string>

#include "error.hpp"
#include "numerics.hpp"

namespace dkl {

namespace {

void check_pair(const Matrix& o_m, const Matrix& o_n) {
    require(o_m.same_shape(o_n), ErrorCode::ShapeMismatch,
            "logit batches differ in shape: " + std::to_string(o_m.rows()) + "x" + std::to_string(o_m.cols()) +
                " vs " + std::to_string(o_n.rows()) + "x" + std::to_string(o_n.cols()));
    require(o_m.cols() >= 2, ErrorCode::InvalidArgument, "need at least 2 classes");
}

double batch_scale(const Matrix& m) { return m.rows() == 0 ? 0.0 : 1.0 / static_cast<double>(m.rows()); }

// log((exp(a) + exp(b)) / 2) without overflow.
double log_mean_exp(double a, double b) {
    const double hi = std::max(a, b);
    const double lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi)) - std::log(2.0);
}

}  // namespace

void LossConfig::validate() const {
    require(std::isfinite(alpha) && alpha >= 0.0, ErrorCode::InvalidArgument, "alpha must be >= 0");
    require(std::isfinite(beta) && beta >= 0.0, ErrorCode::InvalidArgument, "beta must be >= 0");
}

double kl_forward(const Matrix& o_m, const Matrix& o_n) {
    check_pair(o_m, o_n);
    double total = 0.0;
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const auto log_m = log_softmax(o_m.row(b));
        const auto log_n = log_softmax(o_n.row(b));
        for (std::size_t j = 0; j < log_m.size(); ++j) {
            total += std::exp(log_m[j]) * (log_m[j] - log_n[j]);
        }
    }
    return total * batch_scale(o_m);
}

LossOutput kl_backward(const Matrix& o_m, const Matrix& o_n) {
    check_pair(o_m, o_n);
    const std::size_t c = o_m.cols();
    const double scale = batch_scale(o_m);
    LossOutput out;
    out.value = kl_forward(o_m, o_n);
    out.grad_m = Matrix(o_m.rows(), c);
    out.grad_n = Matrix(o_m.rows(), c);
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const auto m = o_m.row(b);
        const auto n = o_n.row(b);
        const auto s_m = softmax(m);
        const auto s_n = softmax(n);
        auto gm = out.grad_m.row(b);
        auto gn = out.grad_n.row(b);
        for (std::size_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                acc += ((m[j] - m[k]) - (n[j] - n[k])) * s_m[j] * s_m[k];
            }
            gm[j] = acc * scale;
            gn[j] = (s_n[j] - s_m[j]) * scale;
        }
    }
    return out;
}

LossOutput wmse_dense(const Matrix& o_m, const Matrix& o_n, std::span<const Matrix> weights, GradFlow flow) {
    check_pair(o_m, o_n);
    const std::size_t c = o_m.cols();
    require(weights.size() == o_m.rows(), ErrorCode::ShapeMismatch, "need one weight matrix per sample");
    for (const auto& w : weights) {
        require(w.rows() == c && w.cols() == c, ErrorCode::ShapeMismatch, "weight matrix must be C x C");
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t k = 0; k < c; ++k) {
                require(w(j, k) >= 0.0, ErrorCode::InvalidArgument, "negative wMSE weight");
                require(std::abs(w(j, k) - w(k, j)) <= 1e-12, ErrorCode::InvalidArgument,
                        "wMSE weight matrix is not symmetric");
            }
        }
    }
    const double scale = batch_scale(o_m);
    LossOutput out;
    out.grad_m = Matrix(o_m.rows(), c);
    out.grad_n = Matrix(o_m.rows(), c);
    out.transient_doubles = 2 * o_m.rows() * c + 2 * c * c;
    double total = 0.0;
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const Matrix dm = pairwise_diff(o_m.row(b));
        const Matrix dn = pairwise_diff(o_n.row(b));
        const Matrix& w = weights[b];
        double sample = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double grad = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double r = dm(j, k) - dn(j, k);
                sample += w(j, k) * r * r;
                grad += 0.5 * (w(j, k) + w(k, j)) * r;
            }
            if (flow.to_m) {
                out.grad_m(b, j) = grad * scale;
            }
            if (flow.to_n) {
                out.grad_n(b, j) = -grad * scale;
            }
        }
        total += 0.25 * sample;
    }
    out.value = total * scale;
    out.wmse = out.value;
    return out;
}

LossOutput wmse_efficient(const Matrix& o_m, const Matrix& o_n, const Matrix& class_scores, GradFlow flow) {
    check_pair(o_m, o_n);
    require(class_scores.same_shape(o_m), ErrorCode::ShapeMismatch, "class scores must be B x C");
    const std::size_t c = o_m.cols();
    for (std::size_t b = 0; b < class_scores.rows(); ++b) {
        check_probs(class_scores.row(b), 1e-9);
    }
    const double scale = batch_scale(o_m);
    LossOutput out;
    out.grad_m = Matrix(o_m.rows(), c);
    out.grad_n = Matrix(o_m.rows(), c);
    out.transient_doubles = 2 * o_m.rows() * c;
    double total = 0.0;
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const auto m = o_m.row(b);
        const auto n = o_n.row(b);
        const auto w = class_scores.row(b);
        double centre = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            centre += w[j] * (m[j] - n[j]);
        }
        double sample = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double r = (m[j] - n[j]) - centre;
            sample += w[j] * r * r;
            const double grad = w[j] * r * scale;
            if (flow.to_m) {
                out.grad_m(b, j) = grad;
            }
            if (flow.to_n) {
                out.grad_n(b, j) = -grad;
            }
        }
        total += 0.5 * sample;
    }
    out.value = total * scale;
    out.wmse = out.value;
    return out;
}

LossOutput soft_ce(const Matrix& o_n, const Matrix& targets) {
    require(targets.same_shape(o_n), ErrorCode::ShapeMismatch, "targets must match logits shape");
    require(o_n.cols() >= 2, ErrorCode::InvalidArgument, "need at least 2 classes");
    const double scale = batch_scale(o_n);
    LossOutput out;
    out.grad_m = Matrix(o_n.rows(), o_n.cols());
    out.grad_n = Matrix(o_n.rows(), o_n.cols());
    double total = 0.0;
    for (std::size_t b = 0; b < o_n.rows(); ++b) {
        const auto t = targets.row(b);
        check_probs(t, 1e-9);
        const auto log_n = log_softmax(o_n.row(b));
        auto g = out.grad_n.row(b);
        for (std::size_t j = 0; j < t.size(); ++j) {
            total -= t[j] * log_n[j];
            g[j] = (std::exp(log_n[j]) - t[j]) * scale;
        }
    }
    out.value = total * scale;
    out.ce = out.value;
    return out;
}

LossOutput dkl_family(const Matrix& o_m, const Matrix& o_n, std::span<const std::int32_t> labels,
                      const LossConfig& cfg, const ClassStatsTable* stats) {
    cfg.validate();
    check_pair(o_m, o_n);
    const std::size_t c = o_m.cols();
    const Matrix s_m = softmax_rows(o_m);

    Matrix class_scores;
    if (cfg.weight_source == WeightSource::ClassWise) {
        require(stats != nullptr, ErrorCode::InvalidArgument, "class-wise weights need a class stats table");
        require(stats->num_classes() == c, ErrorCode::ShapeMismatch, "class stats size does not match logits");
        require(labels.size() == o_m.rows(), ErrorCode::ShapeMismatch, "class-wise weights need one label per sample");
        class_scores = Matrix(o_m.rows(), c);
        for (std::size_t b = 0; b < o_m.rows(); ++b) {
            const auto y = labels[b];
            require(y >= 0 && static_cast<std::size_t>(y) < c, ErrorCode::InvalidArgument,
                    "label " + std::to_string(y) + " out of range");
            const auto r = stats->row(static_cast<std::size_t>(y));
            std::copy(r.begin(), r.end(), class_scores.row(b).begin());
        }
    } else {
        class_scores = s_m;
    }

    const GradFlow flow{.to_m = !cfg.detach_m, .to_n = cfg.break_asymmetry};
    LossOutput wmse = wmse_efficient(o_m, o_n, class_scores, flow);
    const LossOutput ce = soft_ce(o_n, s_m);

    LossOutput out;
    out.wmse = wmse.value;
    out.ce = ce.value;
    out.value = cfg.alpha * wmse.value + cfg.beta * ce.value;
    out.transient_doubles = wmse.transient_doubles;
    out.wmse_grad_n_max = cfg.alpha * max_abs(wmse.grad_n);
    out.grad_m = std::move(wmse.grad_m);
    out.grad_n = std::move(wmse.grad_n);
    for (std::size_t i = 0; i < out.grad_m.size(); ++i) {
        out.grad_m.values()[i] *= cfg.alpha;
        out.grad_n.values()[i] = cfg.alpha * out.grad_n.values()[i] + cfg.beta * ce.grad_n.values()[i];
    }
    return out;
}

LossOutput jsd_forward_backward(const Matrix& o_m, const Matrix& o_n) {
    check_pair(o_m, o_n);
    const std::size_t c = o_m.cols();
    const double scale = batch_scale(o_m);
    LossOutput out;
    out.grad_m = Matrix(o_m.rows(), c);
    out.grad_n = Matrix(o_m.rows(), c);
    double total = 0.0;
    std::vector<double> log_mix(c);
    for (std::size_t b = 0; b < o_m.rows(); ++b) {
        const auto log_m = log_softmax(o_m.row(b));
        const auto log_n = log_softmax(o_n.row(b));
        for (std::size_t j = 0; j < c; ++j) {
            log_mix[j] = log_mean_exp(log_m[j], log_n[j]);
        }
        // d JSD / d s^j = (1/2) log(s^j / M^j) (+ a constant that the softmax
        // Jacobian annihilates), so each side's logit gradient is
        // (1/2) s^i (r^i - sum_j s^j r^j) with r = log(s / M).
        auto side = [&](const std::vector<double>& log_s, std::span<double> grad) {
            double mean_ratio = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mean_ratio += std::exp(log_s[j]) * (log_s[j] - log_mix[j]);
            }
            for (std::size_t j = 0; j < c; ++j) {
                grad[j] = 0.5 * std::exp(log_s[j]) * ((log_s[j] - log_mix[j]) - mean_ratio) * scale;
            }
            return mean_ratio;
        };
        total += 0.5 * side(log_m, out.grad_m.row(b)) + 0.5 * side(log_n, out.grad_n.row(b));
    }
    out.value = total * scale;
    return out;
}

}  // namespace dkl
