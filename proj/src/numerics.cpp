#include "numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "error.hpp"

namespace dkl {

namespace {

void check_temperature(double temperature) {
    require(std::isfinite(temperature) && temperature > 0.0, ErrorCode::InvalidArgument,
            "temperature must be positive and finite, got " + std::to_string(temperature));
}

}  // namespace

void check_logits(std::span<const double> logits) {
    require(logits.size() >= 2, ErrorCode::InvalidArgument, "need at least 2 classes");
    for (double v : logits) {
        require(std::isfinite(v), ErrorCode::Numeric, "non-finite logit");
    }
}

void check_probs(std::span<const double> probs, double tolerance) {
    require(probs.size() >= 2, ErrorCode::InvalidArgument, "need at least 2 classes");
    double sum = 0.0;
    for (double p : probs) {
        require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorCode::InvalidArgument,
                "probability entry outside [0, 1]");
        sum += p;
    }
    require(std::abs(sum - 1.0) <= tolerance, ErrorCode::InvalidArgument,
            "probabilities sum to " + std::to_string(sum) + ", expected 1");
}

std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
    check_logits(logits);
    check_temperature(temperature);
    std::vector<double> out(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = logits[j] / temperature;
    }
    // The max element contributes exactly 1 to the partition sum; summing the
    // rest separately keeps log1p accurate when they are tiny.
    const auto peak_it = std::max_element(out.begin(), out.end());
    const double peak = *peak_it;
    double rest = 0.0;
    for (auto it = out.begin(); it != out.end(); ++it) {
        *it -= peak;
        if (it != peak_it) {
            rest += std::exp(*it);
        }
    }
    const double log_total = std::log1p(rest);
    for (double& v : out) {
        v -= log_total;
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    check_logits(logits);
    check_temperature(temperature);
    std::vector<double> out(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) {
        out[j] = logits[j] / temperature;
    }
    const double peak = *std::max_element(out.begin(), out.end());
    double total = 0.0;
    for (double& v : out) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

Matrix pairwise_diff(std::span<const double> logits) {
    check_logits(logits);
    const std::size_t n = logits.size();
    Matrix out(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) {
            out(j, k) = logits[j] - logits[k];
        }
    }
    return out;
}

Matrix outer_weight(std::span<const double> probs) {
    const std::size_t n = probs.size();
    Matrix out(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) {
            out(j, k) = probs[j] * probs[k];
        }
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits, double temperature) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        const auto p = softmax(logits.row(b), temperature);
        std::copy(p.begin(), p.end(), out.row(b).begin());
    }
    return out;
}

Matrix log_softmax_rows(const Matrix& logits, double temperature) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        const auto p = log_softmax(logits.row(b), temperature);
        std::copy(p.begin(), p.end(), out.row(b).begin());
    }
    return out;
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

}  // namespace dkl
