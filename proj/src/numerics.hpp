#pragma once

#include <span>
#include <vector>

#include "matrix.hpp"

namespace dkl {

/// Probability of each class after dividing the logits by `temperature`.
/// Max-subtracted, so any finite input is safe. Throws on non-finite logits,
/// temperature <= 0, or fewer than two classes.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

/// log(softmax(logits / temperature)) via log-sum-exp.
std::vector<double> log_softmax(std::span<const double> logits, double temperature = 1.0);

/// M[j][k] = o[j] - o[k].
Matrix pairwise_diff(std::span<const double> logits);

/// W[j][k] = p[j] * p[k].
Matrix outer_weight(std::span<const double> probs);

/// Row-wise softmax / log_softmax of a batch.
Matrix softmax_rows(const Matrix& logits, double temperature = 1.0);
Matrix log_softmax_rows(const Matrix& logits, double temperature = 1.0);

/// Shannon entropy -sum p log p, with 0 log 0 = 0.
double entropy(std::span<const double> probs);

void check_logits(std::span<const double> logits);

/// Throws unless every entry is in [0, 1] and the sum is 1 within `tolerance`.
void check_probs(std::span<const double> probs, double tolerance = 1e-9);

}  // namespace dkl
