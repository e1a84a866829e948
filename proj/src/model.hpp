#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "matrix.hpp"

namespace dkl {

struct DenseLayer {
    Matrix weight;  // out x in
    std::vector<double> bias;
};

/// Rectifier MLP: affine + ReLU for every hidden layer, affine output logits.
struct MlpParams {
    std::vector<std::size_t> dims;  // input, hidden..., classes
    std::vector<DenseLayer> layers;
    /// Bumped on every in-place update; caches remember the version they saw.
    std::uint64_t version = 0;

    /// Weights and biases drawn uniformly from +-1/sqrt(fan_in).
    static MlpParams init(const std::vector<std::size_t>& dims, std::uint64_t seed);

    [[nodiscard]] std::size_t input_dim() const { return dims.front(); }
    [[nodiscard]] std::size_t num_classes() const { return dims.back(); }
    [[nodiscard]] std::size_t parameter_count() const;

    /// "DKLM", u32 layer-dim count, u32 dims, then per layer the weight
    /// matrix row-major followed by the bias, all little-endian f64.
    void save(const std::filesystem::path& path) const;
    static MlpParams load(const std::filesystem::path& path);
};

struct ForwardCache {
    std::vector<Matrix> inputs;       // input to layer l (inputs[0] is the batch)
    std::vector<Matrix> pre;          // pre-activation of layer l
    std::uint64_t version = 0;
};

struct MlpGrads {
    std::vector<DenseLayer> layers;
    Matrix input;  // d(objective)/d(batch), used by the attacks
};

Matrix forward(const MlpParams& params, const Matrix& batch, ForwardCache* cache = nullptr);

/// Reverse-mode gradients of sum(logits .* grad_logits), summed over the batch.
/// Throws if the cache was produced by a different parameter version.
MlpGrads backward(const MlpParams& params, const ForwardCache& cache, const Matrix& grad_logits);

/// Adds b into a, layer by layer (input gradients included when shapes match).
void accumulate(MlpGrads& a, const MlpGrads& b);

struct SgdState {
    std::vector<DenseLayer> velocity;
};

/// v <- momentum * v + (g + weight_decay * p); p <- p - lr * v.
void sgd_step(MlpParams& params, const MlpGrads& grads, SgdState& state, double lr, double momentum,
              double weight_decay);

/// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

}  // namespace dkl
