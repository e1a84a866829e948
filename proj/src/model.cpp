#include "model.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "binary_io.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace dkl {

namespace io {

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::Io, "failed writing " + path);
}

}  // namespace io

namespace {

void check_dims(const std::vector<std::size_t>& dims) {
    require(dims.size() >= 2, ErrorCode::InvalidArgument, "an MLP needs at least input and output dims");
    for (auto d : dims) {
        require(d >= 1 && d <= (1u << 24), ErrorCode::InvalidArgument, "MLP layer dims must be positive");
    }
    require(dims.back() >= 2, ErrorCode::InvalidArgument, "MLP output needs at least 2 classes");
}

std::vector<DenseLayer> zeros_like(const MlpParams& params) {
    std::vector<DenseLayer> out;
    for (const auto& l : params.layers) {
        out.push_back({Matrix(l.weight.rows(), l.weight.cols()), std::vector<double>(l.bias.size(), 0.0)});
    }
    return out;
}

}  // namespace

MlpParams MlpParams::init(const std::vector<std::size_t>& dims, std::uint64_t seed) {
    check_dims(dims);
    MlpParams p;
    p.dims = dims;
    Rng rng(seed, 0x4d4c50);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
        DenseLayer layer{Matrix(dims[l + 1], dims[l]), std::vector<double>(dims[l + 1])};
        for (double& w : layer.weight.values()) {
            w = rng.uniform(-bound, bound);
        }
        for (double& b : layer.bias) {
            b = rng.uniform(-bound, bound);
        }
        p.layers.push_back(std::move(layer));
    }
    return p;
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.weight.size() + l.bias.size();
    }
    return n;
}

void MlpParams::save(const std::filesystem::path& path) const {
    io::Writer w;
    w.magic("DKLM");
    w.u32(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) {
        w.u32(static_cast<std::uint32_t>(d));
    }
    for (const auto& l : layers) {
        for (double v : l.weight.values()) {
            w.f64(v);
        }
        for (double v : l.bias) {
            w.f64(v);
        }
    }
    io::write_file(path.string(), w.bytes());
}

MlpParams MlpParams::load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path.string());
    io::Reader r(bytes, path.string());
    r.expect_magic("DKLM");
    const std::uint32_t count = r.u32();
    require(count >= 2 && count <= 64, ErrorCode::Format, path.string() + ": implausible layer count");
    std::vector<std::size_t> dims(count);
    for (auto& d : dims) {
        d = r.u32();
    }
    check_dims(dims);
    MlpParams p = init(dims, 0);
    for (auto& l : p.layers) {
        for (double& v : l.weight.values()) {
            v = r.f64();
        }
        for (double& v : l.bias) {
            v = r.f64();
        }
    }
    require(r.remaining() == 0, ErrorCode::Format, path.string() + ": trailing bytes after parameters");
    return p;
}

Matrix forward(const MlpParams& params, const Matrix& batch, ForwardCache* cache) {
    require(batch.cols() == params.input_dim(), ErrorCode::ShapeMismatch,
            "batch has " + std::to_string(batch.cols()) + " features, model expects " +
                std::to_string(params.input_dim()));
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
        cache->version = params.version;
    }
    Matrix h = batch;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        const std::size_t out_dim = layer.weight.rows();
        const std::size_t in_dim = layer.weight.cols();
        Matrix z(h.rows(), out_dim);
        for (std::size_t b = 0; b < h.rows(); ++b) {
            const auto x = h.row(b);
            for (std::size_t o = 0; o < out_dim; ++o) {
                const auto w = layer.weight.row(o);
                double acc = layer.bias[o];
                for (std::size_t i = 0; i < in_dim; ++i) {
                    acc += w[i] * x[i];
                }
                z(b, o) = acc;
            }
        }
        const bool hidden = l + 1 < params.layers.size();
        if (cache) {
            cache->inputs.push_back(std::move(h));
            cache->pre.push_back(z);
        }
        if (hidden) {
            for (double& v : z.values()) {
                v = v > 0.0 ? v : 0.0;
            }
        }
        h = std::move(z);
    }
    return h;
}

MlpGrads backward(const MlpParams& params, const ForwardCache& cache, const Matrix& grad_logits) {
    require(cache.version == params.version && cache.pre.size() == params.layers.size(), ErrorCode::InvalidArgument,
            "stale forward cache: parameters changed since the forward pass");
    require(grad_logits.same_shape(cache.pre.back()), ErrorCode::ShapeMismatch, "grad_logits shape mismatch");
    MlpGrads grads{zeros_like(params), {}};
    Matrix g = grad_logits;
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const auto& layer = params.layers[l];
        const Matrix& x = cache.inputs[l];
        auto& out = grads.layers[l];
        const std::size_t out_dim = layer.weight.rows();
        const std::size_t in_dim = layer.weight.cols();
        Matrix prev(x.rows(), in_dim);
        for (std::size_t b = 0; b < x.rows(); ++b) {
            const auto xb = x.row(b);
            auto pb = prev.row(b);
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double go = g(b, o);
                if (go == 0.0) {
                    continue;
                }
                out.bias[o] += go;
                auto gw = out.weight.row(o);
                const auto w = layer.weight.row(o);
                for (std::size_t i = 0; i < in_dim; ++i) {
                    gw[i] += go * xb[i];
                    pb[i] += go * w[i];
                }
            }
        }
        if (l > 0) {
            const Matrix& z = cache.pre[l - 1];
            for (std::size_t i = 0; i < prev.size(); ++i) {
                if (!(z.values()[i] > 0.0)) {
                    prev.values()[i] = 0.0;
                }
            }
        }
        g = std::move(prev);
    }
    grads.input = std::move(g);
    return grads;
}

void accumulate(MlpGrads& a, const MlpGrads& b) {
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        auto aw = a.layers[l].weight.values();
        const auto bw = b.layers[l].weight.values();
        for (std::size_t i = 0; i < aw.size(); ++i) {
            aw[i] += bw[i];
        }
        for (std::size_t i = 0; i < a.layers[l].bias.size(); ++i) {
            a.layers[l].bias[i] += b.layers[l].bias[i];
        }
    }
    if (a.input.same_shape(b.input)) {
        for (std::size_t i = 0; i < a.input.size(); ++i) {
            a.input.values()[i] += b.input.values()[i];
        }
    }
}

void sgd_step(MlpParams& params, const MlpGrads& grads, SgdState& state, double lr, double momentum,
              double weight_decay) {
    require(lr > 0.0 && std::isfinite(lr), ErrorCode::InvalidArgument, "learning rate must be positive");
    require(grads.layers.size() == params.layers.size(), ErrorCode::ShapeMismatch, "gradient/parameter layer count");
    if (state.velocity.empty()) {
        state.velocity = zeros_like(params);
    }
    auto update = [&](double& p, double g, double& v) {
        require(std::isfinite(g), ErrorCode::Numeric, "non-finite gradient in SGD step");
        v = momentum * v + (g + weight_decay * p);
        p -= lr * v;
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        auto& layer = params.layers[l];
        auto& vel = state.velocity[l];
        const auto& g = grads.layers[l];
        for (std::size_t i = 0; i < layer.weight.size(); ++i) {
            update(layer.weight.values()[i], g.weight.values()[i], vel.weight.values()[i]);
        }
        for (std::size_t i = 0; i < layer.bias.size(); ++i) {
            update(layer.bias[i], g.bias[i], vel.bias[i]);
        }
    }
    ++params.version;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    require(step <= total_steps && total_steps > 0, ErrorCode::InvalidArgument, "cosine schedule step out of range");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

}  // namespace dkl
