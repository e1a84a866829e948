#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "error.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "test_util.hpp"

using namespace dkl;
using dkl::testing::random_logits;

namespace {

Matrix random_inputs(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.values()) {
        v = rng.uniform();
    }
    return m;
}

// Straight-line forward pass written without the library's kernels.
Matrix reference_forward(const MlpParams& p, const Matrix& x) {
    std::vector<std::vector<double>> act(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        act[r].assign(x.row(r).begin(), x.row(r).end());
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& layer = p.layers[l];
        for (auto& a : act) {
            std::vector<double> next(layer.weight.rows());
            for (std::size_t o = 0; o < next.size(); ++o) {
                double z = layer.bias[o];
                for (std::size_t i = 0; i < a.size(); ++i) {
                    z += layer.weight(o, i) * a[i];
                }
                next[o] = (l + 1 < p.layers.size()) ? std::max(0.0, z) : z;
            }
            a = std::move(next);
        }
    }
    Matrix out(x.rows(), p.num_classes());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::copy(act[r].begin(), act[r].end(), out.row(r).begin());
    }
    return out;
}

std::vector<double*> all_params(MlpParams& p) {
    std::vector<double*> out;
    for (auto& layer : p.layers) {
        for (double& v : layer.weight.values()) {
            out.push_back(&v);
        }
        for (double& v : layer.bias) {
            out.push_back(&v);
        }
    }
    return out;
}

std::vector<double> flat_grads(const MlpGrads& g) {
    std::vector<double> out;
    for (const auto& layer : g.layers) {
        out.insert(out.end(), layer.weight.values().begin(), layer.weight.values().end());
        out.insert(out.end(), layer.bias.begin(), layer.bias.end());
    }
    return out;
}

// Relative max-norm error between the backprop gradient of `objective` (given
// its logit gradient) and central differences over every parameter.
template <class Objective, class LogitGrad>
double param_grad_error(MlpParams params, const Matrix& x, Objective objective, LogitGrad logit_grad) {
    ForwardCache cache;
    const Matrix logits = forward(params, x, &cache);
    const auto analytic = flat_grads(backward(params, cache, logit_grad(logits)));
    const auto ptrs = all_params(params);
    const double h = 1e-5;
    double worst = 0.0;
    double scale = 1e-3;
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
        const double saved = *ptrs[i];
        *ptrs[i] = saved + h;
        const double up = objective(forward(params, x));
        *ptrs[i] = saved - h;
        const double down = objective(forward(params, x));
        *ptrs[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(numeric - analytic[i]));
        scale = std::max(scale, std::abs(numeric));
    }
    return worst / scale;
}

}  // namespace

TEST_CASE("init is deterministic and bounded") {
    const auto a = MlpParams::init({2, 4, 3}, 7);
    const auto b = MlpParams::init({2, 4, 3}, 7);
    const auto c = MlpParams::init({2, 4, 3}, 8);
    REQUIRE(a.layers.size() == 2);
    for (std::size_t l = 0; l < 2; ++l) {
        CHECK(a.layers[l].weight == b.layers[l].weight);
        CHECK(a.layers[l].bias == b.layers[l].bias);
    }
    CHECK_FALSE(a.layers[0].weight == c.layers[0].weight);
    CHECK(a.parameter_count() == 2 * 4 + 4 + 4 * 3 + 3);
    for (const auto& layer : a.layers) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
        CHECK(max_abs(layer.weight) <= bound);
        for (double v : layer.bias) {
            CHECK(std::abs(v) <= bound);
        }
    }

    const auto linear = MlpParams::init({2, 3}, 1);
    CHECK(linear.layers.size() == 1);
    CHECK(linear.layers[0].weight.rows() == 3);

    CHECK_THROWS_AS(MlpParams::init({5}, 0), Error);
    CHECK_THROWS_AS(MlpParams::init({5, 0, 3}, 0), Error);
    CHECK_THROWS_AS(MlpParams::init({5, 1}, 0), Error);
}

TEST_CASE("outputs are finite on unit-ball inputs") {
    Rng rng(4);
    const auto p = MlpParams::init({8, 32, 32, 10}, 4);
    Matrix x(50, 8);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double norm = 0.0;
        for (double& v : x.row(r)) {
            v = rng.normal();
            norm += v * v;
        }
        for (double& v : x.row(r)) {
            v /= std::sqrt(norm);
        }
    }
    for (double v : forward(p, x).values()) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("forward examples") {
    auto p = MlpParams::init({3, 5, 4}, 2);
    for (auto& layer : p.layers) {
        layer.weight.fill(0.0);
        std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
    const Matrix x(2, 3, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    CHECK(max_abs(forward(p, x)) == 0.0);

    auto id = MlpParams::init({3, 4}, 0);
    id.layers[0].weight.fill(0.0);
    std::fill(id.layers[0].bias.begin(), id.layers[0].bias.end(), 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
        id.layers[0].weight(i, i) = 1.0;
    }
    const Matrix y = forward(id, x);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(y(r, i) == x(r, i));
        }
        CHECK(y(r, 3) == 0.0);
    }

    Rng rng(3);
    const auto q = MlpParams::init({6, 16, 9, 5}, 3);
    const Matrix z = random_inputs(rng, 11, 6);
    CHECK(max_abs_diff(forward(q, z), reference_forward(q, z)) <= 1e-12);

    CHECK_THROWS_AS(forward(q, Matrix(2, 5)), Error);
}

TEST_CASE("backward examples") {
    Rng rng(5);
    const auto p = MlpParams::init({4, 7, 3}, 5);
    const Matrix x = random_inputs(rng, 6, 4);
    ForwardCache cache;
    const Matrix logits = forward(p, x, &cache);

    const auto zero = backward(p, cache, Matrix(6, 3));
    for (double v : flat_grads(zero)) {
        CHECK(v == 0.0);
    }

    // Single linear layer: dW = G^T X summed over the batch, db = column sums of G.
    const auto lin = MlpParams::init({4, 3}, 6);
    ForwardCache lin_cache;
    (void)forward(lin, x, &lin_cache);
    const Matrix g = random_logits(rng, 6, 3);
    const auto grads = backward(lin, lin_cache, g);
    for (std::size_t o = 0; o < 3; ++o) {
        double db = 0.0;
        for (std::size_t r = 0; r < 6; ++r) {
            db += g(r, o);
        }
        CHECK(grads.layers[0].bias[o] == doctest::Approx(db).epsilon(1e-14));
        for (std::size_t i = 0; i < 4; ++i) {
            double dw = 0.0;
            for (std::size_t r = 0; r < 6; ++r) {
                dw += g(r, o) * x(r, i);
            }
            CHECK(grads.layers[0].weight(o, i) == doctest::Approx(dw).epsilon(1e-14));
        }
    }
    CHECK(grads.input.rows() == 6);
    CHECK(grads.input.cols() == 4);

    CHECK_THROWS_AS(backward(p, cache, Matrix(6, 2)), Error);
}

TEST_CASE("backward matches finite differences of a scalar probe") {
    Rng rng(8);
    const auto p = MlpParams::init({5, 12, 8, 4}, 8);
    const Matrix x = random_inputs(rng, 7, 5);
    const Matrix probe = random_logits(rng, 7, 4);
    const auto objective = [&](const Matrix& logits) {
        double total = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            total += logits.values()[i] * probe.values()[i];
        }
        return total;
    };
    CHECK(param_grad_error(p, x, objective, [&](const Matrix&) { return probe; }) <= 1e-5);
}

TEST_CASE("input gradient matches finite differences") {
    Rng rng(9);
    const auto p = MlpParams::init({4, 10, 3}, 9);
    const Matrix x = random_inputs(rng, 3, 4);
    const Matrix probe = random_logits(rng, 3, 3);
    ForwardCache cache;
    (void)forward(p, x, &cache);
    const auto grads = backward(p, cache, probe);
    const auto objective = [&](const Matrix& in) {
        const Matrix logits = forward(p, in);
        double total = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            total += logits.values()[i] * probe.values()[i];
        }
        return total;
    };
    CHECK(dkl::testing::rel_err(grads.input, dkl::testing::central_diff(objective, x)) <= 1e-5);
}

TEST_CASE("composite objective gradients: CE plus every divergence") {
    Rng rng(10);
    const std::size_t c = 4;
    const auto p = MlpParams::init({5, 9, c}, 10);
    const Matrix x = random_inputs(rng, 6, 5);
    const Matrix other = random_logits(rng, 6, c, 2.0);
    std::vector<std::int32_t> labels{0, 1, 2, 3, 1, 2};
    const std::vector<std::int32_t> stat_labels{0, 1, 2, 3, 0, 1, 2, 3};
    const auto stats = ClassStatsTable::exact_recompute(random_logits(rng, 8, c), stat_labels, 4.0);

    Matrix onehot(6, c);
    for (std::size_t r = 0; r < 6; ++r) {
        onehot(r, static_cast<std::size_t>(labels[r])) = 1.0;
    }

    // The model produces o_n; o_m is a fixed reference, so every family member
    // is a plain function of the parameters (class-wise weights are constants).
    struct Case {
        const char* name;
        LossConfig cfg;
        bool classwise;
    };
    const std::vector<Case> cases{
        {"kl-equivalent dkl", {.alpha = 1.0, .beta = 1.0}, false},
        {"dkl detached", {.alpha = 2.0, .beta = 3.0, .detach_m = true}, false},
        {"ikl", {.alpha = 20.0, .beta = 5.0, .detach_m = true, .break_asymmetry = true}, true},
    };
    for (const auto& cs : cases) {
        CAPTURE(cs.name);
        LossConfig cfg = cs.cfg;
        cfg.weight_source = cs.classwise ? WeightSource::ClassWise : WeightSource::SampleWise;
        const ClassStatsTable* table = cs.classwise ? &stats : nullptr;
        const auto objective = [&](const Matrix& logits) {
            return soft_ce(logits, onehot).value + dkl_family(other, logits, labels, cfg, table).value;
        };
        const auto grad = [&](const Matrix& logits) {
            Matrix g = soft_ce(logits, onehot).grad_n;
            const Matrix d = dkl_family(other, logits, labels, cfg, table).grad_n;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g.values()[i] += d.values()[i];
            }
            return g;
        };
        if (cs.cfg.break_asymmetry) {
            // Weights and the soft-CE target do not depend on o_n, so the value
            // itself is what the gradient differentiates.
            CHECK(param_grad_error(p, x, objective, grad) <= 1e-4);
        } else {
            // Without break_asymmetry the wMSE term sends nothing to o_n; compare
            // against CE + beta * soft-CE only.
            const Matrix s_m = softmax_rows(other);
            const auto surrogate = [&](const Matrix& logits) {
                return soft_ce(logits, onehot).value + cfg.beta * soft_ce(logits, s_m).value;
            };
            CHECK(param_grad_error(p, x, surrogate, grad) <= 1e-4);
        }
    }

    const auto kl_objective = [&](const Matrix& logits) { return soft_ce(logits, onehot).value + kl_forward(other, logits); };
    const auto kl_grad = [&](const Matrix& logits) {
        Matrix g = soft_ce(logits, onehot).grad_n;
        const Matrix d = kl_backward(other, logits).grad_n;
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.values()[i] += d.values()[i];
        }
        return g;
    };
    CHECK(param_grad_error(p, x, kl_objective, kl_grad) <= 1e-4);

    const auto jsd_objective = [&](const Matrix& logits) {
        return soft_ce(logits, onehot).value + jsd_forward_backward(other, logits).value;
    };
    const auto jsd_grad = [&](const Matrix& logits) {
        Matrix g = soft_ce(logits, onehot).grad_n;
        const Matrix d = jsd_forward_backward(other, logits).grad_n;
        for (std::size_t i = 0; i < g.size(); ++i) {
            g.values()[i] += d.values()[i];
        }
        return g;
    };
    CHECK(param_grad_error(p, x, jsd_objective, jsd_grad) <= 1e-4);
}

TEST_CASE("stale caches are rejected") {
    Rng rng(11);
    auto p = MlpParams::init({3, 4, 2}, 11);
    const Matrix x = random_inputs(rng, 2, 3);
    ForwardCache cache;
    const Matrix logits = forward(p, x, &cache);
    MlpGrads grads = backward(p, cache, Matrix(2, 2, {1.0, -1.0, 0.5, 0.5}));
    SgdState state;
    sgd_step(p, grads, state, 0.1, 0.0, 0.0);
    CHECK_THROWS_AS(backward(p, cache, Matrix(2, 2)), Error);
}

TEST_CASE("sgd step examples") {
    Rng rng(12);
    auto p = MlpParams::init({3, 4, 2}, 12);
    const Matrix x = random_inputs(rng, 2, 3);
    ForwardCache cache;
    (void)forward(p, x, &cache);
    const auto zero = backward(p, cache, Matrix(2, 2));

    auto q = p;
    SgdState s0;
    sgd_step(q, zero, s0, 0.1, 0.9, 0.0);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        CHECK(q.layers[l].weight == p.layers[l].weight);
        CHECK(q.layers[l].bias == p.layers[l].bias);
    }

    const auto g = backward(p, cache, random_logits(rng, 2, 2));
    auto r = p;
    SgdState s1;
    const double lr = 0.05;
    const double wd = 0.01;
    sgd_step(r, g, s1, lr, 0.0, wd);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        for (std::size_t i = 0; i < p.layers[l].weight.size(); ++i) {
            const double w = p.layers[l].weight.values()[i];
            const double expected = w - lr * (g.layers[l].weight.values()[i] + wd * w);
            CHECK(r.layers[l].weight.values()[i] == doctest::Approx(expected).epsilon(1e-15));
        }
    }
    CHECK(r.version == p.version + 1);

    SgdState s2;
    CHECK_THROWS_AS(sgd_step(r, g, s2, 0.0, 0.9, 0.0), Error);
    auto bad = g;
    bad.layers[0].weight.values()[0] = std::nan("");
    CHECK_THROWS_AS(sgd_step(r, bad, s2, 0.1, 0.9, 0.0), Error);
}

TEST_CASE("momentum velocity approaches g / (1 - momentum)") {
    auto p = MlpParams::init({2, 2}, 13);
    MlpGrads g;
    g.layers.push_back({Matrix(2, 2, {1.0, -2.0, 0.5, 0.0}), {0.25, -1.0}});
    SgdState state;
    for (int i = 0; i < 400; ++i) {
        sgd_step(p, g, state, 1e-3, 0.9, 0.0);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(state.velocity[0].weight.values()[i] ==
              doctest::Approx(g.layers[0].weight.values()[i] / 0.1).epsilon(1e-12));
    }
    CHECK(state.velocity[0].bias[1] == doctest::Approx(-10.0).epsilon(1e-12));
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 0.1) == 0.1);
    CHECK(std::abs(cosine_lr(100, 100, 0.1)) <= 1e-18);
    CHECK(cosine_lr(50, 100, 0.1) == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx((1.0 + std::numbers::sqrt2 / 2.0) / 2.0).epsilon(1e-15));
    CHECK_THROWS_AS(cosine_lr(101, 100, 0.1), Error);
}

TEST_CASE("params file round trip") {
    const auto p = MlpParams::init({5, 7, 3}, 14);
    const auto path = std::filesystem::temp_directory_path() / "dkl_test_params.bin";
    p.save(path);
    CHECK(std::filesystem::file_size(path) == 4 + 4 + 3 * 4 + p.parameter_count() * 8);
    const auto q = MlpParams::load(path);
    CHECK(q.dims == p.dims);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        CHECK(q.layers[l].weight == p.layers[l].weight);
        CHECK(q.layers[l].bias == p.layers[l].bias);
    }

    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out.put('x');
    }
    CHECK_THROWS_AS(MlpParams::load(path), Error);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOPE";
    }
    try {
        (void)MlpParams::load(path);
        FAIL("expected a format error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Format);
    }
    std::filesystem::remove(path);
}
