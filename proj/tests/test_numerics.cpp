#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "error.hpp"
#include "numerics.hpp"
#include "test_util.hpp"

using namespace dkl;

TEST_CASE("softmax examples") {
    const std::vector<double> even{0.0, 0.0};
    auto p = softmax(even);
    CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-15));

    const std::vector<double> nine{std::log(9.0), 0.0};
    p = softmax(nine);
    CHECK(std::abs(p[0] - 0.9) < 1e-15);
    CHECK(std::abs(p[1] - 0.1) < 1e-15);

    const std::vector<double> huge{1000.0, 1000.0 + std::log(9.0)};
    p = softmax(huge);
    CHECK(std::abs(p[0] - 0.1) < 1e-12);
    CHECK(std::abs(p[1] - 0.9) < 1e-12);
}

TEST_CASE("softmax rejects bad input") {
    const std::vector<double> ok{1.0, 2.0};
    CHECK_THROWS_AS(softmax(ok, 0.0), Error);
    CHECK_THROWS_AS(softmax(ok, -1.0), Error);
    const std::vector<double> inf{1.0, std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(softmax(inf), Error);
    const std::vector<double> nan{std::nan(""), 0.0};
    CHECK_THROWS_AS(log_softmax(nan), Error);
    const std::vector<double> single{1.0};
    CHECK_THROWS_AS(softmax(single), Error);
}

TEST_CASE("temperature divides logits") {
    const std::vector<double> o{std::log(9.0) * 2.0, 0.0};
    const auto p = softmax(o, 2.0);
    CHECK(std::abs(p[0] - 0.9) < 1e-15);
}

TEST_CASE("log_softmax examples") {
    const std::vector<double> even{0.0, 0.0};
    auto l = log_softmax(even);
    CHECK(std::abs(l[0] + std::log(2.0)) < 1e-15);
    CHECK(std::abs(l[1] + std::log(2.0)) < 1e-15);

    const std::vector<double> nine{std::log(9.0), 0.0};
    l = log_softmax(nine);
    CHECK(std::abs(l[0] - std::log(0.9)) < 1e-15);
    CHECK(std::abs(l[1] - std::log(0.1)) < 1e-14);

    // -log(1 + e^-50), frozen from a 40-digit evaluation.
    const std::vector<double> far{50.0, 0.0};
    l = log_softmax(far);
    CHECK(std::isfinite(l[0]));
    CHECK(std::isfinite(l[1]));
    CHECK(std::abs(l[1] + 50.0) < 1e-12);
    CHECK(std::abs(l[0] / -1.928749847963917782910704459191907815604e-22 - 1.0) <= 1e-12);
}

TEST_CASE("pairwise_diff examples") {
    const std::vector<double> two{1.0, 0.0};
    const Matrix m = pairwise_diff(two);
    CHECK(m(0, 0) == 0.0);
    CHECK(m(0, 1) == 1.0);
    CHECK(m(1, 0) == -1.0);
    CHECK(m(1, 1) == 0.0);

    const std::vector<double> flat{2.5, 2.5, 2.5};
    CHECK(max_abs(pairwise_diff(flat)) == 0.0);

    const std::vector<double> three{3.0, 1.0, 0.0};
    const Matrix r = pairwise_diff(three);
    CHECK(r(0, 0) == 0.0);
    CHECK(r(0, 1) == 2.0);
    CHECK(r(0, 2) == 3.0);
}

TEST_CASE("outer_weight examples") {
    const std::vector<double> half{0.5, 0.5};
    const Matrix w = outer_weight(half);
    for (double v : w.values()) {
        CHECK(v == 0.25);
    }
    const std::vector<double> one_hot{1.0, 0.0};
    const Matrix d = outer_weight(one_hot);
    CHECK(d(0, 0) == 1.0);
    CHECK(d(0, 1) == 0.0);
    CHECK(d(1, 1) == 0.0);
    const std::vector<double> nine{0.9, 0.1};
    const Matrix n = outer_weight(nine);
    CHECK(std::abs(n(0, 1) - 0.09) < 1e-16);
    CHECK(n(0, 1) == n(1, 0));
}

TEST_CASE("numerics invariants on random inputs") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t c = 2 + rng.below(40);
        const double scale = trial % 3 == 0 ? 10.0 : 1.0;
        std::vector<double> o(c);
        for (double& v : o) {
            v = scale * rng.normal();
        }
        const double shift = 100.0 * rng.normal();
        std::vector<double> shifted(o);
        for (double& v : shifted) {
            v += shift;
        }
        const auto p = softmax(o);
        const auto q = softmax(shifted);
        const auto l = log_softmax(o);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            CHECK(std::abs(p[j] - q[j]) <= 1e-12);
            CHECK(p[j] > 0.0);
            CHECK(std::abs(std::exp(l[j]) - p[j]) <= 1e-12);
            sum += p[j];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        const Matrix d = pairwise_diff(o);
        for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t k = 0; k < c; ++k) {
                CHECK(d(j, k) + d(k, j) == 0.0);
            }
        }
        double wsum = 0.0;
        const Matrix w = outer_weight(p);
        for (double v : w.values()) {
            CHECK(v >= 0.0);
            wsum += v;
        }
        CHECK(std::abs(wsum - 1.0) <= 1e-12);
    }
}

TEST_CASE("check_probs") {
    const std::vector<double> good{0.3, 0.7};
    CHECK_NOTHROW(check_probs(good));
    const std::vector<double> bad{0.3, 0.6};
    CHECK_THROWS_AS(check_probs(bad), Error);
    const std::vector<double> neg{-0.1, 1.1};
    CHECK_THROWS_AS(check_probs(neg), Error);
}
