// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include "class_stats.hpp"
#include "data.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "trainers.hpp"

// Heap accounting for the memory criterion.
namespace {
std::atomic<std::size_t> g_live{0};
std::atomic<std::size_t> g_peak{0};

void note_alloc(std::size_t n) {
    const std::size_t now = g_live.fetch_add(n) + n;
    std::size_t peak = g_peak.load();
    while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
    }
}
}  // namespace

void* operator new(std::size_t n) {
    void* p = std::malloc(n + sizeof(std::max_align_t));
    if (!p) {
        throw std::bad_alloc();
    }
    *static_cast<std::size_t*>(p) = n;
    note_alloc(n);
    return static_cast<char*>(p) + sizeof(std::max_align_t);
}

void operator delete(void* p) noexcept {
    if (p) {
        char* base = static_cast<char*>(p) - sizeof(std::max_align_t);
        g_live.fetch_sub(*reinterpret_cast<std::size_t*>(base));
        std::free(base);
    }
}

void operator delete(void* p, std::size_t) noexcept { operator delete(p); }
void* operator new[](std::size_t n) { return operator new(n); }
void operator delete[](void* p) noexcept { operator delete(p); }
void operator delete[](void* p, std::size_t) noexcept { operator delete(p); }

using namespace dkl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

int g_failures = 0;

void verdict(const char* name, bool ok, double seconds, const std::string& detail) {
    std::printf("[%s] %-26s %6.2fs  %s\n", ok ? "PASS" : "FAIL", name, seconds, detail.c_str());
    std::fflush(stdout);
    if (!ok) {
        ++g_failures;
    }
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt_e(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

std::string fmt_f(double v, int digits = 4) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ---- desk task ------------------------------------------------------------

struct Task {
    Dataset train;
    Dataset test;
};

Task desk_task(std::uint64_t data_seed) {
    auto [train, test] = split(gaussian_mixture(10, 16, 200, 0.3, data_seed), 0.25, data_seed);
    return {std::move(train), std::move(test)};
}

TrainConfig desk_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.hidden = {64};
    cfg.epochs = 15;
    cfg.seed = seed;
    cfg.attack.epsilon = 0.05;
    cfg.attack.step_size = 0.0125;
    cfg.attack.iterations = 10;
    return cfg;
}

TrainConfig ikl_config(std::uint64_t seed) {
    TrainConfig cfg = desk_config(seed);
    cfg.loss = LossKind::IKL;
    cfg.loss_cfg.alpha = 20.0;
    cfg.loss_cfg.beta = 5.0;
    cfg.trades_lambda = 1.0;
    return cfg;
}

// ---- criteria -------------------------------------------------------------

void kl_equivalence() {
    const auto t0 = Clock::now();
    const auto r = check_kl_equivalence(1000, {2, 5, 10, 100}, 0, 1e-10);
    const double s = since(t0);
    verdict("kl-dkl-equivalence", r.passed && r.trials >= 4000 && s < 10.0, s,
            "trials=" + std::to_string(r.trials) + " C={2,5,10,100} max_abs_diff=" + fmt_e(r.max_abs_diff) +
                " tol=1e-10 budget=10s");
}

void gradient_oracles() {
    const auto t0 = Clock::now();
    bool ok = true;
    double worst_soft = 0.0;
    double worst_sat = 0.0;
    std::string failed;
    for (const auto& name : gradient_check_names()) {
        const auto soft = check_gradients(name, 20, {2, 5, 10}, 1, false, 1e-5);
        const auto sat = check_gradients(name, 20, {2, 5, 10}, 2, true, 1e-4);
        worst_soft = std::max(worst_soft, soft.max_abs_diff);
        worst_sat = std::max(worst_sat, sat.max_abs_diff);
        if (!soft.passed || !sat.passed) {
            ok = false;
            failed += " " + name;
        }
    }
    const double s = since(t0);
    verdict("gradient-oracles", ok && s < 30.0, s,
            std::to_string(gradient_check_names().size()) + " losses, h=1e-5, worst soft=" + fmt_e(worst_soft) +
                " (tol 1e-5 rel) saturated=" + fmt_e(worst_sat) + " (tol 1e-4 rel)" +
                (failed.empty() ? "" : " failed:" + failed));
}

std::vector<Matrix> outer_weights(const Matrix& scores) {
    std::vector<Matrix> w;
    w.reserve(scores.rows());
    for (std::size_t b = 0; b < scores.rows(); ++b) {
        const auto row = scores.row(b);
        Matrix m(scores.cols(), scores.cols());
        for (std::size_t j = 0; j < scores.cols(); ++j) {
            for (std::size_t k = 0; k < scores.cols(); ++k) {
                m(j, k) = row[j] * row[k];
            }
        }
        w.push_back(std::move(m));
    }
    return w;
}

void wmse_identity() {
    const auto t0 = Clock::now();
    const auto small = check_wmse_identity(20, {2, 5, 10, 100}, 3, 1e-10);

    const std::size_t batch = 64;
    const std::size_t classes = 1000;
    Rng rng(5, 1);
    Matrix o_m(batch, classes);
    Matrix o_n(batch, classes);
    Matrix scores(batch, classes);
    for (double& v : o_m.values()) {
        v = rng.normal();
    }
    for (double& v : o_n.values()) {
        v = rng.normal();
    }
    for (double& v : scores.values()) {
        v = rng.normal();
    }
    scores = softmax_rows(scores);

    const std::size_t before = g_live.load();
    g_peak.store(before);
    LossOutput eff = wmse_efficient(o_m, o_n, scores);
    const std::size_t eff_peak = g_peak.load() - before;

    const std::size_t before_dense = g_live.load();
    g_peak.store(before_dense);
    double value_diff = 0.0;
    double grad_diff = 0.0;
    {
        const auto w = outer_weights(scores);
        const LossOutput dense = wmse_dense(o_m, o_n, w);
        value_diff = std::abs(dense.value - eff.value);
        grad_diff = std::max(max_abs_diff(dense.grad_m, eff.grad_m), max_abs_diff(dense.grad_n, eff.grad_n));
    }
    const std::size_t dense_peak = g_peak.load() - before_dense;

    const double budget = 2.0 * static_cast<double>(batch * classes) * sizeof(double);
    const double eff_ratio = static_cast<double>(eff_peak) / budget;
    const bool ok = small.passed && value_diff <= 1e-10 && grad_diff <= 1e-10 && eff_peak <= budget + 4096;
    const double s = since(t0);
    verdict("wmse-identity", ok && s < 10.0, s,
            "C<=100 max_abs_diff=" + fmt_e(small.max_abs_diff) + "; C=1000 B=64 value_diff=" + fmt_e(value_diff) +
                " grad_diff=" + fmt_e(grad_diff) + "; heap peak efficient=" + std::to_string(eff_peak) +
                "B (" + fmt_f(eff_ratio, 3) + "x of 2BC doubles, gradients included) dense=" +
                std::to_string(dense_peak) + "B");
}

void asymmetry() {
    const auto t0 = Clock::now();
    const auto analytic = check_asymmetry(100, 4, 1e-10, {2, 5, 10, 100});
    const auto kd = check_gradients("dkl_kd", 20, {2, 5, 10}, 6, false, 1e-5);
    const auto ba = check_gradients("ikl_kd", 20, {2, 5, 10}, 7, false, 1e-5);
    const double s = since(t0);
    verdict("asymmetry-mechanics", analytic.passed && kd.passed && ba.passed, s,
            "analytic max_abs_diff=" + fmt_e(analytic.max_abs_diff) + " (tol 1e-10); finite differences detached=" +
                fmt_e(kd.max_abs_diff) + " break_asymmetry=" + fmt_e(ba.max_abs_diff));
}

struct TrainedModel {
    std::string label;
    MlpParams params;
    const Dataset* test;
    std::uint64_t seed;
};

std::deque<Task> g_tasks;

double metric_diff(const TrainResult& a, const TrainResult& b) {
    if (a.metrics.size() != b.metrics.size()) {
        return INFINITY;
    }
    double worst = 0.0;
    for (std::size_t e = 0; e < a.metrics.size(); ++e) {
        const auto& x = a.metrics[e];
        const auto& y = b.metrics[e];
        for (auto [u, v] : {std::pair{x.loss_ce, y.loss_ce}, {x.lr, y.lr}, {x.train_acc, y.train_acc},
                            {x.clean_acc, y.clean_acc}, {x.robust_acc.value_or(0.0), y.robust_acc.value_or(0.0)},
                            {x.agreement.value_or(0.0), y.agreement.value_or(0.0)}, {x.mean_margin, y.mean_margin}}) {
            worst = std::max(worst, std::abs(u - v));
        }
        for (std::size_t k = 0; k < x.margins.size(); ++k) {
            worst = std::max(worst, std::abs(x.margins[k] - y.margins[k]));
        }
    }
    return worst;
}

double param_diff(const TrainResult& a, const TrainResult& b) {
    double worst = 0.0;
    for (std::size_t l = 0; l < a.params.layers.size(); ++l) {
        worst = std::max(worst, max_abs_diff(a.params.layers[l].weight, b.params.layers[l].weight));
        for (std::size_t k = 0; k < a.params.layers[l].bias.size(); ++k) {
            worst = std::max(worst, std::abs(a.params.layers[l].bias[k] - b.params.layers[l].bias[k]));
        }
    }
    return worst;
}

void training_equivalence(std::vector<TrainedModel>& models) {
    const auto t0 = Clock::now();
    const Task& task = g_tasks.emplace_back(desk_task(100));

    TrainConfig teacher_cfg = desk_config(11);
    teacher_cfg.hidden = {128, 128};
    teacher_cfg.loss = LossKind::CrossEntropy;
    const auto teacher = train_baseline(teacher_cfg, task.train, task.test);
    const Matrix teacher_logits = predict_logits(teacher.params, task.train.features);

    TrainConfig kd = desk_config(3);
    kd.epochs = 3;
    kd.hidden = {16};
    kd.loss = LossKind::KL;
    const auto kd_kl = train_distill(kd, task.train, task.test, teacher_logits);
    kd.loss = LossKind::DKL;
    const auto kd_dkl = train_distill(kd, task.train, task.test, teacher_logits);

    TrainConfig at = desk_config(3);
    at.epochs = 3;
    at.loss = LossKind::KL;
    const auto at_kl = train_adversarial(at, task.train, task.test);
    at.loss = LossKind::DKL;
    const auto at_dkl = train_adversarial(at, task.train, task.test);

    const double kd_m = metric_diff(kd_kl, kd_dkl);
    const double at_m = metric_diff(at_kl, at_dkl);
    const double kd_p = param_diff(kd_kl, kd_dkl);
    const double at_p = param_diff(at_kl, at_dkl);
    const bool ok = kd_m < 1e-6 && at_m < 1e-6 && kd_p < 1e-6 && at_p < 1e-6;
    models.push_back({"teacher", teacher.params, &task.test, 11});
    models.push_back({"kd-kl", kd_kl.params, &task.test, 3});
    models.push_back({"kd-dkl", kd_dkl.params, &task.test, 3});
    models.push_back({"at-kl-3ep", at_kl.params, &task.test, 3});
    verdict("training-equivalence", ok, since(t0),
            "3 epochs, KL vs DKL(1,1): KD metrics=" + fmt_e(kd_m) + " params=" + fmt_e(kd_p) +
                "; AT metrics=" + fmt_e(at_m) + " params=" + fmt_e(at_p) + " (tol 1e-6)");
}

void margin_tendency(std::vector<TrainedModel>& models) {
    const auto t0 = Clock::now();
    double trades_sum = 0.0;
    double ikl_sum = 0.0;
    std::string per_seed;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Task& task = g_tasks.emplace_back(desk_task(100 + s));
        TrainConfig trades = desk_config(s);
        trades.loss = LossKind::KL;
        const auto a = train_adversarial(trades, task.train, task.test);
        const auto b = train_adversarial(ikl_config(s), task.train, task.test);
        const double ma = a.metrics.back().mean_margin;
        const double mb = b.metrics.back().mean_margin;
        trades_sum += ma;
        ikl_sum += mb;
        per_seed += " s" + std::to_string(s) + ":" + fmt_f(mb) + "/" + fmt_f(ma) + "(rob " +
                    fmt_f(b.metrics.back().robust_acc.value_or(NAN), 3) + "/" +
                    fmt_f(a.metrics.back().robust_acc.value_or(NAN), 3) + ")";
        models.push_back({"trades-s" + std::to_string(s), a.params, &task.test, s});
        models.push_back({"ikl-s" + std::to_string(s), b.params, &task.test, s});
    }
    const double trades_mean = trades_sum / 5.0;
    const double ikl_mean = ikl_sum / 5.0;
    verdict("margin-tendency", ikl_mean >= trades_mean, since(t0),
            "mean class margin IKL-AT=" + fmt_f(ikl_mean) + " TRADES-KL=" + fmt_f(trades_mean) +
                "; per seed IKL/TRADES:" + per_seed);
}

void robustness_sanity(const std::vector<TrainedModel>& models) {
    const auto t0 = Clock::now();
    const double eps0 = 0.05;
    const double slack = 0.01;
    bool ok = true;
    std::string worst;
    double worst_rise = -1.0;
    for (const auto& m : models) {
        double prev = 2.0;
        double clean = 0.0;
        for (double f : {0.0, 0.5, 1.0, 2.0}) {
            AttackConfig atk;
            atk.epsilon = f * eps0;
            atk.step_size = f > 0.0 ? atk.epsilon / 4.0 : eps0 / 4.0;
            atk.iterations = 10;
            const auto ev = evaluate(m.params, *m.test, &atk, m.seed);
            const double robust = ev.robust_acc.value_or(NAN);
            clean = ev.clean_acc;
            if (!(robust <= clean) || (f == 0.0 && robust != clean) || robust > prev + slack) {
                ok = false;
                worst += " " + m.label;
            }
            if (prev <= 1.0) {
                worst_rise = std::max(worst_rise, robust - prev);
            }
            prev = robust;
        }
    }
    verdict("robustness-sanity", ok, since(t0),
            std::to_string(models.size()) + " models, eps in {0, 0.025, 0.05, 0.1}: robust<=clean, robust(0)=clean, "
            "largest rise between steps=" + fmt_f(worst_rise) + " (slack " + fmt_f(slack, 2) + ")" +
                (worst.empty() ? "" : " violations:" + worst));
}

// ---- determinism through the CLI ------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const fs::path& dir, const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && '" DKL_CLI_PATH "' " + args + " > /dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

void determinism() {
    const auto t0 = Clock::now();
    const fs::path dir = fs::temp_directory_path() / "dkl_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "run.ini") << "[data]\nclasses = 6\ndim = 8\nper_class = 60\n"
                                      "[model]\nhidden = 24\n"
                                      "[train]\nloss = ikl\nepochs = 3\n"
                                      "[loss]\nalpha = 20\nbeta = 5\n"
                                      "[adversarial]\nlambda = 1\n"
                                      "[attack]\nepsilon = 0.05\nstep_size = 0.0125\n";
    const std::vector<std::string> runs{
        "verify --classes 2,5 --trials 50 --fd_trials 2 --out verify",
        "train baseline --config run.ini --loss ce --out teacher",
        "train distill --config run.ini --loss dkl --hidden 8 --teacher_params teacher/params.bin --out distill",
        "train adversarial --config run.ini --out adversarial",
        "eval --config run.ini --params adversarial/params.bin --stats adversarial/stats.txt --margins --out eval",
        "bench-wmse --classes 2,10,100 --repeats 1 --out bench",
    };
    bool ok = true;
    std::size_t compared = 0;
    std::string detail;
    for (const auto& args : runs) {
        const std::string out = args.substr(args.rfind(' ') + 1);
        if (run_cli(dir, args) != 0 || run_cli(dir, "rerun --manifest " + out + "/manifest.json --out " + out + "-again") != 0) {
            ok = false;
            detail += " exit:" + out;
            continue;
        }
        for (const auto& entry : fs::directory_iterator(dir / out)) {
            const auto name = entry.path().filename();
            if (name == "manifest.json") {
                continue;
            }
            ++compared;
            if (slurp(entry.path()) != slurp(dir / (out + "-again") / name)) {
                ok = false;
                detail += " differs:" + out + "/" + name.string();
            }
        }
    }
    verdict("determinism", ok && compared > 0, since(t0),
            std::to_string(runs.size()) + " commands re-run from their manifests, " + std::to_string(compared) +
                " output files compared byte for byte" + detail);
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    kl_equivalence();
    gradient_oracles();
    wmse_identity();
    asymmetry();
    std::vector<TrainedModel> models;
    training_equivalence(models);
    margin_tendency(models);
    robustness_sanity(models);
    determinism();
    std::printf("%d of 8 criteria failed, total %.1fs\n", g_failures, since(t0));
    return g_failures == 0 ? 0 : 1;
}
