// dkl: verification, training, evaluation and benchmarking front end over the
// C API in libdkl.

#include <dkl/dkl.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "settings.hpp"

namespace fs = std::filesystem;
using dklcli::Settings;
using dklcli::UsageError;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

struct ApiError : std::runtime_error {
    dkl_status status;
    ApiError(dkl_status s, const std::string& what) : std::runtime_error(what), status(s) {}
};

/// Verification failures, diverged runs and the like: exit 1.
struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void check(dkl_status status) {
    if (status != DKL_OK) {
        throw ApiError(status, std::string(dkl_status_name(status)) + ": " + dkl_last_error());
    }
}

int exit_code(dkl_status status) {
    switch (status) {
        case DKL_OK: return kExitOk;
        case DKL_ERR_INVALID_ARGUMENT:
        case DKL_ERR_SHAPE_MISMATCH:
        case DKL_ERR_IO:
        case DKL_ERR_FORMAT: return kExitUsage;
        default: return kExitFailed;
    }
}

struct DatasetFree {
    void operator()(dkl_dataset* p) const { dkl_dataset_free(p); }
};
struct ModelFree {
    void operator()(dkl_model* p) const { dkl_model_free(p); }
};
struct StatsFree {
    void operator()(dkl_stats* p) const { dkl_stats_free(p); }
};
struct ReportFree {
    void operator()(dkl_report* p) const { dkl_report_free(p); }
};
using Dataset = std::unique_ptr<dkl_dataset, DatasetFree>;
using Model = std::unique_ptr<dkl_model, ModelFree>;
using Stats = std::unique_ptr<dkl_stats, StatsFree>;
using Report = std::unique_ptr<dkl_report, ReportFree>;

struct Shape {
    size_t rows = 0;
    size_t dim = 0;
    size_t classes = 0;
};

Shape shape_of(const dkl_dataset* data) {
    Shape s;
    check(dkl_dataset_shape(data, &s.rows, &s.dim, &s.classes));
    return s;
}

const std::vector<std::string>& sections_for(const std::string& command) {
    static const std::vector<std::string> verify{"verify"};
    static const std::vector<std::string> train{"data", "model", "train", "loss", "attack", "stats", "kd", "adversarial"};
    static const std::vector<std::string> eval{"data", "train", "attack", "eval"};
    static const std::vector<std::string> bench{"bench"};
    if (command == "verify") {
        return verify;
    }
    if (command == "train") {
        return train;
    }
    if (command == "eval") {
        return eval;
    }
    if (command == "bench-wmse") {
        return bench;
    }
    throw UsageError("unknown command '" + command + "'");
}

std::string seed_key(const std::string& command) {
    if (command == "verify") {
        return "verify.seed";
    }
    if (command == "bench-wmse") {
        return "bench.seed";
    }
    return "train.seed";
}

struct Run {
    std::string command;
    std::string mode;  // train only
    Settings settings;
    fs::path out;
    std::string rerun_of;
};

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw ApiError(DKL_ERR_IO, "cannot write '" + path.string() + "'");
    }
}

void write_manifest(const Run& run) {
    ordered_json m;
    m["tool"] = "dkl";
    m["version"] = dkl_version();
    m["command"] = run.command;
    m["mode"] = run.mode;
    m["seed"] = run.settings.uint(seed_key(run.command));
    m["config"] = run.settings.to_json(sections_for(run.command));
    m["created_utc"] = utc_now();
    m["rerun_of"] = run.rerun_of.empty() ? ordered_json(nullptr) : ordered_json(run.rerun_of);
    write_text(run.out / "manifest.json", m.dump(2) + "\n");
}

ordered_json number_or_null(double v) { return std::isnan(v) ? ordered_json(nullptr) : ordered_json(v); }

// ---- verify ---------------------------------------------------------------

int run_verify(const Run& run) {
    const Settings& s = run.settings;
    const auto classes = s.uint_list("verify.classes");
    const auto seed = s.uint("verify.seed");
    const double tol = s.real("verify.tolerance");
    const size_t check_trials = s.uint("verify.check_trials");
    std::vector<size_t> fd_classes;
    for (size_t c : classes) {
        if (c <= s.uint("verify.fd_max_classes")) {
            fd_classes.push_back(c);
        }
    }

    std::string text;
    std::vector<std::string> failed;
    auto section = [&](const std::string& name, dkl_report* raw) {
        Report report(raw);
        const bool ok = dkl_report_passed(report.get()) != 0;
        text += dkl_report_text(report.get());
        std::printf("%-32s %s  max_abs_diff=%.3e\n", name.c_str(), ok ? "PASS" : "FAIL",
                    dkl_report_max_abs_diff(report.get()));
        if (!ok) {
            failed.push_back(name);
        }
    };

    dkl_report* raw = nullptr;
    check(dkl_verify_kl_equivalence(s.uint("verify.trials"), classes.data(), classes.size(), seed, tol, &raw));
    section("kl_equivalence", raw);
    check(dkl_verify_asymmetry(check_trials, classes.data(), classes.size(), seed, tol, &raw));
    section("asymmetry", raw);
    check(dkl_verify_wmse_identity(check_trials, classes.data(), classes.size(), seed, tol, &raw));
    section("wmse_identity", raw);
    if (fd_classes.empty()) {
        std::printf("%-32s skipped (no class count <= %llu)\n", "gradients",
                    static_cast<unsigned long long>(s.uint("verify.fd_max_classes")));
    } else {
        for (size_t i = 0; i < dkl_gradient_check_count(); ++i) {
            const std::string name = dkl_gradient_check_name(i);
            for (int saturated = 0; saturated < 2; ++saturated) {
                const double t = saturated ? s.real("verify.saturated_tolerance") : s.real("verify.fd_tolerance");
                check(dkl_verify_gradients(name.c_str(), s.uint("verify.fd_trials"), fd_classes.data(),
                                           fd_classes.size(), seed, saturated, t, &raw));
                section("gradients." + name + (saturated ? ".saturated" : ".soft"), raw);
            }
        }
    }

    text += std::string("verify.passed=") + (failed.empty() ? "true" : "false") + "\n";
    write_text(run.out / "report.txt", text);
    if (!failed.empty()) {
        std::string list;
        for (const auto& f : failed) {
            list += (list.empty() ? "" : ", ") + f;
        }
        throw Failure("verification failed: " + list);
    }
    std::printf("verify: all checks passed\n");
    return kExitOk;
}

// ---- data -----------------------------------------------------------------

struct Splits {
    Dataset all;
    Dataset train;
    Dataset test;
};

Splits load_splits(const Settings& s) {
    Splits out;
    dkl_dataset* raw = nullptr;
    const std::string& source = s.text("data.source");
    if (source == "gaussian") {
        check(dkl_dataset_gaussian(s.uint("data.classes"), s.uint("data.dim"), s.uint("data.per_class"),
                                   s.real("data.spread"), s.uint("data.seed"), &raw));
    } else if (source == "csv") {
        if (s.text("data.csv").empty()) {
            throw UsageError("data.source = csv needs data.csv");
        }
        check(dkl_dataset_load_csv(s.text("data.csv").c_str(), &raw));
    } else {
        throw UsageError("data.source must be gaussian or csv, got '" + source + "'");
    }
    out.all.reset(raw);
    dkl_dataset* tr = nullptr;
    dkl_dataset* te = nullptr;
    check(dkl_dataset_split(out.all.get(), s.real("data.test_fraction"), s.uint("data.split_seed"), &tr, &te));
    out.train.reset(tr);
    out.test.reset(te);
    return out;
}

dkl_attack_config attack_from(const Settings& s) {
    dkl_attack_config a;
    a.epsilon = s.real("attack.epsilon");
    a.step_size = s.real("attack.step_size");
    a.iterations = s.uint("attack.iterations");
    a.random_start = s.flag("attack.random_start") ? 1 : 0;
    return a;
}

std::vector<double> model_logits(const dkl_model* model, const dkl_dataset* data, size_t classes) {
    std::vector<double> out(shape_of(data).rows * classes);
    check(dkl_model_logits(model, data, out.data()));
    return out;
}

// ---- train ----------------------------------------------------------------

dkl_loss_kind loss_from(const std::string& name) {
    if (name == "ce") {
        return DKL_LOSS_CE;
    }
    if (name == "kl") {
        return DKL_LOSS_KL;
    }
    if (name == "dkl") {
        return DKL_LOSS_DKL;
    }
    if (name == "ikl") {
        return DKL_LOSS_IKL;
    }
    if (name == "jsd") {
        return DKL_LOSS_JSD;
    }
    throw UsageError("train.loss must be one of ce, kl, dkl, ikl, jsd; got '" + name + "'");
}

dkl_train_config train_config_from(const Settings& s) {
    dkl_train_config c;
    dkl_train_config_defaults(&c);
    const auto hidden = s.uint_list("model.hidden");
    if (hidden.size() > DKL_MAX_HIDDEN) {
        throw UsageError("model.hidden allows at most " + std::to_string(DKL_MAX_HIDDEN) + " layers");
    }
    c.n_hidden = hidden.size();
    std::copy(hidden.begin(), hidden.end(), c.hidden);
    c.loss = loss_from(s.text("train.loss"));
    c.loss_cfg.alpha = s.real("loss.alpha");
    c.loss_cfg.beta = s.real("loss.beta");
    c.loss_cfg.detach_m = s.flag("loss.detach_m") ? 1 : 0;
    c.loss_cfg.break_asymmetry = s.flag("loss.break_asymmetry") ? 1 : 0;
    c.loss_cfg.class_wise = s.flag("loss.class_wise") ? 1 : 0;
    c.attack = attack_from(s);
    c.epochs = s.uint("train.epochs");
    c.batch_size = s.uint("train.batch_size");
    c.lr = s.real("train.lr");
    c.momentum = s.real("train.momentum");
    c.weight_decay = s.real("train.weight_decay");
    c.seed = s.uint("train.seed");
    c.stats_temperature = s.real("stats.temperature");
    c.stats_momentum = s.real("stats.momentum");
    c.kd_temperature = s.real("kd.temperature");
    c.hard_label_weight = s.real("kd.hard_label_weight");
    c.trades_lambda = s.real("adversarial.lambda");
    c.eps_warmup_fraction = s.real("adversarial.eps_warmup_fraction");
    c.eval_robust = s.flag("adversarial.eval_robust") ? 1 : 0;
    return c;
}

struct TeacherLogits {
    std::vector<double> values;
    size_t rows = 0;
    size_t classes = 0;
};

TeacherLogits teacher_logits(const Settings& s, const dkl_dataset* train) {
    TeacherLogits t;
    const std::string& logits_path = s.text("kd.teacher_logits");
    const std::string& params_path = s.text("kd.teacher_params");
    if (!logits_path.empty()) {
        check(dkl_logits_read(logits_path.c_str(), &t.rows, &t.classes, nullptr));
        t.values.resize(t.rows * t.classes);
        check(dkl_logits_read(logits_path.c_str(), &t.rows, &t.classes, t.values.data()));
        return t;
    }
    if (!params_path.empty()) {
        dkl_model* raw = nullptr;
        check(dkl_model_load(params_path.c_str(), &raw));
        Model teacher(raw);
        size_t dims[DKL_MAX_HIDDEN + 2];
        size_t n = 0;
        check(dkl_model_dims(teacher.get(), dims, DKL_MAX_HIDDEN + 2, &n));
        t.rows = shape_of(train).rows;
        t.classes = dims[n - 1];
        t.values = model_logits(teacher.get(), train, t.classes);
        return t;
    }
    throw UsageError("train distill needs kd.teacher_params or kd.teacher_logits");
}

void metrics_sink(const char* record, void* user) {
    auto* out = static_cast<std::ofstream*>(user);
    *out << record << '\n';
    out->flush();
}

int run_train(const Run& run) {
    const Settings& s = run.settings;
    const dkl_train_mode mode = run.mode == "baseline"  ? DKL_MODE_BASELINE
                                : run.mode == "distill" ? DKL_MODE_DISTILL
                                : run.mode == "adversarial"
                                    ? DKL_MODE_ADVERSARIAL
                                    : throw UsageError("train mode must be baseline, distill or adversarial");
    const dkl_train_config cfg = train_config_from(s);
    const Splits data = load_splits(s);
    TeacherLogits teacher;
    if (mode == DKL_MODE_DISTILL) {
        teacher = teacher_logits(s, data.train.get());
    }

    std::ofstream metrics(run.out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) {
        throw ApiError(DKL_ERR_IO, "cannot write '" + (run.out / "metrics.jsonl").string() + "'");
    }
    dkl_model* model_raw = nullptr;
    dkl_stats* stats_raw = nullptr;
    dkl_train_summary summary{};
    check(dkl_train(mode, &cfg, data.train.get(), data.test.get(), teacher.values.empty() ? nullptr : teacher.values.data(),
                    teacher.rows, teacher.classes, metrics_sink, &metrics, &model_raw, &stats_raw, &summary));
    Model model(model_raw);
    Stats stats(stats_raw);

    check(dkl_model_save(model.get(), (run.out / "params.bin").c_str()));
    check(dkl_stats_save(stats.get(), (run.out / "stats.txt").c_str()));
    const Shape tr = shape_of(data.train.get());
    const auto logits = model_logits(model.get(), data.train.get(), tr.classes);
    check(dkl_logits_write((run.out / "train_logits.bin").c_str(), tr.rows, tr.classes, logits.data()));

    std::printf("train %s: loss=%s epochs=%zu steps=%zu\n", run.mode.c_str(), s.text("train.loss").c_str(),
                summary.epochs, summary.steps);
    std::printf("train_acc=%.4f clean_acc=%.4f robust_acc=%s mean_margin=%.6f\n", summary.train_acc,
                summary.clean_acc,
                std::isnan(summary.robust_acc) ? "n/a" : std::to_string(summary.robust_acc).c_str(),
                summary.mean_margin);
    std::printf("outputs in %s\n", run.out.c_str());
    return kExitOk;
}

// ---- eval -----------------------------------------------------------------

int run_eval(const Run& run) {
    const Settings& s = run.settings;
    if (s.text("eval.params").empty()) {
        throw UsageError("eval needs --params FILE");
    }
    dkl_model* raw = nullptr;
    check(dkl_model_load(s.text("eval.params").c_str(), &raw));
    Model model(raw);
    const Splits data = load_splits(s);
    const std::string& split = s.text("eval.split");
    const dkl_dataset* target = split == "test"    ? data.test.get()
                                : split == "train" ? data.train.get()
                                : split == "all"   ? data.all.get()
                                                   : throw UsageError("eval.split must be test, train or all");
    const Shape shape = shape_of(target);
    const dkl_attack_config attack = attack_from(s);
    dkl_eval_result result{};
    std::vector<double> margins(shape.classes);
    check(dkl_evaluate(model.get(), target, s.flag("eval.attack") ? &attack : nullptr, s.uint("train.seed"), &result,
                       margins.data()));

    std::string margin_source = "logits";
    double mean_margin = result.mean_margin;
    if (!s.text("eval.stats").empty()) {
        dkl_stats* st = nullptr;
        check(dkl_stats_load(s.text("eval.stats").c_str(), &st));
        Stats stats(st);
        margins.assign(dkl_stats_classes(stats.get()), 0.0);
        check(dkl_stats_margins(stats.get(), margins.data(), &mean_margin));
        margin_source = "stats";
    }

    ordered_json j;
    j["split"] = split;
    j["rows"] = shape.rows;
    j["clean_acc"] = result.clean_acc;
    j["robust_acc"] = number_or_null(result.robust_acc);
    j["margin_source"] = margin_source;
    j["mean_margin"] = mean_margin;
    j["margins"] = margins;
    write_text(run.out / "eval.json", j.dump(2) + "\n");

    std::printf("split=%s rows=%zu clean_acc=%.6f robust_acc=%s\n", split.c_str(), shape.rows, result.clean_acc,
                std::isnan(result.robust_acc) ? "n/a" : std::to_string(result.robust_acc).c_str());
    if (s.flag("eval.margins")) {
        std::printf("%6s  %12s   (%s)\n", "class", "margin", margin_source.c_str());
        for (size_t y = 0; y < margins.size(); ++y) {
            std::printf("%6zu  %12.6f\n", y, margins[y]);
        }
        std::printf("%6s  %12.6f\n", "mean", mean_margin);
    }
    return kExitOk;
}

// ---- bench ----------------------------------------------------------------

int run_bench(const Run& run) {
    const Settings& s = run.settings;
    const auto classes = s.uint_list("bench.classes");
    std::vector<dkl_bench_row> rows(classes.size());
    check(dkl_bench_wmse(classes.data(), classes.size(), s.uint("bench.batch"), s.uint("bench.repeats"),
                         s.uint("bench.seed"), s.real("bench.tolerance"), rows.data()));

    ordered_json list = ordered_json::array();
    bool ok = true;
    std::printf("%6s %6s %12s %12s %14s %14s %11s %11s %s\n", "C", "B", "dense_s", "efficient_s", "dense_doubles",
                "effic_doubles", "value_diff", "grad_diff", "status");
    for (const auto& r : rows) {
        const bool row_ok = r.values_equal && r.efficient_within_budget;
        ok = ok && row_ok;
        std::printf("%6zu %6zu %12.6f %12.6f %14zu %14zu %11.3e %11.3e %s\n", r.classes, r.batch, r.dense_seconds,
                    r.efficient_seconds, r.dense_transient_doubles, r.efficient_transient_doubles, r.value_diff,
                    r.grad_diff, row_ok ? "ok" : "FAIL");
        ordered_json j;
        j["classes"] = r.classes;
        j["batch"] = r.batch;
        j["dense_transient_doubles"] = r.dense_transient_doubles;
        j["efficient_transient_doubles"] = r.efficient_transient_doubles;
        j["efficient_budget_doubles"] = 2 * r.batch * r.classes;
        j["value_diff"] = r.value_diff;
        j["grad_diff"] = r.grad_diff;
        j["values_equal"] = r.values_equal != 0;
        j["efficient_within_budget"] = r.efficient_within_budget != 0;
        list.push_back(j);
    }
    ordered_json doc;
    doc["tolerance"] = s.real("bench.tolerance");
    doc["rows"] = list;
    write_text(run.out / "bench.json", doc.dump(2) + "\n");
    if (!ok) {
        throw Failure("bench-wmse: dense and efficient paths disagree or the efficient path exceeds 2*B*C doubles");
    }
    return kExitOk;
}

// ---- dispatch -------------------------------------------------------------

int execute(Run& run) {
    fs::create_directories(run.out);
    write_manifest(run);
    if (run.command == "verify") {
        return run_verify(run);
    }
    if (run.command == "train") {
        return run_train(run);
    }
    if (run.command == "eval") {
        return run_eval(run);
    }
    return run_bench(run);
}

fs::path output_dir(const std::string& flag) {
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("DKL_OUTPUT_DIR"); env && *env) {
        return env;
    }
    return "dkl-out";
}

Run load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot read manifest '" + path + "'");
    }
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("manifest '" + path + "' is not valid JSON: " + e.what());
    }
    if (!m.is_object() || !m.contains("command") || !m.contains("config")) {
        throw UsageError("manifest '" + path + "' lacks command or config");
    }
    Run run;
    run.command = m.at("command").get<std::string>();
    run.mode = m.value("mode", "");
    sections_for(run.command);
    run.settings.load_json(m.at("config"));
    run.rerun_of = path;
    return run;
}

std::string keys_help(const std::string& command) {
    std::ostringstream out;
    out << "\nSettings (config file [section] key = value, or --section.key VALUE / --key VALUE):\n";
    for (const auto& sec : sections_for(command)) {
        for (const auto& spec : dklcli::schema()) {
            if (spec.key.rfind(sec + ".", 0) == 0) {
                out << "  " << spec.key << " = " << (spec.fallback.empty() ? "\"\"" : spec.fallback);
                if (!spec.help.empty()) {
                    out << "    " << spec.help;
                }
                out << '\n';
            }
        }
    }
    return out.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KL / DKL / IKL losses: verification, desk-scale training, evaluation, benchmarks", "dkl"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(dkl_version()));

    std::string config_path;
    std::string out_flag;
    std::string manifest_path;
    auto with_common = [&](CLI::App* sub, const std::string& command, bool config_required) {
        auto* opt = sub->add_option("--config", config_path, "Settings file")->check(CLI::ExistingFile);
        if (config_required) {
            opt->required();
        }
        sub->add_option("--out", out_flag, "Output directory (default: $DKL_OUTPUT_DIR or ./dkl-out)");
        sub->allow_extras();
        sub->footer(keys_help(command));
    };

    auto* verify = app.add_subcommand("verify", "Machine-check the KL/DKL equivalence and every analytic gradient");
    with_common(verify, "verify", false);
    auto* train = app.add_subcommand("train", "Train a model");
    train->require_subcommand(1);
    std::vector<CLI::App*> train_modes;
    for (const char* mode : {"baseline", "distill", "adversarial"}) {
        auto* sub = train->add_subcommand(mode, std::string("Train in ") + mode + " mode");
        with_common(sub, "train", true);
        train_modes.push_back(sub);
    }
    auto* eval = app.add_subcommand("eval", "Clean/robust accuracy and class margins of saved params");
    with_common(eval, "eval", false);
    auto* bench = app.add_subcommand("bench-wmse", "Dense vs memory-efficient wMSE: equality, time, memory");
    with_common(bench, "bench-wmse", false);
    auto* rerun = app.add_subcommand("rerun", "Repeat a run from its manifest");
    rerun->add_option("--manifest", manifest_path, "manifest.json of an earlier run")->required();
    rerun->add_option("--out", out_flag, "Output directory (default: $DKL_OUTPUT_DIR or ./dkl-out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        Run run;
        if (rerun->parsed()) {
            run = load_manifest(manifest_path);
        } else {
            CLI::App* leaf = nullptr;
            if (verify->parsed()) {
                run.command = "verify";
                leaf = verify;
            } else if (eval->parsed()) {
                run.command = "eval";
                leaf = eval;
            } else if (bench->parsed()) {
                run.command = "bench-wmse";
                leaf = bench;
            } else {
                run.command = "train";
                for (auto* sub : train_modes) {
                    if (sub->parsed()) {
                        run.mode = sub->get_name();
                        leaf = sub;
                    }
                }
            }
            if (!config_path.empty()) {
                run.settings.load_file(config_path);
            }
            run.settings.apply_overrides(leaf->remaining(), sections_for(run.command));
        }
        run.out = output_dir(out_flag);
        return execute(run);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "dkl: %s\n", e.what());
        return kExitUsage;
    } catch (const ApiError& e) {
        std::fprintf(stderr, "dkl: %s\n", e.what());
        return exit_code(e.status);
    } catch (const Failure& e) {
        std::fprintf(stderr, "dkl: %s\n", e.what());
        return kExitFailed;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "dkl: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dkl: internal error: %s\n", e.what());
        return kExitFailed;
    }
}
