#include "dkl/dkl.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <new>
#include <string>
#include <vector>

#include "bench.hpp"
#include "class_stats.hpp"
#include "data.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "trainers.hpp"

struct dkl_dataset {
    dkl::Dataset data;
};

struct dkl_model {
    dkl::MlpParams params;
};

struct dkl_stats {
    dkl::ClassStatsTable table;
};

struct dkl_report {
    dkl::GradReport report;
    std::string text;
};

namespace {

thread_local std::string last_error;

dkl_status to_status(dkl::ErrorCode code) {
    switch (code) {
        case dkl::ErrorCode::InvalidArgument: return DKL_ERR_INVALID_ARGUMENT;
        case dkl::ErrorCode::ShapeMismatch: return DKL_ERR_SHAPE_MISMATCH;
        case dkl::ErrorCode::Io: return DKL_ERR_IO;
        case dkl::ErrorCode::Format: return DKL_ERR_FORMAT;
        case dkl::ErrorCode::Numeric: return DKL_ERR_NUMERIC;
        case dkl::ErrorCode::Diverged: return DKL_ERR_DIVERGED;
    }
    return DKL_ERR_INTERNAL;
}

template <class Fn>
dkl_status guarded(Fn&& fn) {
    try {
        last_error.clear();
        fn();
        return DKL_OK;
    } catch (const dkl::Error& e) {
        last_error = e.what();
        return to_status(e.code());
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return DKL_ERR_OUT_OF_MEMORY;
    } catch (const std::exception& e) {
        last_error = e.what();
        return DKL_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown failure";
        return DKL_ERR_INTERNAL;
    }
}

void need(const void* ptr, const char* what) {
    dkl::require(ptr != nullptr, dkl::ErrorCode::InvalidArgument, std::string(what) + " is null");
}

dkl::Matrix copy_in(const double* values, std::size_t rows, std::size_t cols) {
    dkl::Matrix m(rows, cols);
    if (rows * cols > 0) {
        std::memcpy(m.data(), values, rows * cols * sizeof(double));
    }
    return m;
}

void copy_out(const dkl::Matrix& m, double* out) {
    if (out && m.size() > 0) {
        std::memcpy(out, m.data(), m.size() * sizeof(double));
    }
}

std::vector<std::size_t> class_list(const std::size_t* classes, std::size_t n) {
    dkl::require(n > 0, dkl::ErrorCode::InvalidArgument, "class list is empty");
    need(classes, "class list");
    return {classes, classes + n};
}

dkl::LossConfig to_core(const dkl_loss_config& c) {
    dkl::LossConfig out;
    out.alpha = c.alpha;
    out.beta = c.beta;
    out.detach_m = c.detach_m != 0;
    out.break_asymmetry = c.break_asymmetry != 0;
    out.weight_source = c.class_wise ? dkl::WeightSource::ClassWise : dkl::WeightSource::SampleWise;
    return out;
}

dkl::AttackConfig to_core(const dkl_attack_config& a) {
    return {.epsilon = a.epsilon, .step_size = a.step_size, .iterations = a.iterations, .random_start = a.random_start != 0};
}

dkl_attack_config from_core(const dkl::AttackConfig& a) {
    return {a.epsilon, a.step_size, a.iterations, a.random_start ? 1 : 0};
}

dkl::LossKind to_core(dkl_loss_kind kind) {
    switch (kind) {
        case DKL_LOSS_CE: return dkl::LossKind::CrossEntropy;
        case DKL_LOSS_KL: return dkl::LossKind::KL;
        case DKL_LOSS_DKL: return dkl::LossKind::DKL;
        case DKL_LOSS_IKL: return dkl::LossKind::IKL;
        case DKL_LOSS_JSD: return dkl::LossKind::JSD;
    }
    dkl::fail(dkl::ErrorCode::InvalidArgument, "unknown loss kind " + std::to_string(static_cast<int>(kind)));
}

dkl::TrainConfig to_core(const dkl_train_config& c) {
    dkl::require(c.n_hidden <= DKL_MAX_HIDDEN, dkl::ErrorCode::InvalidArgument, "too many hidden layers");
    dkl::TrainConfig out;
    out.hidden.assign(c.hidden, c.hidden + c.n_hidden);
    out.loss = to_core(c.loss);
    out.loss_cfg = to_core(c.loss_cfg);
    out.attack = to_core(c.attack);
    out.epochs = c.epochs;
    out.batch_size = c.batch_size;
    out.lr = c.lr;
    out.momentum = c.momentum;
    out.weight_decay = c.weight_decay;
    out.seed = c.seed;
    out.stats_temperature = c.stats_temperature;
    out.stats_momentum = c.stats_momentum;
    out.kd_temperature = c.kd_temperature;
    out.hard_label_weight = c.hard_label_weight;
    out.trades_lambda = c.trades_lambda;
    out.eps_warmup_fraction = c.eps_warmup_fraction;
    out.eval_robust = c.eval_robust != 0;
    return out;
}

dkl::Matrix one_hot(std::span<const std::int32_t> labels, std::size_t classes) {
    dkl::Matrix m(labels.size(), classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        dkl::require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes, dkl::ErrorCode::InvalidArgument,
                     "label out of range");
        m(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    return m;
}

template <class T>
T* publish(T* object, T** out) {
    *out = object;
    return object;
}

dkl_status report_call(dkl_report** out, const std::function<dkl::GradReport()>& run) {
    return guarded([&] {
        need(out, "output report");
        auto* r = new dkl_report{run(), {}};
        r->text = r->report.to_text();
        publish(r, out);
    });
}

}  // namespace

extern "C" {

const char* dkl_version(void) { return "0.1.0"; }

const char* dkl_last_error(void) { return last_error.c_str(); }

const char* dkl_status_name(dkl_status status) {
    switch (status) {
        case DKL_OK: return "ok";
        case DKL_ERR_INVALID_ARGUMENT: return "invalid argument";
        case DKL_ERR_SHAPE_MISMATCH: return "shape mismatch";
        case DKL_ERR_IO: return "i/o error";
        case DKL_ERR_FORMAT: return "format error";
        case DKL_ERR_NUMERIC: return "numeric error";
        case DKL_ERR_DIVERGED: return "diverged";
        case DKL_ERR_OUT_OF_MEMORY: return "out of memory";
        case DKL_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

void dkl_loss_config_defaults(dkl_loss_config* cfg) {
    if (cfg) {
        *cfg = {1.0, 1.0, 0, 0, 0};
    }
}

dkl_status dkl_loss(dkl_loss_kind kind, const dkl_loss_config* cfg, size_t rows, size_t classes, const double* o_m,
                    const double* o_n, const int32_t* labels, const dkl_stats* stats, double* value, double* grad_m,
                    double* grad_n) {
    return guarded([&] {
        need(o_n, "o_n");
        need(value, "value");
        dkl::require(rows > 0 && classes >= 2, dkl::ErrorCode::InvalidArgument, "need rows >= 1 and classes >= 2");
        const dkl::Matrix n = copy_in(o_n, rows, classes);
        const std::span<const std::int32_t> y(labels, labels ? rows : 0);
        dkl::LossOutput out;
        if (kind == DKL_LOSS_CE) {
            need(labels, "labels");
            out = dkl::soft_ce(n, one_hot(y, classes));
        } else {
            need(o_m, "o_m");
            const dkl::Matrix m = copy_in(o_m, rows, classes);
            switch (kind) {
                case DKL_LOSS_KL: out = dkl::kl_backward(m, n); break;
                case DKL_LOSS_JSD: out = dkl::jsd_forward_backward(m, n); break;
                case DKL_LOSS_DKL:
                case DKL_LOSS_IKL: {
                    dkl_loss_config c;
                    dkl_loss_config_defaults(&c);
                    if (cfg) {
                        c = *cfg;
                    }
                    dkl::LossConfig lc = to_core(c);
                    if (kind == DKL_LOSS_IKL) {
                        lc.break_asymmetry = true;
                        lc.weight_source = dkl::WeightSource::ClassWise;
                    }
                    out = dkl::dkl_family(m, n, y, lc, stats ? &stats->table : nullptr);
                    break;
                }
                default: (void)to_core(kind);
            }
        }
        *value = out.value;
        copy_out(out.grad_m.size() ? out.grad_m : dkl::Matrix(rows, classes), grad_m);
        copy_out(out.grad_n, grad_n);
    });
}

dkl_status dkl_stats_uniform(size_t classes, double temperature, double momentum, dkl_stats** out) {
    return guarded([&] {
        need(out, "output stats");
        publish(new dkl_stats{dkl::ClassStatsTable::uniform(classes, temperature, momentum)}, out);
    });
}

dkl_status dkl_stats_from_logits(size_t rows, size_t classes, const double* logits, const int32_t* labels,
                                 double temperature, double momentum, dkl_stats** out) {
    return guarded([&] {
        need(out, "output stats");
        need(logits, "logits");
        need(labels, "labels");
        const auto table = dkl::ClassStatsTable::exact_recompute(copy_in(logits, rows, classes), {labels, rows},
                                                                 temperature, momentum);
        publish(new dkl_stats{table}, out);
    });
}

dkl_status dkl_stats_update(dkl_stats* stats, size_t rows, const double* logits, const int32_t* labels) {
    return guarded([&] {
        need(stats, "stats");
        need(logits, "logits");
        need(labels, "labels");
        stats->table.update_batch(copy_in(logits, rows, stats->table.num_classes()), {labels, rows});
    });
}

dkl_status dkl_stats_load(const char* path, dkl_stats** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "output stats");
        publish(new dkl_stats{dkl::ClassStatsTable::load(path)}, out);
    });
}

dkl_status dkl_stats_save(const dkl_stats* stats, const char* path) {
    return guarded([&] {
        need(stats, "stats");
        need(path, "path");
        stats->table.save(path);
    });
}

size_t dkl_stats_classes(const dkl_stats* stats) { return stats ? stats->table.num_classes() : 0; }

dkl_status dkl_stats_row(const dkl_stats* stats, size_t y, double* out) {
    return guarded([&] {
        need(stats, "stats");
        need(out, "output row");
        const auto row = stats->table.row(y);
        std::copy(row.begin(), row.end(), out);
    });
}

dkl_status dkl_stats_margins(const dkl_stats* stats, double* out, double* mean) {
    return guarded([&] {
        need(stats, "stats");
        if (out) {
            const auto m = stats->table.margins();
            std::copy(m.begin(), m.end(), out);
        }
        if (mean) {
            *mean = stats->table.mean_margin();
        }
    });
}

void dkl_stats_free(dkl_stats* stats) { delete stats; }

dkl_status dkl_verify_kl_equivalence(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed, double tolerance,
                               dkl_report** out) {
    return report_call(out, [&] { return dkl::check_kl_equivalence(trials, class_list(classes, n_classes), seed, tolerance); });
}

dkl_status dkl_verify_asymmetry(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed,
                                double tolerance, dkl_report** out) {
    return report_call(out,
                       [&] { return dkl::check_asymmetry(trials, seed, tolerance, class_list(classes, n_classes)); });
}

dkl_status dkl_verify_wmse_identity(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed,
                                    double tolerance, dkl_report** out) {
    return report_call(
        out, [&] { return dkl::check_wmse_identity(trials, class_list(classes, n_classes), seed, tolerance); });
}

size_t dkl_gradient_check_count(void) { return dkl::gradient_check_names().size(); }

const char* dkl_gradient_check_name(size_t index) {
    const auto& names = dkl::gradient_check_names();
    return index < names.size() ? names[index].c_str() : nullptr;
}

dkl_status dkl_verify_gradients(const char* loss_name, size_t trials, const size_t* classes, size_t n_classes,
                                uint64_t seed, int saturated, double tolerance, dkl_report** out) {
    return report_call(out, [&] {
        need(loss_name, "loss name");
        return dkl::check_gradients(loss_name, trials, class_list(classes, n_classes), seed, saturated != 0,
                                    tolerance);
    });
}

int dkl_report_passed(const dkl_report* report) { return report && report->report.passed ? 1 : 0; }

double dkl_report_max_abs_diff(const dkl_report* report) {
    return report ? report->report.max_abs_diff : std::numeric_limits<double>::quiet_NaN();
}

const char* dkl_report_text(const dkl_report* report) { return report ? report->text.c_str() : ""; }

void dkl_report_free(dkl_report* report) { delete report; }

dkl_status dkl_dataset_gaussian(size_t classes, size_t dim, size_t per_class, double spread, uint64_t seed,
                                dkl_dataset** out) {
    return guarded([&] {
        need(out, "output dataset");
        publish(new dkl_dataset{dkl::gaussian_mixture(classes, dim, per_class, spread, seed)}, out);
    });
}

dkl_status dkl_dataset_load_csv(const char* path, dkl_dataset** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "output dataset");
        publish(new dkl_dataset{dkl::load_csv(path)}, out);
    });
}

dkl_status dkl_dataset_save_csv(const dkl_dataset* data, const char* path) {
    return guarded([&] {
        need(data, "dataset");
        need(path, "path");
        dkl::save_csv(data->data, path);
    });
}

dkl_status dkl_dataset_split(const dkl_dataset* data, double test_fraction, uint64_t seed, dkl_dataset** train,
                             dkl_dataset** test) {
    return guarded([&] {
        need(data, "dataset");
        need(train, "output train set");
        need(test, "output test set");
        auto [a, b] = dkl::split(data->data, test_fraction, seed);
        auto* tr = new dkl_dataset{std::move(a)};
        try {
            *test = new dkl_dataset{std::move(b)};
        } catch (...) {
            delete tr;
            throw;
        }
        *train = tr;
    });
}

dkl_status dkl_dataset_shape(const dkl_dataset* data, size_t* rows, size_t* dim, size_t* classes) {
    return guarded([&] {
        need(data, "dataset");
        if (rows) *rows = data->data.size();
        if (dim) *dim = data->data.dim();
        if (classes) *classes = data->data.num_classes;
    });
}

void dkl_dataset_free(dkl_dataset* data) { delete data; }

dkl_status dkl_logits_write(const char* path, size_t rows, size_t classes, const double* logits) {
    return guarded([&] {
        need(path, "path");
        if (rows * classes > 0) {
            need(logits, "logits");
        }
        dkl::export_logits(path, copy_in(logits, rows, classes));
    });
}

dkl_status dkl_logits_read(const char* path, size_t* rows, size_t* classes, double* out) {
    return guarded([&] {
        need(path, "path");
        const dkl::Matrix m = dkl::import_logits(path);
        if (rows) *rows = m.rows();
        if (classes) *classes = m.cols();
        copy_out(m, out);
    });
}

dkl_status dkl_model_init(const size_t* dims, size_t n_dims, uint64_t seed, dkl_model** out) {
    return guarded([&] {
        need(dims, "dims");
        need(out, "output model");
        publish(new dkl_model{dkl::MlpParams::init({dims, dims + n_dims}, seed)}, out);
    });
}

dkl_status dkl_model_load(const char* path, dkl_model** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "output model");
        publish(new dkl_model{dkl::MlpParams::load(path)}, out);
    });
}

dkl_status dkl_model_save(const dkl_model* model, const char* path) {
    return guarded([&] {
        need(model, "model");
        need(path, "path");
        model->params.save(path);
    });
}

dkl_status dkl_model_dims(const dkl_model* model, size_t* dims, size_t capacity, size_t* n_dims) {
    return guarded([&] {
        need(model, "model");
        const auto& d = model->params.dims;
        if (n_dims) *n_dims = d.size();
        if (dims) {
            std::copy_n(d.begin(), std::min(capacity, d.size()), dims);
        }
    });
}

dkl_status dkl_model_logits(const dkl_model* model, const dkl_dataset* data, double* out) {
    return guarded([&] {
        need(model, "model");
        need(data, "dataset");
        need(out, "output logits");
        copy_out(dkl::predict_logits(model->params, data->data.features), out);
    });
}

void dkl_model_free(dkl_model* model) { delete model; }

void dkl_attack_config_defaults(dkl_attack_config* cfg) {
    if (cfg) {
        *cfg = from_core(dkl::AttackConfig{});
    }
}

void dkl_attack_config_image_preset(dkl_attack_config* cfg) {
    if (cfg) {
        *cfg = from_core(dkl::AttackConfig::image_preset());
    }
}

void dkl_train_config_defaults(dkl_train_config* cfg) {
    if (!cfg) {
        return;
    }
    const dkl::TrainConfig d;
    *cfg = {};
    cfg->n_hidden = d.hidden.size();
    std::copy(d.hidden.begin(), d.hidden.end(), cfg->hidden);
    cfg->loss = DKL_LOSS_KL;
    cfg->loss_cfg = {d.loss_cfg.alpha, d.loss_cfg.beta, d.loss_cfg.detach_m, d.loss_cfg.break_asymmetry,
                     d.loss_cfg.weight_source == dkl::WeightSource::ClassWise};
    cfg->attack = from_core(d.attack);
    cfg->epochs = d.epochs;
    cfg->batch_size = d.batch_size;
    cfg->lr = d.lr;
    cfg->momentum = d.momentum;
    cfg->weight_decay = d.weight_decay;
    cfg->seed = d.seed;
    cfg->stats_temperature = d.stats_temperature;
    cfg->stats_momentum = d.stats_momentum;
    cfg->kd_temperature = d.kd_temperature;
    cfg->hard_label_weight = d.hard_label_weight;
    cfg->trades_lambda = d.trades_lambda;
    cfg->eps_warmup_fraction = d.eps_warmup_fraction;
    cfg->eval_robust = d.eval_robust ? 1 : 0;
}

dkl_status dkl_train(dkl_train_mode mode, const dkl_train_config* cfg, const dkl_dataset* train,
                     const dkl_dataset* test, const double* teacher_logits, size_t teacher_rows,
                     size_t teacher_classes, dkl_metrics_callback callback, void* user, dkl_model** model_out,
                     dkl_stats** stats_out, dkl_train_summary* summary) {
    return guarded([&] {
        need(cfg, "config");
        need(train, "train set");
        need(test, "test set");
        need(model_out, "output model");
        const dkl::TrainConfig tc = to_core(*cfg);
        dkl::MetricsSink sink;
        if (callback) {
            sink = [&](const dkl::EpochMetrics& m) { callback(m.to_json_line().c_str(), user); };
        }
        dkl::TrainResult result;
        switch (mode) {
            case DKL_MODE_BASELINE: result = dkl::train_baseline(tc, train->data, test->data, sink); break;
            case DKL_MODE_DISTILL: {
                need(teacher_logits, "teacher logits");
                result = dkl::train_distill(tc, train->data, test->data,
                                            copy_in(teacher_logits, teacher_rows, teacher_classes), sink);
                break;
            }
            case DKL_MODE_ADVERSARIAL: result = dkl::train_adversarial(tc, train->data, test->data, sink); break;
            default: dkl::fail(dkl::ErrorCode::InvalidArgument, "unknown training mode");
        }
        if (summary) {
            const auto& last = result.metrics.back();
            *summary = {result.metrics.size(),
                        result.steps,
                        result.wmse_student_grad_steps,
                        last.train_acc,
                        last.clean_acc,
                        last.robust_acc.value_or(std::numeric_limits<double>::quiet_NaN()),
                        last.mean_margin};
        }
        auto* model = new dkl_model{std::move(result.params)};
        if (stats_out) {
            try {
                *stats_out = new dkl_stats{std::move(result.stats)};
            } catch (...) {
                delete model;
                throw;
            }
        }
        *model_out = model;
    });
}

dkl_status dkl_evaluate(const dkl_model* model, const dkl_dataset* data, const dkl_attack_config* attack,
                        uint64_t seed, dkl_eval_result* result, double* margins) {
    return guarded([&] {
        need(model, "model");
        need(data, "dataset");
        need(result, "output result");
        dkl::AttackConfig atk;
        if (attack) {
            atk = to_core(*attack);
        }
        const auto ev = dkl::evaluate(model->params, data->data, attack ? &atk : nullptr, seed);
        *result = {ev.clean_acc, ev.robust_acc.value_or(std::numeric_limits<double>::quiet_NaN()), ev.mean_margin};
        if (margins) {
            std::copy(ev.margins.begin(), ev.margins.end(), margins);
        }
    });
}

dkl_status dkl_bench_wmse(const size_t* classes, size_t n_classes, size_t batch, size_t repeats, uint64_t seed,
                          double tolerance, dkl_bench_row* rows) {
    return guarded([&] {
        need(rows, "output rows");
        const auto out = dkl::bench_wmse(class_list(classes, n_classes), batch, repeats, seed, tolerance);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const auto& r = out[i];
            rows[i] = {r.classes,
                       r.batch,
                       r.dense_seconds,
                       r.efficient_seconds,
                       r.dense_transient_doubles,
                       r.efficient_transient_doubles,
                       r.value_diff,
                       r.grad_diff,
                       r.values_equal ? 1 : 0,
                       r.efficient_within_budget ? 1 : 0};
        }
    });
}

}  // extern "C"
