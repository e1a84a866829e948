#ifndef DKL_DKL_H
#define DKL_DKL_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#if defined(DKL_BUILDING_LIBRARY)
#define DKL_API __declspec(dllexport)
#else
#define DKL_API __declspec(dllimport)
#endif
#else
#define DKL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every function returns a status; on failure a message describing it is
 * available from dkl_last_error() on the calling thread until the next call. */
typedef enum dkl_status {
    DKL_OK = 0,
    DKL_ERR_INVALID_ARGUMENT = 1,
    DKL_ERR_SHAPE_MISMATCH = 2,
    DKL_ERR_IO = 3,
    DKL_ERR_FORMAT = 4,
    DKL_ERR_NUMERIC = 5,
    DKL_ERR_DIVERGED = 6,
    DKL_ERR_OUT_OF_MEMORY = 7,
    DKL_ERR_INTERNAL = 8
} dkl_status;

typedef enum dkl_loss_kind {
    DKL_LOSS_CE = 0,
    DKL_LOSS_KL = 1,
    DKL_LOSS_DKL = 2,
    DKL_LOSS_IKL = 3,
    DKL_LOSS_JSD = 4
} dkl_loss_kind;

typedef enum dkl_train_mode {
    DKL_MODE_BASELINE = 0,
    DKL_MODE_DISTILL = 1,
    DKL_MODE_ADVERSARIAL = 2
} dkl_train_mode;

typedef struct dkl_dataset dkl_dataset;
typedef struct dkl_model dkl_model;
typedef struct dkl_stats dkl_stats;
typedef struct dkl_report dkl_report;

DKL_API const char* dkl_version(void);
DKL_API const char* dkl_last_error(void);
DKL_API const char* dkl_status_name(dkl_status status);

/* ---- losses ---------------------------------------------------------- */

typedef struct dkl_loss_config {
    double alpha;
    double beta;
    int detach_m;
    int break_asymmetry;
    int class_wise; /* weights from a stats table instead of s_m */
} dkl_loss_config;

DKL_API void dkl_loss_config_defaults(dkl_loss_config* cfg);

/* Row-major rows x classes logits. DKL_LOSS_KL and DKL_LOSS_JSD ignore cfg,
 * labels and stats; DKL_LOSS_DKL and DKL_LOSS_IKL need labels and stats only
 * for class-wise weights (IKL forces class-wise with break_asymmetry).
 * grad_m / grad_n may be NULL. */
DKL_API dkl_status dkl_loss(dkl_loss_kind kind, const dkl_loss_config* cfg, size_t rows, size_t classes,
                            const double* o_m, const double* o_n, const int32_t* labels, const dkl_stats* stats,
                            double* value, double* grad_m, double* grad_n);

/* ---- class statistics ------------------------------------------------ */

DKL_API dkl_status dkl_stats_uniform(size_t classes, double temperature, double momentum, dkl_stats** out);
DKL_API dkl_status dkl_stats_from_logits(size_t rows, size_t classes, const double* logits, const int32_t* labels,
                                         double temperature, double momentum, dkl_stats** out);
DKL_API dkl_status dkl_stats_update(dkl_stats* stats, size_t rows, const double* logits, const int32_t* labels);
DKL_API dkl_status dkl_stats_load(const char* path, dkl_stats** out);
DKL_API dkl_status dkl_stats_save(const dkl_stats* stats, const char* path);
DKL_API size_t dkl_stats_classes(const dkl_stats* stats);
DKL_API dkl_status dkl_stats_row(const dkl_stats* stats, size_t y, double* out);
DKL_API dkl_status dkl_stats_margins(const dkl_stats* stats, double* out, double* mean);
DKL_API void dkl_stats_free(dkl_stats* stats);

/* ---- verification reports ------------------------------------------- */

DKL_API dkl_status dkl_verify_kl_equivalence(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed,
                                       double tolerance, dkl_report** out);
DKL_API dkl_status dkl_verify_asymmetry(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed,
                                        double tolerance, dkl_report** out);
DKL_API dkl_status dkl_verify_wmse_identity(size_t trials, const size_t* classes, size_t n_classes, uint64_t seed,
                                            double tolerance, dkl_report** out);
DKL_API size_t dkl_gradient_check_count(void);
DKL_API const char* dkl_gradient_check_name(size_t index);
DKL_API dkl_status dkl_verify_gradients(const char* loss_name, size_t trials, const size_t* classes,
                                        size_t n_classes, uint64_t seed, int saturated, double tolerance,
                                        dkl_report** out);
DKL_API int dkl_report_passed(const dkl_report* report);
DKL_API double dkl_report_max_abs_diff(const dkl_report* report);
/* key=value lines; owned by the report. */
DKL_API const char* dkl_report_text(const dkl_report* report);
DKL_API void dkl_report_free(dkl_report* report);

/* ---- data -------------------------------------------------------------- */

DKL_API dkl_status dkl_dataset_gaussian(size_t classes, size_t dim, size_t per_class, double spread, uint64_t seed,
                                        dkl_dataset** out);
DKL_API dkl_status dkl_dataset_load_csv(const char* path, dkl_dataset** out);
DKL_API dkl_status dkl_dataset_save_csv(const dkl_dataset* data, const char* path);
DKL_API dkl_status dkl_dataset_split(const dkl_dataset* data, double test_fraction, uint64_t seed,
                                     dkl_dataset** train, dkl_dataset** test);
DKL_API dkl_status dkl_dataset_shape(const dkl_dataset* data, size_t* rows, size_t* dim, size_t* classes);
DKL_API void dkl_dataset_free(dkl_dataset* data);

DKL_API dkl_status dkl_logits_write(const char* path, size_t rows, size_t classes, const double* logits);
/* Call with out = NULL to learn the shape, then again with a rows*classes buffer. */
DKL_API dkl_status dkl_logits_read(const char* path, size_t* rows, size_t* classes, double* out);

/* ---- model ------------------------------------------------------------- */

DKL_API dkl_status dkl_model_init(const size_t* dims, size_t n_dims, uint64_t seed, dkl_model** out);
DKL_API dkl_status dkl_model_load(const char* path, dkl_model** out);
DKL_API dkl_status dkl_model_save(const dkl_model* model, const char* path);
/* Writes n_dims and, when dims is not NULL, up to capacity entries. */
DKL_API dkl_status dkl_model_dims(const dkl_model* model, size_t* dims, size_t capacity, size_t* n_dims);
/* rows x classes logits for every sample of data. */
DKL_API dkl_status dkl_model_logits(const dkl_model* model, const dkl_dataset* data, double* out);
DKL_API void dkl_model_free(dkl_model* model);

/* ---- training and evaluation ------------------------------------------ */

typedef struct dkl_attack_config {
    double epsilon;
    double step_size;
    size_t iterations;
    int random_start;
} dkl_attack_config;

DKL_API void dkl_attack_config_defaults(dkl_attack_config* cfg);
DKL_API void dkl_attack_config_image_preset(dkl_attack_config* cfg);

#define DKL_MAX_HIDDEN 8

typedef struct dkl_train_config {
    size_t hidden[DKL_MAX_HIDDEN];
    size_t n_hidden;
    dkl_loss_kind loss;
    dkl_loss_config loss_cfg;
    dkl_attack_config attack;
    size_t epochs;
    size_t batch_size;
    double lr;
    double momentum;
    double weight_decay;
    uint64_t seed;
    double stats_temperature;
    double stats_momentum;
    double kd_temperature;
    double hard_label_weight;
    double trades_lambda;
    double eps_warmup_fraction;
    int eval_robust;
} dkl_train_config;

DKL_API void dkl_train_config_defaults(dkl_train_config* cfg);

/* Receives one JSON object per epoch, without a trailing newline. */
typedef void (*dkl_metrics_callback)(const char* record, void* user);

typedef struct dkl_train_summary {
    size_t epochs;
    size_t steps;
    size_t wmse_student_grad_steps;
    double train_acc;
    double clean_acc;
    double robust_acc; /* NaN when not measured */
    double mean_margin;
} dkl_train_summary;

/* teacher_logits (rows x classes, one row per training sample) is required for
 * DKL_MODE_DISTILL and ignored otherwise. stats_out and summary may be NULL. */
DKL_API dkl_status dkl_train(dkl_train_mode mode, const dkl_train_config* cfg, const dkl_dataset* train,
                             const dkl_dataset* test, const double* teacher_logits, size_t teacher_rows,
                             size_t teacher_classes, dkl_metrics_callback callback, void* user,
                             dkl_model** model_out, dkl_stats** stats_out, dkl_train_summary* summary);

typedef struct dkl_eval_result {
    double clean_acc;
    double robust_acc; /* NaN without an attack */
    double mean_margin;
} dkl_eval_result;

/* attack may be NULL; margins (classes entries) may be NULL. */
DKL_API dkl_status dkl_evaluate(const dkl_model* model, const dkl_dataset* data, const dkl_attack_config* attack,
                                uint64_t seed, dkl_eval_result* result, double* margins);

/* ---- benchmark --------------------------------------------------------- */

typedef struct dkl_bench_row {
    size_t classes;
    size_t batch;
    double dense_seconds;
    double efficient_seconds;
    size_t dense_transient_doubles;
    size_t efficient_transient_doubles;
    double value_diff;
    double grad_diff;
    int values_equal;
    int efficient_within_budget;
} dkl_bench_row;

/* rows must hold n_classes entries. */
DKL_API dkl_status dkl_bench_wmse(const size_t* classes, size_t n_classes, size_t batch, size_t repeats,
                                  uint64_t seed, double tolerance, dkl_bench_row* rows);

#ifdef __cplusplus
}
#endif

#endif
