#pragma once

/*
 * C interface to the metaif library.
 *
 * Objects are opaque handles created by *_create / *_load style calls and
 * released with the matching *_free. Every fallible call returns a
 * mif_status; on failure mif_last_error() describes the problem. The message
 * is thread-local and stays valid until the next failing call on the same
 * thread.
 *
 * Configuration is passed as JSON text using the same schema as the
 * command-line config files. NULL or "" means "all defaults".
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(METAIF_BUILDING_LIBRARY)
#    define METAIF_API __declspec(dllexport)
#  else
#    define METAIF_API __declspec(dllimport)
#  endif
#else
#  define METAIF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mif_status {
    MIF_OK = 0,
    MIF_ERR_CONFIG = 2,
    MIF_ERR_NUMERICAL = 3,
    MIF_ERR_NONCONVERGENCE = 4,
    MIF_ERR_DIMENSION = 5,
    MIF_ERR_INVALID_ARGUMENT = 6,
    MIF_ERR_IO = 7,
    MIF_ERR_PARSE = 8,
    MIF_ERR_INTERNAL = 9
} mif_status;

typedef struct mif_tasks mif_tasks;
typedef struct mif_model mif_model;
typedef struct mif_analyzer mif_analyzer;
typedef struct mif_influence mif_influence;

METAIF_API const char* mif_version(void);
METAIF_API const char* mif_last_error(void);
METAIF_API const char* mif_status_name(mif_status status);
/* Releases strings returned through char** out-parameters. */
METAIF_API void mif_string_free(char* s);

/* ---- task sets ---------------------------------------------------------- */

/* Training tasks for one seed from a "data" config object (synthetic, csv or
 * bundle source). */
METAIF_API mif_status mif_tasks_create(const char* data_json, uint64_t seed, mif_tasks** out);
METAIF_API mif_status mif_tasks_load_bundle(const char* dir, mif_tasks** out);
METAIF_API mif_status mif_tasks_save_bundle(const mif_tasks* tasks, const char* dir);
METAIF_API size_t mif_tasks_count(const mif_tasks* tasks);
/* -1 when index is out of range. */
METAIF_API int mif_tasks_id(const mif_tasks* tasks, size_t index);
METAIF_API int mif_tasks_corrupted(const mif_tasks* tasks, size_t index);
METAIF_API void mif_tasks_free(mif_tasks* tasks);

/* ---- training ----------------------------------------------------------- */

/* config_json: {"architecture", "bilevel", "seed"} as in the CLI config.
 * A non-converged run still yields a model (status MIF_ERR_NONCONVERGENCE
 * with *out set); influence analysis on it is rejected. */
METAIF_API mif_status mif_train(const mif_tasks* tasks, const char* config_json, mif_model** out);
METAIF_API mif_status mif_model_load(const char* checkpoint_dir, mif_model** out);
METAIF_API mif_status mif_model_save(const mif_model* model, const char* checkpoint_dir);
METAIF_API size_t mif_model_param_count(const mif_model* model);
/* Copies λ* into out (len must equal the parameter count). */
METAIF_API mif_status mif_model_lambda(const mif_model* model, double* out, size_t len);
METAIF_API int mif_model_converged(const mif_model* model);
METAIF_API double mif_model_grad_norm(const mif_model* model);
/* Mean held-out accuracy of the adapted models for parameters `lambda`
 * (NULL: λ*). */
METAIF_API mif_status mif_model_accuracy(const mif_model* model, const mif_tasks* tasks, const double* lambda,
                                         size_t len, double* accuracy);
METAIF_API void mif_model_free(mif_model* model);

/* ---- influence ---------------------------------------------------------- */

/* options_json: the "influence" config object. The analyzer keeps its own
 * copies of model and tasks. */
METAIF_API mif_status mif_analyzer_create(const mif_model* model, const mif_tasks* tasks, const char* options_json,
                                          mif_analyzer** out);
METAIF_API void mif_analyzer_free(mif_analyzer* analyzer);

/* kind: "task", "direct_baseline", "inner", "instance_train", "instance_val".
 * example_index is ignored for task-level kinds. */
METAIF_API mif_status mif_influence_compute(const mif_analyzer* analyzer, const char* kind, int task_id,
                                            size_t example_index, mif_influence** out);
METAIF_API size_t mif_influence_dim(const mif_influence* inf);
METAIF_API mif_status mif_influence_delta(const mif_influence* inf, double* out, size_t len);
METAIF_API int mif_influence_edit_sign(const mif_influence* inf);
/* Influence score against the summed validation gradient of probe tasks. */
METAIF_API mif_status mif_influence_score(const mif_model* model, const mif_tasks* probe, const mif_influence* inf,
                                          double* score);
METAIF_API mif_status mif_influence_save(const mif_influence* inf, const char* stem);
METAIF_API mif_status mif_influence_load(const char* stem, mif_influence** out);
METAIF_API void mif_influence_free(mif_influence* inf);

/* λ* with each influence applied by its edit sign. */
METAIF_API mif_status mif_edit(const mif_model* model, const mif_influence* const* influences, size_t count,
                               double* out, size_t len);

/* ---- batch commands ----------------------------------------------------- */

/* Runs a command-line subcommand: "train", "attribute", "edit",
 * "compare-oracle", "harmful-scan", "effectiveness" or "schema-check".
 * args_json carries the subcommand's options; *report_json (may be NULL)
 * receives a JSON summary to be released with mif_string_free. */
METAIF_API mif_status mif_run_command(const char* command, const char* args_json, char** report_json);

#ifdef __cplusplus
}
#endif
