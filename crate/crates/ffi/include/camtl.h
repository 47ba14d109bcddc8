#ifndef CAMTL_H
#define CAMTL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CamtlStatus {
  CAMTL_STATUS_OK = 0,
  CAMTL_STATUS_NULL_POINTER = 1,
  CAMTL_STATUS_INVALID_UTF8 = 2,
  CAMTL_STATUS_INVALID_CONFIG = 3,
  CAMTL_STATUS_IO = 4,
  CAMTL_STATUS_CHECKPOINT = 5,
  CAMTL_STATUS_UNKNOWN_TASK = 6,
  CAMTL_STATUS_MODEL = 7,
  CAMTL_STATUS_TRAINING = 8,
  CAMTL_STATUS_BUFFER_TOO_SMALL = 9,
  CAMTL_STATUS_PANIC = 10,
} CamtlStatus;

// A model together with the experiment config that describes it.
typedef struct CamtlModel CamtlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` and returns the
// size needed including the terminator. Passing a null `buf` only queries
// the size.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t camtl_last_error_message(char *buf, size_t len);

// Builds an untrained model from a JSON experiment config.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum CamtlStatus camtl_model_new(const char *config_json, struct CamtlModel **out);

// Runs the experiment described by `config_json` and returns the trained
// model. A non-null `out_dir` overrides the config's output directory.
//
// # Safety
// String arguments must be NUL-terminated or, for `out_dir`, null; `out`
// must be writable.
enum CamtlStatus camtl_train(const char *config_json, const char *out_dir, struct CamtlModel **out);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum CamtlStatus camtl_model_load(const char *path, struct CamtlModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum CamtlStatus camtl_model_save(const struct CamtlModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void camtl_model_free(struct CamtlModel *model);

// Number of registered tasks.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum CamtlStatus camtl_model_task_count(const struct CamtlModel *model, size_t *out);

// Values produced per prediction: class count, or 1 for regression.
//
// # Safety
// `model` must come from this library; `task` must be NUL-terminated;
// `out` must be writable.
enum CamtlStatus camtl_model_output_dim(const struct CamtlModel *model,
                                        const char *task,
                                        size_t *out);

// Predicts one token sequence. Classification writes class probabilities,
// regression a single value in the task's range. `written` receives the
// number of values.
//
// # Safety
// `tokens` must be valid for `n_tokens` reads and `out` for `out_len`
// writes; `written` must be writable or null.
enum CamtlStatus camtl_model_predict(const struct CamtlModel *model,
                                     const char *task,
                                     const uint32_t *tokens,
                                     size_t n_tokens,
                                     double *out,
                                     size_t out_len,
                                     size_t *written);

// Dev-split metrics of every configured task as a JSON array.
//
// # Safety
// `model` must come from this library; `buf` must be null or valid for
// `len` bytes; `needed` must be writable or null.
enum CamtlStatus camtl_model_evaluate_json(const struct CamtlModel *model,
                                           char *buf,
                                           size_t len,
                                           size_t *needed);

// Parameter accounting as a JSON object.
//
// # Safety
// As for [`camtl_model_evaluate_json`].
enum CamtlStatus camtl_model_parameter_report_json(const struct CamtlModel *model,
                                                   char *buf,
                                                   size_t len,
                                                   size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMTL_H */
