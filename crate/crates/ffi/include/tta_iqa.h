#ifndef TTA_IQA_H
#define TTA_IQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TtaStatus {
  TTA_STATUS_OK = 0,
  TTA_STATUS_NULL_POINTER = 1,
  TTA_STATUS_INVALID_ARGUMENT = 2,
  TTA_STATUS_IO = 3,
  TTA_STATUS_CHECKPOINT = 4,
  TTA_STATUS_NUMERIC = 5,
  TTA_STATUS_PANIC = 6,
} TtaStatus;

/**
 * Opaque model handle.
 */
typedef struct TtaModel TtaModel;

/**
 * Adaptation settings. `distortion_mode`: 0 best, 1 all, 2 blur only,
 * 3 compression only, 4 noise only. `objective`: 0 combined, 1 rank only,
 * 2 group-contrastive only, 3 rotation. Booleans are 0 or 1.
 */
typedef struct TtaParams {
  uint32_t iterations;
  double lr;
  double lambda;
  double p;
  double tau;
  uint32_t groups;
  int32_t distortion_mode;
  int32_t objective;
  uint8_t predict_batch_stats;
  uint64_t seed;
} TtaParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Defaults used by the Rust library.
 */
struct TtaParams tta_params_default(void);

/**
 * Message of the last failing call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tta_last_error_message(void);

/**
 * Untrained model with the default architecture and the given seed.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TtaStatus tta_model_build(uint64_t seed, struct TtaModel **out);

/**
 * Loads a checkpoint written by the library or the CLI.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum TtaStatus tta_model_load(const char *path, struct TtaModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a nul-terminated string.
 */
enum TtaStatus tta_model_save(const struct TtaModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tta_model_free(struct TtaModel *model);

/**
 * Side length of the square input the model expects, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tta_model_crop(const struct TtaModel *model);

/**
 * Scores `n` images of shape `c × crop × crop` with the source model.
 * `batch_stats` selects current-batch BN statistics instead of running ones.
 *
 * # Safety
 * `pixels` must hold `n·c·h·w` doubles and `out_scores` room for `n`.
 */
enum TtaStatus tta_model_predict(const struct TtaModel *model,
                                 const double *pixels,
                                 size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 uint8_t batch_stats,
                                 double *out_scores);

/**
 * Adapts a private copy of the model on this batch and writes adapted
 * scores; the handle itself is never modified. `out_flagged` (optional)
 * receives 1 when the batch fell back to source scores.
 *
 * # Safety
 * As [`tta_model_predict`]; `params` must be null (defaults) or valid.
 */
enum TtaStatus tta_model_adapt_predict(const struct TtaModel *model,
                                       const double *pixels,
                                       size_t n,
                                       size_t c,
                                       size_t h,
                                       size_t w,
                                       const struct TtaParams *params,
                                       double *out_scores,
                                       uint8_t *out_flagged);

/**
 * Spearman rank correlation with midranks. Zero variance writes NaN and
 * returns `TTA_STATUS_NUMERIC`.
 *
 * # Safety
 * `pred` and `gt` must hold `n` doubles; `out` must be writable.
 */
enum TtaStatus tta_srocc(const double *pred, const double *gt, size_t n, double *out);

/**
 * Pearson correlation. Same conventions as [`tta_srocc`].
 *
 * # Safety
 * As [`tta_srocc`].
 */
enum TtaStatus tta_plcc(const double *pred, const double *gt, size_t n, double *out);

/**
 * Library version as a static nul-terminated string.
 */
const char *tta_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTA_IQA_H */
