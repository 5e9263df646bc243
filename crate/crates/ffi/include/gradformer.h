#ifndef GRADFORMER_H
#define GRADFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum GtStatus {
  GT_STATUS_OK = 0,
  GT_STATUS_NULL_POINTER = 1,
  GT_STATUS_INVALID_ARGUMENT = 2,
  GT_STATUS_CONFIG = 3,
  GT_STATUS_DIMENSION_MISMATCH = 4,
  GT_STATUS_DOMAIN = 5,
  GT_STATUS_IO = 6,
  GT_STATUS_CHECKPOINT = 7,
  GT_STATUS_BUFFER_TOO_SMALL = 8,
  GT_STATUS_PANIC = 9,
} GtStatus;

typedef enum GtMode {
  GT_MODE_LGT = 0,
  GT_MODE_EGT = 1,
} GtMode;

/**
 * Grading family for `gt_apply_grading`.
 */
typedef enum GtGradingKind {
  /**
   * `f(q) = q + 1`.
   */
  GT_GRADING_KIND_LINEAR_PLUS_ONE = 0,
  /**
   * `f(q) = |q| + 1`.
   */
  GT_GRADING_KIND_LINEAR_ABS_PLUS_ONE = 1,
  /**
   * `f(q) = q`.
   */
  GT_GRADING_KIND_LINEAR_IDENTITY = 2,
  /**
   * `f(q) = a·q + b`.
   */
  GT_GRADING_KIND_LINEAR_AFFINE = 3,
  /**
   * `λ^q`.
   */
  GT_GRADING_KIND_EXPONENTIAL = 4,
} GtGradingKind;

/**
 * Opaque model handle.
 */
typedef struct GtModel GtModel;

typedef struct GtDims {
  /**
   * 1 when the model consumes token ids, 0 for feature rows.
   */
  uint32_t token_input;
  /**
   * Columns per feature row; equals `d_model` for token models.
   */
  size_t input_width;
  size_t vocab_size;
  size_t output_dim;
  size_t d_model;
  size_t max_len;
} GtDims;

typedef struct GtGrading {
  enum GtGradingKind kind;
  double a;
  double b;
  double lambda;
} GtGrading;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *gt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gt_version(void);

/**
 * Builds a model from a JSON model config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum GtStatus gt_model_create(const char *config_json, uint64_t seed, struct GtModel **out);

/**
 * Loads a checkpoint written by `gt_model_save` or the `gradformer` CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GtStatus gt_model_load(const char *path, struct GtModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum GtStatus gt_model_save(const struct GtModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void gt_model_free(struct GtModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum GtStatus gt_model_dims(const struct GtModel *model, struct GtDims *out);

/**
 * Runs a feature model on `rows × cols` row-major inputs and writes
 * `rows × output_dim` row-major logits.
 *
 * # Safety
 * `x` must hold `rows*cols` values and `out` at least `out_len`.
 */
enum GtStatus gt_model_forward_features(const struct GtModel *model,
                                        const double *x,
                                        size_t rows,
                                        size_t cols,
                                        double *out,
                                        size_t out_len);

/**
 * Runs a token model on `n` ids (1-based) and writes `n × output_dim` logits.
 *
 * # Safety
 * `tokens` must hold `n` values and `out` at least `out_len`.
 */
enum GtStatus gt_model_forward_tokens(const struct GtModel *model,
                                      const uint32_t *tokens,
                                      size_t n,
                                      double *out,
                                      size_t out_len);

/**
 * `λ_t = 1 + (λ_max − 1)·t/T`.
 *
 * # Safety
 * `out` must be writable.
 */
enum GtStatus gt_anneal_lambda(size_t t, size_t total, double lambda_max, double *out);

/**
 * Grade learning-rate bound; `value` is `q_max` for EGT and `q̃_max` for LGT.
 *
 * # Safety
 * `out` must be writable.
 */
enum GtStatus gt_grade_lr_bound(enum GtMode mode, double lambda, double value, double *out);

/**
 * Scales column `j` of the `rows × d` row-major `x` by the grading weight of
 * `grades[j]` and writes the result to `out`.
 *
 * # Safety
 * `grades` must hold `d` values, `x` `rows*d`, and `out` at least `out_len`.
 */
enum GtStatus gt_apply_grading(const struct GtGrading *grading,
                               const double *grades,
                               size_t d,
                               const double *x,
                               size_t rows,
                               double *out,
                               size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADFORMER_H */
