#ifndef GPCORR_H
#define GPCORR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GpcStatus {
  GPC_STATUS_OK = 0,
  GPC_STATUS_NULL_POINTER = 1,
  GPC_STATUS_INVALID_INPUT = 2,
  GPC_STATUS_DIMENSION_MISMATCH = 3,
  GPC_STATUS_INDEX_OUT_OF_RANGE = 4,
  GPC_STATUS_MODEL = 5,
  GPC_STATUS_BUDGET_EXCEEDED = 6,
  GPC_STATUS_CONTRACT = 7,
  GPC_STATUS_CACHE = 8,
  GPC_STATUS_IO = 9,
  GPC_STATUS_PANIC = 10,
} GpcStatus;

typedef enum GpcStorage {
  GPC_STORAGE_AUTO = 0,
  GPC_STORAGE_DENSE = 1,
  GPC_STORAGE_LAZY = 2,
} GpcStorage;

/**
 * A trained model.
 */
typedef struct GpcModel GpcModel;

/**
 * Correction operators built for one model.
 */
typedef struct GpcOperators GpcOperators;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful one. Valid until the next call into this library on the same
 * thread.
 */
const char *gpc_last_error(void);

/**
 * Train on `t` locations `x` (`t x n`) with measurements `y`, predicting at
 * `m` test locations `xe` (`m x n`).
 *
 * # Safety
 * Array arguments must hold the stated number of values; `out` must be
 * writable.
 */
enum GpcStatus gpc_model_train(const double *x,
                               const double *y,
                               size_t t,
                               const double *xe,
                               size_t m,
                               size_t n,
                               double alpha,
                               double beta,
                               double sigma_y,
                               struct GpcModel **out);

/**
 * # Safety
 * `model` must come from [`gpc_model_train`] and not be used afterwards.
 */
void gpc_model_free(struct GpcModel *model);

/**
 * Sizes `T`, `M` and `n` of a model.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum GpcStatus gpc_model_dims(const struct GpcModel *model, size_t *t, size_t *m, size_t *n);

/**
 * Copy the posterior mean (`m` values) and covariance (`m x m`) into the
 * caller's buffers. Either output may be null to skip it.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must hold `M` and `M*M`
 * values.
 */
enum GpcStatus gpc_model_posterior(const struct GpcModel *model, double *mean, double *cov);

/**
 * Build the correction operators for `model`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum GpcStatus gpc_operators_build(const struct GpcModel *model,
                                   enum GpcStorage storage,
                                   struct GpcOperators **out);

/**
 * # Safety
 * `ops` must come from this library and not be used afterwards.
 */
void gpc_operators_free(struct GpcOperators *ops);

/**
 * Write operators to a cache file.
 *
 * # Safety
 * Handles must be live; `file` must be a NUL-terminated string.
 */
enum GpcStatus gpc_operators_save(const struct GpcOperators *ops,
                                  const struct GpcModel *model,
                                  const char *file);

/**
 * Read operators from a cache file written for `model`.
 *
 * # Safety
 * `model` must be live; `file` must be a NUL-terminated string; `out` must
 * be writable.
 */
enum GpcStatus gpc_operators_load(const char *file,
                                  const struct GpcModel *model,
                                  struct GpcOperators **out);

/**
 * Correct the posterior for known errors of `k` training points: point
 * `indices[a]` truly sits at its planned location plus row `a` of `deltas`
 * (`k x n`). `order` is 1 or 2. Writes the corrected mean (`M` values) and
 * covariance (`M x M`); either output may be null.
 *
 * # Safety
 * Handles must be live; arrays must hold the stated number of values.
 */
enum GpcStatus gpc_correct(const struct GpcOperators *ops,
                           const struct GpcModel *model,
                           const size_t *indices,
                           const double *deltas,
                           size_t k,
                           uint8_t order,
                           double *mean,
                           double *cov);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GPCORR_H */
