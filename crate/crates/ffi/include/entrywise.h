#ifndef ENTRYWISE_H
#define ENTRYWISE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum EwStatus {
  EW_STATUS_OK = 0,
  EW_STATUS_NULL_POINTER = 1,
  EW_STATUS_INVALID_INPUT = 2,
  EW_STATUS_NUMERICAL = 3,
  EW_STATUS_PANIC = 4,
} EwStatus;

typedef enum EwModel {
  EW_MODEL_POISSON_THINNED = 0,
  EW_MODEL_EXP_ONSET = 1,
  EW_MODEL_ZERO = 2,
} EwModel;

typedef enum EwBand {
  EW_BAND_POINT = 0,
  EW_BAND_THEORETICAL = 1,
  /**
   * Uses `EwConfig::half_width`.
   */
  EW_BAND_FIXED = 2,
} EwBand;

typedef enum EwCompletion {
  EW_COMPLETION_SVD = 0,
  EW_COMPLETION_SOFT_IMPUTE = 1,
} EwCompletion;

typedef enum EwEstimator {
  EW_ESTIMATOR_MOMENTS = 0,
  EW_ESTIMATOR_LIKELIHOOD = 1,
} EwEstimator;

/**
 * Opaque detection result; can be re-solved for other budgets.
 */
typedef struct EwDetection EwDetection;

/**
 * Opaque set of observed counts.
 */
typedef struct EwObservations EwObservations;

/**
 * Detector settings. Start from [`ew_config_default`] and override fields.
 */
typedef struct EwConfig {
  size_t rank;
  double gamma;
  /**
   * Number of CDF moments used by the moment fit.
   */
  size_t moments;
  enum EwModel model;
  enum EwBand band;
  double half_width;
  uint64_t seed;
  enum EwCompletion completion;
  enum EwEstimator estimator;
} EwConfig;

/**
 * One observed entry of a detection result.
 */
typedef struct EwEntry {
  size_t row;
  size_t col;
  /**
   * Fractional selection weight in `[0, 1]`.
   */
  double t;
  double f_l;
  double f_point;
  double f_r;
  /**
   * Whether the entry is in the sampled anomaly mask.
   */
  bool selected;
} EwEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL.
 *
 * The pointer stays valid until the next call into this library on the same
 * thread; do not free it.
 */
const char *ew_last_error_message(void);

/**
 * Builds an observation set from `len` parallel `(row, col, count)` arrays.
 *
 * # Safety
 * `rows`, `cols` and `counts` must each point to `len` readable elements
 * (they may be NULL when `len == 0`); `out` must be writable.
 */
enum EwStatus ew_observations_new(size_t n,
                                  size_t m,
                                  const size_t *rows,
                                  const size_t *cols,
                                  const uint64_t *counts,
                                  size_t len,
                                  struct EwObservations **out);

/**
 * Number of observed entries; 0 for NULL.
 *
 * # Safety
 * `obs` must be NULL or a live handle from [`ew_observations_new`].
 */
size_t ew_observations_len(const struct EwObservations *obs);

/**
 * # Safety
 * `obs` must be NULL or a handle from [`ew_observations_new`] not yet freed.
 */
void ew_observations_free(struct EwObservations *obs);

/**
 * Default settings for a rank and working model.
 */
struct EwConfig ew_config_default(size_t rank, enum EwModel model);

/**
 * Runs the detector end to end at `config.gamma`.
 *
 * # Safety
 * `obs` and `config` must be valid pointers; `out` must be writable.
 */
enum EwStatus ew_detect(const struct EwObservations *obs,
                        const struct EwConfig *config,
                        struct EwDetection **out);

/**
 * Re-solves the selection for another budget, reusing the fitted stages.
 *
 * # Safety
 * `det` must be a live handle from [`ew_detect`].
 */
enum EwStatus ew_detection_solve(struct EwDetection *det, double gamma);

/**
 * Number of observed entries in the result; 0 for NULL.
 *
 * # Safety
 * `det` must be NULL or a live handle from [`ew_detect`].
 */
size_t ew_detection_len(const struct EwDetection *det);

/**
 * Copies entry `index` (in observation order) into `out`.
 *
 * # Safety
 * `det` must be a live handle from [`ew_detect`]; `out` must be writable.
 */
enum EwStatus ew_detection_entry(const struct EwDetection *det, size_t index, struct EwEntry *out);

/**
 * Fitted anomaly probability and model parameters.
 *
 * Writes up to `alpha_cap` parameters into `alpha` and the true count into
 * `alpha_len`.
 *
 * # Safety
 * `det` must be a live handle; `p_anom` and `alpha_len` must be writable;
 * `alpha` must hold `alpha_cap` elements (NULL allowed when `alpha_cap == 0`).
 */
enum EwStatus ew_detection_theta(const struct EwDetection *det,
                                 double *p_anom,
                                 double *alpha,
                                 size_t alpha_cap,
                                 size_t *alpha_len);

/**
 * # Safety
 * `det` must be NULL or a handle from [`ew_detect`] not yet freed.
 */
void ew_detection_free(struct EwDetection *det);

/**
 * Trapezoid area under `len` ROC points sorted by FPR.
 *
 * # Safety
 * `fpr` and `tpr` must each point to `len` readable values; `out` must be
 * writable.
 */
enum EwStatus ew_auc(const double *fpr, const double *tpr, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENTRYWISE_H */
