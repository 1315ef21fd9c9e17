#ifndef VESSELGRADE_H
#define VESSELGRADE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of coronary segments per patient.
 */
#define VG_SEGMENT_COUNT 11

typedef enum VgStatus {
  VG_STATUS_OK = 0,
  VG_STATUS_NULL_POINTER = 1,
  VG_STATUS_IO = 2,
  VG_STATUS_FORMAT = 3,
  VG_STATUS_DIMENSION = 4,
  VG_STATUS_NUMERIC = 5,
  VG_STATUS_CONFIG = 6,
  VG_STATUS_PANIC = 7,
  VG_STATUS_OTHER = 8,
} VgStatus;

/**
 * A loaded checkpoint. Opaque to C.
 */
typedef struct VgModel VgModel;

/**
 * Scores of one patient.
 */
typedef struct VgPrediction {
  double segment_scores[VG_SEGMENT_COUNT];
  double cadrads_score;
  double calc_score;
  /**
   * CAD-RADS class 0..5 from the checkpoint's thresholds.
   */
  int32_t cadrads_class;
  /**
   * Calcium grade 0..4, or -1 when the model was not trained on calcium.
   */
  int32_t calc_class;
  /**
   * Pooled features each segment supplied.
   */
  uint32_t attribution[VG_SEGMENT_COUNT];
} VgPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *vg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vg_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns the model; release it with
 * [`vg_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VgStatus vg_model_load(const char *path, struct VgModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`vg_model_load`] and not be used afterwards.
 */
void vg_model_free(struct VgModel *model);

/**
 * Shape of one segment view: planes, height and width.
 *
 * # Safety
 * All pointers must be valid.
 */
enum VgStatus vg_model_view_shape(const struct VgModel *model,
                                  size_t *planes,
                                  size_t *height,
                                  size_t *width);

/**
 * Scores `patients` patients. `views` holds `patients × 11` segment views,
 * each planes × height × width values in row-major order; `out` receives one
 * prediction per patient.
 *
 * # Safety
 * `views` must point to `values` readable doubles and `out` to `patients`
 * writable predictions.
 */
enum VgStatus vg_model_predict(const struct VgModel *model,
                               const double *views,
                               size_t values,
                               size_t patients,
                               struct VgPrediction *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* VESSELGRADE_H */
