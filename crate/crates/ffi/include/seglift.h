#ifndef SEGLIFT_H
#define SEGLIFT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SegliftStatus {
  SEGLIFT_STATUS_OK = 0,
  SEGLIFT_STATUS_NULL_POINTER = 1,
  SEGLIFT_STATUS_INVALID_ARGUMENT = 2,
  SEGLIFT_STATUS_IO = 3,
  SEGLIFT_STATUS_FORMAT = 4,
  SEGLIFT_STATUS_CAPACITY = 5,
  SEGLIFT_STATUS_NUMERICAL = 6,
  SEGLIFT_STATUS_PANIC = 7,
} SegliftStatus;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct SegliftModel SegliftModel;

/**
 * Camera in the dataset convention: row-major 4x4 camera-to-world, pinhole intrinsics.
 */
typedef struct SegliftCamera {
  double camera_to_world[16];
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} SegliftCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; empty if none. Valid until the next
 * failing call on the same thread.
 */
const char *seglift_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *seglift_version(void);

/**
 * Loads a checkpoint written by `seglift train-nerf` or `seglift train-objects`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegliftStatus seglift_model_load(const char *path, struct SegliftModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`seglift_model_load`] and not be used afterwards.
 */
void seglift_model_free(struct SegliftModel *model);

/**
 * Number of object slots; 0 when the checkpoint has no object field.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SegliftStatus seglift_model_num_slots(const struct SegliftModel *model, uint32_t *out);

/**
 * Sets samples per ray (coarse and fine passes) and the background colour.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum SegliftStatus seglift_model_set_sampling(struct SegliftModel *model,
                                              uint32_t coarse_samples,
                                              uint32_t fine_samples,
                                              double background_r,
                                              double background_g,
                                              double background_b);

/**
 * Renders one view deterministically.
 *
 * `rgb` receives `width * height * 3` floats in row-major order. `labels`, when not null,
 * receives `width * height` slot labels (slot + 1, 0 for background) and requires an object
 * field.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum SegliftStatus seglift_model_render(const struct SegliftModel *model,
                                        const struct SegliftCamera *camera,
                                        float *rgb,
                                        uint32_t *labels);

/**
 * IoU of two binary masks given as `len` bytes (nonzero = inside). Two empty masks give 0.
 *
 * # Safety
 * `a` and `b` must hold `len` bytes; `out` must be valid.
 */
enum SegliftStatus seglift_mask_iou(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/**
 * Optimal injective assignment of `rows` masks to `cols` slots maximising total affinity.
 *
 * `affinity` is row-major `rows x cols`; `assignment[m]` receives the slot of mask `m`.
 * Fails with `SEGLIFT_STATUS_CAPACITY` when `rows > cols`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum SegliftStatus seglift_hungarian(const double *affinity,
                                     size_t rows,
                                     size_t cols,
                                     uint32_t *assignment,
                                     double *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGLIFT_H */
