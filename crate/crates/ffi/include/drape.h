#ifndef DRAPE_H
#define DRAPE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DRAPE_STATUS_OK = 0,
  DRAPE_STATUS_NULL_ARGUMENT = 1,
  DRAPE_STATUS_INVALID_ARGUMENT = 2,
  DRAPE_STATUS_BUFFER_TOO_SMALL = 3,
  DRAPE_STATUS_IO = 4,
  DRAPE_STATUS_FORMAT = 5,
  DRAPE_STATUS_HASH_MISMATCH = 6,
  DRAPE_STATUS_WRONG_MODE = 7,
  DRAPE_STATUS_NON_FINITE = 8,
  DRAPE_STATUS_PANIC = 9,
} DrapeStatus;

typedef enum {
  DRAPE_MODEL_KIND_POSE = 0,
  DRAPE_MODEL_KIND_RESIZE = 1,
} DrapeModelKind;

/**
 * Opaque model handle.
 */
typedef struct DrapeModel DrapeModel;

/**
 * Sizes needed to allocate input and output buffers.
 */
typedef struct {
  uint32_t kind;
  size_t vertices;
  size_t faces;
  /**
   * Joints in a pose; each contributes three axis-angle values.
   */
  size_t joints;
  /**
   * Shape coefficients accepted by the resizer (0 for pose models).
   */
  size_t shape_params;
} DrapeModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static version string of the library.
 */
const char *drape_version(void);

/**
 * Message from the latest call on this thread; empty after a success. The
 * pointer stays valid until the next drape call on the same thread.
 */
const char *drape_last_error(void);

/**
 * Loads a pose or resize checkpoint together with its body and garment.
 * With `force` false, a checkpoint whose recorded garment or body hash
 * differs from the given files is rejected with `HashMismatch`.
 *
 * # Safety
 * Paths must be null or NUL-terminated strings; `out` must be writable.
 */
DrapeStatus drape_model_load(const char *checkpoint,
                             const char *body,
                             const char *garment,
                             bool force,
                             DrapeModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`drape_model_load`] and not be used afterwards.
 */
void drape_model_free(DrapeModel *model);

/**
 * # Safety
 * `model` must be a live handle; `info` must be writable.
 */
DrapeStatus drape_model_info(const DrapeModel *model, DrapeModelInfo *info);

/**
 * Copies the garment triangles as `3 * faces` vertex indices.
 *
 * # Safety
 * `out` must point to `out_len` writable values.
 */
DrapeStatus drape_model_faces(const DrapeModel *model, uint32_t *out, size_t out_len);

/**
 * Posed outfit for one pose. `theta` holds `3 * joints` axis-angle values;
 * `translation` is null or three values. Writes `3 * vertices` coordinates.
 *
 * # Safety
 * Pointers must be null or valid for the stated lengths.
 */
DrapeStatus drape_pose_outfit(const DrapeModel *model,
                              const double *theta,
                              size_t theta_len,
                              const double *translation,
                              double *out,
                              size_t out_len);

/**
 * Batched form of [`drape_pose_outfit`] without translation. `thetas` holds
 * `count` poses back to back; `out` receives `count * 3 * vertices` values.
 * Each pose's output equals the single-pose call bit for bit.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
DrapeStatus drape_pose_outfits(const DrapeModel *model,
                               const double *thetas,
                               size_t count,
                               double *out,
                               size_t out_len);

/**
 * Resized outfit for shape `beta` (`beta_len` values) and a two-value
 * tightness `gamma`. When `body_out` is non-null the reshaped body rest
 * mesh is written there as well.
 *
 * # Safety
 * Pointers must be null or valid for the stated lengths.
 */
DrapeStatus drape_resize_forward(const DrapeModel *model,
                                 const double *beta,
                                 size_t beta_len,
                                 const double *gamma,
                                 double *out,
                                 size_t out_len,
                                 double *body_out,
                                 size_t body_out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRAPE_H */
