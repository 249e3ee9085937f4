#ifndef LIFESPAN_H
#define LIFESPAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call. Values 2–4 match the command-line exit codes.
 */
typedef enum LifespanStatus {
  LIFESPAN_STATUS_OK = 0,
  /**
   * A required pointer was null or a buffer size did not fit.
   */
  LIFESPAN_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration, schema or argument error (unknown class, age out of range).
   */
  LIFESPAN_STATUS_CONFIG = 2,
  /**
   * Missing or malformed input data, including image size mismatches.
   */
  LIFESPAN_STATUS_DATA = 3,
  LIFESPAN_STATUS_NUMERIC = 4,
  LIFESPAN_STATUS_CHECKPOINT = 5,
  LIFESPAN_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  LIFESPAN_STATUS_INTERNAL = 7,
} LifespanStatus;

/**
 * Opaque model handle.
 */
typedef struct LifespanModel LifespanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lifespan_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lifespan_version(void);

/**
 * Load a checkpoint. `use_ema` selects the averaged generator weights
 * (recommended) over the live ones. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LifespanStatus lifespan_model_load(const char *path, bool use_ema, struct LifespanModel **out);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`lifespan_model_load`] and not be used afterwards.
 */
void lifespan_model_free(struct LifespanModel *model);

/**
 * Square image side the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lifespan_model_resolution(const struct LifespanModel *model);

/**
 * Number of anchor age classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lifespan_model_num_classes(const struct LifespanModel *model);

/**
 * Lowest and highest year of anchor class `index`.
 *
 * # Safety
 * `model` must be a live handle; `low` and `high` valid pointers.
 */
enum LifespanStatus lifespan_model_class_range(const struct LifespanModel *model,
                                               size_t index,
                                               uint32_t *low,
                                               uint32_t *high);

/**
 * Render `rgb_in` at anchor class `target_class`. Both buffers hold
 * `width·height·3` bytes; width and height must equal the model resolution.
 *
 * # Safety
 * `model` must be a live handle and both buffers valid for that many bytes.
 */
enum LifespanStatus lifespan_transform_class_rgb8(const struct LifespanModel *model,
                                                  const uint8_t *rgb_in,
                                                  size_t width,
                                                  size_t height,
                                                  size_t target_class,
                                                  uint8_t *rgb_out);

/**
 * Render `rgb_in` at an age in years between the first and last anchor,
 * blending the neighbouring anchors' latents.
 *
 * # Safety
 * As [`lifespan_transform_class_rgb8`].
 */
enum LifespanStatus lifespan_transform_age_rgb8(const struct LifespanModel *model,
                                                const uint8_t *rgb_in,
                                                size_t width,
                                                size_t height,
                                                double age_years,
                                                uint8_t *rgb_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIFESPAN_H */
