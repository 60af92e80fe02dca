#ifndef STYLEKIT_H
#define STYLEKIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum StylekitStatus {
  STYLEKIT_STATUS_OK = 0,
  /**
   * Null pointer, bad size, or a buffer that is too small.
   */
  STYLEKIT_STATUS_INVALID_ARGUMENT = 1,
  STYLEKIT_STATUS_IO = 2,
  /**
   * The file is not a model or is corrupt.
   */
  STYLEKIT_STATUS_DECODE = 3,
  /**
   * NaN or divergence inside the model.
   */
  STYLEKIT_STATUS_NUMERICAL = 4,
  /**
   * Any other library error.
   */
  STYLEKIT_STATUS_INTERNAL = 5,
  STYLEKIT_STATUS_PANIC = 6,
} StylekitStatus;

/**
 * A loaded classifier. Create with [`stylekit_model_load`], release with
 * [`stylekit_model_free`].
 */
typedef struct StylekitModel StylekitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *stylekit_last_error(void);

/**
 * Loads a network or bag-of-words model from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum StylekitStatus stylekit_model_load(const char *path, struct StylekitModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`stylekit_model_load`] and not be freed twice.
 */
void stylekit_model_free(struct StylekitModel *model);

/**
 * Number of classes the model distinguishes, or 0 for a null model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t stylekit_model_num_classes(const struct StylekitModel *model);

/**
 * Copies the class ids, in confidence order, into `ids[0..len]`.
 *
 * # Safety
 * `model` must be a live handle and `ids` must hold `len` values.
 */
enum StylekitStatus stylekit_model_class_ids(const struct StylekitModel *model,
                                             uint32_t *ids,
                                             uintptr_t len);

/**
 * Classifies one page given as interleaved 8-bit RGB, `height * width * 3`
 * bytes, row-major. Writes the predicted class id, and when `confidences`
 * is non-null, one confidence per class in [`stylekit_model_class_ids`]
 * order.
 *
 * # Safety
 * `model` must be a live handle, `rgb` must hold `height * width * 3`
 * bytes, `class_id` must be valid, and `confidences` must be null or hold
 * `confidences_len` values.
 */
enum StylekitStatus stylekit_model_classify(const struct StylekitModel *model,
                                            const uint8_t *rgb,
                                            uintptr_t height,
                                            uintptr_t width,
                                            uint32_t *class_id,
                                            double *confidences,
                                            uintptr_t confidences_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEKIT_H */
