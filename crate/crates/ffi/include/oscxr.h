#ifndef OSCXR_H
#define OSCXR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum {
  OSCXR_STATUS_OK = 0,
  OSCXR_STATUS_NULL_POINTER = 1,
  OSCXR_STATUS_INVALID_ARGUMENT = 2,
  OSCXR_STATUS_DIMENSION = 3,
  OSCXR_STATUS_CONFIG = 4,
  OSCXR_STATUS_INGESTION = 5,
  OSCXR_STATUS_CHECKPOINT = 6,
  OSCXR_STATUS_NON_FINITE = 7,
  OSCXR_STATUS_DIVERGED = 8,
  OSCXR_STATUS_IO = 9,
  OSCXR_STATUS_PANIC = 10,
} OscxrStatus;

/**
 * Loaded checkpoint and the model it describes.
 */
typedef struct OscxrModel OscxrModel;

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *oscxr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *oscxr_version(void);

/**
 * Loads a checkpoint file and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
OscxrStatus oscxr_model_load(const char *path, OscxrModel **out);

/**
 * Releases a handle from [`oscxr_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle not used afterwards.
 */
void oscxr_model_free(OscxrModel *model);

/**
 * Number of output classes, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t oscxr_model_num_classes(const OscxrModel *model);

/**
 * Expected input side length in pixels, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t oscxr_model_image_side(const OscxrModel *model);

/**
 * Class probabilities for `n` images laid out as `[n, 3, side, side]`
 * floats in `[0, 1]`. Writes `n × num_classes` values to `out_probs`.
 *
 * # Safety
 * `pixels` must hold `n·3·side²` floats and `out_probs` `out_len` doubles.
 */
OscxrStatus oscxr_model_predict(const OscxrModel *model,
                                const float *pixels,
                                size_t n,
                                double *out_probs,
                                size_t out_len);

/**
 * Grad-CAM heatmap of `class_id` for one `[3, side, side]` image, written
 * as `side × side` row-major values in `[0, 1]`.
 *
 * # Safety
 * `pixels` must hold `3·side²` floats and `out` `out_len` doubles.
 */
OscxrStatus oscxr_model_gradcam(const OscxrModel *model,
                                const float *pixels,
                                size_t class_id,
                                double *out,
                                size_t out_len);

/**
 * `‖ZᵀZ − I‖²_F` of one length-`m` feature vector cut into `k` blocks.
 *
 * # Safety
 * `features` must hold `m` doubles; `out` must be writable.
 */
OscxrStatus oscxr_os_penalty(const double *features, size_t m, size_t k, double *out);

/**
 * ECE and OE over `bins` equal-width bins. `correct[i]` is nonzero when
 * prediction `i` was right.
 *
 * # Safety
 * `confidences` and `correct` must hold `n` values; outputs must be writable.
 */
OscxrStatus oscxr_calibration(const double *confidences,
                              const uint8_t *correct,
                              size_t n,
                              size_t bins,
                              double *out_ece,
                              double *out_oe);

/**
 * Brier score of `n × k` row-major probabilities against `labels`.
 *
 * # Safety
 * `probs` must hold `n·k` doubles, `labels` `n` values; `out` must be writable.
 */
OscxrStatus oscxr_brier(const double *probs, size_t n, size_t k, const size_t *labels, double *out);

#endif  /* OSCXR_H */
