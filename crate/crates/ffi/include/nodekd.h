#ifndef NODEKD_H
#define NODEKD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum NodekdStatus {
  NODEKD_STATUS_OK = 0,
  NODEKD_STATUS_NULL_POINTER = 1,
  NODEKD_STATUS_INVALID_ARGUMENT = 2,
  NODEKD_STATUS_IO = 3,
  NODEKD_STATUS_CHECKPOINT = 4,
  NODEKD_STATUS_SHAPE = 5,
  NODEKD_STATUS_NUMERIC = 6,
  NODEKD_STATUS_PANIC = 7,
} NodekdStatus;

/**
 * Opaque handle to a loaded teacher or student.
 */
typedef struct NodekdModel NodekdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *nodekd_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *nodekd_version(void);

/**
 * Loads a checkpoint written by `nodekd`. On success `*out` owns a handle
 * that must be released with [`nodekd_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum NodekdStatus nodekd_model_load(const char *path, struct NodekdModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`nodekd_model_load`] and not be used afterwards.
 */
void nodekd_model_free(struct NodekdModel *model);

/**
 * Number of output classes.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum NodekdStatus nodekd_model_num_classes(const struct NodekdModel *model, size_t *out);

/**
 * Input shape `(channels, height, width)` written to `out[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `out` point to 3 writable values.
 */
enum NodekdStatus nodekd_model_input_shape(const struct NodekdModel *model, size_t *out);

/**
 * Logits of `n` images laid out as `(n, c, h, w)` in row-major order,
 * pixel values in `[0, 1]`. Writes `n * classes` values to `out`;
 * `out_len` must be at least that.
 *
 * # Safety
 * `images` must hold `n * c * h * w` values and `out` `out_len` values.
 */
enum NodekdStatus nodekd_model_logits(const struct NodekdModel *model,
                                      const double *images,
                                      size_t n,
                                      double *out,
                                      size_t out_len);

/**
 * Predicted class of each of `n` images; `out` receives `n` values.
 *
 * # Safety
 * As [`nodekd_model_logits`], with `out` holding `n` values.
 */
enum NodekdStatus nodekd_model_predict(const struct NodekdModel *model,
                                       const double *images,
                                       size_t n,
                                       size_t *out);

/**
 * Temperature-softened softmax of a `(rows, cols)` logit matrix into `out`.
 *
 * # Safety
 * `logits` and `out` must each hold `rows * cols` values.
 */
enum NodekdStatus nodekd_soft_targets(const double *logits,
                                      size_t rows,
                                      size_t cols,
                                      double temperature,
                                      double *out);

/**
 * Attack step count for an L-infinity budget `epsilon` in `[0, 1]` pixel
 * units.
 */
size_t nodekd_num_steps(double epsilon);

/**
 * Step-decay learning rate for `epoch` of `total_epochs`.
 */
double nodekd_lr_schedule(double initial_lr, size_t epoch, size_t total_epochs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NODEKD_H */
