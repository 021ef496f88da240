#ifndef CONTRASPEECH_H
#define CONTRASPEECH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_POINTER = 1,
  CS_STATUS_INVALID_ARGUMENT = 2,
  CS_STATUS_IO = 3,
  CS_STATUS_FORMAT = 4,
  CS_STATUS_DIMENSION = 5,
  CS_STATUS_INSUFFICIENT_DATA = 6,
  CS_STATUS_ALIGNMENT = 7,
  CS_STATUS_BUFFER_TOO_SMALL = 8,
  CS_STATUS_INTERNAL = 9,
} CsStatus;

/**
 * Row-major feature matrix.
 */
typedef struct CsFeatures CsFeatures;

/**
 * Fitted PCA model.
 */
typedef struct CsPcaModel CsPcaModel;

/**
 * Pretrained representation model (cpc or masked).
 */
typedef struct CsRepresentation CsRepresentation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread (empty after a
 * success). Valid until the next call into this library on the same thread.
 */
const char *cs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cs_version(void);

/**
 * Copies `rows * cols` row-major floats into a new feature matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` floats; `out` must be writable.
 */
enum CsStatus cs_features_new(const float *data, size_t rows, size_t cols, struct CsFeatures **out);

/**
 * # Safety
 * `features` must be null or a handle from this library not yet freed.
 */
void cs_features_free(struct CsFeatures *features);

/**
 * # Safety
 * `features` must be a live handle; `rows` and `cols` must be writable.
 */
enum CsStatus cs_features_shape(const struct CsFeatures *features, size_t *rows, size_t *cols);

/**
 * Copies the row-major values into `out`, which holds `capacity` floats.
 *
 * # Safety
 * `features` must be a live handle; `out` must hold `capacity` floats.
 */
enum CsStatus cs_features_copy(const struct CsFeatures *features, float *out, size_t capacity);

/**
 * # Safety
 * `features` must be a live handle; `out` must be writable.
 */
enum CsStatus cs_pca_fit(const struct CsFeatures *features, struct CsPcaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void cs_pca_free(struct CsPcaModel *model);

/**
 * # Safety
 * `model` must be a live handle; `dim` must be writable.
 */
enum CsStatus cs_pca_dim(const struct CsPcaModel *model, size_t *dim);

/**
 * Writes the explained-variance ratios (descending) into `out`.
 *
 * # Safety
 * `model` must be a live handle; `out` must hold `capacity` doubles.
 */
enum CsStatus cs_pca_explained_variance_ratio(const struct CsPcaModel *model,
                                              double *out,
                                              size_t capacity);

/**
 * Smallest number of components whose cumulative ratio reaches `threshold`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CsStatus cs_pca_linear_dimensionality(const struct CsPcaModel *model,
                                           double threshold,
                                           size_t *out);

/**
 * Projects onto all components; `whiten` non-zero divides by the standard
 * deviations.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum CsStatus cs_pca_transform(const struct CsPcaModel *model,
                               const struct CsFeatures *features,
                               int whiten,
                               struct CsFeatures **out);

/**
 * Negative log-likelihood of `target` under per-frame log-probabilities
 * (`frames * vocab`, row-major, blank at index 0).
 *
 * # Safety
 * `log_probs` must hold `frames * vocab` floats, `target` `target_len`
 * indices; `loss` must be writable.
 */
enum CsStatus cs_ctc_loss(const float *log_probs,
                          size_t frames,
                          size_t vocab,
                          const size_t *target,
                          size_t target_len,
                          double *loss);

/**
 * Greedy CTC decoding. Writes at most `capacity` labels to `out` and the
 * decoded length to `out_len`; fails with `CsStatus::BufferTooSmall` (with
 * `out_len` set) when the buffer is short.
 *
 * # Safety
 * `log_probs` must hold `frames * vocab` floats; `out` must hold `capacity`
 * values; `out_len` must be writable.
 */
enum CsStatus cs_greedy_decode(const float *log_probs,
                               size_t frames,
                               size_t vocab,
                               size_t *out,
                               size_t capacity,
                               size_t *out_len);

/**
 * Loads a representation checkpoint written by `contraspeech pretrain`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CsStatus cs_representation_load(const char *path, struct CsRepresentation **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void cs_representation_free(struct CsRepresentation *model);

/**
 * Feature width and frame rate (Hz) of the model's output.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum CsStatus cs_representation_info(const struct CsRepresentation *model,
                                     size_t *width,
                                     double *rate);

/**
 * Extracts representations from 16 kHz mono samples.
 *
 * # Safety
 * `model` must be a live handle; `samples` must hold `len` floats; `out`
 * must be writable.
 */
enum CsStatus cs_representation_extract(const struct CsRepresentation *model,
                                        const float *samples,
                                        size_t len,
                                        struct CsFeatures **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONTRASPEECH_H */
