#ifndef CRYALERT_H
#define CRYALERT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  CRY_STATUS_OK = 0,
  CRY_STATUS_NULL_POINTER = 1,
  CRY_STATUS_INVALID_ARGUMENT = 2,
  CRY_STATUS_IO = 3,
  CRY_STATUS_FORMAT = 4,
  CRY_STATUS_UNSUPPORTED = 5,
  CRY_STATUS_NOT_A_MODEL = 6,
  CRY_STATUS_VERSION = 7,
  CRY_STATUS_CORRUPT = 8,
  CRY_STATUS_TOO_SHORT = 9,
  CRY_STATUS_CONFIG = 10,
  CRY_STATUS_INTERNAL = 11,
} CryStatus;

/**
 * A loaded model. Immutable once loaded, so one handle may be shared
 * between threads.
 */
typedef struct CryModel CryModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file. On success `*out` owns a handle to release with
 * `cry_model_free`; on failure it is set to NULL.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
CryStatus cry_model_load(const char *path, CryModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from `cry_model_load` and not be used afterwards.
 */
void cry_model_free(CryModel *model);

/**
 * Number of classes, or 0 for a NULL model.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t cry_model_class_count(const CryModel *model);

/**
 * Name of class `index`, owned by the model, or NULL when out of range.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
const char *cry_model_class_name(const CryModel *model, size_t index);

/**
 * Classifies mono samples in [-1, 1] at `sample_rate` Hz. Writes one
 * probability per class, in class-index order, into `probs`.
 *
 * # Safety
 * `samples` must point to `len` floats and `probs` to `probs_len` doubles.
 */
CryStatus cry_predict_samples(const CryModel *model,
                              const float *samples,
                              size_t len,
                              uint32_t sample_rate,
                              double *probs,
                              size_t probs_len);

/**
 * Like `cry_predict_samples`, reading a 16-bit PCM WAV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `probs` point to `probs_len` doubles.
 */
CryStatus cry_predict_wav(const CryModel *model, const char *path, double *probs, size_t probs_len);

/**
 * Classifies a WAV file and renders the alert event as one line of JSON.
 * `*json_out` must be released with `cry_string_free`.
 *
 * # Safety
 * `alert_classes` must point to `alert_class_count` NUL-terminated strings;
 * `path` must be NUL-terminated and `json_out` valid.
 */
CryStatus cry_classify_wav_json(const CryModel *model,
                                const char *path,
                                const char *const *alert_classes,
                                size_t alert_class_count,
                                double threshold,
                                char **json_out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void cry_string_free(char *s);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into this library from the same thread.
 */
const char *cry_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *cry_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRYALERT_H */
