#ifndef FREDA_H
#define FREDA_H

/* Generated by cbindgen from the freda-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum FredaStatus {
  // Success.
  FREDA_STATUS_OK = 0,
  // A required pointer argument was null.
  FREDA_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  FREDA_STATUS_INVALID_UTF8 = 2,
  // File could not be read or written.
  FREDA_STATUS_IO = 3,
  // Malformed file contents.
  FREDA_STATUS_FORMAT = 4,
  // Tensor or batch shape mismatch.
  FREDA_STATUS_SHAPE = 5,
  // Invalid configuration value (the message names the key).
  FREDA_STATUS_CONFIG = 6,
  // Numeric failure, or a requested quantity is undefined.
  FREDA_STATUS_NUMERIC = 7,
  // An internal invariant failed; the library state is still sound.
  FREDA_STATUS_PANIC = 8,
} FredaStatus;

// Opaque handle to a finished adaptation run.
typedef struct FredaRunResult FredaRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *freda_version(void);

// Message of the last failure on this thread. The pointer stays valid until
// the next failing call on the same thread. Never null.
const char *freda_last_error(void);

// Runs one adaptation episode.
//
// `checkpoint_path` and `dataset_path` name container-format files (the
// pretrained model and the clean exemplar dataset). `config_json` holds a
// run configuration in the same JSON schema the CLI accepts; pass null for
// the default configuration. On success `*out` receives a result handle the
// caller must free with `freda_result_free`.
//
// # Safety
// Pointer arguments must be null or valid; `out` must be non-null and
// writable.
enum FredaStatus freda_run(const char *checkpoint_path,
                           const char *dataset_path,
                           const char *config_json,
                           struct FredaRunResult **out);

// JSON report of a finished run (config echo, error rates, step traces).
// The caller frees `*out` with `freda_string_free`.
//
// # Safety
// `result` must come from `freda_run`; `out` must be non-null and writable.
enum FredaStatus freda_result_report_json(const struct FredaRunResult *result, char **out);

// Per-sample CSV (`index,true_label,predicted,cluster,domain,entropy`).
// The caller frees `*out` with `freda_string_free`.
//
// # Safety
// `result` must come from `freda_run`; `out` must be non-null and writable.
enum FredaStatus freda_result_samples_csv(const struct FredaRunResult *result, char **out);

// Overall error rate of the run. Fails with `Numeric` when the stream was
// empty (the rate is undefined, not zero).
//
// # Safety
// `result` must come from `freda_run`; `out` must be non-null and writable.
enum FredaStatus freda_result_overall_error(const struct FredaRunResult *result, double *out);

// Number of stream samples the run consumed.
//
// # Safety
// `result` must come from `freda_run`; `out` must be non-null and writable.
enum FredaStatus freda_result_stream_length(const struct FredaRunResult *result, size_t *out);

// Frees a result handle. Null is a no-op.
//
// # Safety
// `result` must be null or a handle from `freda_run`, freed exactly once.
void freda_result_free(struct FredaRunResult *result);

// Frees a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must be null or a string returned by this library, freed exactly once.
void freda_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FREDA_H */
