#ifndef MBMD_FFI_H
#define MBMD_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbmdStatus {
  MBMD_STATUS_OK = 0,
  MBMD_STATUS_NULL_POINTER = 1,
  MBMD_STATUS_IO = 2,
  MBMD_STATUS_FORMAT = 3,
  MBMD_STATUS_SHAPE = 4,
  MBMD_STATUS_NUMERIC = 5,
  MBMD_STATUS_PANIC = 6,
} MbmdStatus;

// Opaque handle to a loaded model.
typedef struct MbmdModel MbmdModel;

typedef struct MbmdModelInfo {
  size_t channels;
  size_t window_len;
  size_t num_classes;
  size_t num_branches;
} MbmdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint from a NUL-terminated UTF-8 path into `*out`.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer. The handle
// written to `*out` must be released with `mbmd_model_free`.
enum MbmdStatus mbmd_model_load(const char *path, struct MbmdModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from `mbmd_model_load` and not have been freed.
void mbmd_model_free(struct MbmdModel *model);

// # Safety
// `model` and `info` must be valid pointers.
enum MbmdStatus mbmd_model_info(const struct MbmdModel *model, struct MbmdModelInfo *info);

// Runs raw-signal inference on `batch` windows laid out as
// `batch x channels x len` row-major floats, writing `batch x num_classes`
// logits.
//
// # Safety
// `windows` must point to `batch * channels * len` floats and `logits` to
// `logits_len` writable floats.
enum MbmdStatus mbmd_model_infer(const struct MbmdModel *model,
                                 const float *windows,
                                 size_t batch,
                                 size_t channels,
                                 size_t len,
                                 float *logits,
                                 size_t logits_len);

// Splits a single-channel 128 Hz signal into the bands of the preset with
// `branches` branches (2, 3 or 6). Band `b` is written to
// `out[b * len .. (b + 1) * len]`.
//
// # Safety
// `signal` must point to `len` doubles and `out` to `out_len` writable doubles.
enum MbmdStatus mbmd_wpd_decompose(const double *signal,
                                   size_t len,
                                   size_t branches,
                                   double *out,
                                   size_t out_len);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `cap > 0`). Returns the full message length.
//
// # Safety
// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
size_t mbmd_last_error(char *buf, size_t cap);

// Static NUL-terminated version string.
const char *mbmd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBMD_FFI_H */
