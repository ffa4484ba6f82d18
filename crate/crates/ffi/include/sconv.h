#ifndef SCONV_H
#define SCONV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SconvStatus {
  SCONV_STATUS_OK = 0,
  SCONV_STATUS_NULL_POINTER = 1,
  SCONV_STATUS_CONFIG = 2,
  SCONV_STATUS_IO = 3,
  SCONV_STATUS_DATA = 4,
  SCONV_STATUS_DIMENSION = 5,
  SCONV_STATUS_NUMERIC = 6,
  SCONV_STATUS_STATE = 7,
  SCONV_STATUS_METRIC = 8,
  SCONV_STATUS_GENERATION = 9,
  SCONV_STATUS_IMAGE = 10,
  SCONV_STATUS_INVALID_UTF8 = 11,
  SCONV_STATUS_PANIC = 12,
} SconvStatus;

// Opaque network handle.
typedef struct SconvModel SconvModel;

// Parameter counts by role.
typedef struct SconvParamCounts {
  uint64_t backbone;
  uint64_t sconv_extra;
  uint64_t decoder;
  uint64_t aux;
  uint64_t total;
} SconvParamCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sconv_version(void);

// Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
// `len`) and returns the buffer size needed for the whole message including the NUL.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sconv_last_error(char *buf, size_t len);

// Creates the toy network (`guided == false` gives the plain-convolution twin).
//
// # Safety
// `out` must be a valid pointer; on success it receives a handle owned by the caller.
enum SconvStatus sconv_model_new_toy(uint32_t num_classes,
                                     uint64_t seed,
                                     bool guided,
                                     struct SconvModel **out);

// Loads a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum SconvStatus sconv_model_load(const char *dir, struct SconvModel **out);

// Writes the model as a checkpoint directory.
//
// # Safety
// `m` must be a live handle and `dir` a NUL-terminated string.
enum SconvStatus sconv_model_save(const struct SconvModel *m, const char *dir);

// Releases a handle; null is ignored.
//
// # Safety
// `m` must be null or a handle not yet freed.
void sconv_model_free(struct SconvModel *m);

// Class count, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
uint32_t sconv_model_num_classes(const struct SconvModel *m);

// Channels expected in the spatial input, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
uint32_t sconv_model_spatial_channels(const struct SconvModel *m);

// Number of guided convolutions, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
uint32_t sconv_model_guided_convs(const struct SconvModel *m);

// # Safety
// `m` must be a live handle and `out` a valid pointer.
enum SconvStatus sconv_model_param_counts(const struct SconvModel *m, struct SconvParamCounts *out);

// Evaluation-mode forward pass writing `[n, classes, h, w]` logits.
//
// # Safety
// Every pointer must be valid for the paired length; `m` must be a live handle.
enum SconvStatus sconv_model_forward(struct SconvModel *m,
                                     const float *image,
                                     size_t image_len,
                                     const float *spatial,
                                     size_t spatial_len,
                                     size_t n,
                                     size_t height,
                                     size_t width,
                                     float *logits,
                                     size_t logits_len);

// Per-pixel class prediction for a single image, written as `h * w` labels.
//
// # Safety
// Every pointer must be valid for the paired length; `m` must be a live handle.
enum SconvStatus sconv_model_predict(struct SconvModel *m,
                                     const float *image,
                                     size_t image_len,
                                     const float *spatial,
                                     size_t spatial_len,
                                     size_t height,
                                     size_t width,
                                     uint8_t *labels,
                                     size_t labels_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCONV_H */
