#ifndef GCONV_H
#define GCONV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum GconvStatus {
  GCONV_STATUS_OK = 0,
  GCONV_STATUS_NULL_POINTER = 1,
  GCONV_STATUS_INVALID_UTF8 = 2,
  GCONV_STATUS_CONFIG = 3,
  GCONV_STATUS_DIMENSION = 4,
  GCONV_STATUS_INDEX = 5,
  GCONV_STATUS_VALIDATION = 6,
  GCONV_STATUS_NUMERIC = 7,
  GCONV_STATUS_STORAGE = 8,
  GCONV_STATUS_FORMAT = 9,
  GCONV_STATUS_CORRUPTION = 10,
  GCONV_STATUS_CONSISTENCY = 11,
  GCONV_STATUS_BUFFER_TOO_SMALL = 12,
  GCONV_STATUS_PANIC = 13,
} GconvStatus;

/*
 Opaque model handle: a config and its weights.
 */
typedef struct GconvModel GconvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call into this library on the same thread.
 */
const char *gconv_last_error(void);

/*
 Builds a seeded model from a preset name (`bert-base`, `squeezebert`, `tiny`).

 # Safety
 `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GconvStatus gconv_model_from_preset(const char *name, uint64_t seed, struct GconvModel **out);

/*
 Builds a seeded model from `key = value` config text.

 # Safety
 `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GconvStatus gconv_model_from_config_text(const char *text,
                                              uint64_t seed,
                                              struct GconvModel **out);

/*
 Reads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GconvStatus gconv_model_load(const char *path, struct GconvModel **out);

/*
 Writes a checkpoint file; `bytes_written` may be null.

 # Safety
 `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum GconvStatus gconv_model_save(const struct GconvModel *model,
                                  const char *path,
                                  uint64_t *bytes_written);

/*
 Inference forward pass over `len` tokens. `segment_ids` and `visible`
 may be null (all segment 0, all positions visible). Writes
 `num_classes` logits into `logits` and their count into `logits_len`.

 # Safety
 Non-null array arguments must point to `len` readable elements;
 `logits` must have room for `logits_cap` doubles.
 */
enum GconvStatus gconv_model_forward(const struct GconvModel *model,
                                     const size_t *token_ids,
                                     const size_t *segment_ids,
                                     const bool *visible,
                                     size_t len,
                                     double *logits,
                                     size_t logits_cap,
                                     size_t *logits_len);

/*
 Number of logits the model produces.

 # Safety
 `model` must come from this library; `out` must be writable.
 */
enum GconvStatus gconv_model_num_classes(const struct GconvModel *model, size_t *out);

/*
 Closed-form parameter count.

 # Safety
 `model` must come from this library; `out` must be writable.
 */
enum GconvStatus gconv_model_count_params(const struct GconvModel *model, uint64_t *out);

/*
 Analytic multiply-accumulate count and GFLOPs (2 FLOPs per MAC) at `seq_len`.
 Either output may be null.

 # Safety
 `model` must come from this library.
 */
enum GconvStatus gconv_model_count_flops(const struct GconvModel *model,
                                         size_t seq_len,
                                         uint64_t *total_macs,
                                         double *gflops);

/*
 Releases a model. Null is accepted and ignored.

 # Safety
 `model` must come from this library and must not be used afterwards.
 */
void gconv_model_free(struct GconvModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCONV_H */
