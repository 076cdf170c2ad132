#ifndef MOTIONMAG_H
#define MOTIONMAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call. `MM_STATUS_OK` is zero.
 */
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_NULL_POINTER = 1,
  MM_STATUS_INVALID_ARGUMENT = 2,
  MM_STATUS_SHAPE = 3,
  MM_STATUS_IO = 4,
  MM_STATUS_FORMAT = 5,
  MM_STATUS_CHECKPOINT = 6,
  MM_STATUS_NUMERICAL = 7,
  MM_STATUS_PANIC = 8,
} MmStatus;

/*
 Opaque handle to a trained model.
 */
typedef struct MmModel MmModel;

/*
 Architecture of a loaded model.
 */
typedef struct MmModelConfig {
  size_t channels;
  size_t heads;
  size_t topk;
  size_t eta;
  size_t enc_blocks;
  size_t n1;
  size_t n2;
  size_t upscale;
} MmModelConfig;

/*
 Scores of one predicted frame against its ground truth.
 */
typedef struct MmMetrics {
  double rmse;
  double psnr;
  double ssim;
} MmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mm_version(void);

/*
 Message of the last failed call on this thread, or NULL after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *mm_last_error(void);

/*
 Load a checkpoint. On success `*out` owns a model to release with
 [`mm_model_free`]; on failure it is set to NULL.

 # Safety
 `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum MmStatus mm_model_load(const char *path, struct MmModel **out);

/*
 Release a model. NULL is ignored.

 # Safety
 `model` must come from [`mm_model_load`] and not be used afterwards.
 */
void mm_model_free(struct MmModel *model);

/*
 Architecture of `model`.

 # Safety
 `model` and `out` must be valid pointers.
 */
enum MmStatus mm_model_config(const struct MmModel *model, struct MmModelConfig *out);

/*
 Magnify the motion from `reference` to `query` by `alpha`, writing the
 frame to `out`. Extents must be even; `mask_zero` selects zero rather than
 negative-infinity fill for masked attention logits.

 # Safety
 `reference`, `query` and `out` must each hold `height * width * 3` floats.
 */
enum MmStatus mm_model_magnify(const struct MmModel *model,
                               const float *reference,
                               const float *query,
                               size_t height,
                               size_t width,
                               double alpha,
                               bool mask_zero,
                               float *out);

/*
 RMSE, PSNR and SSIM of `pred` against `gt`.

 # Safety
 `pred` and `gt` must each hold `height * width * 3` floats; `out` must be valid.
 */
enum MmStatus mm_metrics(const float *pred,
                         const float *gt,
                         size_t height,
                         size_t width,
                         struct MmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTIONMAG_H */
