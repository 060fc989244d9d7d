#ifndef QARV_H
#define QARV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which latents the decoder reads; `index` in [`qarv_decompress`] is
 * 1-based and ignored for `Full`.
 */
typedef enum {
  QARV_DECODE_MODE_FULL = 0,
  QARV_DECODE_MODE_PROGRESSIVE = 1,
  QARV_DECODE_MODE_LEAVE_ONE_OUT = 2,
  QARV_DECODE_MODE_DISJOINT = 3,
} QarvDecodeMode;

/**
 * Result code of every call.
 */
typedef enum {
  QARV_STATUS_OK = 0,
  QARV_STATUS_NULL_POINTER = 1,
  QARV_STATUS_INVALID_ARGUMENT = 2,
  QARV_STATUS_IO = 3,
  QARV_STATUS_CHECKPOINT = 4,
  QARV_STATUS_CONTAINER = 5,
  QARV_STATUS_UNSUPPORTED_VERSION = 6,
  QARV_STATUS_MODEL_MISMATCH = 7,
  QARV_STATUS_LAMBDA_OUT_OF_RANGE = 8,
  QARV_STATUS_CORRUPT_STREAM = 9,
  QARV_STATUS_IMAGE = 10,
  /**
   * A numeric failure or an internal panic.
   */
  QARV_STATUS_INTERNAL = 11,
} QarvStatus;

/**
 * Loaded model weights.
 */
typedef struct QarvModel QarvModel;

/**
 * Library-owned bytes.
 */
typedef struct {
  uint8_t *data;
  size_t len;
} QarvBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *qarv_last_error(void);

/**
 * Library version as a NUL-terminated string with static lifetime.
 */
const char *qarv_version(void);

/**
 * Loads a checkpoint. With `use_ema` set, the EMA weights are used
 * when present.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
QarvStatus qarv_model_load(const char *path, bool use_ema, QarvModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`qarv_model_load`] not yet freed.
 */
void qarv_model_free(QarvModel *model);

/**
 * Number of latent streams and the supported λ range.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid or null.
 */
QarvStatus qarv_model_info(const QarvModel *model,
                           uint32_t *num_latents,
                           double *lambda_low,
                           double *lambda_high);

/**
 * Compresses interleaved 8-bit RGB (`width * height * 3` bytes) at rate
 * parameter `lambda`. The container is written to `out`.
 *
 * # Safety
 * `model` must be a live handle, `rgb` valid for the stated size, and
 * `out` valid for a write.
 */
QarvStatus qarv_compress(const QarvModel *model,
                         const uint8_t *rgb,
                         uint32_t width,
                         uint32_t height,
                         double lambda,
                         QarvBuffer *out);

/**
 * Decodes a container into interleaved 8-bit RGB.
 *
 * # Safety
 * `model` must be a live handle, `data` valid for `len` bytes, and the
 * out pointers valid for writes.
 */
QarvStatus qarv_decompress(const QarvModel *model,
                           const uint8_t *data,
                           size_t len,
                           QarvDecodeMode mode,
                           uint32_t index,
                           QarvBuffer *out_rgb,
                           uint32_t *out_width,
                           uint32_t *out_height);

/**
 * Releases bytes returned by the library and resets the buffer; a null
 * or empty buffer is ignored.
 *
 * # Safety
 * `buf` must be null or hold a buffer filled by this library.
 */
void qarv_buffer_free(QarvBuffer *buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QARV_H */
