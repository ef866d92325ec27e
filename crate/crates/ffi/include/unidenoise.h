#ifndef UNIDENOISE_H
#define UNIDENOISE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum UdnStatus {
  UDN_STATUS_OK = 0,
  UDN_STATUS_NULL_ARGUMENT = 1,
  UDN_STATUS_INVALID_ARGUMENT = 2,
  UDN_STATUS_DATA = 3,
  UDN_STATUS_NUMERIC = 4,
  UDN_STATUS_BUFFER_TOO_SMALL = 5,
  UDN_STATUS_PANIC = 6,
  UDN_STATUS_INTERNAL = 7,
} UdnStatus;

/**
 * Opaque model handle.
 */
typedef struct UdnModel UdnModel;

typedef struct UdnSampleParams {
  uint32_t steps;
  double cfg_scale;
  /**
   * 0 keeps the whole image vocabulary.
   */
  uint32_t top_k;
  double temperature;
  /**
   * Nonzero picks the most likely code at every step.
   */
  uint8_t greedy;
  uint64_t seed;
} UdnSampleParams;

typedef struct UdnModelInfo {
  uint32_t text_vocab;
  uint32_t image_vocab;
  uint32_t total_vocab;
  /**
   * Token id of the first image code.
   */
  uint32_t image_offset;
  uint32_t eos;
  /**
   * Prompt tokens accepted, BOS excluded.
   */
  uint32_t max_prompt;
  uint32_t image_cells;
  uint32_t response_len;
  uint64_t num_params;
} UdnModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Greedy 16-step, unguided defaults.
 */
struct UdnSampleParams udn_sample_params_default(void);

/**
 * Loads a checkpoint. On success `*out` holds a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UdnStatus udn_model_load(const char *path, struct UdnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`udn_model_load`] not yet freed.
 */
void udn_model_free(struct UdnModel *model);

/**
 * # Safety
 * `model` must be a live handle; `info` must be writable.
 */
enum UdnStatus udn_model_info(const struct UdnModel *model, struct UdnModelInfo *info);

/**
 * Samples one grid for `prompt` (text token ids). Writes the grid's token
 * ids to `out_grid` and its length to `*out_len`; a short buffer yields
 * `BufferTooSmall` with `*out_len` set to the size needed.
 *
 * # Safety
 * Pointers must be valid for the lengths given; `params` and `out_len`
 * must be non-null.
 */
enum UdnStatus udn_sample_image(const struct UdnModel *model,
                                const uint32_t *prompt,
                                size_t prompt_len,
                                const struct UdnSampleParams *params,
                                uint32_t *out_grid,
                                size_t out_cap,
                                size_t *out_len);

/**
 * Jacobi-decodes a caption for `grid` (image token ids). Writes the caption
 * up to and including EOS; `*iterations` (if non-null) receives the
 * forward passes spent.
 *
 * # Safety
 * Pointers must be valid for the lengths given; `out_len` must be
 * non-null.
 */
enum UdnStatus udn_decode_caption(const struct UdnModel *model,
                                  const uint32_t *grid,
                                  size_t grid_len,
                                  uint64_t seed,
                                  uint32_t *out_tokens,
                                  size_t out_cap,
                                  size_t *out_len,
                                  uint32_t *iterations);

/**
 * Copies this thread's last error message, NUL-terminated and truncated to
 * `cap`, into `buf`. Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t udn_last_error(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNIDENOISE_H */
