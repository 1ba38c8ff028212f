#ifndef SELFCTL_H
#define SELFCTL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Attention mode of one segment (or of the cross-segment rule).
 */
typedef enum SelfctlMode {
  SELFCTL_MODE_CAUSAL = 0,
  SELFCTL_MODE_BIDIRECTIONAL = 1,
} SelfctlMode;

/**
 * Result code of every fallible call.
 */
typedef enum SelfctlStatus {
  SELFCTL_STATUS_OK = 0,
  SELFCTL_STATUS_NULL_POINTER = 1,
  SELFCTL_STATUS_INVALID_ARGUMENT = 2,
  SELFCTL_STATUS_IO = 3,
  SELFCTL_STATUS_CHECKPOINT = 4,
  SELFCTL_STATUS_NUMERICAL = 5,
  SELFCTL_STATUS_INTERNAL = 6,
  SELFCTL_STATUS_PANIC = 7,
} SelfctlStatus;

/**
 * Opaque attention mask.
 */
typedef struct SelfctlMask SelfctlMask;

/**
 * Opaque trained model.
 */
typedef struct SelfctlModel SelfctlModel;

typedef struct SelfctlPolicy {
  enum SelfctlMode text;
  enum SelfctlMode imgcond;
  enum SelfctlMode gen;
  enum SelfctlMode cross;
} SelfctlPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *selfctl_last_error(void);

/**
 * Policy of ablation option `option` (1..=8).
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one `SelfctlPolicy`.
 */
enum SelfctlStatus selfctl_policy_for_option(uint8_t option, struct SelfctlPolicy *out);

/**
 * Builds the attention mask of layout `(text_len, cond_len, gen_len)`.
 *
 * # Safety
 * `policy` must point to a valid `SelfctlPolicy`; `out` to writable storage
 * for one handle. Release the result with `selfctl_mask_free`.
 */
enum SelfctlStatus selfctl_mask_new(size_t text_len,
                                    size_t cond_len,
                                    size_t gen_len,
                                    const struct SelfctlPolicy *policy,
                                    struct SelfctlMask **out);

/**
 * Side length `N` of the `N × N` mask; 0 for NULL.
 *
 * # Safety
 * `mask` must be NULL or a live handle.
 */
size_t selfctl_mask_len(const struct SelfctlMask *mask);

/**
 * Copies the mask row-major into `buf` (1 = query may attend to key).
 *
 * # Safety
 * `mask` must be a live handle and `buf` must hold `buf_len` bytes.
 */
enum SelfctlStatus selfctl_mask_copy(const struct SelfctlMask *mask, uint8_t *buf, size_t buf_len);

/**
 * Depth-`depth` reachability of `mask` as a new mask handle.
 *
 * # Safety
 * `mask` must be a live handle; `out` writable storage for one handle.
 */
enum SelfctlStatus selfctl_mask_reachability(const struct SelfctlMask *mask,
                                             size_t depth,
                                             struct SelfctlMask **out);

/**
 * # Safety
 * `mask` must be NULL or a handle not yet freed.
 */
void selfctl_mask_free(struct SelfctlMask *mask);

/**
 * Loads a checkpoint written by `selfctl train`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` writable storage for
 * one handle. Release the result with `selfctl_model_free`.
 */
enum SelfctlStatus selfctl_model_load(const char *path, struct SelfctlModel **out);

/**
 * Height, width and channels of generated images, and channels of the
 * condition image (0 when the model takes none).
 *
 * # Safety
 * `model` must be a live handle; each output pointer must be writable.
 */
enum SelfctlStatus selfctl_model_image_shape(const struct SelfctlModel *model,
                                             size_t *height,
                                             size_t *width,
                                             size_t *channels,
                                             size_t *cond_channels);

/**
 * Generates one image into `out` (`height × width × channels` floats in
 * `[0, 1]`, row-major, channels last).
 *
 * `text` may be NULL (null text condition). `cond_image` may be NULL (null
 * image condition); otherwise it holds `height × width × cond_channels`
 * floats in `[0, 1]`. The same seed and inputs give identical output.
 *
 * # Safety
 * Pointers must be NULL where allowed or valid for the stated lengths.
 */
enum SelfctlStatus selfctl_model_generate(const struct SelfctlModel *model,
                                          const char *text,
                                          const float *cond_image,
                                          size_t steps,
                                          double temperature,
                                          double guidance_scale,
                                          uint64_t seed,
                                          float *out,
                                          size_t out_len);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void selfctl_model_free(struct SelfctlModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFCTL_H */
