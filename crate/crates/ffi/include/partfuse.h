#ifndef PARTFUSE_H
#define PARTFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Call outcome. The data, usage and numeric codes match the CLI exit codes.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_USAGE = 2,
  PF_STATUS_DATA = 3,
  PF_STATUS_NUMERIC = 4,
  PF_STATUS_NULL_POINTER = 5,
  PF_STATUS_PANIC = 6,
} PfStatus;

/**
 * An RGB image with channel values in [0, 1].
 */
typedef struct PfImage PfImage;

/**
 * A binary mask.
 */
typedef struct PfMask PfMask;

/**
 * A trained model loaded from a checkpoint.
 */
typedef struct PfModel PfModel;

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pf_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum PfStatus pf_model_load(const char *path, struct PfModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`pf_model_load`] not yet freed.
 */
void pf_model_free(struct PfModel *model);

/**
 * Image side the model was trained on.
 *
 * # Safety
 * `model` must be a live handle and `side` writable.
 */
enum PfStatus pf_model_image_size(const struct PfModel *model, size_t *side);

/**
 * Image from `height * width * 3` interleaved RGB bytes.
 *
 * # Safety
 * `rgb` must point to that many readable bytes and `out` be writable.
 */
enum PfStatus pf_image_from_rgb8(size_t height,
                                 size_t width,
                                 const uint8_t *rgb,
                                 struct PfImage **out);

/**
 * Reads a PPM or PNG file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum PfStatus pf_image_read(const char *path, struct PfImage **out);

/**
 * Writes PNG for a `.png` path, binary PPM otherwise.
 *
 * # Safety
 * `image` must be a live handle and `path` NUL-terminated.
 */
enum PfStatus pf_image_write(const struct PfImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle; `height` and `width` writable.
 */
enum PfStatus pf_image_dims(const struct PfImage *image, size_t *height, size_t *width);

/**
 * Copies interleaved RGB bytes into `buf`, which must hold `len >= h*w*3`.
 *
 * # Safety
 * `image` must be a live handle and `buf` writable for `len` bytes.
 */
enum PfStatus pf_image_rgb8(const struct PfImage *image, uint8_t *buf, size_t len);

/**
 * # Safety
 * `image` must be null or a live handle.
 */
void pf_image_free(struct PfImage *image);

/**
 * Mask from `height * width` cells, each 0 or 1.
 *
 * # Safety
 * `cells` must point to that many readable bytes and `out` be writable.
 */
enum PfStatus pf_mask_from_cells(size_t height,
                                 size_t width,
                                 const uint8_t *cells,
                                 struct PfMask **out);

/**
 * Reads a PGM mask (nonzero is set).
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum PfStatus pf_mask_read(const char *path, struct PfMask **out);

/**
 * # Safety
 * `mask` must be null or a live handle.
 */
void pf_mask_free(struct PfMask *mask);

/**
 * Swaps parts onto `target`.
 *
 * `target_masks` holds the target's eyes, nose and mouth masks.
 * `sources` and `source_masks` hold one entry per part in the same order;
 * a null source keeps the target's part, otherwise the matching source mask
 * selects the region to transplant. `steps == 0` keeps the checkpoint's
 * DDIM step count.
 *
 * # Safety
 * Each array must hold three entries; every non-null handle must be live.
 */
enum PfStatus pf_swap(const struct PfModel *model,
                      const struct PfImage *target,
                      const struct PfMask *const *target_masks,
                      const struct PfImage *const *sources,
                      const struct PfMask *const *source_masks,
                      uint64_t seed,
                      size_t steps,
                      struct PfImage **out);

/**
 * Cosine similarity of the part embeddings of two masked regions.
 *
 * # Safety
 * All handles must be live and `value` writable.
 */
enum PfStatus pf_fpsim(const struct PfImage *generated,
                       const struct PfMask *generated_mask,
                       const struct PfImage *reference,
                       const struct PfMask *reference_mask,
                       double *value);

/**
 * Mean squared channel difference, over `region` when it is non-null.
 *
 * # Safety
 * `a` and `b` must be live, `region` null or live, `value` writable.
 */
enum PfStatus pf_mse(const struct PfImage *a,
                     const struct PfImage *b,
                     const struct PfMask *region,
                     double *value);

#endif  /* PARTFUSE_H */
