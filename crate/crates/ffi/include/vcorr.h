#ifndef VCORR_H
#define VCORR_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VcorrStatus {
  VCORR_STATUS_OK = 0,
  VCORR_STATUS_NULL_POINTER = 1,
  VCORR_STATUS_INVALID_ARGUMENT = 2,
  VCORR_STATUS_DIMENSION = 3,
  VCORR_STATUS_CONFIG = 4,
  VCORR_STATUS_IO = 5,
  VCORR_STATUS_FORMAT = 6,
  VCORR_STATUS_RUNTIME = 7,
  VCORR_STATUS_PANIC = 8,
} VcorrStatus;

typedef struct VcorrBackbone VcorrBackbone;

typedef struct VcorrFeatures VcorrFeatures;

typedef struct VcorrPropagator VcorrPropagator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *vcorr_last_error_message(void);

/**
 * Loads a backbone checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VcorrStatus vcorr_backbone_load(const char *path, struct VcorrBackbone **out);

/**
 * Creates a randomly initialized small backbone.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VcorrStatus vcorr_backbone_new_small(size_t stride,
                                          size_t channels,
                                          size_t depth,
                                          uint64_t seed,
                                          struct VcorrBackbone **out);

/**
 * # Safety
 * `backbone` must come from a `vcorr_backbone_*` constructor or be null.
 */
void vcorr_backbone_free(struct VcorrBackbone *backbone);

/**
 * Output stride of the backbone, or 0 for a null handle.
 *
 * # Safety
 * `backbone` must be a live handle or null.
 */
size_t vcorr_backbone_stride(const struct VcorrBackbone *backbone);

/**
 * Feature maps of a planar RGB image. Sizes that are not a multiple of the
 * stride are padded by edge repetition.
 *
 * # Safety
 * `rgb` must hold `3 * height * width` floats and `out` be a valid pointer.
 */
enum VcorrStatus vcorr_backbone_forward(const struct VcorrBackbone *backbone,
                                        const float *rgb,
                                        size_t height,
                                        size_t width,
                                        struct VcorrFeatures **out);

/**
 * # Safety
 * `features` must come from `vcorr_backbone_forward` or be null.
 */
void vcorr_features_free(struct VcorrFeatures *features);

/**
 * # Safety
 * All pointers must be valid.
 */
enum VcorrStatus vcorr_features_shape(const struct VcorrFeatures *features,
                                      size_t *channels,
                                      size_t *height,
                                      size_t *width);

/**
 * Copies the `channels x (height * width)` values, row-major, into `out`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum VcorrStatus vcorr_features_copy(const struct VcorrFeatures *features, double *out, size_t len);

/**
 * Row-stochastic affinity between L2-normalized target and reference
 * features, written row-major as `target cells x reference cells`.
 *
 * # Safety
 * `out` must hold `len` doubles.
 */
enum VcorrStatus vcorr_affinity(const struct VcorrFeatures *target,
                                const struct VcorrFeatures *reference,
                                double temperature,
                                bool mutual,
                                double *out,
                                size_t len);

/**
 * Keeps the `k` largest entries of `row` and renormalizes, in place.
 *
 * # Safety
 * `row` must hold `len` doubles.
 */
enum VcorrStatus vcorr_knn_filter(double *row, size_t len, size_t k);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum VcorrStatus vcorr_propagator_new(size_t context,
                                      size_t k,
                                      double temperature,
                                      bool mutual,
                                      struct VcorrPropagator **out);

/**
 * # Safety
 * `propagator` must come from `vcorr_propagator_new` or be null.
 */
void vcorr_propagator_free(struct VcorrPropagator *propagator);

/**
 * Propagates `first_mask` (class ids, `height x width`) through `count`
 * frames stored back to back. Writes `count` masks to `out_masks`; the first
 * is a copy of `first_mask`.
 *
 * # Safety
 * `frames` must hold `count * 3 * height * width` floats, `first_mask` and
 * each output mask `height * width` bytes.
 */
enum VcorrStatus vcorr_propagate_masks(const struct VcorrPropagator *propagator,
                                       const struct VcorrBackbone *backbone,
                                       const float *frames,
                                       size_t count,
                                       size_t height,
                                       size_t width,
                                       const uint8_t *first_mask,
                                       uint8_t *out_masks);

/**
 * Intersection over union of two binary masks (non-zero is foreground).
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; `out` must be valid.
 */
enum VcorrStatus vcorr_jaccard(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VCORR_H */
