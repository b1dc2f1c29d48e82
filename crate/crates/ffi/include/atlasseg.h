#ifndef ATLASSEG_H
#define ATLASSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AtlassegStatus {
  ATLASSEG_STATUS_OK = 0,
  ATLASSEG_STATUS_INVALID_ARGUMENT = 1,
  ATLASSEG_STATUS_DATA = 2,
  ATLASSEG_STATUS_NUMERICAL = 3,
  ATLASSEG_STATUS_NULL_POINTER = 4,
  ATLASSEG_STATUS_PANIC = 5,
} AtlassegStatus;

/**
 * Probabilistic atlas with its label grouping.
 */
typedef struct AtlassegAtlas AtlassegAtlas;

/**
 * Label map.
 */
typedef struct AtlassegLabels AtlassegLabels;

/**
 * Trained network checkpoint.
 */
typedef struct AtlassegNetwork AtlassegNetwork;

/**
 * Per-class Gaussian means and variances.
 */
typedef struct AtlassegParams AtlassegParams;

/**
 * Scalar image.
 */
typedef struct AtlassegVolume AtlassegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *atlasseg_last_error(void);

/**
 * Reads a `.vol` scalar volume.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_volume_read(const char *path, struct AtlassegVolume **out);

/**
 * Creates a volume from `len` row-major values over `ndim` (2 or 3) dims.
 *
 * # Safety
 * `dims` must point to `ndim` values and `data` to `len` values.
 */
enum AtlassegStatus atlasseg_volume_new(const size_t *dims,
                                        size_t ndim,
                                        const float *data,
                                        size_t len,
                                        struct AtlassegVolume **out);

/**
 * Number of voxels, or 0 for NULL.
 *
 * # Safety
 * `v` must be NULL or a live handle.
 */
size_t atlasseg_volume_num_voxels(const struct AtlassegVolume *v);

/**
 * # Safety
 * `v` must be NULL or a handle not yet freed.
 */
void atlasseg_volume_free(struct AtlassegVolume *v);

/**
 * Reads a probabilistic atlas.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_atlas_read(const char *path, struct AtlassegAtlas **out);

/**
 * Number of labels, or 0 for NULL.
 *
 * # Safety
 * `a` must be NULL or a live handle.
 */
size_t atlasseg_atlas_num_labels(const struct AtlassegAtlas *a);

/**
 * # Safety
 * `a` must be NULL or a handle not yet freed.
 */
void atlasseg_atlas_free(struct AtlassegAtlas *a);

/**
 * Reads a label map.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_labels_read(const char *path, struct AtlassegLabels **out);

/**
 * Writes a label map as a `.vol` pair.
 *
 * # Safety
 * `labels` must be a live handle and `path` a NUL-terminated string.
 */
enum AtlassegStatus atlasseg_labels_write(const struct AtlassegLabels *labels, const char *path);

/**
 * Copies the labels into `out`, which must hold `len >= num_voxels` values.
 *
 * # Safety
 * `labels` must be a live handle; `out` must point to `len` writable values.
 */
enum AtlassegStatus atlasseg_labels_copy(const struct AtlassegLabels *labels,
                                         uint32_t *out,
                                         size_t len);

/**
 * # Safety
 * `l` must be NULL or a handle not yet freed.
 */
void atlasseg_labels_free(struct AtlassegLabels *l);

/**
 * Copies up to `capacity` class means and variances into `mu`/`var` and
 * stores the number of classes in `num_classes`.
 *
 * # Safety
 * `params` must be a live handle; `mu` and `var` must hold `capacity`
 * values; `num_classes` must be valid.
 */
enum AtlassegStatus atlasseg_params_get(const struct AtlassegParams *params,
                                        double *mu,
                                        double *var,
                                        size_t capacity,
                                        size_t *num_classes);

/**
 * # Safety
 * `p` must be NULL or a handle not yet freed.
 */
void atlasseg_params_free(struct AtlassegParams *p);

/**
 * EM fit of the Gaussian parameters under the undeformed atlas, from the
 * atlas-weighted initialization. The variance floor is `1e-6 * range^2`.
 *
 * # Safety
 * `img` and `atlas` must be live handles; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_em_fit(const struct AtlassegVolume *img,
                                    const struct AtlassegAtlas *atlas,
                                    size_t max_iter,
                                    struct AtlassegParams **out);

/**
 * Voxel-wise MAP labels under the undeformed atlas and fixed parameters.
 *
 * # Safety
 * All handles must be live; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_segment_params(const struct AtlassegVolume *img,
                                            const struct AtlassegAtlas *atlas,
                                            const struct AtlassegParams *params,
                                            struct AtlassegLabels **out);

/**
 * Loads a network checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_network_load(const char *path, struct AtlassegNetwork **out);

/**
 * # Safety
 * `n` must be NULL or a handle not yet freed.
 */
void atlasseg_network_free(struct AtlassegNetwork *n);

/**
 * One network forward pass followed by segmentation. `params_out` may be
 * NULL; otherwise it receives the predicted Gaussian parameters.
 *
 * # Safety
 * All handles must be live; `out` a valid pointer; `params_out` NULL or valid.
 */
enum AtlassegStatus atlasseg_network_segment(const struct AtlassegNetwork *net,
                                             const struct AtlassegVolume *img,
                                             const struct AtlassegAtlas *atlas,
                                             struct AtlassegLabels **out,
                                             struct AtlassegParams **params_out);

/**
 * Dice overlap of `label` between two label maps.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` a valid pointer.
 */
enum AtlassegStatus atlasseg_dice(const struct AtlassegLabels *a,
                                  const struct AtlassegLabels *b,
                                  uint32_t label,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATLASSEG_H */
