#ifndef POSFEAT_H
#define POSFEAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Inference presets.
 */
typedef enum PosfeatProfile {
  POSFEAT_PROFILE_HPATCHES = 0,
  POSFEAT_PROFILE_AACHEN = 1,
  POSFEAT_PROFILE_ETH = 2,
} PosfeatProfile;

/**
 * Result of every call.
 */
typedef enum PosfeatStatus {
  POSFEAT_STATUS_OK = 0,
  POSFEAT_STATUS_NULL_POINTER = 1,
  POSFEAT_STATUS_INVALID_INPUT = 2,
  POSFEAT_STATUS_IO = 3,
  POSFEAT_STATUS_FORMAT = 4,
  POSFEAT_STATUS_VERSION = 5,
  POSFEAT_STATUS_DEGENERATE_GEOMETRY = 6,
  POSFEAT_STATUS_PANIC = 7,
} PosfeatStatus;

/**
 * Loaded descriptor and detector networks.
 */
typedef struct PosfeatExtractor PosfeatExtractor;

/**
 * Keypoints with unit-length descriptors.
 */
typedef struct PosfeatKeypoints PosfeatKeypoints;

/**
 * Mutual nearest-neighbour matches.
 */
typedef struct PosfeatMatches PosfeatMatches;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *posfeat_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *posfeat_version(void);

/**
 * Loads a descriptor and a detector checkpoint.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum PosfeatStatus posfeat_extractor_load(const char *desc_path,
                                          const char *det_path,
                                          struct PosfeatExtractor **out);

/**
 * # Safety
 * `ex` must come from [`posfeat_extractor_load`] or be null.
 */
void posfeat_extractor_free(struct PosfeatExtractor *ex);

/**
 * Detects and describes keypoints in a row-major grayscale image with
 * values in `[0, 1]`. The image is cropped from the top-left to a multiple
 * of 16. `max_keypoints == 0` keeps the preset cap.
 *
 * # Safety
 * `pixels` must hold `width * height` floats; `out` must be writable.
 */
enum PosfeatStatus posfeat_extract(const struct PosfeatExtractor *ex,
                                   const float *pixels,
                                   size_t width,
                                   size_t height,
                                   enum PosfeatProfile profile,
                                   size_t max_keypoints,
                                   struct PosfeatKeypoints **out);

/**
 * Reads a PFK1 keypoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PosfeatStatus posfeat_keypoints_load(const char *path, struct PosfeatKeypoints **out);

/**
 * Writes a PFK1 keypoint file.
 *
 * # Safety
 * `kps` must be a live handle; `path` a NUL-terminated string.
 */
enum PosfeatStatus posfeat_keypoints_save(const struct PosfeatKeypoints *kps, const char *path);

/**
 * Number of keypoints; 0 for a null handle.
 *
 * # Safety
 * `kps` must be a live handle or null.
 */
size_t posfeat_keypoints_count(const struct PosfeatKeypoints *kps);

/**
 * Descriptor length; 0 for a null handle.
 *
 * # Safety
 * `kps` must be a live handle or null.
 */
size_t posfeat_keypoints_channels(const struct PosfeatKeypoints *kps);

/**
 * Location and score of keypoint `index`.
 *
 * # Safety
 * `kps` must be a live handle; output pointers must be writable.
 */
enum PosfeatStatus posfeat_keypoints_get(const struct PosfeatKeypoints *kps,
                                         size_t index,
                                         double *x,
                                         double *y,
                                         float *score);

/**
 * Pointer to the `channels` floats of descriptor `index`, owned by the
 * handle; null when out of range.
 *
 * # Safety
 * `kps` must be a live handle or null.
 */
const float *posfeat_keypoints_descriptor(const struct PosfeatKeypoints *kps, size_t index);

/**
 * # Safety
 * `kps` must come from this library or be null.
 */
void posfeat_keypoints_free(struct PosfeatKeypoints *kps);

/**
 * Mutual nearest-neighbour matching; `ratio <= 0` disables the ratio test.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum PosfeatStatus posfeat_match(const struct PosfeatKeypoints *a,
                                 const struct PosfeatKeypoints *b,
                                 double ratio,
                                 struct PosfeatMatches **out);

/**
 * # Safety
 * `m` must be a live handle or null.
 */
size_t posfeat_matches_count(const struct PosfeatMatches *m);

/**
 * Indices and similarity of match `index`.
 *
 * # Safety
 * `m` must be a live handle; output pointers must be writable.
 */
enum PosfeatStatus posfeat_matches_get(const struct PosfeatMatches *m,
                                       size_t index,
                                       size_t *i,
                                       size_t *j,
                                       float *sim);

/**
 * # Safety
 * `m` must come from this library or be null.
 */
void posfeat_matches_free(struct PosfeatMatches *m);

/**
 * Fundamental matrix (row-major, unit Frobenius norm) of `X2 = R X1 + t`.
 * Intrinsics are `fx, fy, cx, cy`; `r` is row-major.
 *
 * # Safety
 * Inputs must hold 4, 4, 9 and 3 doubles; `f_out` must hold 9.
 */
enum PosfeatStatus posfeat_fundamental_from_pose(const double *k1,
                                                 const double *k2,
                                                 const double *r,
                                                 const double *t,
                                                 double *f_out);

/**
 * Pixel distance of `(u, v)` in image 2 to the epipolar line of `(x, y)` in image 1.
 *
 * # Safety
 * `f` must hold 9 doubles (row-major); `out` must be writable.
 */
enum PosfeatStatus posfeat_epipolar_distance(const double *f,
                                             double x,
                                             double y,
                                             double u,
                                             double v,
                                             double *out);

/**
 * Weighted mean matching accuracy over thresholds 1..10 px of `n` match errors.
 * `n == 0` yields 0.
 *
 * # Safety
 * `errors` must hold `n` doubles (may be null when `n == 0`); `out` must be writable.
 */
enum PosfeatStatus posfeat_mmascore(const double *errors, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSFEAT_H */
