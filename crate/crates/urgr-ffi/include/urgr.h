/* C interface for the urgr gesture-recognition library. */

#ifndef URGR_H
#define URGR_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a C API call. Zero is success; everything else is the
 * failure category, with details via `urgr_last_error_message`.
 */
typedef enum UrgrStatus {
  URGR_STATUS_OK = 0,
  URGR_STATUS_INVALID_ARGUMENT = 1,
  URGR_STATUS_NO_USER = 2,
  URGR_STATUS_EMPTY_SET = 3,
  URGR_STATUS_TRAINING_DIVERGED = 4,
  URGR_STATUS_CHECKPOINT = 5,
  URGR_STATUS_MANIFEST = 6,
  URGR_STATUS_IO = 7,
  URGR_STATUS_CODEC = 8,
  URGR_STATUS_JSON = 9,
  URGR_STATUS_INTERNAL = 10,
  /**
   * A required pointer argument was NULL.
   */
  URGR_STATUS_NULL_POINTER = 11,
  /**
   * A string argument was not valid UTF-8.
   */
  URGR_STATUS_UTF8 = 12,
  /**
   * The library panicked; state may be inconsistent.
   */
  URGR_STATUS_PANIC = 13,
} UrgrStatus;

/**
 * Loaded gesture classifier: config plus parameters.
 */
typedef struct UrgrGvit UrgrGvit;

/**
 * Loaded restoration network: config plus parameters.
 */
typedef struct UrgrHqnet UrgrHqnet;

/**
 * Owned image handle.
 */
typedef struct UrgrImage UrgrImage;

/**
 * One classification outcome. When `no_user` is nonzero the
 * remaining fields are zeroed.
 */
typedef struct UrgrInference {
  int32_t no_user;
  /**
   * 1-based gesture class (1 = null gesture, 6 = stop).
   */
  uint32_t class_index;
  /**
   * Softmax probability of the predicted class.
   */
  double certainty;
  /**
   * Full distribution, indexed by class - 1.
   */
  double probs[6];
} UrgrInference;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the most recent error message on this thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message
 * length in bytes, excluding the terminator; call with a NULL buffer
 * to size a buffer first.
 */
size_t urgr_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static string.
 */
const char *urgr_version(void);

/**
 * Decode a PNG file into a new image handle.
 */
enum UrgrStatus urgr_image_load_png(const char *path, struct UrgrImage **out);

/**
 * Encode an image handle as a PNG file.
 */
enum UrgrStatus urgr_image_save_png(const struct UrgrImage *img, const char *path);

/**
 * Build an image from a row-major `height x width x channels` buffer
 * of doubles in [0, 1].
 */
enum UrgrStatus urgr_image_from_pixels(const double *data,
                                       size_t height,
                                       size_t width,
                                       size_t channels,
                                       struct UrgrImage **out);

size_t urgr_image_height(const struct UrgrImage *img);

size_t urgr_image_width(const struct UrgrImage *img);

size_t urgr_image_channels(const struct UrgrImage *img);

/**
 * Copy the image's pixels into `buf`, which must hold exactly
 * `height * width * channels` doubles.
 */
enum UrgrStatus urgr_image_pixels(const struct UrgrImage *img, double *buf, size_t len);

void urgr_image_free(struct UrgrImage *img);

/**
 * Apply the smooth, sharpen, JPEG degradation chain.
 */
enum UrgrStatus urgr_degrade(const struct UrgrImage *img,
                             size_t smooth_kernel,
                             double smooth_sigma,
                             uint8_t jpeg_quality,
                             struct UrgrImage **out);

/**
 * Canny edge map: single-channel image of {0, 1} values.
 */
enum UrgrStatus urgr_canny(const struct UrgrImage *img,
                           double sigma,
                           double low,
                           double high,
                           struct UrgrImage **out);

/**
 * Mean squared error over all pixels and channels.
 */
enum UrgrStatus urgr_mse(const struct UrgrImage *a, const struct UrgrImage *b, double *out);

/**
 * Peak signal-to-noise ratio against peak value `peak`. Identical
 * images have no finite ratio: `out_is_infinite` is set to 1 and
 * `out_db` is left untouched.
 */
enum UrgrStatus urgr_psnr(const struct UrgrImage *a,
                          const struct UrgrImage *b,
                          double peak,
                          double *out_db,
                          int32_t *out_is_infinite);

/**
 * Load a restoration checkpoint.
 */
enum UrgrStatus urgr_hqnet_load(const char *path, struct UrgrHqnet **out);

/**
 * Side length of the square input the network expects.
 */
size_t urgr_hqnet_input_size(const struct UrgrHqnet *net);

/**
 * Run the restoration network on a crop of its input size.
 */
enum UrgrStatus urgr_hqnet_enhance(const struct UrgrHqnet *net,
                                   const struct UrgrImage *img,
                                   struct UrgrImage **out);

void urgr_hqnet_free(struct UrgrHqnet *net);

/**
 * Load a classifier checkpoint.
 */
enum UrgrStatus urgr_gvit_load(const char *path, struct UrgrGvit **out);

/**
 * Classify an already-focused crop.
 */
enum UrgrStatus urgr_gvit_classify(const struct UrgrGvit *net,
                                   const struct UrgrImage *crop,
                                   struct UrgrInference *out);

void urgr_gvit_free(struct UrgrGvit *net);

/**
 * Detect, focus, optionally enhance, and classify a full frame.
 *
 * `bbox` is either NULL (nobody in the frame: the result reports
 * `no_user`) or a 4-element `x0, y0, w, h` ground-truth user box.
 * `hqnet` may be NULL to skip restoration. `target_size` selects the
 * focused crop side; pass 0 for the default (the restoration input
 * size when a network is supplied, otherwise 512).
 */
enum UrgrStatus urgr_pipeline_infer(const struct UrgrImage *frame,
                                    const double *bbox,
                                    const struct UrgrHqnet *hqnet,
                                    const struct UrgrGvit *gvit,
                                    size_t target_size,
                                    struct UrgrInference *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* URGR_H */
