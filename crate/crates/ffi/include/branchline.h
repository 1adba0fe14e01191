#ifndef BRANCHLINE_H
#define BRANCHLINE_H

/* Generated by cbindgen from branchline-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome; mirrors the CLI exit-code classes.
 */
typedef enum BlcStatus {
  BLC_STATUS_OK = 0,
  /**
   * Bad arguments, shapes or file contents.
   */
  BLC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * I/O failure (missing or unreadable file).
   */
  BLC_STATUS_IO_ERROR = 4,
  /**
   * Anything else.
   */
  BLC_STATUS_INTERNAL = 5,
} BlcStatus;

/**
 * Opaque trained coordinate-regression model.
 */
typedef struct BlcRegressor BlcRegressor;

/**
 * Opaque trained segmentation model.
 */
typedef struct BlcSegModel BlcSegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *blc_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *blc_version(void);

/**
 * Load a regressor checkpoint written by `branchline train --model hob`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer. On
 * success `*out` owns the model; release it with [`blc_regressor_free`].
 */
enum BlcStatus blc_regressor_load(const char *path, struct BlcRegressor **out);

/**
 * # Safety
 * `handle` must come from [`blc_regressor_load`] and not be freed twice.
 */
void blc_regressor_free(struct BlcRegressor *handle);

/**
 * Input geometry of a loaded regressor: channels, scan length (rows),
 * coordinate extent (columns) and branch channels.
 *
 * # Safety
 * All pointers must be valid.
 */
enum BlcStatus blc_regressor_shape(const struct BlcRegressor *handle,
                                   size_t *channels,
                                   size_t *height,
                                   size_t *width,
                                   size_t *n_branches);

/**
 * Predict per-row branch coordinates for one image.
 *
 * `pixels` is interleaved row-major u8 data with exactly
 * `height * width * channels` bytes (channel order RGB, plus depth last
 * when the model was trained with 4 channels). `out_coords` receives
 * `n_branches * height` values in pixels, branch-major; a coordinate is
 * emitted for every row.
 *
 * # Safety
 * Buffers must match the sizes above.
 */
enum BlcStatus blc_regressor_predict(const struct BlcRegressor *handle,
                                     const uint8_t *pixels,
                                     size_t pixels_len,
                                     double *out_coords,
                                     size_t out_len);

/**
 * Load a segmentation checkpoint (`seg_visible` or `seg_whole`).
 *
 * # Safety
 * As [`blc_regressor_load`]; release with [`blc_segmodel_free`].
 */
enum BlcStatus blc_segmodel_load(const char *path, struct BlcSegModel **out);

/**
 * # Safety
 * `handle` must come from [`blc_segmodel_load`] and not be freed twice.
 */
void blc_segmodel_free(struct BlcSegModel *handle);

/**
 * Segment one image into a binary mask (1 = branch), thresholding the
 * sigmoid output at `threshold`. Pixel layout follows
 * [`blc_regressor_predict`]; `out_mask` holds `height * width` bytes.
 *
 * # Safety
 * Buffers must match the model's input shape.
 */
enum BlcStatus blc_segmodel_segment(const struct BlcSegModel *handle,
                                    const uint8_t *pixels,
                                    size_t pixels_len,
                                    double threshold,
                                    uint8_t *out_mask,
                                    size_t out_len);

/**
 * Convert a binary mask into per-row branch coordinates via the blob
 * filter → waypoint → split → polynomial-fit pipeline.
 *
 * `mask` holds `width * height` bytes (nonzero = foreground). `out_coords`
 * receives `n_branches * height` clamped coordinates, branch-major;
 * `out_valid` receives `height` flags (1 where the pipeline produced a
 * row). Rows without coverage keep coordinate 0 and flag 0.
 *
 * # Safety
 * Buffers must match the stated sizes.
 */
enum BlcStatus blc_mask_to_positions(const uint8_t *mask,
                                     size_t width,
                                     size_t height,
                                     size_t n_branches,
                                     size_t min_blob_area,
                                     size_t poly_order,
                                     double *out_coords,
                                     uint8_t *out_valid);

/**
 * RMSE between two equal-length coordinate series.
 *
 * # Safety
 * Both series must hold `len` readable values; `out` must be writable.
 */
enum BlcStatus blc_rmse(const double *gt, const double *pred, size_t len, double *out);

/**
 * Pearson correlation between two equal-length coordinate series.
 *
 * # Safety
 * Both series must hold `len` readable values; `out` must be writable.
 */
enum BlcStatus blc_pearson_r(const double *gt, const double *pred, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRANCHLINE_H */
