#ifndef CCD_H
#define CCD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcdStatus {
  CCD_STATUS_OK = 0,
  CCD_STATUS_NULL_POINTER = 1,
  CCD_STATUS_INVALID_CONFIG = 2,
  CCD_STATUS_CONTRACT = 3,
  CCD_STATUS_OUT_OF_BOUNDS = 4,
  CCD_STATUS_NUMERICAL = 5,
  CCD_STATUS_IO = 6,
  CCD_STATUS_FORMAT = 7,
  CCD_STATUS_FAILED = 8,
  CCD_STATUS_PANIC = 9,
} CcdStatus;

/**
 * Trained model restored from a checkpoint.
 */
typedef struct CcdModel CcdModel;

/**
 * Factor grid and renderer for one dataset.
 */
typedef struct CcdSpace CcdSpace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *ccd_last_error(void);

/**
 * Build a factor space. `dataset` is `dsprites_like` or `shapes3d_like`;
 * `mini` selects the reduced grid.
 *
 * # Safety
 * `dataset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcdStatus ccd_space_new(const char *dataset,
                             bool mini,
                             size_t image_size,
                             size_t colors,
                             struct CcdSpace **out);

/**
 * # Safety
 * `space` must come from [`ccd_space_new`] (or be null) and not be used
 * afterwards.
 */
void ccd_space_free(struct CcdSpace *space);

/**
 * Number of factors, pixels per image and number of grid points.
 *
 * # Safety
 * `space` must be a live handle; output pointers must be valid.
 */
enum CcdStatus ccd_space_dims(const struct CcdSpace *space,
                              size_t *factors,
                              size_t *pixels,
                              size_t *grid_points);

/**
 * Render the image with per-factor grid indices `factor_index`
 * (`factors` entries) into `pixels` (`pixel_len` floats, HWC order) and
 * its normalized labels into `labels` (`factors` doubles, may be null).
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum CcdStatus ccd_render(const struct CcdSpace *space,
                          const size_t *factor_index,
                          size_t factors,
                          float *pixels,
                          size_t pixel_len,
                          double *labels);

/**
 * Maximal information coefficient of two samples of length `n`, with the
 * default grid budget.
 *
 * # Safety
 * `x` and `y` must hold `n` doubles; `out` must be valid.
 */
enum CcdStatus ccd_mic(const double *x, const double *y, size_t n, double *out);

/**
 * Mean matched MIC between label columns and latent dimensions. Both
 * matrices are row-major with `n` rows.
 *
 * # Safety
 * `latents` must hold `n * z_dim` and `labels` `n * m` doubles.
 */
enum CcdStatus ccd_mic_score(const double *latents,
                             size_t n,
                             size_t z_dim,
                             const double *labels,
                             size_t m,
                             double *out);

/**
 * Scale the row-major `m × n` matrix `a` in place by its largest magnitude
 * and clamp to `[-1, 1]`. An all-zero matrix is left unchanged.
 *
 * # Safety
 * `a` must hold `m * n` doubles.
 */
enum CcdStatus ccd_clip_a(double *a, size_t m, size_t n);

/**
 * Infer task factors from predictor weights `w` (`n`) and the row-major
 * causal matrix `a` (`m × n`). `true_factors` lists `n_true` factor
 * positions; `k = 0` selects `n_true` factors. `inferred` receives an
 * `m`-entry 0/1 mask.
 *
 * # Safety
 * All buffers must hold the stated number of elements.
 */
enum CcdStatus ccd_infer_edges(const double *w,
                               size_t n,
                               const double *a,
                               size_t m,
                               const size_t *true_factors,
                               size_t n_true,
                               size_t k,
                               double fp_margin,
                               uint8_t *inferred,
                               size_t *tp,
                               size_t *fp,
                               size_t *fn_);

/**
 * Restore the model of a checkpoint directory (`.../checkpoints/epoch_K`).
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum CcdStatus ccd_model_load(const char *dir, struct CcdModel **out);

/**
 * # Safety
 * `model` must come from [`ccd_model_load`] (or be null) and not be used
 * afterwards.
 */
void ccd_model_free(struct CcdModel *model);

/**
 * Input pixels per image, latent size and factor count.
 *
 * # Safety
 * `model` must be live; output pointers must be valid.
 */
enum CcdStatus ccd_model_dims(const struct CcdModel *model,
                              size_t *pixels,
                              size_t *z_dim,
                              size_t *factors);

/**
 * Task probabilities for `rows` images (row-major, channel-major pixels as
 * produced by the corpus loader) written to `probs`.
 *
 * # Safety
 * `x` must hold `rows * pixels` doubles and `probs` `rows` doubles.
 */
enum CcdStatus ccd_model_predict(const struct CcdModel *model,
                                 const double *x,
                                 size_t rows,
                                 size_t pixels,
                                 double *probs);

/**
 * Posterior means (`rows × z_dim`, row-major) for `rows` images.
 *
 * # Safety
 * `x` must hold `rows * pixels` doubles and `out` `rows * z_dim` doubles.
 */
enum CcdStatus ccd_model_encode(const struct CcdModel *model,
                                const double *x,
                                size_t rows,
                                size_t pixels,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCD_H */
