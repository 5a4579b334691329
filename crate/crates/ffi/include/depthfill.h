#ifndef DEPTHFILL_H
#define DEPTHFILL_H

/* Generated by cbindgen from depthfill-ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every fallible call.
 */
typedef enum DfStatus {
  DF_OK = 0,
  DF_ERR_DIMENSION = 1,
  DF_ERR_DOMAIN = 2,
  DF_ERR_CONTRACT = 3,
  DF_ERR_SPEC = 4,
  DF_ERR_PARSE = 5,
  DF_ERR_NUMERIC = 6,
  DF_ERR_IO = 7,
  DF_ERR_NULL_ARGUMENT = 8,
  DF_ERR_UTF8 = 9,
  DF_ERR_PANIC = 10,
} DfStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct df_checkpoint df_checkpoint;

/**
 * Opaque disparity image handle.
 */
typedef struct df_disparity df_disparity;

/**
 * Opaque hole-mask handle.
 */
typedef struct df_mask df_mask;

/**
 * Opaque surface-normal map handle.
 */
typedef struct df_normal_map df_normal_map;

/**
 * Training options for `df_train`. Zeroed fields fall back to defaults
 * via `df_train_config_default`.
 */
typedef struct df_train_config {
  size_t image_size;
  size_t hole_size;
  size_t steps;
  size_t batch;
  size_t width;
  uint64_t seed;
  double alpha;
  double beta;
  double phi;
  double lambda_gp;
  size_t n_critic;
  double lr;
  double sigma;
  bool surface_attention;
  bool surface_discrimination;
} df_train_config;

/**
 * Flat copy of a metric report; undefined correlations are NaN.
 */
typedef struct df_metric_report {
  double mse;
  double ve;
  double js_depth;
  double js_surface;
  double kl_depth;
  double kl_surface;
  double wasserstein_depth;
  double wasserstein_surface;
  double intersection_depth;
  double intersection_surface;
  double correlation_depth;
  double correlation_surface;
} df_metric_report;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage.
 */
const char *df_version(void);

/**
 * Message describing the most recent failure on this thread.
 */
const char *df_last_error_message(void);

/**
 * Create a disparity image from row-major values. `valid` may be NULL
 * (all pixels valid) or one byte per pixel (0 = invalid).
 */
enum DfStatus df_disparity_create(size_t height,
                                  size_t width,
                                  const double *values,
                                  const uint8_t *valid,
                                  struct df_disparity **out);

/**
 * Read a `.pgm` or `.pfm` disparity file; `cityscapes` applies the
 * (p-1)/256 convention to 16-bit PGM samples.
 */
enum DfStatus df_disparity_read(const char *path, bool cityscapes, struct df_disparity **out);

enum DfStatus df_disparity_write_pgm(const struct df_disparity *d, const char *path, double scale);

enum DfStatus df_disparity_write_pfm(const struct df_disparity *d, const char *path);

enum DfStatus df_disparity_dims(const struct df_disparity *d, size_t *height, size_t *width);

/**
 * Borrow the row-major values; valid until the handle is freed.
 */
enum DfStatus df_disparity_values(const struct df_disparity *d, const double **values, size_t *len);

/**
 * Borrow the per-pixel validity flags (1 = valid).
 */
enum DfStatus df_disparity_valid(const struct df_disparity *d, const uint8_t **valid, size_t *len);

void df_disparity_free(struct df_disparity *d);

/**
 * Create a hole mask from one byte per pixel (non-zero = hole).
 */
enum DfStatus df_mask_create(size_t height,
                             size_t width,
                             const uint8_t *hole,
                             struct df_mask **out);

/**
 * Square hole with the given top-left corner and side.
 */
enum DfStatus df_mask_square(size_t height,
                             size_t width,
                             size_t top,
                             size_t left,
                             size_t side,
                             struct df_mask **out);

/**
 * Sample a uniformly placed square hole (margin 1).
 */
enum DfStatus df_mask_synth(size_t size, size_t hole, uint64_t seed, struct df_mask **out);

/**
 * Borrow the hole flags (1 = hole), row-major.
 */
enum DfStatus df_mask_flags(const struct df_mask *m, const uint8_t **flags, size_t *len);

void df_mask_free(struct df_mask *m);

/**
 * Unit surface normals from disparity gradients.
 */
enum DfStatus df_normals_compute(const struct df_disparity *d, struct df_normal_map **out);

enum DfStatus df_normal_map_dims(const struct df_normal_map *n, size_t *height, size_t *width);

/**
 * Borrow the planar components: n_x plane, then n_y, then n_z.
 */
enum DfStatus df_normal_map_components(const struct df_normal_map *n,
                                       const double **components,
                                       size_t *len);

enum DfStatus df_normal_map_write_pfm(const struct df_normal_map *n, const char *path);

void df_normal_map_free(struct df_normal_map *n);

/**
 * Synthesise a random piecewise-planar disparity scene.
 */
enum DfStatus df_scene_synth(size_t size, double sigma, uint64_t seed, struct df_disparity **out);

/**
 * Defaults matching the library's training configuration.
 */
struct df_train_config df_train_config_default(void);

/**
 * Train on the internal synthetic-scene stream and return the checkpoint.
 */
enum DfStatus df_train(struct df_train_config cfg, struct df_checkpoint **out);

enum DfStatus df_checkpoint_load(const char *path, struct df_checkpoint **out);

enum DfStatus df_checkpoint_save(const struct df_checkpoint *ckpt, const char *path);

void df_checkpoint_free(struct df_checkpoint *ckpt);

/**
 * Fill the hole of a disparity image; `blend` switches the attention
 * transfer from argmax to softmax blending.
 */
enum DfStatus df_inpaint(const struct df_checkpoint *ckpt,
                         const struct df_disparity *d,
                         const struct df_mask *mask,
                         bool blend,
                         struct df_disparity **out);

/**
 * Every metric for a ground-truth/generated pair over the masked region.
 */
enum DfStatus df_evaluate(const struct df_disparity *gt,
                          const struct df_disparity *gen,
                          const struct df_mask *region,
                          size_t depth_bins,
                          size_t surface_bins,
                          struct df_metric_report *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHFILL_H */
