/* C interface for the cdeshift conditional density estimation toolkit. */

#ifndef CDESHIFT_H
#define CDESHIFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum {
  CDESHIFT_STATUS_OK = 0,
  // A required pointer argument was null.
  CDESHIFT_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  CDESHIFT_STATUS_UTF8 = 2,
  // A caller-provided buffer length does not match the required size.
  CDESHIFT_STATUS_BUFFER_SIZE = 3,
  CDESHIFT_STATUS_IO = 4,
  CDESHIFT_STATUS_TABLE = 5,
  CDESHIFT_STATUS_JSON = 6,
  CDESHIFT_STATUS_INVALID_ARGUMENT = 7,
  CDESHIFT_STATUS_INVALID_DATA = 8,
  CDESHIFT_STATUS_CONFIG = 9,
  CDESHIFT_STATUS_NUMERIC = 10,
  CDESHIFT_STATUS_SOLVER = 11,
  // An internal invariant failed; the library state is still valid.
  CDESHIFT_STATUS_PANIC = 12,
} CdeshiftStatus;

// A fitted conditional density model plus its preprocessing (opaque).
typedef struct CdeshiftModel CdeshiftModel;

// A loaded or constructed data table (opaque).
typedef struct CdeshiftSample CdeshiftSample;

// A fitted importance-weight model plus its preprocessing (opaque).
typedef struct CdeshiftWeightModel CdeshiftWeightModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// The crate version as a static NUL-terminated string; do not free.
const char *cdeshift_version(void);

// Returns the message of the most recent failure on this thread as a
// newly allocated string (free with [`cdeshift_string_free`]), or null
// when no failure has been recorded.
char *cdeshift_last_error_message(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must have been returned by [`cdeshift_last_error_message`] and not
// yet freed.
void cdeshift_string_free(char *s);

// Builds a sample from a row-major `rows × dim` covariate buffer and an
// optional response buffer of length `rows` (pass null for an unlabeled
// sample). Covariate columns are named `x1 … x<dim>`.
//
// # Safety
// `values` must point to `rows * dim` readable doubles; `response`, when
// non-null, to `rows` readable doubles; `out` must be a valid location to
// store the new handle.
CdeshiftStatus cdeshift_sample_new(const double *values,
                                   size_t rows,
                                   size_t dim,
                                   const double *response,
                                   CdeshiftSample **out);

// Loads a comma-delimited table with one header row. With `has_response`,
// the last column is the response and must lie in [0,1].
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid location
// to store the new handle.
CdeshiftStatus cdeshift_sample_load(const char *path, bool has_response, CdeshiftSample **out);

// Number of rows; 0 when `sample` is null.
//
// # Safety
// `sample`, when non-null, must be a live handle from this library.
size_t cdeshift_sample_rows(const CdeshiftSample *sample);

// Covariate dimension; 0 when `sample` is null.
//
// # Safety
// `sample`, when non-null, must be a live handle from this library.
size_t cdeshift_sample_dim(const CdeshiftSample *sample);

// Frees a sample handle. Null is ignored.
//
// # Safety
// `sample` must be a handle from this library, not yet freed.
void cdeshift_sample_free(CdeshiftSample *sample);

// Fits an importance-weight model: both samples are split by the given
// fractions and `seed`, the neighbor count M is selected from `m_grid` by
// the validation weight loss, and (with `standardize`) covariates are
// standardized with labeled-training statistics that the returned model
// re-applies to every prediction input.
//
// # Safety
// `labeled` and `unlabeled` must be live sample handles; `m_grid` must
// point to `m_grid_len` readable entries; `out` must be a valid location
// to store the new handle.
CdeshiftStatus cdeshift_weight_model_fit(const CdeshiftSample *labeled,
                                         const CdeshiftSample *unlabeled,
                                         const size_t *m_grid,
                                         size_t m_grid_len,
                                         double train_fraction,
                                         double validation_fraction,
                                         double test_fraction,
                                         uint64_t seed,
                                         bool standardize_covariates,
                                         CdeshiftWeightModel **out);

// Loads a weight model saved by this library or by the command-line tool.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid location
// to store the new handle.
CdeshiftStatus cdeshift_weight_model_load(const char *path, CdeshiftWeightModel **out);

// Saves a weight model as JSON, reloadable here and by the command-line
// tool.
//
// # Safety
// `model` must be a live handle; `path` a valid NUL-terminated string.
CdeshiftStatus cdeshift_weight_model_save(const CdeshiftWeightModel *model, const char *path);

// The selected neighbor count M; 0 when `model` is null.
//
// # Safety
// `model`, when non-null, must be a live handle from this library.
size_t cdeshift_weight_model_m(const CdeshiftWeightModel *model);

// Estimated weights β̂ for every row of `sample` (raw covariates; the
// model's recorded standardization is applied internally), written into
// `out_weights`, which must hold exactly `cdeshift_sample_rows(sample)`
// doubles.
//
// # Safety
// `model` and `sample` must be live handles; `out_weights` must point to
// `out_len` writable doubles.
CdeshiftStatus cdeshift_weight_model_predict(const CdeshiftWeightModel *model,
                                             const CdeshiftSample *sample,
                                             double *out_weights,
                                             size_t out_len);

// Frees a weight-model handle. Null is ignored.
//
// # Safety
// `model` must be a handle from this library, not yet freed.
void cdeshift_weight_model_free(CdeshiftWeightModel *model);

// Loads a conditional density model saved by the command-line tool
// (`model.json`).
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid location
// to store the new handle.
CdeshiftStatus cdeshift_model_load(const char *path, CdeshiftModel **out);

// Number of grid knots per predicted density; 0 when `model` is null.
//
// # Safety
// `model`, when non-null, must be a live handle from this library.
size_t cdeshift_model_grid_size(const CdeshiftModel *model);

// Covariate dimension the model expects; 0 when `model` is null.
//
// # Safety
// `model`, when non-null, must be a live handle from this library.
size_t cdeshift_model_dim(const CdeshiftModel *model);

// Predicts the conditional density at one raw covariate vector `x`
// (coordinates in the model's column order; standardization is applied
// internally). The density is written as `grid_len` values on the uniform
// grid over [0,1]; `grid_len` must equal `cdeshift_model_grid_size`.
//
// # Safety
// `model` must be a live handle; `x` must point to `dim` readable doubles;
// `out_density` must point to `grid_len` writable doubles.
CdeshiftStatus cdeshift_model_predict(const CdeshiftModel *model,
                                      const double *x,
                                      size_t dim,
                                      double *out_density,
                                      size_t grid_len);

// Predicts densities for every row of `sample` (raw covariates; column
// names must match the model's). Densities are written row-major into
// `out_densities`, which must hold `rows × grid_size` doubles.
//
// # Safety
// `model` and `sample` must be live handles; `out_densities` must point to
// `out_len` writable doubles.
CdeshiftStatus cdeshift_model_predict_batch(const CdeshiftModel *model,
                                            const CdeshiftSample *sample,
                                            double *out_densities,
                                            size_t out_len);

// Saves a density model as JSON, reloadable here and by the command-line
// tool.
//
// # Safety
// `model` must be a live handle; `path` a valid NUL-terminated string.
CdeshiftStatus cdeshift_model_save(const CdeshiftModel *model, const char *path);

// Frees a density-model handle. Null is ignored.
//
// # Safety
// `model` must be a handle from this library, not yet freed.
void cdeshift_model_free(CdeshiftModel *model);

// Runs the full fitting pipeline (weight model, estimator tuning,
// stacking, optional covariate selection) and returns the fitted model.
// `config_json` is the same JSON object the library's pipeline consumes:
// split, m_grid, series_grid, nn_grid, selection, grid_size, bootstrap,
// seed. With `standardize_covariates`, covariates are standardized with
// labeled-training statistics that the returned model re-applies when
// predicting.
//
// # Safety
// `config_json` must be a valid NUL-terminated string; `labeled` and
// `unlabeled` must be live sample handles; `out` must be a valid location
// to store the new handle.
CdeshiftStatus cdeshift_pipeline_run(const char *config_json,
                                     const CdeshiftSample *labeled,
                                     const CdeshiftSample *unlabeled,
                                     bool standardize_covariates,
                                     CdeshiftModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDESHIFT_H */
