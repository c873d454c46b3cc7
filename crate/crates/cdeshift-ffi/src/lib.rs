//! C ABI for the cdeshift toolkit.
//!
//! Handles are opaque pointers created and destroyed by this library;
//! every fallible call returns a [`CdeshiftStatus`] and records a
//! human-readable message retrievable with [`cdeshift_last_error_message`]
//! on failure. Densities and weights are written into caller-provided
//! buffers whose lengths are validated before any write. All functions are
//! safe to call from multiple threads as long as each handle is used from
//! one thread at a time; the error message store is thread-local.
//!
//! The matching header `include/cdeshift.h` is regenerated by the build
//! script on every compile.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::c_char;
use ndarray::{Array1, Array2};

use cdeshift::cli::{SavedModel, SavedWeightModel};
use cdeshift::data::{load_table, split, standardize, Sample, SplitSpec};
use cdeshift::pipeline::{run_pipeline, PipelineConfig};
use cdeshift::weights::select_M;
use cdeshift::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdeshiftStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// A caller-provided buffer length does not match the required size.
    BufferSize = 3,
    Io = 4,
    Table = 5,
    Json = 6,
    InvalidArgument = 7,
    InvalidData = 8,
    Config = 9,
    Numeric = 10,
    Solver = 11,
    /// An internal invariant failed; the library state is still valid.
    Panic = 12,
}

/// A loaded or constructed data table (opaque).
pub struct CdeshiftSample {
    inner: Sample,
}

/// A fitted importance-weight model plus its preprocessing (opaque).
pub struct CdeshiftWeightModel {
    inner: SavedWeightModel,
}

/// A fitted conditional density model plus its preprocessing (opaque).
pub struct CdeshiftModel {
    inner: SavedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error_text(text: &str) {
    let owned = CString::new(text.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn fail(err: &Error) -> CdeshiftStatus {
    set_error_text(&err.to_string());
    match err.kind() {
        "io" => CdeshiftStatus::Io,
        "table" => CdeshiftStatus::Table,
        "json" => CdeshiftStatus::Json,
        "invalid_argument" => CdeshiftStatus::InvalidArgument,
        "invalid_data" => CdeshiftStatus::InvalidData,
        "config" => CdeshiftStatus::Config,
        "numeric" => CdeshiftStatus::Numeric,
        "solver" => CdeshiftStatus::Solver,
        _ => CdeshiftStatus::InvalidData,
    }
}

fn fail_with(status: CdeshiftStatus, text: &str) -> CdeshiftStatus {
    set_error_text(text);
    status
}

/// Runs a fallible body, converting panics into [`CdeshiftStatus::Panic`]
/// instead of unwinding across the ABI boundary.
fn guard<F: FnOnce() -> CdeshiftStatus>(f: F) -> CdeshiftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail_with(CdeshiftStatus::Panic, "internal panic"),
    }
}

/// Borrows a required pointer argument, or fails.
unsafe fn required<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, CdeshiftStatus> {
    ptr.as_ref()
        .ok_or_else(|| fail_with(CdeshiftStatus::NullPointer, &format!("`{name}` is null")))
}

/// Borrows a required C string argument as UTF-8, or fails.
unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, CdeshiftStatus> {
    if ptr.is_null() {
        return Err(fail_with(CdeshiftStatus::NullPointer, &format!("`{name}` is null")));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail_with(CdeshiftStatus::Utf8, &format!("`{name}` is not valid UTF-8"))
    })
}

/// Writes a freshly boxed handle through an out-pointer.
unsafe fn emit<T>(out: *mut *mut T, value: T, name: &str) -> CdeshiftStatus {
    if out.is_null() {
        return fail_with(CdeshiftStatus::NullPointer, &format!("`{name}` is null"));
    }
    *out = Box::into_raw(Box::new(value));
    CdeshiftStatus::Ok
}

/// The crate version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn cdeshift_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Returns the message of the most recent failure on this thread as a
/// newly allocated string (free with [`cdeshift_string_free`]), or null
/// when no failure has been recorded.
#[no_mangle]
pub extern "C" fn cdeshift_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must have been returned by [`cdeshift_last_error_message`] and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a sample from a row-major `rows × dim` covariate buffer and an
/// optional response buffer of length `rows` (pass null for an unlabeled
/// sample). Covariate columns are named `x1 … x<dim>`.
///
/// # Safety
/// `values` must point to `rows * dim` readable doubles; `response`, when
/// non-null, to `rows` readable doubles; `out` must be a valid location to
/// store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_sample_new(
    values: *const f64,
    rows: usize,
    dim: usize,
    response: *const f64,
    out: *mut *mut CdeshiftSample,
) -> CdeshiftStatus {
    guard(|| {
        if values.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`values` is null");
        }
        let data = std::slice::from_raw_parts(values, rows.saturating_mul(dim)).to_vec();
        let covariates = match Array2::from_shape_vec((rows, dim), data) {
            Ok(m) => m,
            Err(e) => return fail_with(CdeshiftStatus::InvalidArgument, &e.to_string()),
        };
        let z = if response.is_null() {
            None
        } else {
            Some(Array1::from(std::slice::from_raw_parts(response, rows).to_vec()))
        };
        let names: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
        match Sample::new(covariates, names, z) {
            Ok(inner) => emit(out, CdeshiftSample { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}

/// Loads a comma-delimited table with one header row. With `has_response`,
/// the last column is the response and must lie in [0,1].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_sample_load(
    path: *const c_char,
    has_response: bool,
    out: *mut *mut CdeshiftSample,
) -> CdeshiftStatus {
    guard(|| {
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_table(Path::new(path), has_response) {
            Ok(inner) => emit(out, CdeshiftSample { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}

/// Number of rows; 0 when `sample` is null.
///
/// # Safety
/// `sample`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_sample_rows(sample: *const CdeshiftSample) -> usize {
    sample.as_ref().map_or(0, |s| s.inner.n())
}

/// Covariate dimension; 0 when `sample` is null.
///
/// # Safety
/// `sample`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_sample_dim(sample: *const CdeshiftSample) -> usize {
    sample.as_ref().map_or(0, |s| s.inner.dim())
}

/// Frees a sample handle. Null is ignored.
///
/// # Safety
/// `sample` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_sample_free(sample: *mut CdeshiftSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Fits an importance-weight model: both samples are split by the given
/// fractions and `seed`, the neighbor count M is selected from `m_grid` by
/// the validation weight loss, and (with `standardize`) covariates are
/// standardized with labeled-training statistics that the returned model
/// re-applies to every prediction input.
///
/// # Safety
/// `labeled` and `unlabeled` must be live sample handles; `m_grid` must
/// point to `m_grid_len` readable entries; `out` must be a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_fit(
    labeled: *const CdeshiftSample,
    unlabeled: *const CdeshiftSample,
    m_grid: *const usize,
    m_grid_len: usize,
    train_fraction: f64,
    validation_fraction: f64,
    test_fraction: f64,
    seed: u64,
    standardize_covariates: bool,
    out: *mut *mut CdeshiftWeightModel,
) -> CdeshiftStatus {
    guard(|| {
        let labeled = match required(labeled, "labeled") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        let unlabeled = match required(unlabeled, "unlabeled") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        if m_grid.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`m_grid` is null");
        }
        let m_grid = std::slice::from_raw_parts(m_grid, m_grid_len);
        let spec = SplitSpec { train_fraction, validation_fraction, test_fraction, seed };

        let fit = || -> Result<SavedWeightModel, Error> {
            let (labeled_std, unlabeled_std, stats) = if standardize_covariates {
                let (train, _, _) = split(labeled, &spec)?;
                let train = standardize(&train, None)?;
                let stats = train
                    .standardization()
                    .expect("freshly fitted statistics")
                    .to_vec();
                (
                    standardize(labeled, Some(&stats))?,
                    standardize(unlabeled, Some(&stats))?,
                    Some(stats),
                )
            } else {
                (labeled.clone(), unlabeled.clone(), None)
            };
            let (tr_l, va_l, _) = split(&labeled_std, &spec)?;
            let (tr_u, va_u, _) = split(&unlabeled_std, &spec)?;
            let subset: Vec<usize> = (0..labeled.dim()).collect();
            let selection = select_M(&tr_l, &tr_u, &va_l, &va_u, m_grid, &subset)?;
            Ok(SavedWeightModel {
                model: selection.model,
                standardization: stats,
                covariate_names: labeled.covariate_names().to_vec(),
            })
        };
        match fit() {
            Ok(inner) => emit(out, CdeshiftWeightModel { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}

/// Loads a weight model saved by this library or by the command-line tool.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_load(
    path: *const c_char,
    out: *mut *mut CdeshiftWeightModel,
) -> CdeshiftStatus {
    guard(|| {
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match SavedWeightModel::load(Path::new(path)) {
            Ok(inner) => emit(out, CdeshiftWeightModel { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}

/// Saves a weight model as JSON, reloadable here and by the command-line
/// tool.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_save(
    model: *const CdeshiftWeightModel,
    path: *const c_char,
) -> CdeshiftStatus {
    guard(|| {
        let model = match required(model, "model") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match model.inner.save(Path::new(path)) {
            Ok(()) => CdeshiftStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// The selected neighbor count M; 0 when `model` is null.
///
/// # Safety
/// `model`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_m(model: *const CdeshiftWeightModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.model.m())
}

/// Estimated weights β̂ for every row of `sample` (raw covariates; the
/// model's recorded standardization is applied internally), written into
/// `out_weights`, which must hold exactly `cdeshift_sample_rows(sample)`
/// doubles.
///
/// # Safety
/// `model` and `sample` must be live handles; `out_weights` must point to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_predict(
    model: *const CdeshiftWeightModel,
    sample: *const CdeshiftSample,
    out_weights: *mut f64,
    out_len: usize,
) -> CdeshiftStatus {
    guard(|| {
        let model = match required(model, "model") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let sample = match required(sample, "sample") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        if out_weights.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`out_weights` is null");
        }
        if out_len != sample.n() {
            return fail_with(
                CdeshiftStatus::BufferSize,
                &format!("`out_weights` holds {out_len} values, sample has {} rows", sample.n()),
            );
        }
        match model.inner.weights_for(sample) {
            Ok(weights) => {
                std::ptr::copy_nonoverlapping(weights.as_ptr(), out_weights, weights.len());
                CdeshiftStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Frees a weight-model handle. Null is ignored.
///
/// # Safety
/// `model` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_weight_model_free(model: *mut CdeshiftWeightModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a conditional density model saved by the command-line tool
/// (`model.json`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_load(
    path: *const c_char,
    out: *mut *mut CdeshiftModel,
) -> CdeshiftStatus {
    guard(|| {
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match SavedModel::load(Path::new(path)) {
            Ok(inner) => emit(out, CdeshiftModel { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}

/// Number of grid knots per predicted density; 0 when `model` is null.
///
/// # Safety
/// `model`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_grid_size(model: *const CdeshiftModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.grid_size)
}

/// Covariate dimension the model expects; 0 when `model` is null.
///
/// # Safety
/// `model`, when non-null, must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_dim(model: *const CdeshiftModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.covariate_names.len())
}

/// Predicts the conditional density at one raw covariate vector `x`
/// (coordinates in the model's column order; standardization is applied
/// internally). The density is written as `grid_len` values on the uniform
/// grid over [0,1]; `grid_len` must equal `cdeshift_model_grid_size`.
///
/// # Safety
/// `model` must be a live handle; `x` must point to `dim` readable doubles;
/// `out_density` must point to `grid_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_predict(
    model: *const CdeshiftModel,
    x: *const f64,
    dim: usize,
    out_density: *mut f64,
    grid_len: usize,
) -> CdeshiftStatus {
    guard(|| {
        let model = match required(model, "model") {
            Ok(m) => &m.inner,
            Err(status) => return status,
        };
        if x.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`x` is null");
        }
        if out_density.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`out_density` is null");
        }
        if dim != model.covariate_names.len() {
            return fail_with(
                CdeshiftStatus::InvalidArgument,
                &format!("`x` has {dim} coordinates, model expects {}", model.covariate_names.len()),
            );
        }
        if grid_len != model.grid_size {
            return fail_with(
                CdeshiftStatus::BufferSize,
                &format!("`out_density` holds {grid_len} values, model emits {}", model.grid_size),
            );
        }
        let row = std::slice::from_raw_parts(x, dim).to_vec();
        let covariates = Array2::from_shape_vec((1, dim), row).expect("one row");
        let run = || -> Result<Vec<f64>, Error> {
            let sample = Sample::new(covariates, model.covariate_names.clone(), None)?;
            let prepared = model.prepare(&sample)?;
            let density = model.model.predict(&prepared.covariate_row(0))?;
            Ok(density.values().to_vec())
        };
        match run() {
            Ok(values) => {
                std::ptr::copy_nonoverlapping(values.as_ptr(), out_density, values.len());
                CdeshiftStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Predicts densities for every row of `sample` (raw covariates; column
/// names must match the model's). Densities are written row-major into
/// `out_densities`, which must hold `rows × grid_size` doubles.
///
/// # Safety
/// `model` and `sample` must be live handles; `out_densities` must point to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_predict_batch(
    model: *const CdeshiftModel,
    sample: *const CdeshiftSample,
    out_densities: *mut f64,
    out_len: usize,
) -> CdeshiftStatus {
    guard(|| {
        let model = match required(model, "model") {
            Ok(m) => &m.inner,
            Err(status) => return status,
        };
        let sample = match required(sample, "sample") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        if out_densities.is_null() {
            return fail_with(CdeshiftStatus::NullPointer, "`out_densities` is null");
        }
        let needed = sample.n() * model.grid_size;
        if out_len != needed {
            return fail_with(
                CdeshiftStatus::BufferSize,
                &format!(
                    "`out_densities` holds {out_len} values, {} rows × {} knots need {needed}",
                    sample.n(),
                    model.grid_size
                ),
            );
        }
        let run = || -> Result<Vec<f64>, Error> {
            let prepared = model.prepare(sample)?;
            let grids = model.model.predict_batch(&prepared)?;
            let mut flat = Vec::with_capacity(needed);
            for grid in &grids {
                flat.extend_from_slice(grid.values());
            }
            Ok(flat)
        };
        match run() {
            Ok(values) => {
                std::ptr::copy_nonoverlapping(values.as_ptr(), out_densities, values.len());
                CdeshiftStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Saves a density model as JSON, reloadable here and by the command-line
/// tool.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_save(
    model: *const CdeshiftModel,
    path: *const c_char,
) -> CdeshiftStatus {
    guard(|| {
        let model = match required(model, "model") {
            Ok(m) => m,
            Err(status) => return status,
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        match model.inner.save(Path::new(path)) {
            Ok(()) => CdeshiftStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Frees a density-model handle. Null is ignored.
///
/// # Safety
/// `model` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_model_free(model: *mut CdeshiftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the full fitting pipeline (weight model, estimator tuning,
/// stacking, optional covariate selection) and returns the fitted model.
/// `config_json` is the same JSON object the library's pipeline consumes:
/// split, m_grid, series_grid, nn_grid, selection, grid_size, bootstrap,
/// seed. With `standardize_covariates`, covariates are standardized with
/// labeled-training statistics that the returned model re-applies when
/// predicting.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `labeled` and
/// `unlabeled` must be live sample handles; `out` must be a valid location
/// to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn cdeshift_pipeline_run(
    config_json: *const c_char,
    labeled: *const CdeshiftSample,
    unlabeled: *const CdeshiftSample,
    standardize_covariates: bool,
    out: *mut *mut CdeshiftModel,
) -> CdeshiftStatus {
    guard(|| {
        let config = match required_str(config_json, "config_json") {
            Ok(text) => match serde_json::from_str::<PipelineConfig>(text) {
                Ok(cfg) => cfg,
                Err(e) => {
                    return fail_with(CdeshiftStatus::Json, &format!("`config_json`: {e}"))
                }
            },
            Err(status) => return status,
        };
        let labeled = match required(labeled, "labeled") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        let unlabeled = match required(unlabeled, "unlabeled") {
            Ok(s) => &s.inner,
            Err(status) => return status,
        };
        let run = || -> Result<SavedModel, Error> {
            let (labeled_std, unlabeled_std, stats) = if standardize_covariates {
                let (train, _, _) = split(labeled, &config.split)?;
                let train = standardize(&train, None)?;
                let stats = train
                    .standardization()
                    .expect("freshly fitted statistics")
                    .to_vec();
                (
                    standardize(labeled, Some(&stats))?,
                    standardize(unlabeled, Some(&stats))?,
                    Some(stats),
                )
            } else {
                (labeled.clone(), unlabeled.clone(), None)
            };
            let report = run_pipeline(&config, &labeled_std, &unlabeled_std)?;
            Ok(SavedModel {
                model: report.model,
                standardization: stats,
                covariate_names: labeled.covariate_names().to_vec(),
                grid_size: config.grid_size,
            })
        };
        match run() {
            Ok(inner) => emit(out, CdeshiftModel { inner }, "out"),
            Err(e) => fail(&e),
        }
    })
}
