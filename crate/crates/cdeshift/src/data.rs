//! Loading, standardizing, rescaling, and splitting tabular samples.
//!
//! A [`Sample`] is an immutable covariate matrix with an optional response
//! vector. Labeled samples carry responses, already rescaled to [0,1];
//! unlabeled samples carry none. Covariates are standardized to mean 0 and
//! standard deviation 1 before any distance-based estimation, and the stats
//! from the labeled training split are the canonical ones for every other
//! sample in a pipeline, so that all distances live in one shared metric.
//!
//! Tables are comma-delimited text with one header row; the response column
//! is written last and named `z`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column standardization statistics (sample standard deviation,
/// divisor n−1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

/// An immutable labeled or unlabeled sample.
///
/// Invariants enforced at construction:
/// - the covariate matrix is finite and non-empty;
/// - a response, when present, has one value per row, each in [0,1];
/// - covariate names are unique, non-empty, and none is the reserved
///   response name `z`;
/// - recorded standardization has one entry per column with positive sd.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    covariates: Array2<f64>,
    response: Option<Array1<f64>>,
    covariate_names: Vec<String>,
    standardization: Option<Vec<ColumnStats>>,
    response_rescale: Option<(f64, f64)>,
}

impl Sample {
    /// Builds a sample from a covariate matrix, column names, and an
    /// optional response vector, validating all invariants.
    pub fn new(
        covariates: Array2<f64>,
        covariate_names: Vec<String>,
        response: Option<Array1<f64>>,
    ) -> Result<Self> {
        let (n, d) = covariates.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!("sample must be non-empty, got {n}×{d}")));
        }
        if covariate_names.len() != d {
            return Err(Error::InvalidData(format!(
                "{} covariate names for {d} columns",
                covariate_names.len()
            )));
        }
        for (j, name) in covariate_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidData(format!("column {} has an empty name", j + 1)));
            }
            if name == "z" {
                return Err(Error::InvalidData(
                    "covariate name `z` is reserved for the response column".into(),
                ));
            }
            if covariate_names[..j].contains(name) {
                return Err(Error::InvalidData(format!("duplicate covariate name `{name}`")));
            }
        }
        for ((i, j), v) in covariates.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::InvalidData(format!(
                    "non-finite covariate {v} at row {}, column `{}`",
                    i + 1,
                    covariate_names[j]
                )));
            }
        }
        if let Some(z) = &response {
            if z.len() != n {
                return Err(Error::InvalidData(format!(
                    "response has {} values for {n} rows",
                    z.len()
                )));
            }
            for (i, v) in z.iter().enumerate() {
                if !v.is_finite() || !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidData(format!(
                        "response {v} at row {} lies outside [0,1]; rescale responses first",
                        i + 1
                    )));
                }
            }
        }
        Ok(Sample {
            covariates,
            response,
            covariate_names,
            standardization: None,
            response_rescale: None,
        })
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    /// Number of covariate columns.
    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    /// The covariate matrix (rows = observations).
    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    /// One covariate row.
    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    /// The response vector, if this sample is labeled.
    pub fn response(&self) -> Option<ArrayView1<'_, f64>> {
        self.response.as_ref().map(|z| z.view())
    }

    /// Whether a response is present.
    pub fn is_labeled(&self) -> bool {
        self.response.is_some()
    }

    /// Covariate column names.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Index of a named covariate column.
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.covariate_names.iter().position(|c| c == name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no covariate named `{name}` (columns: {})",
                self.covariate_names.join(", ")
            ))
        })
    }

    /// Recorded standardization stats, if the sample has been standardized.
    pub fn standardization(&self) -> Option<&[ColumnStats]> {
        self.standardization.as_deref()
    }

    /// Original response range, if the response was rescaled from raw units.
    pub fn response_rescale(&self) -> Option<(f64, f64)> {
        self.response_rescale
    }

    /// Copy of this sample with the response dropped (labeled → unlabeled).
    pub fn without_response(&self) -> Sample {
        Sample { response: None, ..self.clone() }
    }

    /// Copy of this sample with the original response range recorded.
    pub fn with_response_rescale(mut self, range: (f64, f64)) -> Sample {
        self.response_rescale = Some(range);
        self
    }

    /// New sample containing the given rows (in the given order), keeping
    /// names, standardization, and rescale metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Sample> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("row selection must be non-empty".into()));
        }
        if let Some(&bad) = rows.iter().find(|r| **r >= self.n()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                self.n()
            )));
        }
        let covariates = self.covariates.select(ndarray::Axis(0), rows);
        let response = self
            .response
            .as_ref()
            .map(|z| Array1::from_iter(rows.iter().map(|&r| z[r])));
        Ok(Sample {
            covariates,
            response,
            covariate_names: self.covariate_names.clone(),
            standardization: self.standardization.clone(),
            response_rescale: self.response_rescale,
        })
    }
}

/// How to partition a sample into train/validation/test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Checks that every fraction lies in (0,1) and they sum to 1.
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie strictly inside (0,1), got {f}"
                )));
            }
        }
        let sum = self.train_fraction + self.validation_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Reads a comma-delimited numeric table with one header row. When
/// `has_response` is set, the last column is taken as the response (the
/// format convention names it `z`); it must already lie in [0,1] — use
/// [`rescale_response`] on raw values first.
pub fn load_table(path: &Path, has_response: bool) -> Result<Sample> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
            }
            _ => Error::table(path, e.to_string()),
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::table(path, format!("bad header row: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::table(path, "empty header row".to_string()));
    }
    let width = headers.len();
    if has_response && width < 2 {
        return Err(Error::table(
            path,
            format!("a labeled table needs at least 2 columns, got {width}"),
        ));
    }

    let mut cells: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::table(path, format!("row {row}: {e}")))?;
        if record.len() != width {
            return Err(Error::table(
                path,
                format!("row {row}: expected {width} fields, got {}", record.len()),
            ));
        }
        for (field, name) in record.iter().zip(&headers) {
            let v: f64 = field.parse().map_err(|_| {
                Error::table(path, format!("row {row}, column `{name}`: bad number `{field}`"))
            })?;
            if !v.is_finite() {
                return Err(Error::table(
                    path,
                    format!("row {row}, column `{name}`: non-finite value `{field}`"),
                ));
            }
            cells.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::table(path, "table has a header but no rows".to_string()));
    }

    let full = Array2::from_shape_vec((n, width), cells)
        .expect("row-major cell buffer matches the counted shape");
    let (covariates, names, response) = if has_response {
        let d = width - 1;
        let covariates = full.slice(ndarray::s![.., ..d]).to_owned();
        let response = full.column(d).to_owned();
        (covariates, headers[..d].to_vec(), Some(response))
    } else {
        (full, headers, None)
    };
    Sample::new(covariates, names, response).map_err(|e| Error::table(path, e.to_string()))
}

/// Writes a sample in the table format read by [`load_table`]; the response
/// column, when present, is written last and named `z`. Values are printed
/// with the shortest round-trip representation.
pub fn save_table(sample: &Sample, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string())))?;
    let mut header: Vec<String> = sample.covariate_names().to_vec();
    if sample.is_labeled() {
        header.push("z".to_string());
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::table(path, e.to_string()))?;
    for i in 0..sample.n() {
        let mut record: Vec<String> =
            sample.covariate_row(i).iter().map(|v| format!("{v}")).collect();
        if let Some(z) = sample.response() {
            record.push(format!("{}", z[i]));
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::table(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Transforms every covariate column to `(x − mean)/sd`.
///
/// With `stats` absent, the stats are computed from this sample (sample
/// standard deviation, divisor n−1) and recorded in the output. With
/// `stats` supplied, those are applied instead — this is how validation,
/// test, and unlabeled samples adopt the labeled training split's canonical
/// metric. Re-applying the exact stats a sample already carries is a no-op;
/// applying different stats to an already-standardized sample is an error.
pub fn standardize(sample: &Sample, stats: Option<&[ColumnStats]>) -> Result<Sample> {
    if let Some(existing) = sample.standardization() {
        return match stats {
            Some(s) if s == existing => Ok(sample.clone()),
            _ => Err(Error::InvalidArgument(
                "sample is already standardized; pass its recorded stats (a no-op) or start from raw covariates"
                    .into(),
            )),
        };
    }

    let d = sample.dim();
    let stats: Vec<ColumnStats> = match stats {
        Some(s) => {
            if s.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "{} stat entries for {d} columns",
                    s.len()
                )));
            }
            for (j, cs) in s.iter().enumerate() {
                if !cs.mean.is_finite() || !cs.sd.is_finite() || cs.sd <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "invalid stats for column `{}`: mean {}, sd {}",
                        sample.covariate_names()[j],
                        cs.mean,
                        cs.sd
                    )));
                }
            }
            s.to_vec()
        }
        None => {
            let n = sample.n();
            if n < 2 {
                return Err(Error::InvalidData(
                    "standardization stats need at least 2 rows".into(),
                ));
            }
            (0..d)
                .map(|j| {
                    let col = sample.covariates.column(j);
                    let mean = col.sum() / n as f64;
                    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
                    let sd = (ss / (n as f64 - 1.0)).sqrt();
                    if sd <= 0.0 {
                        return Err(Error::InvalidData(format!(
                            "column `{}` is constant; supply stats or drop it",
                            sample.covariate_names()[j]
                        )));
                    }
                    Ok(ColumnStats { mean, sd })
                })
                .collect::<Result<_>>()?
        }
    };

    let mut covariates = sample.covariates.clone();
    for (j, cs) in stats.iter().enumerate() {
        covariates.column_mut(j).mapv_inplace(|v| (v - cs.mean) / cs.sd);
    }
    Ok(Sample { covariates, standardization: Some(stats), ..sample.clone() })
}

/// Result of [`rescale_response`].
#[derive(Debug, Clone)]
pub struct RescaledResponse {
    /// Rescaled values in [0,1].
    pub values: Vec<f64>,
    /// The (min, max) range that was applied.
    pub range: (f64, f64),
    /// How many input values fell outside the range and were clipped.
    pub clipped: usize,
}

/// Maps raw response values onto [0,1] via `(z − min)/(max − min)`.
///
/// With `range` absent the observed min/max are used (the caller decides
/// whether that range comes from labeled data only or from a pooled sample —
/// it is an explicit parameter precisely so no such guess is hidden here).
/// Out-of-range values under a supplied range are clipped, not rejected,
/// and counted in the report.
pub fn rescale_response(z_raw: &[f64], range: Option<(f64, f64)>) -> Result<RescaledResponse> {
    if z_raw.is_empty() {
        return Err(Error::InvalidArgument("cannot rescale an empty response vector".into()));
    }
    if let Some(i) = z_raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite response {} at row {}",
            z_raw[i],
            i + 1
        )));
    }
    let (min, max) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "response range must satisfy min < max, got ({lo}, {hi})"
                )));
            }
            (lo, hi)
        }
        None => {
            let lo = z_raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                return Err(Error::InvalidData(format!(
                    "response is constant at {lo}; supply an explicit range"
                )));
            }
            (lo, hi)
        }
    };
    let mut clipped = 0usize;
    let values = z_raw
        .iter()
        .map(|&z| {
            if z < min || z > max {
                clipped += 1;
            }
            ((z - min) / (max - min)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(RescaledResponse { values, range: (min, max), clipped })
}

/// Partitions a sample into train/validation/test parts.
///
/// Sizes are `round(fraction · n)` for train and validation, with the
/// remainder going to test. Rows are assigned by a seeded Fisher–Yates
/// shuffle, so the same seed always yields the same partition.
pub fn split(sample: &Sample, spec: &SplitSpec) -> Result<(Sample, Sample, Sample)> {
    spec.validate()?;
    let n = sample.n();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("splitting needs at least 3 rows, got {n}")));
    }
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let n_val = (spec.validation_fraction * n as f64).round() as usize;
    if n_train + n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "train ({n_train}) + validation ({n_val}) leave no test rows out of {n}"
        )));
    }
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty split part: train {n_train}, validation {n_val}, n {n}"
        )));
    }

    let perm = seeded_permutation(n, spec.seed);
    let train = sample.select_rows(&perm[..n_train])?;
    let validation = sample.select_rows(&perm[n_train..n_train + n_val])?;
    let test = sample.select_rows(&perm[n_train + n_val..])?;
    Ok((train, validation, test))
}

/// Deterministic Fisher–Yates permutation of `0..n`.
pub(crate) fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
