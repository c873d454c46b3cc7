//! Nearest-neighbor importance weights β(x) = f_U(x)/f_L(x).
//!
//! The estimator compares local densities by neighbor counts: find the
//! radius that captures the M nearest *labeled* training points around x,
//! count the *unlabeled* training points inside that same radius, and
//! return `(1/M)(n_L/n_U) × count`. Points at exactly the boundary radius
//! count as inside. M is chosen by minimizing a dedicated weighted loss on
//! validation data, and the same loss drives covariate selection for the
//! weights in the pipeline.
//!
//! Distances are Euclidean on standardized covariates; standardize all
//! samples with the labeled training split's stats first.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::neighbors;

/// A fitted nearest-neighbor weight estimator.
///
/// Immutable after construction; predictions are pure and safe to run
/// concurrently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightModel {
    labeled_train: Array2<f64>,
    unlabeled_train: Array2<f64>,
    m: usize,
    covariate_subset: Vec<usize>,
}

impl WeightModel {
    /// Builds a weight model from standardized training samples.
    ///
    /// `covariate_subset` lists the (strictly increasing) column indices
    /// used for distances; queries still pass full-dimension vectors.
    pub fn new(
        labeled_train: &Sample,
        unlabeled_train: &Sample,
        m: usize,
        covariate_subset: Vec<usize>,
    ) -> Result<Self> {
        if labeled_train.dim() != unlabeled_train.dim() {
            return Err(Error::InvalidArgument(format!(
                "labeled ({}) and unlabeled ({}) covariate dimensions differ",
                labeled_train.dim(),
                unlabeled_train.dim()
            )));
        }
        neighbors::validate_subset(&covariate_subset, labeled_train.dim())?;
        if m == 0 || m > labeled_train.n() {
            return Err(Error::InvalidArgument(format!(
                "M must lie in [1, {}], got {m}",
                labeled_train.n()
            )));
        }
        Ok(WeightModel {
            labeled_train: labeled_train.covariates().to_owned(),
            unlabeled_train: unlabeled_train.covariates().to_owned(),
            m,
            covariate_subset,
        })
    }

    /// Re-checks invariants (used after deserializing a model file).
    pub fn validate(&self) -> Result<()> {
        if self.labeled_train.ncols() != self.unlabeled_train.ncols() {
            return Err(Error::InvalidData("weight model matrices disagree on dimension".into()));
        }
        neighbors::validate_subset(&self.covariate_subset, self.labeled_train.ncols())?;
        if self.m == 0 || self.m > self.labeled_train.nrows() {
            return Err(Error::InvalidData(format!("weight model M {} out of range", self.m)));
        }
        if self.labeled_train.iter().chain(self.unlabeled_train.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("weight model matrices contain non-finite values".into()));
        }
        Ok(())
    }

    /// Selected neighbor count M.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Columns used for distances.
    pub fn covariate_subset(&self) -> &[usize] {
        &self.covariate_subset
    }

    /// Labeled training size n_L.
    pub fn n_labeled(&self) -> usize {
        self.labeled_train.nrows()
    }

    /// Unlabeled training size n_U.
    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_train.nrows()
    }

    /// Covariate dimension expected by queries.
    pub fn dim(&self) -> usize {
        self.labeled_train.ncols()
    }

    /// Estimated weight β̂(x) ≥ 0.
    ///
    /// The radius is the distance from `x` to its M-th nearest labeled
    /// training point (distance ties broken by row index, which does not
    /// affect the radius value); unlabeled points at distance exactly equal
    /// to the radius count as inside.
    pub fn predict_beta(&self, x: &ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "query has dimension {}, model has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut lab =
            neighbors::all_distances(&self.labeled_train.view(), &self.covariate_subset, x);
        let (_, r, _) = lab.select_nth_unstable_by(self.m - 1, f64::total_cmp);
        let r = *r;
        let count = neighbors::all_distances(
            &self.unlabeled_train.view(),
            &self.covariate_subset,
            x,
        )
        .into_iter()
        .filter(|d| *d <= r)
        .count();
        Ok(beta_from_count(count, self.m, self.n_labeled(), self.n_unlabeled()))
    }

    /// β̂ at every row of `sample`, in row order.
    pub fn predict_beta_batch(&self, sample: &Sample) -> Result<Vec<f64>> {
        (0..sample.n())
            .into_par_iter()
            .map(|i| self.predict_beta(&sample.covariate_row(i)))
            .collect()
    }
}

/// The single authoritative expression for β̂ from a neighbor count, shared
/// by direct prediction and the grid-evaluation fast path so both produce
/// bit-identical values.
#[inline]
fn beta_from_count(count: usize, m: usize, n_l: usize, n_u: usize) -> f64 {
    (1.0 / m as f64) * (n_l as f64 / n_u as f64) * count as f64
}

/// The weighted model-selection loss from already-evaluated weights:
/// mean of β̂² over labeled points minus twice the mean of β̂ over unlabeled
/// points. Smaller is better; the true-β minimum of the underlying
/// population loss makes negative values normal.
pub(crate) fn loss_from_beta_values(beta_labeled: &[f64], beta_unlabeled: &[f64]) -> f64 {
    let sq: f64 = beta_labeled.iter().map(|b| b * b).sum::<f64>() / beta_labeled.len() as f64;
    let lin: f64 = beta_unlabeled.iter().sum::<f64>() / beta_unlabeled.len() as f64;
    sq - 2.0 * lin
}

/// Evaluates the weight loss of a fitted model on validation samples.
pub fn beta_loss(model: &WeightModel, labeled_val: &Sample, unlabeled_val: &Sample) -> Result<f64> {
    let beta_l = model.predict_beta_batch(labeled_val)?;
    let beta_u = model.predict_beta_batch(unlabeled_val)?;
    Ok(loss_from_beta_values(&beta_l, &beta_u))
}

/// One row of the M-selection table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MLoss {
    pub m: usize,
    pub loss: f64,
}

/// Result of [`select_M`]: the winning model plus the full loss table.
#[derive(Debug, Clone)]
pub struct WeightSelection {
    pub model: WeightModel,
    /// Validation loss of the winning model.
    pub loss: f64,
    /// (M, validation loss) for every grid value, in grid order.
    pub table: Vec<MLoss>,
}

/// Fits one weight model per grid value of M and returns the one with the
/// smallest validation loss (ties toward smaller M).
///
/// Per validation point the labeled and unlabeled training distances are
/// computed and sorted once, so scanning the M grid costs only binary
/// searches; the resulting losses are bit-identical to fitting each M
/// separately and calling [`beta_loss`].
#[allow(non_snake_case)]
pub fn select_M(
    labeled_train: &Sample,
    unlabeled_train: &Sample,
    labeled_val: &Sample,
    unlabeled_val: &Sample,
    m_grid: &[usize],
    covariate_subset: &[usize],
) -> Result<WeightSelection> {
    if m_grid.is_empty() {
        return Err(Error::InvalidArgument("M grid must be non-empty".into()));
    }
    let n_l = labeled_train.n();
    let n_u = unlabeled_train.n();
    if let Some(&bad) = m_grid.iter().find(|m| **m == 0 || **m > n_l) {
        return Err(Error::InvalidArgument(format!(
            "M grid value {bad} outside [1, {n_l}]"
        )));
    }
    neighbors::validate_subset(covariate_subset, labeled_train.dim())?;
    for s in [unlabeled_train, labeled_val, unlabeled_val] {
        if s.dim() != labeled_train.dim() {
            return Err(Error::InvalidArgument(
                "all samples must share one covariate dimension".into(),
            ));
        }
    }

    // Sorted distance profiles per validation point: (labeled dists,
    // unlabeled dists), both ascending.
    let profile = |s: &Sample| -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..s.n())
            .into_par_iter()
            .map(|i| {
                let x = s.covariate_row(i);
                let mut lab = neighbors::all_distances(
                    &labeled_train.covariates(),
                    covariate_subset,
                    &x,
                );
                let mut unl = neighbors::all_distances(
                    &unlabeled_train.covariates(),
                    covariate_subset,
                    &x,
                );
                lab.sort_by(f64::total_cmp);
                unl.sort_by(f64::total_cmp);
                (lab, unl)
            })
            .collect()
    };
    let profiles_l = profile(labeled_val);
    let profiles_u = profile(unlabeled_val);

    let beta_at = |profiles: &[(Vec<f64>, Vec<f64>)], m: usize| -> Vec<f64> {
        profiles
            .iter()
            .map(|(lab, unl)| {
                let r = lab[m - 1];
                beta_from_count(neighbors::count_within(unl, r), m, n_l, n_u)
            })
            .collect()
    };

    let table: Vec<MLoss> = m_grid
        .iter()
        .map(|&m| {
            let beta_l = beta_at(&profiles_l, m);
            let beta_u = beta_at(&profiles_u, m);
            MLoss { m, loss: loss_from_beta_values(&beta_l, &beta_u) }
        })
        .collect();

    let best = table
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.m.cmp(&b.m)))
        .expect("table is non-empty");
    let model = WeightModel::new(
        labeled_train,
        unlabeled_train,
        best.m,
        covariate_subset.to_vec(),
    )?;
    Ok(WeightSelection { model, loss: best.loss, table })
}

/// Report produced by [`clean_zero_weights`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningReport {
    /// Fraction of pool rows whose preliminary weight was exactly zero.
    pub zero_weight_fraction: f64,
    pub pool_rows: usize,
    pub kept_rows: usize,
    /// M chosen for the preliminary model.
    pub selected_m: usize,
    /// Pool row indices of the kept rows, in kept order, so callers that
    /// cleaned a transformed copy can recover the original rows.
    pub kept_row_indices: Vec<usize>,
}

/// Rebuilds a labeled sample from a larger pool, keeping only rows the
/// unlabeled data can "see" (preliminary β̂ ≠ 0).
///
/// A preliminary weight model is fitted on `labeled_current` vs `unlabeled`
/// (M selected in-sample over `prelim_m_grid`), β̂ is evaluated on every
/// pool row, and the first `target_size` rows of a seeded shuffle with
/// nonzero weight are returned along with the zero-weight fraction.
pub fn clean_zero_weights(
    labeled_pool: &Sample,
    labeled_current: &Sample,
    unlabeled: &Sample,
    target_size: usize,
    prelim_m_grid: &[usize],
    seed: u64,
) -> Result<(Sample, CleaningReport)> {
    if labeled_pool.n() <= labeled_current.n() {
        return Err(Error::InvalidArgument(format!(
            "pool ({} rows) must be strictly larger than the current labeled sample ({} rows)",
            labeled_pool.n(),
            labeled_current.n()
        )));
    }
    if target_size == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let subset: Vec<usize> = (0..labeled_current.dim()).collect();
    let selection = select_M(
        labeled_current,
        unlabeled,
        labeled_current,
        unlabeled,
        prelim_m_grid,
        &subset,
    )?;
    let betas = selection.model.predict_beta_batch(labeled_pool)?;
    let zero_count = betas.iter().filter(|b| **b == 0.0).count();
    let nonzero_count = betas.len() - zero_count;
    if nonzero_count < target_size {
        return Err(Error::InvalidData(format!(
            "only {nonzero_count} pool rows have nonzero preliminary weight; \
             target {target_size} is unattainable"
        )));
    }

    let order = crate::data::seeded_permutation(labeled_pool.n(), seed);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| betas[i] != 0.0)
        .take(target_size)
        .collect();
    let cleaned = labeled_pool.select_rows(&kept)?;
    let report = CleaningReport {
        zero_weight_fraction: zero_count as f64 / betas.len() as f64,
        pool_rows: labeled_pool.n(),
        kept_rows: kept.len(),
        selected_m: selection.model.m(),
        kept_row_indices: kept,
    };
    Ok((cleaned, report))
}

/// Kish effective sample size `(Σw)² / Σw²` of a nonnegative weight vector.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("weight vector must be non-empty".into()));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and nonnegative, got {w} at index {i}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    Ok(sum * sum / sum_sq)
}
