//! Weighted nearest-neighbor conditional density estimators.
//!
//! Both estimators find the N labeled training rows nearest to the query
//! (Euclidean distance on the chosen covariate subset, ties broken by row
//! index) and spread the neighbors' training weights over the response
//! axis — as a B-bin histogram, or as a Gaussian-shaped kernel smoother
//! `K_ε(u) = exp(−u²/(4ε))` — then renormalize on the grid. With all-ones
//! weights these are the plain NN estimators; with β̂ weights they are the
//! selection-corrected variants.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cde::ValidationSet;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::neighbors::{neighbor_order, validate_subset};

/// Which smoother the estimator applies along the response axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NnVariant {
    /// B equal-width bins on [0,1], half-open except the last.
    Histogram { bins: usize },
    /// Gaussian-shaped kernel with bandwidth ε: `exp(−u²/(4ε))`.
    Kernel { epsilon: f64 },
}

/// Estimator family selector for tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnKind {
    Histogram,
    Kernel,
}

/// A fitted nearest-neighbor conditional density estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NnCdeModel {
    covariates: Array2<f64>,
    responses: Array1<f64>,
    weights: Vec<f64>,
    variant: NnVariant,
    n_neighbors: usize,
    covariate_subset: Vec<usize>,
    grid_size: usize,
}

impl NnCdeModel {
    /// Builds the estimator from labeled training data and per-row weights
    /// (β̂ at the training rows, or all-ones for the uncorrected variant).
    pub fn new(
        labeled_train: &Sample,
        weights: Vec<f64>,
        variant: NnVariant,
        n_neighbors: usize,
        covariate_subset: Vec<usize>,
        grid_size: usize,
    ) -> Result<Self> {
        let responses = labeled_train
            .response()
            .ok_or_else(|| Error::InvalidArgument("training sample must carry responses".into()))?
            .to_owned();
        if n_neighbors == 0 || n_neighbors > labeled_train.n() {
            return Err(Error::InvalidArgument(format!(
                "neighbor count must be in 1..={}, got {n_neighbors}",
                labeled_train.n()
            )));
        }
        match variant {
            NnVariant::Histogram { bins } if bins < 2 => {
                return Err(Error::InvalidArgument(format!(
                    "histogram needs at least 2 bins, got {bins}"
                )));
            }
            NnVariant::Kernel { epsilon } if !(epsilon.is_finite() && epsilon > 0.0) => {
                return Err(Error::InvalidArgument(format!(
                    "kernel bandwidth must be positive and finite, got {epsilon}"
                )));
            }
            _ => {}
        }
        if weights.len() != labeled_train.n() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} training rows",
                weights.len(),
                labeled_train.n()
            )));
        }
        if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "training weights must be finite and nonnegative, got {w} at row {}",
                k + 1
            )));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument("all training weights are zero".into()));
        }
        validate_subset(&covariate_subset, labeled_train.dim())?;
        if grid_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 knots, got {grid_size}"
            )));
        }
        Ok(NnCdeModel {
            covariates: labeled_train.covariates().to_owned(),
            responses,
            weights,
            variant,
            n_neighbors,
            covariate_subset,
            grid_size,
        })
    }

    pub fn variant(&self) -> NnVariant {
        self.variant
    }

    pub fn n_neighbors(&self) -> usize {
        self.n_neighbors
    }

    pub fn covariate_subset(&self) -> &[usize] {
        &self.covariate_subset
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// Predicts the conditional density at `x` (full covariate vector; the
    /// model applies its covariate subset internally).
    ///
    /// If every neighbor of `x` has zero weight the result is the uniform
    /// density with the fallback flag set.
    pub fn predict(&self, x: &ArrayView1<'_, f64>) -> Result<DensityGrid> {
        if x.len() != self.covariates.ncols() {
            return Err(Error::InvalidArgument(format!(
                "query has dimension {}, model has {}",
                x.len(),
                self.covariates.ncols()
            )));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite query coordinate {bad}")));
        }
        let order = neighbor_order(&self.covariates.view(), &self.covariate_subset, x);
        let raw = self.raw_from_neighbors(&order[..self.n_neighbors]);
        Ok(DensityGrid::from_raw(raw)?.normalize())
    }

    /// Raw (unnormalized) grid values from the given neighbor rows.
    fn raw_from_neighbors(&self, neighbor_rows: &[usize]) -> Vec<f64> {
        let g = self.grid_size;
        match self.variant {
            NnVariant::Histogram { bins } => {
                let mut mass = vec![0.0; bins];
                let mut total = 0.0;
                for &k in neighbor_rows {
                    let b = bin_of(self.responses[k], bins);
                    mass[b] += self.weights[k];
                    total += self.weights[k];
                }
                if total <= 0.0 {
                    return vec![0.0; g];
                }
                // Density on bin b is mass·B/total; sample it at the knots.
                (0..g)
                    .map(|i| {
                        let z = i as f64 / (g - 1) as f64;
                        mass[bin_of(z, bins)] * bins as f64 / total
                    })
                    .collect()
            }
            NnVariant::Kernel { epsilon } => (0..g)
                .map(|i| {
                    let z = i as f64 / (g - 1) as f64;
                    neighbor_rows
                        .iter()
                        .map(|&k| {
                            let u = z - self.responses[k];
                            self.weights[k] * (-u * u / (4.0 * epsilon)).exp()
                        })
                        .sum()
                })
                .collect(),
        }
    }
}

/// Bin index of `z` among B half-open bins (the last bin closed at 1).
fn bin_of(z: f64, bins: usize) -> usize {
    ((z * bins as f64) as usize).min(bins - 1)
}

/// Hyperparameter candidates for [`fit_nn_cde`]. `bins` applies to the
/// histogram family, `epsilons` to the kernel family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NnTuningGrid {
    pub n_neighbors: Vec<usize>,
    pub bins: Vec<usize>,
    pub epsilons: Vec<f64>,
}

impl NnTuningGrid {
    fn candidates(&self, kind: NnKind, n_train: usize) -> Result<Vec<(usize, NnVariant)>> {
        if self.n_neighbors.is_empty() {
            return Err(Error::InvalidArgument("neighbor-count grid is empty".into()));
        }
        if let Some(&n) = self.n_neighbors.iter().find(|&&n| n == 0 || n > n_train) {
            return Err(Error::InvalidArgument(format!(
                "neighbor count must be in 1..={n_train}, got {n}"
            )));
        }
        let mut out = Vec::new();
        match kind {
            NnKind::Histogram => {
                if self.bins.is_empty() {
                    return Err(Error::InvalidArgument("bin grid is empty".into()));
                }
                for &n in &self.n_neighbors {
                    for &b in &self.bins {
                        out.push((n, NnVariant::Histogram { bins: b }));
                    }
                }
            }
            NnKind::Kernel => {
                if self.epsilons.is_empty() {
                    return Err(Error::InvalidArgument("bandwidth grid is empty".into()));
                }
                for &n in &self.n_neighbors {
                    for &e in &self.epsilons {
                        out.push((n, NnVariant::Kernel { epsilon: e }));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One scored hyperparameter combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NnTuneRecord {
    pub n_neighbors: usize,
    pub bins: Option<usize>,
    pub epsilon: Option<f64>,
    pub loss: f64,
}

/// A tuned nearest-neighbor model with its validation loss table.
#[derive(Debug, Clone)]
pub struct NnFit {
    pub model: NnCdeModel,
    pub loss: f64,
    pub table: Vec<NnTuneRecord>,
}

/// Tunes a nearest-neighbor estimator over its hyperparameter grid,
/// scoring every candidate with the loss implied by `validation` (see
/// [`ValidationSet`]) and returning the minimizer. Ties go to the smaller
/// neighbor count, then fewer bins (histogram) or the larger bandwidth
/// (kernel).
pub fn fit_nn_cde(
    labeled_train: &Sample,
    weights: &[f64],
    kind: NnKind,
    grid: &NnTuningGrid,
    validation: &ValidationSet<'_>,
    covariate_subset: Vec<usize>,
    grid_size: usize,
) -> Result<NnFit> {
    validation.validate(labeled_train.dim())?;
    let candidates = grid.candidates(kind, labeled_train.n())?;

    let mut best: Option<(NnCdeModel, NnTuneRecord)> = None;
    let mut table = Vec::with_capacity(candidates.len());
    for (n, variant) in candidates {
        let model = NnCdeModel::new(
            labeled_train,
            weights.to_vec(),
            variant,
            n,
            covariate_subset.clone(),
            grid_size,
        )?;
        let loss = validation.loss(|x: &ArrayView1<'_, f64>| model.predict(x))?;
        let (bins, epsilon) = match variant {
            NnVariant::Histogram { bins } => (Some(bins), None),
            NnVariant::Kernel { epsilon } => (None, Some(epsilon)),
        };
        let record = NnTuneRecord { n_neighbors: n, bins, epsilon, loss };
        if best.as_ref().map_or(true, |(_, b)| better_nn(&record, b)) {
            best = Some((model, record.clone()));
        }
        table.push(record);
    }
    let (model, record) = best.expect("candidate list validated non-empty");
    Ok(NnFit { model, loss: record.loss, table })
}

/// Strict preference order for tuning: lower loss, then smaller N, then
/// fewer bins / larger ε.
fn better_nn(a: &NnTuneRecord, b: &NnTuneRecord) -> bool {
    if a.loss != b.loss {
        return a.loss < b.loss;
    }
    if a.n_neighbors != b.n_neighbors {
        return a.n_neighbors < b.n_neighbors;
    }
    match (a.bins, b.bins, a.epsilon, b.epsilon) {
        (Some(ab), Some(bb), _, _) => ab < bb,
        (_, _, Some(ae), Some(be)) => ae > be,
        _ => false,
    }
}
