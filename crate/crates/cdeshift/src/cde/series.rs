//! Spectral series conditional density estimator.
//!
//! The covariate side uses data-driven basis functions: eigenvectors of the
//! Gaussian Gram matrix `G_kl = exp(−‖x_k−x_l‖²/(4ε))` on the labeled
//! training covariates, rescaled by `√n_L` so they are empirically
//! orthonormal, and extended to new covariates by the Nyström formula. The
//! response side uses a fixed orthonormal basis on [0,1] (a named,
//! swappable strategy; currently the cosine basis). Expansion coefficients
//! are plain training-sample averages, so the estimate is
//! `f̂(z|x) = Σ_{i≤I} Σ_{j≤J} α̂_ij φ_i(z) ψ̂_j(x)`, normalized on the grid.
//!
//! The selection-corrected flavor differs only in how hyperparameters are
//! tuned (shift-corrected loss); the coefficients stay labeled-sample
//! averages.

use std::collections::HashSet;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cde::ValidationSet;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::neighbors::{all_distances, validate_subset};

/// Relative floor under which eigenvalues are considered numerically zero.
const EIGENVALUE_FLOOR: f64 = 1e-10;

/// Orthonormal basis on [0,1] for the response axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseBasis {
    /// φ₁(z)=1, φ_i(z)=√2·cos(π(i−1)z) for i ≥ 2.
    Cosine,
}

impl ResponseBasis {
    pub fn name(&self) -> &'static str {
        match self {
            ResponseBasis::Cosine => "cosine",
        }
    }

    /// Evaluates the i-th basis function (1-based) at `z`.
    pub fn evaluate(&self, i: usize, z: f64) -> f64 {
        match self {
            ResponseBasis::Cosine => {
                if i == 1 {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                        * (std::f64::consts::PI * (i - 1) as f64 * z).cos()
                }
            }
        }
    }
}

/// A fitted spectral series estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesModel {
    covariates: Array2<f64>,
    covariate_subset: Vec<usize>,
    epsilon: f64,
    n_response_basis: usize,
    n_eigenfunctions: usize,
    /// Unit-norm eigenvectors ψ̃, one column per retained component.
    eigvecs: Array2<f64>,
    /// Matching eigenvalues, strictly positive, descending.
    eigvals: Vec<f64>,
    /// Coefficients α̂, one row per response basis function.
    coeffs: Array2<f64>,
    basis: ResponseBasis,
    grid_size: usize,
}

/// Eigenpairs of one Gram matrix after the floor and sign conventions.
struct GramEigen {
    vectors: Array2<f64>,
    values: Vec<f64>,
}

impl GramEigen {
    fn rank(&self) -> usize {
        self.values.len()
    }
}

fn gram_matrix(covariates: &ArrayView2<'_, f64>, subset: &[usize], epsilon: f64) -> DMatrix<f64> {
    let n = covariates.nrows();
    DMatrix::from_fn(n, n, |k, l| {
        let mut s = 0.0;
        for &j in subset {
            let d = covariates[(k, j)] - covariates[(l, j)];
            s += d * d;
        }
        (-s / (4.0 * epsilon)).exp()
    })
}

/// Symmetric eigendecomposition of the Gram matrix: eigenpairs sorted by
/// descending eigenvalue, components at or below `1e-10·max` dropped, and
/// each eigenvector's entry of largest magnitude made positive (first such
/// entry on ties) so results are deterministic across backends.
fn decompose(
    covariates: &ArrayView2<'_, f64>,
    subset: &[usize],
    epsilon: f64,
) -> Result<GramEigen> {
    let n = covariates.nrows();
    let eig = SymmetricEigen::new(gram_matrix(covariates, subset, epsilon));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b))
    });
    let max = eig.eigenvalues[order[0]];
    if !(max.is_finite() && max > 0.0) {
        return Err(Error::Numeric(format!(
            "kernel matrix has no positive eigenvalues (largest is {max})"
        )));
    }
    let floor = EIGENVALUE_FLOOR * max;
    let kept: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k] > floor).collect();
    let mut vectors = Array2::zeros((n, kept.len()));
    let mut values = Vec::with_capacity(kept.len());
    for (j, &k) in kept.iter().enumerate() {
        values.push(eig.eigenvalues[k]);
        let col = eig.eigenvectors.column(k);
        let mut lead = 0;
        for i in 1..n {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[(i, j)] = sign * col[i];
        }
    }
    Ok(GramEigen { vectors, values })
}

/// Assembles a model from an existing decomposition (prefix truncation).
fn assemble(
    labeled_train: &Sample,
    eigen: &GramEigen,
    epsilon: f64,
    n_response_basis: usize,
    n_eigenfunctions: usize,
    covariate_subset: &[usize],
    basis: ResponseBasis,
    grid_size: usize,
) -> Result<SeriesModel> {
    let n = labeled_train.n();
    let z = labeled_train
        .response()
        .ok_or_else(|| Error::InvalidArgument("training sample must carry responses".into()))?;
    if n_response_basis == 0 {
        return Err(Error::InvalidArgument("need at least one response basis function".into()));
    }
    if n_eigenfunctions == 0 || n_eigenfunctions > n {
        return Err(Error::InvalidArgument(format!(
            "eigenfunction count must be in 1..={n}, got {n_eigenfunctions}"
        )));
    }
    if n_eigenfunctions > eigen.rank() {
        return Err(Error::Numeric(format!(
            "requested {n_eigenfunctions} eigenfunctions but the kernel matrix has usable rank {} \
             at bandwidth {epsilon}",
            eigen.rank()
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 knots, got {grid_size}"
        )));
    }
    let eigvecs = eigen.vectors.slice(ndarray::s![.., ..n_eigenfunctions]).to_owned();
    let eigvals = eigen.values[..n_eigenfunctions].to_vec();

    // α̂_ij = (1/n) Σ_k φ_i(z_k)·ψ̂_j(x_k) with ψ̂_j = √n·ψ̃_j at training
    // points, i.e. (1/√n)·Φᵀψ̃.
    let phi = Array2::from_shape_fn((n, n_response_basis), |(k, i)| basis.evaluate(i + 1, z[k]));
    let coeffs = phi.t().dot(&eigvecs) / (n as f64).sqrt();

    Ok(SeriesModel {
        covariates: labeled_train.covariates().to_owned(),
        covariate_subset: covariate_subset.to_vec(),
        epsilon,
        n_response_basis,
        n_eigenfunctions,
        eigvecs,
        eigvals,
        coeffs,
        basis,
        grid_size,
    })
}

/// Fits the series estimator at fixed hyperparameters: Gram matrix on the
/// training covariates (restricted to `covariate_subset`), top
/// `n_eigenfunctions` eigenpairs, coefficients by training-sample averages.
///
/// Errors if fewer than `n_eigenfunctions` eigenvalues survive the
/// `1e-10·max` floor, reporting the usable rank.
pub fn fit_series(
    labeled_train: &Sample,
    epsilon: f64,
    n_response_basis: usize,
    n_eigenfunctions: usize,
    covariate_subset: Vec<usize>,
    basis: ResponseBasis,
    grid_size: usize,
) -> Result<SeriesModel> {
    validate_subset(&covariate_subset, labeled_train.dim())?;
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kernel bandwidth must be positive and finite, got {epsilon}"
        )));
    }
    let eigen = decompose(&labeled_train.covariates(), &covariate_subset, epsilon)?;
    assemble(
        labeled_train,
        &eigen,
        epsilon,
        n_response_basis,
        n_eigenfunctions,
        &covariate_subset,
        basis,
        grid_size,
    )
}

impl SeriesModel {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_response_basis(&self) -> usize {
        self.n_response_basis
    }

    pub fn n_eigenfunctions(&self) -> usize {
        self.n_eigenfunctions
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn basis(&self) -> ResponseBasis {
        self.basis
    }

    pub fn covariate_subset(&self) -> &[usize] {
        &self.covariate_subset
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    fn check_query(&self, x: &ArrayView1<'_, f64>) -> Result<()> {
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
        Ok(())
    }

    /// Covariate eigenfunctions at `x` by the Nyström extension:
    /// ψ̂_j(x) = (√n/l̂_j)·Σ_k ψ̃_j(x_k)·K(x,x_k).
    pub fn nystrom_eval(&self, x: &ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_query(x)?;
        let n = self.covariates.nrows();
        let k_vec = Array1::from_vec(
            all_distances(&self.covariates.view(), &self.covariate_subset, x)
                .into_iter()
                .map(|d| (-d * d / (4.0 * self.epsilon)).exp())
                .collect(),
        );
        let mut psi = self.eigvecs.t().dot(&k_vec);
        let sqrt_n = (n as f64).sqrt();
        for (j, p) in psi.iter_mut().enumerate() {
            *p *= sqrt_n / self.eigvals[j];
        }
        Ok(psi)
    }

    /// Predicts the conditional density at `x`: the truncated expansion
    /// sampled on the grid, then normalized (negative values clipped).
    pub fn predict(&self, x: &ArrayView1<'_, f64>) -> Result<DensityGrid> {
        let psi = self.nystrom_eval(x)?;
        let c = self.coeffs.dot(&psi);
        let g = self.grid_size;
        let raw: Vec<f64> = (0..g)
            .map(|t| {
                let z = t as f64 / (g - 1) as f64;
                c.iter()
                    .enumerate()
                    .map(|(i, ci)| ci * self.basis.evaluate(i + 1, z))
                    .sum()
            })
            .collect();
        Ok(DensityGrid::from_raw(raw)?.normalize())
    }

    /// Fraction of a sample's rows whose eigenfunction vector has Euclidean
    /// norm below `threshold` — queries the Nyström extension can only
    /// extrapolate to, where the expansion carries almost no information.
    pub fn extrapolation_fraction(&self, sample: &Sample, threshold: f64) -> Result<f64> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be positive and finite, got {threshold}"
            )));
        }
        let flagged = (0..sample.n())
            .into_par_iter()
            .map(|i| {
                let psi = self.nystrom_eval(&sample.covariate_row(i))?;
                let norm = psi.iter().map(|p| p * p).sum::<f64>().sqrt();
                Ok(usize::from(norm < threshold))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(flagged as f64 / sample.n() as f64)
    }
}

/// Hyperparameter candidates for [`tune_series`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesTuningGrid {
    pub epsilons: Vec<f64>,
    pub n_eigenfunctions: Vec<usize>,
    pub n_response_basis: Vec<usize>,
}

/// One scored hyperparameter combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesTuneRecord {
    pub epsilon: f64,
    pub n_response_basis: usize,
    pub n_eigenfunctions: usize,
    pub loss: f64,
}

/// A tuned series model with its validation loss table.
#[derive(Debug, Clone)]
pub struct SeriesFit {
    pub model: SeriesModel,
    pub loss: f64,
    pub table: Vec<SeriesTuneRecord>,
    /// Gram decompositions performed: one per distinct bandwidth, however
    /// many (I, J) combinations were scored.
    pub decompositions: usize,
}

/// Tunes the series estimator over (I, J, ε), scoring every candidate with
/// the loss implied by `validation` and returning the minimizer. Ties go to
/// smaller I, then smaller J, then larger ε. The Gram decomposition is
/// computed once per distinct ε and shared across all (I, J) truncations;
/// distinct bandwidths are processed in parallel.
pub fn tune_series(
    labeled_train: &Sample,
    grid: &SeriesTuningGrid,
    validation: &ValidationSet<'_>,
    covariate_subset: Vec<usize>,
    basis: ResponseBasis,
    grid_size: usize,
) -> Result<SeriesFit> {
    validation.validate(labeled_train.dim())?;
    validate_subset(&covariate_subset, labeled_train.dim())?;
    if grid.epsilons.is_empty() || grid.n_eigenfunctions.is_empty()
        || grid.n_response_basis.is_empty()
    {
        return Err(Error::InvalidArgument("series tuning grid has an empty axis".into()));
    }
    if let Some(&e) = grid.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "kernel bandwidth must be positive and finite, got {e}"
        )));
    }
    let mut seen = HashSet::new();
    let distinct_eps: Vec<f64> =
        grid.epsilons.iter().copied().filter(|e| seen.insert(e.to_bits())).collect();

    let per_eps: Vec<Vec<(SeriesTuneRecord, SeriesModel)>> = distinct_eps
        .par_iter()
        .map(|&eps| {
            let eigen = decompose(&labeled_train.covariates(), &covariate_subset, eps)?;
            let mut out = Vec::new();
            for &j in &grid.n_eigenfunctions {
                for &i in &grid.n_response_basis {
                    let model = assemble(
                        labeled_train,
                        &eigen,
                        eps,
                        i,
                        j,
                        &covariate_subset,
                        basis,
                        grid_size,
                    )?;
                    let loss = validation.loss(|x: &ArrayView1<'_, f64>| model.predict(x))?;
                    let record = SeriesTuneRecord {
                        epsilon: eps,
                        n_response_basis: i,
                        n_eigenfunctions: j,
                        loss,
                    };
                    out.push((record, model));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(SeriesTuneRecord, SeriesModel)> = None;
    let mut table = Vec::new();
    for (record, model) in per_eps.into_iter().flatten() {
        if best.as_ref().map_or(true, |(b, _)| better_series(&record, b)) {
            best = Some((record.clone(), model));
        }
        table.push(record);
    }
    let (record, model) = best.expect("tuning grid validated non-empty");
    Ok(SeriesFit { model, loss: record.loss, table, decompositions: distinct_eps.len() })
}

/// Strict preference order for tuning: lower loss, then smaller I, then
/// smaller J, then larger ε.
fn better_series(a: &SeriesTuneRecord, b: &SeriesTuneRecord) -> bool {
    if a.loss != b.loss {
        return a.loss < b.loss;
    }
    if a.n_response_basis != b.n_response_basis {
        return a.n_response_basis < b.n_response_basis;
    }
    if a.n_eigenfunctions != b.n_eigenfunctions {
        return a.n_eigenfunctions < b.n_eigenfunctions;
    }
    a.epsilon > b.epsilon
}
