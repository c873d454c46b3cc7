//! Stacking: simplex-weighted combination of fitted estimators.
//!
//! Given p fitted conditional density estimators, the combination
//! `f̂_α = Σ α_k f̂_k` with α on the probability simplex that minimizes the
//! shift-corrected loss solves the quadratic program
//! `min_α α'𝔹α − 2α'b`, where `𝔹_ij` averages `∫f̂_i f̂_j dz` over the
//! unlabeled validation covariates and `b_i` averages the β̂-weighted
//! density of each estimator at the labeled validation responses. Both
//! moments use the shared grid quadrature, so the objective at the solution
//! is exactly the loss of the stacked predictor (up to the loss's dropped
//! constant).
//!
//! The solver is projected gradient descent with exact Euclidean simplex
//! projection — p is small, no external QP dependency — initialized at the
//! uniform weights, which makes flat objectives resolve to the
//! maximum-entropy optimum.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::cde::CdeModel;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Convergence threshold on the gradient-mapping norm.
const QP_TOLERANCE: f64 = 1e-10;

/// Iteration cap for the projected gradient solver.
const QP_MAX_ITERATIONS: usize = 100_000;

/// A solved simplex combination of fitted estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedModel {
    pub components: Vec<CdeModel>,
    /// Mixing weights: nonnegative, summing to 1 within 1e-9.
    pub alpha: Vec<f64>,
    /// α'𝔹α − 2α'b at `alpha`.
    pub objective_value: f64,
    /// Pairwise density moments over the unlabeled validation rows.
    pub b_matrix: Array2<f64>,
    /// Weighted fit moments over the labeled validation rows.
    pub b_vector: Array1<f64>,
}

impl StackedModel {
    /// Checks the simplex and moment-matrix invariants.
    pub fn validate(&self) -> Result<()> {
        let p = self.components.len();
        if p < 2 {
            return Err(Error::InvalidData(format!("stacked model needs ≥ 2 components, has {p}")));
        }
        if self.alpha.len() != p
            || self.b_matrix.dim() != (p, p)
            || self.b_vector.len() != p
        {
            return Err(Error::InvalidData(format!(
                "inconsistent stacked shapes: {p} components, {} weights, {:?} moment matrix, \
                 {} moment vector",
                self.alpha.len(),
                self.b_matrix.dim(),
                self.b_vector.len()
            )));
        }
        let g = self.components[0].grid_size();
        if self.components.iter().any(|c| c.grid_size() != g) {
            return Err(Error::InvalidData("components emit different grid sizes".into()));
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0)
            || (self.alpha.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidData(format!(
                "mixing weights must lie on the simplex within 1e-9, got {:?}",
                self.alpha
            )));
        }
        // 𝔹 is a Gram matrix of densities: symmetric PSD up to quadrature
        // and solver noise.
        let m = &self.b_matrix;
        for i in 0..p {
            for j in 0..p {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 {
                    return Err(Error::InvalidData(format!(
                        "moment matrix asymmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let nm = nalgebra::DMatrix::from_fn(p, p, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        let eigs = nalgebra::SymmetricEigen::new(nm).eigenvalues;
        let max = eigs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-8 * max.max(1.0) {
            return Err(Error::InvalidData(format!(
                "moment matrix is not positive semidefinite: smallest eigenvalue {min}"
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.components[0].grid_size()
    }

    /// Predicts the stacked density: the α-weighted sum of the component
    /// predictions, with normalization re-asserted.
    pub fn predict(&self, x: &ArrayView1<'_, f64>) -> Result<DensityGrid> {
        let mut acc = vec![0.0; self.grid_size()];
        for (a, c) in self.alpha.iter().zip(&self.components) {
            let d = c.predict(x)?;
            if !d.is_normalized() {
                return Err(Error::Numeric(
                    "stacked component emitted an unnormalized density".into(),
                ));
            }
            for (s, v) in acc.iter_mut().zip(d.values()) {
                *s += a * v;
            }
        }
        DensityGrid::from_normalized(acc)
    }
}

/// Exact Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        prefix += ui;
        let t = (prefix - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn objective(b_matrix: &Array2<f64>, b_vector: &Array1<f64>, alpha: &Array1<f64>) -> f64 {
    alpha.dot(&b_matrix.dot(alpha)) - 2.0 * alpha.dot(b_vector)
}

/// Minimizes `α'𝔹α − 2α'b` over the probability simplex.
///
/// Projected gradient descent with step `1/(2λ_max(𝔹))`, uniform start,
/// run until the gradient-mapping norm falls below `1e-10` (or `10^5`
/// iterations). For p = 2 the problem is one-dimensional: the iterative
/// result is cross-checked against the closed-form segment minimization
/// and the closed-form solution, which is exact even when the segment
/// curvature is tiny, is the one returned.
pub fn solve_simplex_qp(
    b_matrix: &Array2<f64>,
    b_vector: &Array1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let p = b_vector.len();
    if p < 2 || b_matrix.dim() != (p, p) {
        return Err(Error::InvalidArgument(format!(
            "need a p×p matrix and length-p vector with p ≥ 2, got {:?} and {p}",
            b_matrix.dim()
        )));
    }
    if b_matrix.iter().chain(b_vector.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("stacking moments must be finite".into()));
    }

    let nm = nalgebra::DMatrix::from_fn(p, p, |i, j| b_matrix[(i, j)]);
    let lambda_max = nalgebra::SymmetricEigen::new(nm)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let step = 1.0 / (2.0 * lambda_max).max(1e-12);

    let mut alpha = Array1::from_elem(p, 1.0 / p as f64);
    for _ in 0..QP_MAX_ITERATIONS {
        let grad = 2.0 * (b_matrix.dot(&alpha) - b_vector);
        let moved: Vec<f64> =
            alpha.iter().zip(grad.iter()).map(|(a, g)| a - step * g).collect();
        let projected = Array1::from_vec(project_simplex(&moved));
        let direction = &projected - &alpha;
        let mapping_norm = direction.dot(&direction).sqrt() / step;
        if mapping_norm <= QP_TOLERANCE {
            break;
        }
        // Exact line search along the feasible segment α + s·d, s ∈ (0,1]:
        // the objective is quadratic in s, so the optimum is closed-form.
        let curvature = direction.dot(&b_matrix.dot(&direction));
        let slope = grad.dot(&direction);
        let s = if curvature > 0.0 {
            (-slope / (2.0 * curvature)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        alpha = &alpha + &(s * &direction);
    }
    let value = objective(b_matrix, b_vector, &alpha);

    if p == 2 {
        let (v, a1) = closed_form_two_component(b_matrix, b_vector);
        if (value - v).abs() > 1e-8 * v.abs().max(1.0) {
            return Err(Error::Solver(format!(
                "two-component cross-check failed: projected gradient reached {value} at \
                 α₁={}, closed form gives {v} at α₁={a1}",
                alpha[0]
            )));
        }
        return Ok((Array1::from_vec(vec![a1, 1.0 - a1]), v));
    }
    Ok((alpha, value))
}

/// Closed-form minimum of the two-component objective over α₁ ∈ [0,1].
fn closed_form_two_component(b_matrix: &Array2<f64>, b_vector: &Array1<f64>) -> (f64, f64) {
    // q(t) = at² + bt + c for α = (t, 1−t).
    let a = b_matrix[(0, 0)] - 2.0 * b_matrix[(0, 1)] + b_matrix[(1, 1)];
    let b = 2.0 * b_matrix[(0, 1)] - 2.0 * b_matrix[(1, 1)] - 2.0 * b_vector[0]
        + 2.0 * b_vector[1];
    let q = |t: f64| {
        let alpha = Array1::from_vec(vec![t, 1.0 - t]);
        objective(b_matrix, b_vector, &alpha)
    };
    let t = if a > 0.0 {
        (-b / (2.0 * a)).clamp(0.0, 1.0)
    } else if b > 0.0 {
        0.0
    } else if b < 0.0 {
        1.0
    } else {
        0.5 // flat: maximum entropy
    };
    (q(t), t)
}

/// Builds the stacking moments from fitted components on validation data
/// and solves for the mixing weights.
///
/// `weights` are β̂ at the labeled validation rows (all-ones for an
/// uncorrected combination); `unlabeled_val` supplies the covariates the
/// squared term is averaged over.
pub fn stack(
    components: Vec<CdeModel>,
    labeled_val: &Sample,
    weights: &[f64],
    unlabeled_val: &Sample,
) -> Result<StackedModel> {
    let p = components.len();
    if p < 2 {
        return Err(Error::InvalidArgument(format!("stacking needs ≥ 2 components, got {p}")));
    }
    let g = components[0].grid_size();
    if components.iter().any(|c| c.grid_size() != g) {
        return Err(Error::InvalidArgument(
            "stacked components must share one grid size".into(),
        ));
    }
    let z = labeled_val.response().ok_or_else(|| {
        Error::InvalidArgument("labeled validation sample must carry responses".into())
    })?;
    if weights.len() != labeled_val.n() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} labeled validation rows",
            weights.len(),
            labeled_val.n()
        )));
    }
    if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and nonnegative, got {w} at row {}",
            k + 1
        )));
    }

    let unl_preds: Vec<Vec<DensityGrid>> = components
        .iter()
        .map(|c| {
            let preds = c.predict_batch(unlabeled_val)?;
            if preds.iter().any(|d| !d.is_normalized()) {
                return Err(Error::Numeric(
                    "stacked component emitted an unnormalized density".into(),
                ));
            }
            Ok(preds)
        })
        .collect::<Result<_>>()?;
    let lab_preds: Vec<Vec<DensityGrid>> = components
        .iter()
        .map(|c| {
            let preds = c.predict_batch(labeled_val)?;
            if preds.iter().any(|d| !d.is_normalized()) {
                return Err(Error::Numeric(
                    "stacked component emitted an unnormalized density".into(),
                ));
            }
            Ok(preds)
        })
        .collect::<Result<_>>()?;

    let n_u = unlabeled_val.n() as f64;
    let mut b_matrix = Array2::zeros((p, p));
    for i in 0..p {
        for j in i..p {
            let mut s = 0.0;
            for k in 0..unlabeled_val.n() {
                s += DensityGrid::product_integral(&unl_preds[i][k], &unl_preds[j][k])?;
            }
            b_matrix[(i, j)] = s / n_u;
            b_matrix[(j, i)] = b_matrix[(i, j)];
        }
    }
    let n_l = labeled_val.n() as f64;
    let mut b_vector = Array1::zeros(p);
    for i in 0..p {
        let mut s = 0.0;
        for k in 0..labeled_val.n() {
            s += lab_preds[i][k].value_at(z[k])? * weights[k];
        }
        b_vector[i] = s / n_l;
    }

    let (alpha, objective_value) = solve_simplex_qp(&b_matrix, &b_vector)?;
    let model = StackedModel {
        components,
        alpha: alpha.to_vec(),
        objective_value,
        b_matrix,
        b_vector,
    };
    model.validate()?;
    Ok(model)
}
