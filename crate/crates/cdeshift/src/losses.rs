//! Empirical losses for conditional density estimators.
//!
//! All tuning, stacking, and covariate selection in this crate score
//! candidates through this module, in one of three variants of the same
//! squared-error surrogate (each drops the same predictor-independent
//! constant, so values are comparable only within a variant and fixed
//! evaluation sets; negative values are normal):
//!
//! - labeled-only: `mean_L ∫f̂²(z|x) dz − 2·mean_L f̂(z|x)` — correct when
//!   labeled and unlabeled covariates share a distribution;
//! - shift-corrected: the squared term averaged over *unlabeled* covariates
//!   and the fit term importance-weighted by β̂ — estimates the loss under
//!   the unlabeled covariate distribution using labeled responses only;
//! - oracle: both terms averaged over unlabeled rows with known responses
//!   (simulation only).
//!
//! Point evaluations f̂(z|x) interpolate the grid linearly, matching the
//! trapezoid quadrature used for the integral terms. Per-row terms are
//! sorted before averaging, which makes every loss bitwise invariant to
//! the order of evaluation rows.

use std::collections::BTreeMap;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Default number of bootstrap replicates.
pub const DEFAULT_BOOTSTRAP: usize = 500;

/// A conditional density predictor: maps a covariate vector to a normalized
/// density on the shared grid.
pub type Predictor<'a> = dyn Fn(&ArrayView1<'_, f64>) -> Result<DensityGrid> + Sync + 'a;

/// Which loss was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    LabeledOnly,
    ShiftCorrected,
    Oracle,
}

/// A scored loss with its evaluation context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub variant: LossVariant,
    /// Bootstrap standard error, when requested (B ≥ 2).
    pub se: Option<f64>,
    pub n_labeled_eval: usize,
    pub n_unlabeled_eval: usize,
    pub b_boot: Option<usize>,
    /// Free-form context (model name, evaluation set, ...).
    pub metadata: BTreeMap<String, String>,
}

impl LossReport {
    fn new(value: f64, variant: LossVariant, n_l: usize, n_u: usize) -> Self {
        LossReport {
            value,
            variant,
            se: None,
            n_labeled_eval: n_l,
            n_unlabeled_eval: n_u,
            b_boot: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Attaches a bootstrap standard error (requires B ≥ 2 and se ≥ 0).
    pub fn with_se(mut self, se: f64, b_boot: usize) -> Result<Self> {
        if b_boot < 2 {
            return Err(Error::InvalidArgument(format!(
                "bootstrap SE needs at least 2 replicates, got {b_boot}"
            )));
        }
        if !(se.is_finite() && se >= 0.0) {
            return Err(Error::InvalidArgument(format!("standard error must be ≥ 0, got {se}")));
        }
        self.se = Some(se);
        self.b_boot = Some(b_boot);
        Ok(self)
    }
}

/// Per-row loss terms, the shared building block for loss values and fast
/// bootstrap resampling. `sq_terms[k] = ∫ f̂²(z|x_k) dz` over the rows that
/// carry the integral term; `fit_terms[k] = f̂(z_k|x_k)·w_k` over the
/// labeled rows. When `coupled`, both term vectors describe the *same* rows
/// (labeled-only and oracle variants) and are resampled jointly.
#[derive(Debug, Clone)]
pub(crate) struct LossComponents {
    pub(crate) sq_terms: Vec<f64>,
    pub(crate) fit_terms: Vec<f64>,
    pub(crate) coupled: bool,
}

impl LossComponents {
    /// The loss value: mean(sq) − 2·mean(fit), with sorted summation.
    pub(crate) fn value(&self) -> f64 {
        sorted_mean(&self.sq_terms) - 2.0 * sorted_mean(&self.fit_terms)
    }

    /// Loss recomputed on resampled rows.
    fn value_at(&self, fit_idx: &[usize], sq_idx: &[usize]) -> f64 {
        let sq: Vec<f64> = sq_idx.iter().map(|&i| self.sq_terms[i]).collect();
        let fit: Vec<f64> = fit_idx.iter().map(|&i| self.fit_terms[i]).collect();
        sorted_mean(&sq) - 2.0 * sorted_mean(&fit)
    }

    /// Bootstrap standard error over `b_boot` replicates, resampling rows
    /// with replacement. Replicate `b` uses stream `b` of the master seed,
    /// so replicates are independent, reproducible, and order-independent;
    /// labeled (fit) indices are always drawn before unlabeled (sq) indices,
    /// matching [`bootstrap_se`] exactly.
    pub(crate) fn bootstrap_se(&self, b_boot: usize, seed: u64) -> Result<f64> {
        if b_boot < 2 {
            return Err(Error::InvalidArgument(format!(
                "bootstrap needs at least 2 replicates, got {b_boot}"
            )));
        }
        let values: Vec<f64> = (0..b_boot)
            .into_par_iter()
            .map(|b| {
                let mut rng = replicate_rng(seed, b);
                if self.coupled {
                    let idx = draw_indices(&mut rng, self.fit_terms.len());
                    self.value_at(&idx, &idx)
                } else {
                    let fit_idx = draw_indices(&mut rng, self.fit_terms.len());
                    let sq_idx = draw_indices(&mut rng, self.sq_terms.len());
                    self.value_at(&fit_idx, &sq_idx)
                }
            })
            .collect();
        Ok(standard_deviation(&values))
    }
}

/// Mean with terms sorted first, so the result does not depend on row order.
fn sorted_mean(terms: &[f64]) -> f64 {
    let mut v = terms.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation of bootstrap replicate losses (divisor B).
fn standard_deviation(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn draw_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Squared-integral term for one row, insisting on a normalized density.
fn sq_term(predict: &Predictor<'_>, x: &ArrayView1<'_, f64>) -> Result<f64> {
    let d = predict(x)?;
    ensure_normalized(&d)?;
    Ok(d.squared_integral())
}

/// Fit term for one row: f̂(z|x), interpolated, times the row weight.
fn fit_term(predict: &Predictor<'_>, x: &ArrayView1<'_, f64>, z: f64, w: f64) -> Result<f64> {
    let d = predict(x)?;
    ensure_normalized(&d)?;
    Ok(d.value_at(z)? * w)
}

fn ensure_normalized(d: &DensityGrid) -> Result<()> {
    if !d.is_normalized() {
        return Err(Error::InvalidArgument(
            "predictor emitted an unnormalized density; losses score normalized densities only"
                .into(),
        ));
    }
    Ok(())
}

fn response_of<'a>(sample: &'a Sample, role: &str) -> Result<ArrayView1<'a, f64>> {
    sample.response().ok_or_else(|| {
        Error::InvalidArgument(format!("{role} evaluation sample must carry responses"))
    })
}

pub(crate) fn components_labeled(
    predict: &Predictor<'_>,
    labeled_eval: &Sample,
) -> Result<LossComponents> {
    let z = response_of(labeled_eval, "labeled-only")?;
    let terms: Vec<(f64, f64)> = (0..labeled_eval.n())
        .into_par_iter()
        .map(|k| {
            let x = labeled_eval.covariate_row(k);
            Ok((sq_term(predict, &x)?, fit_term(predict, &x, z[k], 1.0)?))
        })
        .collect::<Result<_>>()?;
    let (sq_terms, fit_terms) = terms.into_iter().unzip();
    Ok(LossComponents { sq_terms, fit_terms, coupled: true })
}

pub(crate) fn components_shifted(
    predict: &Predictor<'_>,
    labeled_eval: &Sample,
    weights: &[f64],
    unlabeled_eval: &Sample,
) -> Result<LossComponents> {
    let z = response_of(labeled_eval, "shift-corrected")?;
    if weights.len() != labeled_eval.n() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} labeled evaluation rows",
            weights.len(),
            labeled_eval.n()
        )));
    }
    if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and nonnegative, got {w} at row {}",
            k + 1
        )));
    }
    let fit_terms: Vec<f64> = (0..labeled_eval.n())
        .into_par_iter()
        .map(|k| fit_term(predict, &labeled_eval.covariate_row(k), z[k], weights[k]))
        .collect::<Result<_>>()?;
    let sq_terms: Vec<f64> = (0..unlabeled_eval.n())
        .into_par_iter()
        .map(|k| sq_term(predict, &unlabeled_eval.covariate_row(k)))
        .collect::<Result<_>>()?;
    Ok(LossComponents { sq_terms, fit_terms, coupled: false })
}

pub(crate) fn components_oracle(
    predict: &Predictor<'_>,
    unlabeled_eval_with_responses: &Sample,
) -> Result<LossComponents> {
    let z = response_of(unlabeled_eval_with_responses, "oracle")?;
    let terms: Vec<(f64, f64)> = (0..unlabeled_eval_with_responses.n())
        .into_par_iter()
        .map(|k| {
            let x = unlabeled_eval_with_responses.covariate_row(k);
            Ok((sq_term(predict, &x)?, fit_term(predict, &x, z[k], 1.0)?))
        })
        .collect::<Result<_>>()?;
    let (sq_terms, fit_terms) = terms.into_iter().unzip();
    Ok(LossComponents { sq_terms, fit_terms, coupled: true })
}

/// Labeled-only loss: both terms averaged over the labeled evaluation rows.
pub fn loss_labeled(predict: &Predictor<'_>, labeled_eval: &Sample) -> Result<LossReport> {
    let c = components_labeled(predict, labeled_eval)?;
    Ok(LossReport::new(c.value(), LossVariant::LabeledOnly, labeled_eval.n(), 0))
}

/// Shift-corrected loss: the squared term averaged over unlabeled rows, the
/// fit term importance-weighted by β̂ at the labeled rows.
///
/// With all-ones weights and `unlabeled_eval` sharing the labeled rows'
/// covariates, this coincides with [`loss_labeled`] bit for bit.
pub fn loss_shifted(
    predict: &Predictor<'_>,
    labeled_eval: &Sample,
    weights: &[f64],
    unlabeled_eval: &Sample,
) -> Result<LossReport> {
    let c = components_shifted(predict, labeled_eval, weights, unlabeled_eval)?;
    Ok(LossReport::new(
        c.value(),
        LossVariant::ShiftCorrected,
        labeled_eval.n(),
        unlabeled_eval.n(),
    ))
}

/// Oracle loss: both terms averaged over unlabeled-distribution rows whose
/// true responses are known. Simulation-only: real unlabeled data has no z.
pub fn loss_oracle(
    predict: &Predictor<'_>,
    unlabeled_eval_with_responses: &Sample,
) -> Result<LossReport> {
    let c = components_oracle(predict, unlabeled_eval_with_responses)?;
    Ok(LossReport::new(
        c.value(),
        LossVariant::Oracle,
        0,
        unlabeled_eval_with_responses.n(),
    ))
}

/// Bootstrap standard error of an arbitrary loss under independent
/// with-replacement resampling of the labeled and unlabeled evaluation sets.
///
/// Replicate `b` draws labeled row indices, then unlabeled row indices,
/// from stream `b` of the master seed and re-invokes `loss_fn` on the
/// resampled samples; the result is the standard deviation (divisor B) of
/// the replicate losses. `loss_fn` is re-run in full per replicate — when
/// the predictor is fixed, the internal component-based path gives the same
/// values without recomputing predictions.
pub fn bootstrap_se<F>(
    loss_fn: F,
    labeled_eval: &Sample,
    unlabeled_eval: &Sample,
    b_boot: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Sample, &Sample) -> Result<f64> + Sync,
{
    if b_boot < 2 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 2 replicates, got {b_boot}"
        )));
    }
    let values: Vec<f64> = (0..b_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(seed, b);
            let il = draw_indices(&mut rng, labeled_eval.n());
            let iu = draw_indices(&mut rng, unlabeled_eval.n());
            loss_fn(&labeled_eval.select_rows(&il)?, &unlabeled_eval.select_rows(&iu)?)
        })
        .collect::<Result<_>>()?;
    Ok(standard_deviation(&values))
}
