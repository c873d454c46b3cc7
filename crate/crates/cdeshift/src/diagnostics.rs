//! Goodness-of-fit diagnostics for fitted conditional density estimators:
//! weighted Q-Q curve, PIT-based Kolmogorov–Smirnov test, highest-density
//! regions, and coverage curves.
//!
//! The weighted curves self-normalize by the weight total by default, so a
//! perfect estimator targets the diagonal even when the weights do not
//! average to one; the literal per-observation scaling is available through
//! [`WeightScaling::PerObservation`]. Highest-density regions live on the
//! density grid: the unit interval is cut into the segments between adjacent
//! knots, each carrying its trapezoid mass, and a region is a union of the
//! highest-density segments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::losses::Predictor;
use crate::weights::effective_sample_size;

/// How weighted diagnostic averages are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaling {
    /// Divide weighted indicator sums by the weight total (default).
    SelfNormalized,
    /// Divide by the observation count, taking the weights at face value.
    PerObservation,
}

/// One point of the Q-Q curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    /// Nominal quantile level.
    pub c: f64,
    /// Weighted fraction of responses at or below their predicted level-c
    /// quantile.
    pub c_hat: f64,
}

/// One point of the coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    /// Nominal coverage level of the highest-density regions.
    pub alpha: f64,
    /// Weighted fraction of responses falling inside their region.
    pub alpha_hat: f64,
    /// 95% normal-approximation binomial interval around `alpha_hat`, with
    /// the effective sample size standing in for the binomial count.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// A closed interval of the response space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpdInterval {
    pub lower: f64,
    pub upper: f64,
}

impl HpdInterval {
    /// Interval length.
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    /// Whether `z` lies inside the closed interval.
    pub fn contains(&self, z: f64) -> bool {
        self.lower <= z && z <= self.upper
    }
}

/// Bundle of all diagnostics for one fitted model on one labeled test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub qq: Vec<QqPoint>,
    pub coverage: Vec<CoveragePoint>,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// Target mass of the per-observation regions below.
    pub hpd_alpha: f64,
    /// Highest-density region of each test observation at `hpd_alpha`.
    pub hpd_regions: Vec<Vec<HpdInterval>>,
}

fn check_weights(weights: &[f64], n: usize) -> Result<f64> {
    if weights.len() != n {
        return Err(Error::InvalidArgument(format!(
            "got {} weights for {n} observations",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weights must be finite and nonnegative, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("weights must not all be zero".into()));
    }
    Ok(total)
}

fn check_levels(name: &str, levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} grid is empty")));
    }
    if levels.iter().any(|c| !(c.is_finite() && 0.0 < *c && *c < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "{name} grid values must lie strictly inside (0,1)"
        )));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

fn check_labeled(test: &Sample) -> Result<()> {
    if test.n() == 0 {
        return Err(Error::InvalidArgument("test sample is empty".into()));
    }
    if !test.is_labeled() {
        return Err(Error::InvalidArgument("diagnostics need responses on the test sample".into()));
    }
    Ok(())
}

fn scaled(sums: f64, total_weight: f64, n: usize, scaling: WeightScaling) -> f64 {
    match scaling {
        WeightScaling::SelfNormalized => sums / total_weight,
        WeightScaling::PerObservation => sums / n as f64,
    }
}

/// Weighted Q-Q curve of predicted quantiles against nominal levels.
///
/// For each level `c`, every observation contributes the indicator that its
/// response sits at or below the level-`c` quantile of its predicted
/// density; the weighted average of those indicators is `ĉ`. A
/// well-calibrated predictor puts every `(c, ĉ)` near the diagonal.
pub fn qq_curve(
    predict: &Predictor<'_>,
    labeled_test: &Sample,
    weights: &[f64],
    c_grid: &[f64],
    scaling: WeightScaling,
) -> Result<Vec<QqPoint>> {
    check_labeled(labeled_test)?;
    let n = labeled_test.n();
    let total = check_weights(weights, n)?;
    check_levels("quantile", c_grid)?;
    let z = labeled_test.response().expect("labeled test sample");

    let rows: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = predict(&labeled_test.covariate_row(i))?;
            c_grid
                .iter()
                .map(|&c| Ok(z[i] <= d.quantile(c)?))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;

    Ok(c_grid
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let sum: f64 =
                rows.iter().zip(weights).map(|(r, w)| if r[j] { *w } else { 0.0 }).sum();
            QqPoint { c, c_hat: scaled(sum, total, n, scaling) }
        })
        .collect())
}

/// Probability integral transform values and their Kolmogorov–Smirnov test
/// against Uniform(0,1).
///
/// Returns the KS statistic `D` and its asymptotic p-value. Under a
/// well-calibrated predictor the PIT values `F̂(z_i | x_i)` are uniform.
pub fn pit_ks(predict: &Predictor<'_>, labeled_test: &Sample) -> Result<(f64, f64)> {
    check_labeled(labeled_test)?;
    let n = labeled_test.n();
    let z = labeled_test.response().expect("labeled test sample");
    let mut u: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| predict(&labeled_test.covariate_row(i))?.cdf(z[i]))
        .collect::<Result<_>>()?;
    u.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &ui) in u.iter().enumerate() {
        d = d.max(ui - i as f64 / nf).max((i + 1) as f64 / nf - ui);
    }
    Ok((d, kolmogorov_pvalue(n, d)))
}

/// Asymptotic p-value of a one-sample KS statistic `d` at sample size `n`:
/// the alternating Kolmogorov series, truncated once terms drop below
/// 1e-12 and clipped to [0,1].
pub fn kolmogorov_pvalue(n: usize, d: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let x = 2.0 * n as f64 * d * d;
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100_000u64 {
        let term = (-x * (k * k) as f64).exp();
        if term < 1e-12 {
            break;
        }
        p += sign * term;
        sign = -sign;
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// Highest-density region of a single density at target mass `alpha`.
///
/// The unit interval is partitioned into the segments between adjacent grid
/// knots, each carrying its trapezoid mass. Segments enter in order of
/// decreasing average density (ties toward lower z) until the accumulated
/// mass reaches `alpha`; adjacent selected segments merge into closed
/// intervals. The result is empty for `alpha = 0` and covers at least
/// `alpha` of mass, overshooting by at most one segment.
pub fn hpd_region(d: &DensityGrid, alpha: f64) -> Result<Vec<HpdInterval>> {
    if !d.is_normalized() {
        return Err(Error::InvalidArgument(
            "highest-density regions need a normalized density".into(),
        ));
    }
    if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
        return Err(Error::InvalidArgument(format!(
            "target mass must lie in [0,1), got {alpha}"
        )));
    }
    let v = d.values();
    let g = d.grid_size();
    let spacing = d.spacing();
    let cells = g - 1;
    let mut order: Vec<usize> = (0..cells).collect();
    let height = |i: usize| (v[i] + v[i + 1]) / 2.0;
    order.sort_by(|&a, &b| height(b).total_cmp(&height(a)).then(a.cmp(&b)));

    let mut selected = vec![false; cells];
    let mut mass = 0.0;
    for &i in &order {
        if mass >= alpha {
            break;
        }
        selected[i] = true;
        mass += height(i) * spacing;
    }

    let mut intervals = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=cells {
        let on = i < cells && selected[i];
        match (run_start, on) {
            (None, true) => run_start = Some(i),
            (Some(s), false) => {
                intervals.push(HpdInterval { lower: d.knot(s), upper: d.knot(i) });
                run_start = None;
            }
            _ => {}
        }
    }
    Ok(intervals)
}

/// Coverage curve of highest-density regions across a grid of target masses.
///
/// For each `alpha`, every observation gets its own region from its
/// predicted density, and `alpha_hat` is the weighted fraction of responses
/// caught by their region. The 95% interval around `alpha_hat` uses a normal
/// approximation to the binomial with the weights' effective sample size as
/// the count.
pub fn coverage_curve(
    predict: &Predictor<'_>,
    labeled_test: &Sample,
    weights: &[f64],
    alpha_grid: &[f64],
    scaling: WeightScaling,
) -> Result<Vec<CoveragePoint>> {
    check_labeled(labeled_test)?;
    let n = labeled_test.n();
    let total = check_weights(weights, n)?;
    check_levels("coverage", alpha_grid)?;
    let z = labeled_test.response().expect("labeled test sample");

    let rows: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = predict(&labeled_test.covariate_row(i))?;
            alpha_grid
                .iter()
                .map(|&alpha| {
                    let region = hpd_region(&d, alpha)?;
                    Ok(region.iter().any(|iv| iv.contains(z[i])))
                })
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;

    let ess = effective_sample_size(weights)?;
    let z975 = Normal::new(0.0, 1.0).expect("standard normal is valid").inverse_cdf(0.975);
    Ok(alpha_grid
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let sum: f64 =
                rows.iter().zip(weights).map(|(r, w)| if r[j] { *w } else { 0.0 }).sum();
            let alpha_hat = scaled(sum, total, n, scaling);
            let half = z975 * (alpha_hat.clamp(0.0, 1.0) * (1.0 - alpha_hat.clamp(0.0, 1.0)) / ess)
                .max(0.0)
                .sqrt();
            CoveragePoint {
                alpha,
                alpha_hat,
                ci_low: (alpha_hat - half).max(0.0),
                ci_high: (alpha_hat + half).min(1.0),
            }
        })
        .collect())
}

/// Mean total length of the `alpha` highest-density regions over a set of
/// covariate rows. Smaller is sharper at equal calibration.
pub fn mean_hpd_size(predict: &Predictor<'_>, test: &Sample, alpha: f64) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::InvalidArgument("test sample is empty".into()));
    }
    let sizes: Vec<f64> = (0..test.n())
        .into_par_iter()
        .map(|i| {
            let d = predict(&test.covariate_row(i))?;
            Ok(hpd_region(&d, alpha)?.iter().map(HpdInterval::length).sum())
        })
        .collect::<Result<_>>()?;
    Ok(sizes.iter().sum::<f64>() / sizes.len() as f64)
}

/// Runs every diagnostic against one labeled test set.
pub fn diagnose(
    predict: &Predictor<'_>,
    labeled_test: &Sample,
    weights: &[f64],
    c_grid: &[f64],
    alpha_grid: &[f64],
    hpd_alpha: f64,
    scaling: WeightScaling,
) -> Result<DiagnosticReport> {
    let qq = qq_curve(predict, labeled_test, weights, c_grid, scaling)?;
    let coverage = coverage_curve(predict, labeled_test, weights, alpha_grid, scaling)?;
    let (ks_statistic, ks_pvalue) = pit_ks(predict, labeled_test)?;
    let hpd_regions: Vec<Vec<HpdInterval>> = (0..labeled_test.n())
        .into_par_iter()
        .map(|i| hpd_region(&predict(&labeled_test.covariate_row(i))?, hpd_alpha))
        .collect::<Result<_>>()?;
    Ok(DiagnosticReport { qq, coverage, ks_statistic, ks_pvalue, hpd_alpha, hpd_regions })
}
