//! Selection-biased resampling and synthetic ground-truth datasets.
//!
//! [`rejection_sample`] turns a labeled pool into a biased draw by keeping
//! each row with probability proportional to a beta density evaluated at a
//! designated bias column (the analog of an apparent-magnitude cut). Three
//! named schemes are provided — no bias, moderate, and strong — plus custom
//! beta parameters.
//!
//! [`make_oracle`] generates fully synthetic labeled/unlabeled pairs whose
//! covariates differ by a location shift in the first coordinate while the
//! conditional law of the response is shared, so the true conditional
//! density and the true importance weight β(x) = f_U(x)/f_L(x) are both
//! available in closed form for verification.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalDistr};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;

/// Named selection schemes and their beta parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// No selection bias: Beta(1,1), acceptance probability 1 everywhere.
    Scheme1,
    /// Moderate bias: Beta(13,4).
    Scheme2,
    /// Strong bias: Beta(18,4).
    Scheme3,
    /// User-supplied beta parameters; both must be ≥ 1 so the density is
    /// bounded and acceptance probabilities are well defined.
    Custom { a: f64, b: f64 },
}

/// A rejection-sampling selection rule acting on one covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScheme {
    kind: SchemeKind,
    bias_column: String,
    seed: u64,
}

impl SelectionScheme {
    /// Builds a scheme, validating custom beta parameters.
    pub fn new(kind: SchemeKind, bias_column: impl Into<String>, seed: u64) -> Result<Self> {
        if let SchemeKind::Custom { a, b } = kind {
            if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "beta parameters must be positive and finite, got ({a}, {b})"
                )));
            }
            if a < 1.0 || b < 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "beta parameters ({a}, {b}) give an unbounded selection density; both must be ≥ 1"
                )));
            }
        }
        Ok(SelectionScheme { kind, bias_column: bias_column.into(), seed })
    }

    /// The scheme's beta parameters (a, b).
    pub fn beta_params(&self) -> (f64, f64) {
        match self.kind {
            SchemeKind::Scheme1 => (1.0, 1.0),
            SchemeKind::Scheme2 => (13.0, 4.0),
            SchemeKind::Scheme3 => (18.0, 4.0),
            SchemeKind::Custom { a, b } => (a, b),
        }
    }

    /// Scheme name for manifests.
    pub fn name(&self) -> &'static str {
        match self.kind {
            SchemeKind::Scheme1 => "scheme1",
            SchemeKind::Scheme2 => "scheme2",
            SchemeKind::Scheme3 => "scheme3",
            SchemeKind::Custom { .. } => "custom",
        }
    }

    /// Column the bias acts through.
    pub fn bias_column(&self) -> &str {
        &self.bias_column
    }

    /// Seed for the acceptance draws.
    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Acceptance probability at bias value `x`: the unnormalized beta density
/// `x^(a−1) (1−x)^(b−1)` divided by its maximum. The maximum sits at the
/// mode `(a−1)/(a+b−2)` when a,b > 1 and at an endpoint otherwise (for
/// a = b = 1 the density is constant 1); the beta normalizing constant
/// cancels, so no special functions are needed.
pub(crate) fn acceptance_probability(x: f64, a: f64, b: f64) -> f64 {
    let g = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
    let arg_max = if a > 1.0 && b > 1.0 {
        (a - 1.0) / (a + b - 2.0)
    } else if a <= 1.0 {
        0.0 // a = 1: density is decreasing (b > 1) or constant (b = 1)
    } else {
        1.0 // b = 1, a > 1: density is increasing
    };
    g(x) / g(arg_max)
}

/// Applies a selection scheme to a labeled pool by rejection sampling.
///
/// Each row is kept independently with probability proportional to the
/// scheme's beta density at the row's bias-column value (which must already
/// lie in [0,1]); accepted rows keep their pool order. With
/// `drop_response`, the output is unlabeled ("photometric").
pub fn rejection_sample(
    pool: &Sample,
    scheme: &SelectionScheme,
    drop_response: bool,
) -> Result<Sample> {
    if !pool.is_labeled() {
        return Err(Error::InvalidArgument(
            "rejection sampling expects a labeled pool".into(),
        ));
    }
    let col = pool.column_index(scheme.bias_column())?;
    let bias = pool.covariates().column(col).to_owned();
    if let Some((i, v)) = bias.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidData(format!(
            "bias column `{}` has value {v} outside [0,1] at row {}; rescale it first",
            scheme.bias_column(),
            i + 1
        )));
    }

    let (a, b) = scheme.beta_params();
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed());
    let mut kept = Vec::new();
    for (i, &x) in bias.iter().enumerate() {
        let u: f64 = rng.gen();
        if u < acceptance_probability(x, a, b) {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(Error::Numeric(format!(
            "rejection sampling under {} accepted no rows out of {}; use a larger pool",
            scheme.name(),
            pool.n()
        )));
    }
    let out = pool.select_rows(&kept)?;
    Ok(if drop_response { out.without_response() } else { out })
}

/// Generator parameters for a synthetic ground-truth dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Covariate dimension d ≥ 1; only the first coordinate carries signal.
    pub dim: usize,
    /// Labeled sample size (≥ 50).
    pub n_labeled: usize,
    /// Unlabeled sample size (≥ 50).
    pub n_unlabeled: usize,
    /// Location shift of the unlabeled first coordinate, in units of its
    /// standard deviation; 0 means no covariate shift.
    pub shift: f64,
    /// Standard deviation of the response around its conditional mean.
    pub noise: f64,
    pub seed: u64,
}

/// Center and spread of the synthetic covariate law.
const COV_MEAN: f64 = 0.5;
const COV_SD: f64 = 0.25;

/// A synthetic dataset with closed-form ground truth.
///
/// Covariates are Gaussian: labeled rows have every coordinate distributed
/// as N(0.5, 0.25²); unlabeled rows shift the first coordinate's mean by
/// `0.25·shift`. The response given x is Normal(x₁, noise) truncated to
/// [0,1] — identical for both samples, so only the covariates shift.
///
/// The `unlabeled` sample carries true responses so that oracle losses can
/// be evaluated; strip them with [`Sample::without_response`] to mimic a
/// real photometric sample.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    pub labeled: Sample,
    pub unlabeled: Sample,
    spec: OracleSpec,
}

impl SyntheticOracle {
    /// The generator parameters.
    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// The true conditional density of z given `x`, sampled on a `g`-knot
    /// grid and renormalized under the shared trapezoid convention (so it
    /// integrates to 1 on the grid, not merely in the continuum).
    pub fn true_density(&self, x: &ArrayView1<f64>, g: usize) -> Result<DensityGrid> {
        if x.len() != self.spec.dim {
            return Err(Error::InvalidArgument(format!(
                "query has dimension {}, oracle has {}",
                x.len(),
                self.spec.dim
            )));
        }
        let mean = x[0];
        let sd = self.spec.noise;
        let raw: Vec<f64> = (0..g)
            .map(|i| {
                let z = i as f64 / (g - 1) as f64;
                let t = (z - mean) / sd;
                (-0.5 * t * t).exp()
            })
            .collect();
        Ok(DensityGrid::from_raw(raw)?.normalize())
    }

    /// The true importance weight β(x) = f_U(x)/f_L(x), which depends only
    /// on the first coordinate: exp(shift·u − shift²/2) with
    /// u = (x₁ − 0.5)/0.25. Its mean under the labeled law is exactly 1.
    pub fn true_beta(&self, x: &ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.spec.dim {
            return Err(Error::InvalidArgument(format!(
                "query has dimension {}, oracle has {}",
                x.len(),
                self.spec.dim
            )));
        }
        let u = (x[0] - COV_MEAN) / COV_SD;
        Ok((self.spec.shift * u - 0.5 * self.spec.shift * self.spec.shift).exp())
    }
}

/// Generates a [`SyntheticOracle`] dataset.
pub fn make_oracle(spec: &OracleSpec) -> Result<SyntheticOracle> {
    if spec.dim == 0 {
        return Err(Error::InvalidArgument("oracle dimension must be at least 1".into()));
    }
    if spec.n_labeled < 50 || spec.n_unlabeled < 50 {
        return Err(Error::InvalidArgument(format!(
            "oracle samples need at least 50 rows, got {} labeled / {} unlabeled",
            spec.n_labeled, spec.n_unlabeled
        )));
    }
    if !(spec.noise.is_finite() && spec.noise > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be positive, got {}",
            spec.noise
        )));
    }
    if !spec.shift.is_finite() {
        return Err(Error::InvalidArgument(format!("shift must be finite, got {}", spec.shift)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = NormalDistr::new(COV_MEAN, COV_SD).expect("fixed parameters are valid");
    let shifted = NormalDistr::new(COV_MEAN + COV_SD * spec.shift, COV_SD)
        .map_err(|e| Error::InvalidArgument(format!("bad shift: {e}")))?;

    let names: Vec<String> = (1..=spec.dim).map(|j| format!("x{j}")).collect();
    let mut draw = |n: usize, first: &NormalDistr<f64>| -> (Array2<f64>, Array1<f64>) {
        let mut covs = Array2::zeros((n, spec.dim));
        let mut z = Array1::zeros(n);
        for i in 0..n {
            for j in 0..spec.dim {
                covs[[i, j]] = if j == 0 { first.sample(&mut rng) } else { base.sample(&mut rng) };
            }
            z[i] = draw_truncated_normal(covs[[i, 0]], spec.noise, &mut rng);
        }
        (covs, z)
    };

    let (lab_x, lab_z) = draw(spec.n_labeled, &base);
    let (unl_x, unl_z) = draw(spec.n_unlabeled, &shifted);
    let labeled = Sample::new(lab_x, names.clone(), Some(lab_z))?;
    let unlabeled = Sample::new(unl_x, names, Some(unl_z))?;
    Ok(SyntheticOracle { labeled, unlabeled, spec: *spec })
}

/// Draws from Normal(mean, sd) truncated to [0,1] by inverse-CDF sampling.
fn draw_truncated_normal(mean: f64, sd: f64, rng: &mut ChaCha8Rng) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal is valid");
    let lo = std_normal.cdf((0.0 - mean) / sd);
    let hi = std_normal.cdf((1.0 - mean) / sd);
    let u: f64 = rng.gen();
    // Keep the probability strictly inside (0,1) so the inverse CDF stays
    // finite even when nearly all mass lies outside [0,1].
    let p = (lo + u * (hi - lo)).clamp(1e-15, 1.0 - 1e-15);
    (mean + sd * std_normal.inverse_cdf(p)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Pool with a uniform-looking bias column and a row-index column.
    fn uniform_pool(n: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut covs = Array2::zeros((n, 2));
        let mut z = Array1::zeros(n);
        for i in 0..n {
            covs[[i, 0]] = rng.gen::<f64>();
            covs[[i, 1]] = i as f64;
            z[i] = rng.gen::<f64>();
        }
        Sample::new(covs, vec!["r".into(), "idx".into()], Some(z)).unwrap()
    }

    #[test]
    fn scheme1_keeps_the_entire_pool() {
        let pool = uniform_pool(500, 3);
        let scheme = SelectionScheme::new(SchemeKind::Scheme1, "r", 9).unwrap();
        let out = rejection_sample(&pool, &scheme, false).unwrap();
        assert_eq!(out.covariates(), pool.covariates());
        assert_eq!(out.response().unwrap(), pool.response().unwrap());
    }

    #[test]
    fn scheme2_acceptance_is_one_at_the_mode() {
        // Beta(13,4) has its mode at (13−1)/(13+4−2) = 0.8.
        assert_eq!(acceptance_probability(0.8, 13.0, 4.0), 1.0);
        assert!(acceptance_probability(0.5, 13.0, 4.0) < 1.0);
        // Beta(1,1) is flat: acceptance 1 everywhere.
        assert_eq!(acceptance_probability(0.0, 1.0, 1.0), 1.0);
        assert_eq!(acceptance_probability(0.37, 1.0, 1.0), 1.0);
    }

    #[test]
    fn scheme3_accepted_bias_matches_direct_beta_draws() {
        let n = 50_000;
        let pool = uniform_pool(n, 17);
        let scheme = SelectionScheme::new(SchemeKind::Scheme3, "r", 23).unwrap();
        let out = rejection_sample(&pool, &scheme, true).unwrap();
        let accepted: Vec<f64> = out.covariates().column(0).to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let beta = rand_distr::Beta::new(18.0, 4.0).unwrap();
        let direct: Vec<f64> = (0..n).map(|_| beta.sample(&mut rng)).collect();

        let d = two_sample_ks(&accepted, &direct);
        // 1% critical value for the two-sample KS statistic.
        let critical =
            1.628 * ((accepted.len() + direct.len()) as f64
                / (accepted.len() as f64 * direct.len() as f64))
                .sqrt();
        assert!(d < critical, "KS statistic {d} ≥ 1% critical value {critical}");
    }

    /// Two-sample KS statistic, written directly from its definition.
    fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let ecdf = |sorted: &[f64], t: f64| {
            sorted.partition_point(|v| *v <= t) as f64 / sorted.len() as f64
        };
        a.iter()
            .chain(b.iter())
            .map(|&t| (ecdf(&a, t) - ecdf(&b, t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rejection_is_deterministic_and_order_preserving() {
        let pool = uniform_pool(2_000, 5);
        let scheme = SelectionScheme::new(SchemeKind::Scheme2, "r", 31).unwrap();
        let out1 = rejection_sample(&pool, &scheme, false).unwrap();
        let out2 = rejection_sample(&pool, &scheme, false).unwrap();
        assert_eq!(out1.covariates(), out2.covariates());
        assert!(out1.n() < pool.n());

        // The idx column must be strictly increasing (pool order kept).
        let idx = out1.covariates().column(1).to_owned();
        assert!(idx.windows(2).into_iter().all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejection_rejects_out_of_range_bias_and_unbounded_params() {
        let pool = Sample::new(
            array![[1.5, 0.0], [0.5, 1.0]],
            vec!["r".into(), "idx".into()],
            Some(array![0.1, 0.2]),
        )
        .unwrap();
        let scheme = SelectionScheme::new(SchemeKind::Scheme2, "r", 1).unwrap();
        let err = rejection_sample(&pool, &scheme, false).unwrap_err().to_string();
        assert!(err.contains("row 1"), "got: {err}");

        assert!(SelectionScheme::new(SchemeKind::Custom { a: 0.5, b: 2.0 }, "r", 1).is_err());
        assert!(SelectionScheme::new(SchemeKind::Custom { a: 2.0, b: 1.0 }, "r", 1).is_ok());
    }

    #[test]
    fn rejection_with_no_survivors_advises_a_larger_pool() {
        // Bias stuck at 0.01 under a scheme peaked at 0.8: acceptance is
        // astronomically small, so every row is rejected.
        let n = 200;
        let covs = Array2::from_shape_fn((n, 1), |_| 0.01);
        let z = Array1::from_elem(n, 0.5);
        let pool = Sample::new(covs, vec!["r".into()], Some(z)).unwrap();
        let scheme = SelectionScheme::new(SchemeKind::Scheme2, "r", 2).unwrap();
        let err = rejection_sample(&pool, &scheme, false).unwrap_err().to_string();
        assert!(err.contains("larger pool"), "got: {err}");
    }

    fn small_spec(shift: f64) -> OracleSpec {
        OracleSpec { dim: 2, n_labeled: 100, n_unlabeled: 100, shift, noise: 0.1, seed: 42 }
    }

    #[test]
    fn zero_shift_gives_unit_weights_everywhere() {
        let oracle = make_oracle(&small_spec(0.0)).unwrap();
        for i in 0..oracle.labeled.n() {
            let x = oracle.labeled.covariate_row(i);
            assert_eq!(oracle.true_beta(&x).unwrap(), 1.0);
        }
    }

    #[test]
    fn true_density_is_symmetric_at_mean_half() {
        let spec = OracleSpec { dim: 1, ..small_spec(0.3) };
        let oracle = make_oracle(&spec).unwrap();
        let x = array![0.5];
        let d = oracle.true_density(&x.view(), 201).unwrap();
        let v = d.values();
        for i in 0..v.len() {
            assert_abs_diff_eq!(v[i], v[v.len() - 1 - i], epsilon = 1e-12);
        }
        // Normalized on its own grid, well within the 1e-8 contract.
        assert_abs_diff_eq!(
            crate::grid::trapezoid(v, d.spacing()),
            1.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn labeled_mean_of_true_beta_is_one_within_monte_carlo_error() {
        let spec = OracleSpec {
            dim: 1,
            n_labeled: 100_000,
            n_unlabeled: 50,
            shift: 0.5,
            noise: 0.1,
            seed: 7,
        };
        let oracle = make_oracle(&spec).unwrap();
        let betas: Vec<f64> = (0..oracle.labeled.n())
            .map(|i| oracle.true_beta(&oracle.labeled.covariate_row(i)).unwrap())
            .collect();
        let n = betas.len() as f64;
        let mean = betas.iter().sum::<f64>() / n;
        let var = betas.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn conditional_law_depends_only_on_the_first_coordinate() {
        let oracle = make_oracle(&small_spec(1.0)).unwrap();
        let a = array![0.4, -3.0];
        let b = array![0.4, 12.0];
        let da = oracle.true_density(&a.view(), 100).unwrap();
        let db = oracle.true_density(&b.view(), 100).unwrap();
        assert_eq!(da.values(), db.values());
    }

    #[test]
    fn oracle_validates_its_spec() {
        assert!(make_oracle(&OracleSpec { noise: 0.0, ..small_spec(0.0) }).is_err());
        assert!(make_oracle(&OracleSpec { n_labeled: 10, ..small_spec(0.0) }).is_err());
        assert!(make_oracle(&OracleSpec { dim: 0, ..small_spec(0.0) }).is_err());
    }

    #[test]
    fn oracle_responses_lie_in_unit_interval() {
        let oracle = make_oracle(&OracleSpec {
            dim: 1,
            n_labeled: 500,
            n_unlabeled: 500,
            shift: 2.0,
            noise: 0.3,
            seed: 3,
        })
        .unwrap();
        // Sample construction enforces [0,1]; spot-check the edges anyway.
        let z = oracle.unlabeled.response().unwrap();
        assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
