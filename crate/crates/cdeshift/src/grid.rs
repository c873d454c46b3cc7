//! Grid-represented densities and the shared quadrature convention.
//!
//! Every estimator in this crate emits a conditional density as values on
//! one uniform grid over [0,1] (default 200 knots), and every integral —
//! normalization, squared norms, CDFs, expected functionals, stacking
//! moments — uses the trapezoid rule on that grid. A single quadrature
//! convention keeps losses comparable across estimators; no analytic
//! shortcut is used even where one exists, so the grid is authoritative
//! after normalization.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Default number of grid knots.
pub const DEFAULT_GRID_SIZE: usize = 200;

/// Integral threshold below which normalization falls back to the uniform
/// density instead of dividing by a vanishing mass.
const FALLBACK_INTEGRAL: f64 = 1e-12;

/// Tolerance on the trapezoid integral of a density claimed to be normalized.
const NORMALIZED_TOL: f64 = 1e-6;

/// A density sampled on uniform knots `z_i = i/(G-1)` spanning [0,1].
///
/// The knots are implicit: element `i` of `values` is the density at
/// `i/(G-1)`. Once `normalized` is set (by [`DensityGrid::normalize`] or a
/// checked constructor) all values are nonnegative and the trapezoid
/// integral is 1 within `1e-6`; instances are immutable afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    values: Vec<f64>,
    normalized: bool,
    fallback: bool,
}

impl DensityGrid {
    /// Wraps raw (possibly unnormalized, possibly negative) values.
    ///
    /// Requires at least two knots and finite values.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        Self::check_shape(&values)?;
        Ok(DensityGrid { values, normalized: false, fallback: false })
    }

    /// Wraps values that are already normalized, verifying the claim:
    /// all entries nonnegative and trapezoid integral 1 within `1e-6`.
    pub fn from_normalized(values: Vec<f64>) -> Result<Self> {
        Self::check_shape(&values)?;
        if let Some(i) = values.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density claimed normalized has negative value {} at knot {i}",
                values[i]
            )));
        }
        let integral = trapezoid(&values, spacing_for(values.len()));
        if (integral - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::InvalidArgument(format!(
                "density claimed normalized integrates to {integral}, not 1 within {NORMALIZED_TOL}"
            )));
        }
        Ok(DensityGrid { values, normalized: true, fallback: false })
    }

    /// The uniform density (all values 1) on `g` knots.
    pub fn uniform(g: usize) -> Result<Self> {
        if g < 2 {
            return Err(Error::InvalidArgument(format!("grid needs at least 2 knots, got {g}")));
        }
        Ok(DensityGrid { values: vec![1.0; g], normalized: true, fallback: false })
    }

    fn check_shape(values: &[f64]) -> Result<()> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 knots, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite density value {} at knot {i}",
                values[i]
            )));
        }
        Ok(())
    }

    /// Number of knots G.
    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    /// Knot spacing `1/(G-1)`.
    pub fn spacing(&self) -> f64 {
        spacing_for(self.values.len())
    }

    /// Position of knot `i`, i.e. `i/(G-1)`.
    pub fn knot(&self, i: usize) -> f64 {
        i as f64 / (self.values.len() - 1) as f64
    }

    /// All knot positions.
    pub fn knots(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.knot(i)).collect()
    }

    /// Density values at the knots.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Whether this grid has been normalized.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Whether normalization fell back to the uniform density because the
    /// clipped raw values carried (numerically) no mass.
    pub fn is_fallback(&self) -> bool {
        self.fallback
    }

    /// Clips negative values to zero and divides by the trapezoid integral.
    ///
    /// If the clipped integral is below `1e-12` the result is the uniform
    /// density with the fallback flag set. Idempotent: normalizing an
    /// already-normalized grid returns it unchanged.
    pub fn normalize(&self) -> DensityGrid {
        if self.normalized {
            return self.clone();
        }
        let clipped: Vec<f64> = self.values.iter().map(|v| v.max(0.0)).collect();
        let integral = trapezoid(&clipped, self.spacing());
        if integral < FALLBACK_INTEGRAL {
            return DensityGrid {
                values: vec![1.0; self.values.len()],
                normalized: true,
                fallback: true,
            };
        }
        let values = clipped.into_iter().map(|v| v / integral).collect();
        DensityGrid { values, normalized: true, fallback: false }
    }

    /// Density at `z` by linear interpolation between the bracketing knots.
    ///
    /// This is the convention used to evaluate a fitted density at observed
    /// responses inside the losses, so that pointwise evaluation and the
    /// trapezoid integrals share one representation of the curve.
    pub fn value_at(&self, z: f64) -> Result<f64> {
        let (i, t) = self.locate(z)?;
        Ok((1.0 - t) * self.values[i] + t * self.values[i + 1])
    }

    /// Cumulative distribution function at `z`: cumulative trapezoid over
    /// whole cells, linear interpolation within the cell containing `z`.
    /// Requires a normalized grid; the result is clamped to [0,1].
    pub fn cdf(&self, z: f64) -> Result<f64> {
        self.require_normalized("cdf")?;
        let (i, t) = self.locate(z)?;
        let knot_cdf = self.knot_cdf();
        let c = knot_cdf[i] + t * (knot_cdf[i + 1] - knot_cdf[i]);
        Ok(c.clamp(0.0, 1.0))
    }

    /// Generalized inverse of [`DensityGrid::cdf`]: the smallest `z` with
    /// `cdf(z) >= c`, computed by interpolating the knot CDF. Requires a
    /// normalized grid and `c` strictly inside (0,1).
    pub fn quantile(&self, c: f64) -> Result<f64> {
        self.require_normalized("quantile")?;
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quantile level must lie strictly inside (0,1), got {c}"
            )));
        }
        let knot_cdf = self.knot_cdf();
        // First knot whose CDF reaches c; all mass may sit below c only
        // through integral round-off, in which case the answer is 1.
        let Some(hi) = knot_cdf.iter().position(|v| *v >= c) else {
            return Ok(1.0);
        };
        if hi == 0 {
            return Ok(0.0);
        }
        let (lo_c, hi_c) = (knot_cdf[hi - 1], knot_cdf[hi]);
        // A flat cell cannot bracket c (lo_c < c <= hi_c forces hi_c > lo_c);
        // the guard only protects against pathological round-off.
        if hi_c <= lo_c {
            return Ok(self.knot(hi));
        }
        let t = (c - lo_c) / (hi_c - lo_c);
        Ok((self.knot(hi - 1) + t * self.spacing()).clamp(0.0, 1.0))
    }

    /// Trapezoid integral of the squared values. Defined for raw grids too
    /// (the losses use it on emitted, normalized densities).
    pub fn squared_integral(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        trapezoid(&sq, self.spacing())
    }

    /// Trapezoid integral of `g(z) · f(z)` for a functional `g` sampled on
    /// the same knots. Requires a normalized grid and finite `g`.
    pub fn expected_functional(&self, g: &[f64]) -> Result<f64> {
        self.require_normalized("expected_functional")?;
        if g.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "functional has {} values but the grid has {} knots",
                g.len(),
                self.values.len()
            )));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite functional value {} at knot {i}",
                g[i]
            )));
        }
        let prod: Vec<f64> = g.iter().zip(&self.values).map(|(a, b)| a * b).collect();
        Ok(trapezoid(&prod, self.spacing()))
    }

    /// Trapezoid integral of the product of two densities on the same grid.
    pub fn product_integral(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
        if a.values.len() != b.values.len() {
            return Err(Error::InvalidArgument(format!(
                "product of densities on different grids ({} vs {} knots)",
                a.values.len(),
                b.values.len()
            )));
        }
        let prod: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect();
        Ok(trapezoid(&prod, a.spacing()))
    }

    /// CDF values at the knots (cumulative trapezoid, starting at 0).
    fn knot_cdf(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Cell index and within-cell fraction for `z` in [0,1].
    fn locate(&self, z: f64) -> Result<(usize, f64)> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::InvalidArgument(format!(
                "grid evaluation point must lie in [0,1], got {z}"
            )));
        }
        let cells = self.values.len() - 1;
        let scaled = z * cells as f64;
        let i = (scaled.floor() as usize).min(cells - 1);
        Ok((i, scaled - i as f64))
    }

    fn require_normalized(&self, op: &str) -> Result<()> {
        if !self.normalized {
            return Err(Error::InvalidArgument(format!("{op} requires a normalized density")));
        }
        Ok(())
    }
}

fn spacing_for(g: usize) -> f64 {
    1.0 / (g - 1) as f64
}

/// Trapezoid rule with uniform spacing `h`.
pub(crate) fn trapezoid(values: &[f64], h: f64) -> f64 {
    debug_assert!(values.len() >= 2);
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    h * (0.5 * values[0] + interior + 0.5 * values[values.len() - 1])
}

/// Writes a density catalog: a header line `G,0,1` (knot count and grid
/// endpoints), then one comma-delimited row of G values per density, printed
/// with 12 significant digits. All rows must be normalized and share a grid.
pub fn write_catalog<'a, I>(path: &Path, grids: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a DensityGrid>,
{
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut rows = 0usize;
    let mut grid_size = None;
    for (k, grid) in grids.into_iter().enumerate() {
        if !grid.is_normalized() {
            return Err(Error::InvalidArgument(format!(
                "catalog row {} is not normalized",
                k + 1
            )));
        }
        let g = *grid_size.get_or_insert_with(|| grid.grid_size());
        if grid.grid_size() != g {
            return Err(Error::InvalidArgument(format!(
                "catalog row {} has {} knots, expected {}",
                k + 1,
                grid.grid_size(),
                g
            )));
        }
        if k == 0 {
            writeln!(out, "{g},0,1").map_err(|e| Error::io(path, e))?;
        }
        let line: Vec<String> = grid.values().iter().map(|v| format!("{v:.11e}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("catalog requires at least one density".into()));
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Reads a density catalog written by [`write_catalog`], re-validating
/// normalization of every row.
pub fn read_catalog(path: &Path) -> Result<Vec<DensityGrid>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::table(path, "empty catalog".to_string()))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 3 {
        return Err(Error::table(path, format!("header must be `G,z_min,z_max`, got `{header}`")));
    }
    let g: usize = fields[0]
        .trim()
        .parse()
        .map_err(|_| Error::table(path, format!("bad knot count `{}` in header", fields[0])))?;
    if g < 2 {
        return Err(Error::table(path, format!("knot count must be at least 2, got {g}")));
    }
    for (field, expected) in fields[1..].iter().zip([0.0, 1.0]) {
        let v: f64 = field
            .trim()
            .parse()
            .map_err(|_| Error::table(path, format!("bad grid endpoint `{field}` in header")))?;
        if v != expected {
            return Err(Error::table(path, format!("grid endpoint {v}, expected {expected}")));
        }
    }

    let mut out = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno; // rows are 1-based: header was line 0
        let mut values = Vec::with_capacity(g);
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::table(path, format!("row {row}: bad density value `{field}`"))
            })?;
            values.push(v);
        }
        if values.len() != g {
            return Err(Error::table(
                path,
                format!("row {row}: expected {g} values, got {}", values.len()),
            ));
        }
        let grid = DensityGrid::from_normalized(values)
            .map_err(|e| Error::table(path, format!("row {row}: {e}")))?;
        out.push(grid);
    }
    if out.is_empty() {
        return Err(Error::table(path, "catalog has a header but no rows".to_string()));
    }
    Ok(out)
}
