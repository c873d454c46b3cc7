//! Internal brute-force neighbor machinery shared by the importance-weight
//! and nearest-neighbor density estimators.
//!
//! Distances are Euclidean over a column subset of standardized covariates.
//! Everything here is exact: neighbor order is (distance, row index), so
//! ties resolve to the lower row index, and radius inclusion uses `<=`.
//! Exactness matters — the estimators' definitions are stated in terms of
//! exact neighbor sets, and tests compare against direct evaluations.

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Validates a covariate subset: nonempty, strictly increasing, in range.
pub(crate) fn validate_subset(subset: &[usize], dim: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("covariate subset must be non-empty".into()));
    }
    for (k, &j) in subset.iter().enumerate() {
        if j >= dim {
            return Err(Error::InvalidArgument(format!(
                "covariate subset index {j} out of range for {dim} columns"
            )));
        }
        if k > 0 && subset[k - 1] >= j {
            return Err(Error::InvalidArgument(
                "covariate subset must be strictly increasing".into(),
            ));
        }
    }
    Ok(())
}

/// Euclidean distance between `x` and row `i` of `rows` over `subset`.
#[inline]
pub(crate) fn distance_to_row(
    rows: &ArrayView2<f64>,
    i: usize,
    subset: &[usize],
    x: &ArrayView1<f64>,
) -> f64 {
    let mut acc = 0.0;
    for &j in subset {
        let d = rows[[i, j]] - x[j];
        acc += d * d;
    }
    acc.sqrt()
}

/// Distances from `x` to every row of `rows`, in row order.
pub(crate) fn all_distances(
    rows: &ArrayView2<f64>,
    subset: &[usize],
    x: &ArrayView1<f64>,
) -> Vec<f64> {
    (0..rows.nrows()).map(|i| distance_to_row(rows, i, subset, x)).collect()
}

/// Row indices of `rows` ordered by (distance to `x`, row index), from
/// nearest to farthest.
pub(crate) fn neighbor_order(
    rows: &ArrayView2<f64>,
    subset: &[usize],
    x: &ArrayView1<f64>,
) -> Vec<usize> {
    let dists = all_distances(rows, subset, x);
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    idx
}

/// Number of entries `<= r` in an ascending-sorted slice.
#[inline]
pub(crate) fn count_within(sorted: &[f64], r: f64) -> usize {
    sorted.partition_point(|d| *d <= r)
}
