//! Covariate selection by forward stepwise search or exhaustive enumeration.
//!
//! Both searches are generic over a caller-supplied scoring closure that maps
//! a covariate subset (ascending indices) to a validation loss, so the same
//! machinery drives weight-model selection and density-estimator selection.
//! Candidate evaluations within one round run in parallel; the accepted path
//! is deterministic because ties resolve by covariate index, never by thread
//! arrival order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum loss decrease required to accept another covariate.
pub const SELECTION_TOLERANCE: f64 = 1e-6;

/// Largest candidate count accepted by [`exhaustive_select`].
pub const EXHAUSTIVE_LIMIT: usize = 10;

/// One accepted step of a stepwise search: the covariate added and the
/// validation loss of the model fitted on the enlarged subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub covariate: usize,
    pub loss: f64,
}

/// Record of a stepwise search.
///
/// `steps` lists accepted covariates in acceptance order together with the
/// loss after each addition; those losses decrease by more than
/// [`SELECTION_TOLERANCE`] at every step. `final_subset` holds the same
/// covariates in ascending index order. `baseline` is the starting loss the
/// first candidate had to beat, or `None` when the search had no baseline
/// model and accepted the best single covariate unconditionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
    pub final_subset: Vec<usize>,
    pub baseline: Option<f64>,
}

impl SelectionTrace {
    /// Loss of the selected model: the last accepted step's loss, or the
    /// baseline when nothing was accepted.
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss).or(self.baseline)
    }
}

/// Result of an exhaustive subset search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveReport {
    /// Number of nonempty subsets scored (2^d − 1).
    pub evaluated: usize,
    /// Minimizing subset, ascending indices.
    pub best_subset: Vec<usize>,
    /// Loss of the minimizing subset.
    pub best_loss: f64,
}

fn checked_candidates(candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate covariate list is empty".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument(format!(
            "candidate covariates contain duplicates: {candidates:?}"
        )));
    }
    Ok(sorted)
}

fn checked_loss(subset: &[usize], loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!(
            "scoring subset {subset:?} produced a non-finite loss ({loss})"
        )))
    }
}

/// Forward stepwise covariate search.
///
/// Starting from `baseline` (the loss of the model with no candidate added),
/// each round scores every remaining candidate joined to the accepted subset
/// and keeps the one with the lowest loss, provided it undercuts the current
/// loss by more than [`SELECTION_TOLERANCE`]; otherwise the search stops.
/// With `baseline = None` there is nothing to compare the first round
/// against, so the best single covariate is accepted unconditionally and
/// recorded as the first step. Ties resolve toward the smaller covariate
/// index. Scoring errors abort the search.
pub fn forward_select<F>(
    fit_and_score: F,
    candidates: &[usize],
    baseline: Option<f64>,
) -> Result<SelectionTrace>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if let Some(b) = baseline {
        checked_loss(&[], b)?;
    }
    let mut remaining = checked_candidates(candidates)?;
    let mut subset: Vec<usize> = Vec::new();
    let mut steps: Vec<SelectionStep> = Vec::new();
    let mut current = baseline;

    while !remaining.is_empty() {
        let scored: Vec<(usize, f64)> = remaining
            .par_iter()
            .map(|&c| {
                let mut trial = subset.clone();
                let at = trial.partition_point(|&s| s < c);
                trial.insert(at, c);
                fit_and_score(&trial).and_then(|l| checked_loss(&trial, l)).map(|l| (c, l))
            })
            .collect::<Result<_>>()?;
        let &(best_cov, best_loss) = scored
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("remaining is nonempty");
        let accept = match current {
            None => true,
            Some(cur) => best_loss < cur - SELECTION_TOLERANCE,
        };
        if !accept {
            break;
        }
        let at = subset.partition_point(|&s| s < best_cov);
        subset.insert(at, best_cov);
        remaining.retain(|&c| c != best_cov);
        steps.push(SelectionStep { covariate: best_cov, loss: best_loss });
        current = Some(best_loss);
    }

    Ok(SelectionTrace { steps, final_subset: subset, baseline })
}

/// Exhaustive search over every nonempty subset of `candidates`.
///
/// Scores all 2^d − 1 subsets in parallel and returns the minimizer; ties
/// resolve toward fewer covariates, then the lexicographically smallest
/// index sequence. Rejects more than [`EXHAUSTIVE_LIMIT`] candidates, where
/// enumeration stops being sensible.
pub fn exhaustive_select<F>(fit_and_score: F, candidates: &[usize]) -> Result<ExhaustiveReport>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let sorted = checked_candidates(candidates)?;
    let d = sorted.len();
    if d > EXHAUSTIVE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search handles at most {EXHAUSTIVE_LIMIT} candidates, got {d}"
        )));
    }
    let masks: Vec<u32> = (1..(1u32 << d)).collect();
    let scored: Vec<(Vec<usize>, f64)> = masks
        .par_iter()
        .map(|&mask| {
            let subset: Vec<usize> =
                (0..d).filter(|&j| mask & (1 << j) != 0).map(|j| sorted[j]).collect();
            fit_and_score(&subset)
                .and_then(|l| checked_loss(&subset, l))
                .map(|l| (subset, l))
        })
        .collect::<Result<_>>()?;
    let (best_subset, best_loss) = scored
        .into_iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1).then(a.0.len().cmp(&b.0.len())).then(a.0.cmp(&b.0))
        })
        .expect("at least one subset exists");
    Ok(ExhaustiveReport { evaluated: (1usize << d) - 1, best_subset, best_loss })
}
