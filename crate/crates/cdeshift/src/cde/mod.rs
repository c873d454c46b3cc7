//! Conditional density estimators.
//!
//! Two families live here — memory-based nearest-neighbor estimators
//! ([`nn`]) and the spectral series estimator ([`series`]) — plus the
//! [`CdeModel`] wrapper that gives every fitted estimator (including
//! stacked combinations) one prediction interface. Each family comes in an
//! uncorrected flavor (trained and tuned as if labeled data were
//! representative) and a selection-corrected flavor (trained with β̂
//! importance weights and tuned under the shift-corrected loss); both
//! flavors share one code path, differing only in the weights and the loss
//! handed to tuning.

pub mod nn;
pub mod series;

pub use nn::{fit_nn_cde, NnCdeModel, NnFit, NnKind, NnTuneRecord, NnTuningGrid, NnVariant};
pub use series::{
    fit_series, tune_series, ResponseBasis, SeriesFit, SeriesModel, SeriesTuneRecord,
    SeriesTuningGrid,
};

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::losses::{loss_labeled, loss_shifted};

/// Any fitted conditional density model, behind one prediction interface.
///
/// Serializes with a `family` tag, so saved models are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CdeModel {
    Nn(NnCdeModel),
    Series(SeriesModel),
    Stacked(crate::stack::StackedModel),
}

impl CdeModel {
    /// Predicts the conditional density at one covariate vector.
    pub fn predict(&self, x: &ArrayView1<'_, f64>) -> Result<DensityGrid> {
        match self {
            CdeModel::Nn(m) => m.predict(x),
            CdeModel::Series(m) => m.predict(x),
            CdeModel::Stacked(m) => m.predict(x),
        }
    }

    /// Predicts at every row of a sample, in row order.
    pub fn predict_batch(&self, sample: &Sample) -> Result<Vec<DensityGrid>> {
        (0..sample.n())
            .into_par_iter()
            .map(|i| self.predict(&sample.covariate_row(i)))
            .collect()
    }

    /// Number of knots of emitted densities.
    pub fn grid_size(&self) -> usize {
        match self {
            CdeModel::Nn(m) => m.grid_size(),
            CdeModel::Series(m) => m.grid_size(),
            CdeModel::Stacked(m) => m.grid_size(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            CdeModel::Nn(m) => match m.variant() {
                NnVariant::Histogram { .. } => "nn_histogram",
                NnVariant::Kernel { .. } => "nn_kernel",
            },
            CdeModel::Series(_) => "series",
            CdeModel::Stacked(_) => "stacked",
        }
    }
}

/// The validation data a tuner scores candidates against.
///
/// `unlabeled: Some(..)` selects the shift-corrected loss (squared term
/// over unlabeled rows, fit term β̂-weighted over labeled rows);
/// `unlabeled: None` selects the labeled-only loss, in which case weights
/// must not be supplied. `weights: None` under the corrected loss means
/// all-ones.
#[derive(Clone, Copy)]
pub struct ValidationSet<'a> {
    pub labeled: &'a Sample,
    pub weights: Option<&'a [f64]>,
    pub unlabeled: Option<&'a Sample>,
}

impl ValidationSet<'_> {
    pub(crate) fn validate(&self, dim: usize) -> Result<()> {
        if self.labeled.dim() != dim {
            return Err(Error::InvalidArgument(format!(
                "validation covariates have dimension {}, training has {dim}",
                self.labeled.dim()
            )));
        }
        if self.labeled.response().is_none() {
            return Err(Error::InvalidArgument(
                "labeled validation sample must carry responses".into(),
            ));
        }
        if let Some(w) = self.weights {
            if self.unlabeled.is_none() {
                return Err(Error::InvalidArgument(
                    "validation weights require an unlabeled validation set \
                     (they belong to the shift-corrected loss)"
                        .into(),
                ));
            }
            if w.len() != self.labeled.n() {
                return Err(Error::InvalidArgument(format!(
                    "{} validation weights for {} labeled validation rows",
                    w.len(),
                    self.labeled.n()
                )));
            }
        }
        if let Some(u) = self.unlabeled {
            if u.dim() != dim {
                return Err(Error::InvalidArgument(format!(
                    "unlabeled validation covariates have dimension {}, training has {dim}",
                    u.dim()
                )));
            }
        }
        Ok(())
    }

    /// Scores a candidate predictor with the loss this validation set
    /// implies. This is the only scoring path tuners use, so tuned losses
    /// are exactly the losses module's values for the returned model.
    pub(crate) fn loss<P>(&self, predict: P) -> Result<f64>
    where
        P: Fn(&ArrayView1<'_, f64>) -> Result<DensityGrid> + Sync,
    {
        match self.unlabeled {
            Some(unlabeled) => {
                let ones;
                let w = match self.weights {
                    Some(w) => w,
                    None => {
                        ones = vec![1.0; self.labeled.n()];
                        &ones
                    }
                };
                Ok(loss_shifted(&predict, self.labeled, w, unlabeled)?.value)
            }
            None => Ok(loss_labeled(&predict, self.labeled)?.value),
        }
    }
}
