//! End-to-end fitting under selection bias.
//!
//! [`run_pipeline`] wires the modules together: estimate importance weights
//! (with their own covariate and M selection), tune the shift-corrected
//! series and kernel-NN estimators per covariate subset, stack the pair by
//! simplex QP, and score everything with the shift-corrected loss. The outer
//! covariate search runs stepwise from a weighted marginal-density baseline,
//! exhaustively, or not at all. Any stage failure aborts the run with an
//! error naming the stage.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cde::series::ResponseBasis;
use crate::cde::{
    fit_nn_cde, tune_series, CdeModel, NnFit, NnKind, NnTuneRecord, NnTuningGrid,
    SeriesTuneRecord, SeriesTuningGrid, ValidationSet,
};
use crate::data::{split, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{components_shifted, loss_shifted, LossReport, DEFAULT_BOOTSTRAP};
use crate::select::{exhaustive_select, forward_select, ExhaustiveReport, SelectionTrace};
use crate::stack::{stack, StackedModel};
use crate::weights::{effective_sample_size, select_M, MLoss};

/// How the outer covariate search runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Use every covariate; no search.
    None,
    /// Forward stepwise search from the weighted marginal-density baseline.
    Stepwise,
    /// Score every nonempty subset (at most ten covariates).
    Exhaustive,
}

/// Everything [`run_pipeline`] needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Three-way split applied to the labeled and unlabeled samples alike.
    pub split: SplitSpec,
    /// Neighbor counts scanned when selecting the weight model's M.
    pub m_grid: Vec<usize>,
    /// Hyperparameter grid for the series estimator.
    pub series_grid: SeriesTuningGrid,
    /// Hyperparameter grid for the kernel-NN estimator (`bins` unused).
    pub nn_grid: NnTuningGrid,
    /// Outer covariate search mode.
    pub selection: SelectionMode,
    /// Number of knots for every fitted density.
    pub grid_size: usize,
    /// Bootstrap replicates behind the reported standard errors.
    pub bootstrap: usize,
    /// Seed for the bootstrap replicate streams.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitSpec {
                train_fraction: 0.6,
                validation_fraction: 0.3,
                test_fraction: 0.1,
                seed: 0,
            },
            m_grid: vec![2, 4, 8, 16, 32],
            series_grid: SeriesTuningGrid {
                epsilons: vec![0.01, 0.05],
                n_eigenfunctions: vec![4, 8],
                n_response_basis: vec![6, 10],
            },
            nn_grid: NnTuningGrid {
                n_neighbors: vec![4, 8, 16, 32],
                bins: vec![],
                epsilons: vec![5e-4, 2e-3, 1e-2],
            },
            selection: SelectionMode::Stepwise,
            grid_size: crate::grid::DEFAULT_GRID_SIZE,
            bootstrap: DEFAULT_BOOTSTRAP,
            seed: 0,
        }
    }
}

/// Hyperparameters of the model a pipeline run settled on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelManifest {
    /// The usual outcome: series and kernel-NN stacked on a covariate subset.
    Stacked {
        cde_subset: Vec<usize>,
        cde_names: Vec<String>,
        series_epsilon: f64,
        series_n_eigenfunctions: usize,
        series_n_response_basis: usize,
        nn_n_neighbors: usize,
        nn_epsilon: f64,
        alpha: Vec<f64>,
    },
    /// Fallback when no covariate improved on the weighted marginal density:
    /// a kernel-NN whose neighborhood is the whole training set.
    Marginal { nn_n_neighbors: usize, nn_epsilon: f64 },
}

/// Run-level manifest: the selected model plus the shared configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub model: ModelManifest,
    pub beta_subset: Vec<usize>,
    pub m: usize,
    pub grid_size: usize,
    pub split: SplitSpec,
    pub bootstrap: usize,
    pub seed: u64,
}

/// One covariate subset scored by the inner fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetTrial {
    pub subset: Vec<usize>,
    pub series: SeriesTuneRecord,
    pub nn: NnTuneRecord,
    pub alpha: Vec<f64>,
    /// Shift-corrected validation loss of the stacked pair.
    pub loss: f64,
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    /// The winning model (stacked, or the marginal fallback).
    pub model: CdeModel,
    pub manifest: PipelineManifest,
    /// Stepwise trace of the weight model's covariate search, when run.
    pub beta_trace: Option<SelectionTrace>,
    /// (M, loss) table behind the selected weight model.
    pub m_table: Vec<MLoss>,
    /// Stepwise trace of the outer covariate search, when run.
    pub cde_trace: Option<SelectionTrace>,
    /// Exhaustive-search report, when run.
    pub exhaustive: Option<ExhaustiveReport>,
    /// Every covariate subset scored, sorted by subset.
    pub trials: Vec<SubsetTrial>,
    /// Tuning table of the winning subset's series estimator (empty for the
    /// marginal fallback).
    pub series_table: Vec<SeriesTuneRecord>,
    /// Tuning table of the winning subset's kernel-NN estimator, or of the
    /// marginal fallback.
    pub nn_table: Vec<NnTuneRecord>,
    /// Shift-corrected loss of the winner on the validation split.
    pub validation_report: LossReport,
    /// Shift-corrected loss of the winner on the held-out test split.
    pub test_report: LossReport,
}

fn tag<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage, source: Box::new(e) })
}

struct InnerFit {
    series: crate::cde::SeriesFit,
    nn: NnFit,
    stacked: StackedModel,
    loss: f64,
}

/// Tunes both estimators on one covariate subset, stacks them, and scores
/// the stack with the shift-corrected loss.
#[allow(clippy::too_many_arguments)]
fn fit_subset(
    subset: &[usize],
    cfg: &PipelineConfig,
    tr_l: &Sample,
    w_tr: &[f64],
    val_l: &Sample,
    w_val: &[f64],
    val_u: &Sample,
) -> Result<InnerFit> {
    let validation = ValidationSet { labeled: val_l, weights: Some(w_val), unlabeled: Some(val_u) };
    let series = tag(
        "series",
        tune_series(
            tr_l,
            &cfg.series_grid,
            &validation,
            subset.to_vec(),
            ResponseBasis::Cosine,
            cfg.grid_size,
        ),
    )?;
    let nn = tag(
        "nn",
        fit_nn_cde(
            tr_l,
            w_tr,
            NnKind::Kernel,
            &cfg.nn_grid,
            &validation,
            subset.to_vec(),
            cfg.grid_size,
        ),
    )?;
    let stacked = tag(
        "stack",
        stack(
            vec![CdeModel::Series(series.model.clone()), CdeModel::Nn(nn.model.clone())],
            val_l,
            w_val,
            val_u,
        ),
    )?;
    let loss = tag(
        "evaluate",
        loss_shifted(&|x| stacked.predict(x), val_l, w_val, val_u).map(|r| r.value),
    )?;
    Ok(InnerFit { series, nn, stacked, loss })
}

fn chosen_series(fit: &crate::cde::SeriesFit) -> SeriesTuneRecord {
    SeriesTuneRecord {
        epsilon: fit.model.epsilon(),
        n_eigenfunctions: fit.model.n_eigenfunctions(),
        n_response_basis: fit.model.n_response_basis(),
        loss: fit.loss,
    }
}

fn chosen_nn(fit: &NnFit) -> NnTuneRecord {
    let (bins, epsilon) = match fit.model.variant() {
        crate::cde::NnVariant::Histogram { bins } => (Some(bins), None),
        crate::cde::NnVariant::Kernel { epsilon } => (None, Some(epsilon)),
    };
    NnTuneRecord { n_neighbors: fit.model.n_neighbors(), bins, epsilon, loss: fit.loss }
}

fn scored_report(
    predict: &crate::losses::Predictor<'_>,
    labeled: &Sample,
    weights: &[f64],
    unlabeled: &Sample,
    b_boot: usize,
    seed: u64,
    stage: &str,
) -> Result<LossReport> {
    let report = loss_shifted(&predict, labeled, weights, unlabeled)?;
    let se = components_shifted(&predict, labeled, weights, unlabeled)?.bootstrap_se(b_boot, seed)?;
    let mut report = report.with_se(se, b_boot)?;
    report.metadata.insert("stage".into(), stage.into());
    if let Ok(ess) = effective_sample_size(weights) {
        report.metadata.insert("weight_ess".into(), format!("{ess:.6}"));
    }
    Ok(report)
}

/// Runs the full fitting pipeline on a labeled sample and an unlabeled
/// sample (any responses on the latter are ignored).
///
/// Stages, in order: split both samples; select the weight model's covariates
/// (stepwise on the weight loss, skipped under [`SelectionMode::None`]) and
/// its `M`; search covariate subsets for the density estimators, scoring each
/// subset by the shift-corrected validation loss of the stacked pair; refit
/// the winner; report validation and held-out-test losses with bootstrap
/// standard errors.
pub fn run_pipeline(
    config: &PipelineConfig,
    labeled: &Sample,
    unlabeled: &Sample,
) -> Result<PipelineReport> {
    if config.grid_size < 2 {
        return Err(Error::Config(format!(
            "grid_size must be at least 2, got {}",
            config.grid_size
        )));
    }
    if config.bootstrap < 2 {
        return Err(Error::Config(format!(
            "bootstrap must be at least 2, got {}",
            config.bootstrap
        )));
    }
    if !labeled.is_labeled() {
        return Err(Error::InvalidArgument("labeled sample carries no responses".into()));
    }
    if labeled.dim() != unlabeled.dim() {
        return Err(Error::InvalidArgument(format!(
            "labeled and unlabeled dimensions differ: {} vs {}",
            labeled.dim(),
            unlabeled.dim()
        )));
    }

    let (tr_l, val_l, test_l) = tag("split", split(labeled, &config.split))?;
    let unlabeled = unlabeled.without_response();
    let (tr_u, val_u, test_u) = tag("split", split(&unlabeled, &config.split))?;
    let all_covariates: Vec<usize> = (0..labeled.dim()).collect();

    // Importance weights: covariate subset (stepwise over the weight loss,
    // each subset scored at its best M), then the final model at its best M.
    let beta_trace = match config.selection {
        SelectionMode::None => None,
        _ => {
            let score = |s: &[usize]| {
                select_M(&tr_l, &tr_u, &val_l, &val_u, &config.m_grid, s).map(|w| w.loss)
            };
            Some(tag("weights", forward_select(score, &all_covariates, None))?)
        }
    };
    let beta_subset = match &beta_trace {
        Some(t) => t.final_subset.clone(),
        None => all_covariates.clone(),
    };
    let selection = tag(
        "weights",
        select_M(&tr_l, &tr_u, &val_l, &val_u, &config.m_grid, &beta_subset),
    )?;
    let weight_model = selection.model;
    let w_tr = tag("weights", weight_model.predict_beta_batch(&tr_l))?;
    let w_val = tag("weights", weight_model.predict_beta_batch(&val_l))?;

    // Outer covariate search for the density estimators.
    let trials: Mutex<Vec<SubsetTrial>> = Mutex::new(Vec::new());
    let score = |s: &[usize]| {
        let fit = fit_subset(s, config, &tr_l, &w_tr, &val_l, &w_val, &val_u)?;
        trials.lock().expect("trial log poisoned").push(SubsetTrial {
            subset: s.to_vec(),
            series: chosen_series(&fit.series),
            nn: chosen_nn(&fit.nn),
            alpha: fit.stacked.alpha.clone(),
            loss: fit.loss,
        });
        Ok(fit.loss)
    };

    let mut cde_trace = None;
    let mut exhaustive = None;
    let mut marginal: Option<NnFit> = None;
    let cde_subset: Vec<usize> = match config.selection {
        SelectionMode::None => {
            score(&all_covariates)?;
            all_covariates
        }
        SelectionMode::Stepwise => {
            // Baseline: the weighted marginal density of z — the kernel-NN
            // estimate whose neighborhood is the entire training set.
            let marginal_grid = NnTuningGrid {
                n_neighbors: vec![tr_l.n()],
                bins: vec![],
                epsilons: config.nn_grid.epsilons.clone(),
            };
            let validation =
                ValidationSet { labeled: &val_l, weights: Some(&w_val), unlabeled: Some(&val_u) };
            let m_fit = tag(
                "marginal",
                fit_nn_cde(
                    &tr_l,
                    &w_tr,
                    NnKind::Kernel,
                    &marginal_grid,
                    &validation,
                    vec![0],
                    config.grid_size,
                ),
            )?;
            let baseline = m_fit.loss;
            marginal = Some(m_fit);
            let trace = forward_select(score, &all_covariates, Some(baseline))?;
            let subset = trace.final_subset.clone();
            cde_trace = Some(trace);
            subset
        }
        SelectionMode::Exhaustive => {
            let report = exhaustive_select(score, &all_covariates)?;
            let subset = report.best_subset.clone();
            exhaustive = Some(report);
            subset
        }
    };

    let mut trials = trials.into_inner().expect("trial log poisoned");
    trials.sort_by(|a, b| a.subset.len().cmp(&b.subset.len()).then(a.subset.cmp(&b.subset)));

    // Refit the winner (deterministic, so this reproduces the trial) or fall
    // back to the marginal density when the stepwise search accepted nothing.
    let (model, model_manifest, series_table, nn_table) = if cde_subset.is_empty() {
        let m_fit = marginal.expect("empty subset only arises in stepwise mode");
        let manifest = ModelManifest::Marginal {
            nn_n_neighbors: m_fit.model.n_neighbors(),
            nn_epsilon: match m_fit.model.variant() {
                crate::cde::NnVariant::Kernel { epsilon } => epsilon,
                crate::cde::NnVariant::Histogram { .. } => unreachable!("marginal is kernel-NN"),
            },
        };
        (CdeModel::Nn(m_fit.model), manifest, Vec::new(), m_fit.table)
    } else {
        let fit = fit_subset(&cde_subset, config, &tr_l, &w_tr, &val_l, &w_val, &val_u)?;
        let series = chosen_series(&fit.series);
        let nn = chosen_nn(&fit.nn);
        let manifest = ModelManifest::Stacked {
            cde_subset: cde_subset.clone(),
            cde_names: cde_subset
                .iter()
                .map(|&j| labeled.covariate_names()[j].clone())
                .collect(),
            series_epsilon: series.epsilon,
            series_n_eigenfunctions: series.n_eigenfunctions,
            series_n_response_basis: series.n_response_basis,
            nn_n_neighbors: nn.n_neighbors,
            nn_epsilon: nn.epsilon.expect("kernel variant carries a bandwidth"),
            alpha: fit.stacked.alpha.clone(),
        };
        (
            CdeModel::Stacked(fit.stacked),
            manifest,
            fit.series.table,
            fit.nn.table,
        )
    };

    let validation_report = tag(
        "evaluate",
        scored_report(
            &|x| model.predict(x),
            &val_l,
            &w_val,
            &val_u,
            config.bootstrap,
            config.seed,
            "validation",
        ),
    )?;
    let w_test = tag("weights", weight_model.predict_beta_batch(&test_l))?;
    let test_report = tag(
        "evaluate",
        scored_report(
            &|x| model.predict(x),
            &test_l,
            &w_test,
            &test_u,
            config.bootstrap,
            config.seed.wrapping_add(1),
            "test",
        ),
    )?;

    Ok(PipelineReport {
        model,
        manifest: PipelineManifest {
            model: model_manifest,
            beta_subset,
            m: weight_model.m(),
            grid_size: config.grid_size,
            split: config.split,
            bootstrap: config.bootstrap,
            seed: config.seed,
        },
        beta_trace,
        m_table: selection.table,
        cde_trace,
        exhaustive,
        trials,
        series_table,
        nn_table,
        validation_report,
        test_report,
    })
}
