//! Subcommand implementations.
//!
//! Every handler loads its inputs, delegates the statistics to the library
//! modules, writes artifacts under the configured output directory, and
//! returns a [`RunOutcome`] the front end turns into the run manifest.
//! Covariate standardization always uses statistics from the labeled
//! training split, so saved models carry the exact metric they were fitted
//! under.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::config::{
    CdeMethod, CleanConfig, DiagnoseConfig, EvaluateConfig, FitCdeConfig, FitConfig,
    FitWeightsConfig, SimulateConfig, SimulateMode,
};
use super::{emit_catalog, RunOutcome, SavedModel, SavedWeightModel};
use crate::cde::{
    fit_nn_cde, tune_series, CdeModel, NnKind, ResponseBasis, ValidationSet,
};
use crate::data::{load_table, save_table, split, standardize, ColumnStats, Sample, SplitSpec};
use crate::diagnostics::diagnose;
use crate::error::{Error, Result};
use crate::grid::DensityGrid;
use crate::losses::{
    components_labeled, components_oracle, components_shifted, loss_labeled, loss_oracle,
    loss_shifted, LossReport, LossVariant,
};
use crate::pipeline::{run_pipeline, ModelManifest, PipelineReport, SelectionMode};
use crate::simulate::{make_oracle, rejection_sample, SelectionScheme};
use crate::weights::{clean_zero_weights, effective_sample_size, select_M};

/// Significant-digit format shared by every CSV artifact.
fn sig12(v: f64) -> String {
    format!("{v:.11e}")
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path, e.to_string()))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

/// Writes loss reports as JSON rows, one object per line.
fn write_loss_rows(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut out = String::new();
    for report in reports {
        out.push_str(
            &serde_json::to_string(report).map_err(|e| Error::json(path, e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_csv_table(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| sig12(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Standardizes a labeled/unlabeled pair with statistics computed from the
/// labeled training split, the canonical metric for every later distance.
fn prepare_pair(
    labeled: &Sample,
    unlabeled: &Sample,
    spec: &SplitSpec,
    standardize_flag: bool,
) -> Result<(Sample, Sample, Option<Vec<ColumnStats>>)> {
    if !standardize_flag {
        return Ok((labeled.clone(), unlabeled.clone(), None));
    }
    let (train, _, _) = split(labeled, spec)?;
    let train = standardize(&train, None)?;
    let stats = train.standardization().expect("freshly fitted statistics").to_vec();
    let labeled = standardize(labeled, Some(&stats))?;
    let unlabeled = standardize(unlabeled, Some(&stats))?;
    Ok((labeled, unlabeled, Some(stats)))
}

pub(super) fn simulate(cfg: &SimulateConfig) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    match &cfg.mode {
        SimulateMode::Scheme { pool, scheme, bias_column, seed, n_unlabeled } => {
            let pool_sample = load_table(pool, true)?;
            let rule = SelectionScheme::new(*scheme, bias_column.clone(), *seed)?;
            let labeled = rejection_sample(&pool_sample, &rule, false)?;
            let unlabeled = match n_unlabeled {
                Some(k) => {
                    if *k > pool_sample.n() {
                        return Err(Error::InvalidArgument(format!(
                            "n_unlabeled {k} exceeds the pool size {}",
                            pool_sample.n()
                        )));
                    }
                    // Stream 1 keeps the unlabeled draw independent of the
                    // rejection stream under the same master seed.
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    rng.set_stream(1);
                    let mut rows = rand::seq::index::sample(&mut rng, pool_sample.n(), *k)
                        .into_vec();
                    rows.sort_unstable();
                    pool_sample.select_rows(&rows)?.without_response()
                }
                None => pool_sample.without_response(),
            };
            save_table(&labeled, &cfg.out_dir.join("labeled.csv"))?;
            save_table(&unlabeled, &cfg.out_dir.join("unlabeled.csv"))?;
            let (a, b) = rule.beta_params();
            Ok(RunOutcome {
                outputs: vec!["labeled.csv".into(), "unlabeled.csv".into()],
                details: json!({
                    "mode": "scheme",
                    "scheme": rule.name(),
                    "beta_params": [a, b],
                    "bias_column": bias_column,
                    "seed": seed,
                    "pool_rows": pool_sample.n(),
                    "labeled_rows": labeled.n(),
                    "unlabeled_rows": unlabeled.n(),
                }),
                notes: vec![format!(
                    "kept {} of {} pool rows under {}",
                    labeled.n(),
                    pool_sample.n(),
                    rule.name()
                )],
            })
        }
        SimulateMode::Oracle(spec) => {
            let oracle = make_oracle(spec)?;
            save_table(&oracle.labeled, &cfg.out_dir.join("labeled.csv"))?;
            save_table(&oracle.unlabeled.without_response(), &cfg.out_dir.join("unlabeled.csv"))?;
            save_table(&oracle.unlabeled, &cfg.out_dir.join("unlabeled_truth.csv"))?;
            Ok(RunOutcome {
                outputs: vec![
                    "labeled.csv".into(),
                    "unlabeled.csv".into(),
                    "unlabeled_truth.csv".into(),
                ],
                details: json!({
                    "mode": "oracle",
                    "spec": spec,
                    "labeled_rows": oracle.labeled.n(),
                    "unlabeled_rows": oracle.unlabeled.n(),
                }),
                notes: vec![format!(
                    "synthetic draw: {} labeled, {} unlabeled rows",
                    oracle.labeled.n(),
                    oracle.unlabeled.n()
                )],
            })
        }
    }
}

pub(super) fn clean(cfg: &CleanConfig) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let pool_raw = load_table(&cfg.pool, true)?;
    let current_raw = load_table(&cfg.current, true)?;
    let unlabeled_raw = load_table(&cfg.unlabeled, false)?;
    let (pool, current, unlabeled) = if cfg.standardize {
        let current = standardize(&current_raw, None)?;
        let stats = current.standardization().expect("freshly fitted statistics").to_vec();
        (standardize(&pool_raw, Some(&stats))?, current, standardize(&unlabeled_raw, Some(&stats))?)
    } else {
        (pool_raw.clone(), current_raw, unlabeled_raw)
    };
    let (_, report) =
        clean_zero_weights(&pool, &current, &unlabeled, cfg.target_size, &cfg.prelim_m_grid, cfg.seed)?;
    let cleaned = pool_raw.select_rows(&report.kept_row_indices)?;
    save_table(&cleaned, &cfg.out_dir.join("cleaned.csv"))?;
    Ok(RunOutcome {
        outputs: vec!["cleaned.csv".into()],
        details: json!({
            "zero_weight_fraction": report.zero_weight_fraction,
            "pool_rows": report.pool_rows,
            "kept_rows": report.kept_rows,
            "selected_m": report.selected_m,
        }),
        notes: vec![format!(
            "kept {} of {} pool rows ({:.1}% had zero weight)",
            report.kept_rows,
            report.pool_rows,
            100.0 * report.zero_weight_fraction
        )],
    })
}

pub(super) fn fit_weights(cfg: &FitWeightsConfig) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let labeled_raw = load_table(&cfg.labeled, true)?;
    let unlabeled_raw = load_table(&cfg.unlabeled, false)?;
    let (labeled, unlabeled, stats) =
        prepare_pair(&labeled_raw, &unlabeled_raw, &cfg.split, cfg.standardize)?;
    let (tr_l, va_l, _) = split(&labeled, &cfg.split)?;
    let (tr_u, va_u, _) = split(&unlabeled, &cfg.split)?;
    let subset: Vec<usize> =
        cfg.subset.clone().unwrap_or_else(|| (0..labeled.dim()).collect());
    let selection = select_M(&tr_l, &tr_u, &va_l, &va_u, &cfg.m_grid, &subset)?;
    let weights = selection.model.predict_beta_batch(&labeled)?;
    let ess = effective_sample_size(&weights).ok();

    let saved = SavedWeightModel {
        model: selection.model,
        standardization: stats,
        covariate_names: labeled_raw.covariate_names().to_vec(),
    };
    saved.save(&cfg.out_dir.join("weight_model.json"))?;
    write_weighted_table(&labeled_raw, &weights, &cfg.out_dir.join("labeled_weighted.csv"))?;

    Ok(RunOutcome {
        outputs: vec!["weight_model.json".into(), "labeled_weighted.csv".into()],
        details: json!({
            "m": saved.model.m(),
            "covariate_subset": subset,
            "loss": selection.loss,
            "table": selection.table,
            "effective_sample_size": ess,
        }),
        notes: vec![format!(
            "selected M = {} (validation loss {:.6})",
            saved.model.m(),
            selection.loss
        )],
    })
}

/// Writes the labeled table with a `beta_weight` column inserted between
/// the covariates and the response.
fn write_weighted_table(sample: &Sample, weights: &[f64], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header = sample.covariate_names().join(",");
    header.push_str(",beta_weight");
    if sample.is_labeled() {
        header.push_str(",z");
    }
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for i in 0..sample.n() {
        let mut fields: Vec<String> =
            sample.covariate_row(i).iter().map(|v| format!("{v}")).collect();
        fields.push(format!("{}", weights[i]));
        if let Some(z) = sample.response() {
            fields.push(format!("{}", z[i]));
        }
        writeln!(out, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(super) fn fit_cde(cfg: &FitCdeConfig, method: CdeMethod, corrected: bool) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let labeled_raw = load_table(&cfg.labeled, true)?;
    let unlabeled_raw = load_table(&cfg.unlabeled, false)?;
    let (labeled, unlabeled, stats) =
        prepare_pair(&labeled_raw, &unlabeled_raw, &cfg.split, cfg.standardize)?;
    let (tr_l, va_l, _) = split(&labeled, &cfg.split)?;
    let (tr_u, va_u, _) = split(&unlabeled, &cfg.split)?;
    let subset: Vec<usize> =
        cfg.subset.clone().unwrap_or_else(|| (0..labeled.dim()).collect());

    let ones = vec![1.0; tr_l.n()];
    let (w_tr, w_va, weight_detail) = if corrected {
        let m_grid = cfg.m_grid.as_ref().expect("validated: m_grid present with --corrected");
        let all: Vec<usize> = (0..labeled.dim()).collect();
        let sel = select_M(&tr_l, &tr_u, &va_l, &va_u, m_grid, &all)?;
        let w_tr = sel.model.predict_beta_batch(&tr_l)?;
        let w_va = sel.model.predict_beta_batch(&va_l)?;
        (w_tr, Some(w_va), Some(json!({"m": sel.model.m(), "loss": sel.loss})))
    } else {
        (ones, None, None)
    };
    let validation = ValidationSet {
        labeled: &va_l,
        weights: w_va.as_deref(),
        unlabeled: if corrected { Some(&va_u) } else { None },
    };

    let (model, detail, loss) = match method {
        CdeMethod::Nn | CdeMethod::KerNn => {
            let kind = if method == CdeMethod::Nn { NnKind::Histogram } else { NnKind::Kernel };
            let grid = cfg.nn_grid.as_ref().expect("validated: nn_grid present");
            let fit = fit_nn_cde(&tr_l, &w_tr, kind, grid, &validation, subset.clone(), cfg.grid_size)?;
            let variant = fit.model.variant();
            let detail = json!({
                "method": method.name(),
                "corrected": corrected,
                "n_neighbors": fit.model.n_neighbors(),
                "variant": variant,
                "covariate_subset": subset,
                "loss": fit.loss,
                "table": fit.table,
                "weight_model": weight_detail,
            });
            (CdeModel::Nn(fit.model), detail, fit.loss)
        }
        CdeMethod::Series => {
            let grid = cfg.series_grid.as_ref().expect("validated: series_grid present");
            let fit = tune_series(
                &tr_l,
                grid,
                &validation,
                subset.clone(),
                ResponseBasis::Cosine,
                cfg.grid_size,
            )?;
            let detail = json!({
                "method": method.name(),
                "corrected": corrected,
                "epsilon": fit.model.epsilon(),
                "n_eigenfunctions": fit.model.n_eigenfunctions(),
                "n_response_basis": fit.model.n_response_basis(),
                "eigenvalues": fit.model.eigenvalues(),
                "basis": fit.model.basis().name(),
                "covariate_subset": subset,
                "loss": fit.loss,
                "table": fit.table,
                "decompositions": fit.decompositions,
                "weight_model": weight_detail,
            });
            (CdeModel::Series(fit.model), detail, fit.loss)
        }
    };

    let saved = SavedModel {
        model,
        standardization: stats,
        covariate_names: labeled_raw.covariate_names().to_vec(),
        grid_size: cfg.grid_size,
    };
    saved.save(&cfg.out_dir.join("model.json"))?;
    Ok(RunOutcome {
        outputs: vec!["model.json".into()],
        details: detail,
        notes: vec![format!("{} validation loss {:.6}", method.name(), loss)],
    })
}

/// Shared load-prepare-run step of `stack`, `select-vars`, and `pipeline`.
fn run_fit(
    cfg: &FitConfig,
    selection: SelectionMode,
) -> Result<(PipelineReport, Option<Vec<ColumnStats>>, Sample, Vec<String>)> {
    let labeled_raw = load_table(&cfg.labeled, true)?;
    let unlabeled_raw = load_table(&cfg.unlabeled, false)?;
    let (labeled, unlabeled, stats) =
        prepare_pair(&labeled_raw, &unlabeled_raw, &cfg.split, cfg.standardize)?;
    let report = run_pipeline(&cfg.pipeline_config(selection), &labeled, &unlabeled)?;
    let names = labeled_raw.covariate_names().to_vec();
    Ok((report, stats, unlabeled, names))
}

fn loss_note(report: &LossReport, label: &str) -> String {
    match report.se {
        Some(se) => format!("{label} loss {:.6} ± {:.6}", report.value, se),
        None => format!("{label} loss {:.6}", report.value),
    }
}

pub(super) fn stack(cfg: &FitConfig) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let (report, stats, unlabeled, names) = run_fit(cfg, SelectionMode::None)?;
    let saved = SavedModel {
        model: report.model.clone(),
        standardization: stats,
        covariate_names: names,
        grid_size: cfg.grid_size,
    };
    saved.save(&cfg.out_dir.join("model.json"))?;
    write_loss_rows(
        &cfg.out_dir.join("losses.jsonl"),
        &[report.validation_report.clone(), report.test_report.clone()],
    )?;
    let rows = emit_catalog(&report.model, &unlabeled, &cfg.out_dir.join("catalog.csv"))?;
    let alpha = match &report.manifest.model {
        ModelManifest::Stacked { alpha, .. } => Some(alpha.clone()),
        ModelManifest::Marginal { .. } => None,
    };
    let notes = vec![
        match &alpha {
            Some(a) => format!(
                "stacking weights: {}",
                a.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
            ),
            None => "stacking degenerated to the marginal fallback".into(),
        },
        loss_note(&report.validation_report, "validation"),
        loss_note(&report.test_report, "test"),
        format!("catalog rows: {rows}"),
    ];
    Ok(RunOutcome {
        outputs: vec!["model.json".into(), "losses.jsonl".into(), "catalog.csv".into()],
        details: json!({"manifest": report.manifest, "alpha": alpha}),
        notes,
    })
}

pub(super) fn select_vars(cfg: &FitConfig) -> Result<RunOutcome> {
    if cfg.selection == SelectionMode::None {
        return Err(Error::Config(
            "field `selection`: select-vars needs `stepwise` or `exhaustive`".into(),
        ));
    }
    create_out_dir(&cfg.out_dir)?;
    let (report, _, _, _) = run_fit(cfg, cfg.selection)?;
    let selection_artifact = json!({
        "beta_trace": report.beta_trace,
        "m_table": report.m_table,
        "cde_trace": report.cde_trace,
        "exhaustive": report.exhaustive,
        "trials": report.trials,
    });
    write_json(&cfg.out_dir.join("selection.json"), &selection_artifact)?;
    let chosen = match &report.manifest.model {
        ModelManifest::Stacked { cde_subset, .. } => format!("{cde_subset:?}"),
        ModelManifest::Marginal { .. } => "none (marginal fallback)".into(),
    };
    Ok(RunOutcome {
        outputs: vec!["selection.json".into()],
        details: serde_json::to_value(&report.manifest)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?,
        notes: vec![
            format!("weight-model covariates: {:?}", report.manifest.beta_subset),
            format!("density-model covariates: {chosen}"),
        ],
    })
}

pub(super) fn pipeline(cfg: &FitConfig) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let (report, stats, unlabeled, names) = run_fit(cfg, cfg.selection)?;
    let saved = SavedModel {
        model: report.model.clone(),
        standardization: stats,
        covariate_names: names,
        grid_size: cfg.grid_size,
    };
    saved.save(&cfg.out_dir.join("model.json"))?;
    let artifacts = json!({
        "manifest": report.manifest,
        "beta_trace": report.beta_trace,
        "m_table": report.m_table,
        "cde_trace": report.cde_trace,
        "exhaustive": report.exhaustive,
        "trials": report.trials,
        "series_table": report.series_table,
        "nn_table": report.nn_table,
    });
    write_json(&cfg.out_dir.join("pipeline.json"), &artifacts)?;
    write_loss_rows(
        &cfg.out_dir.join("losses.jsonl"),
        &[report.validation_report.clone(), report.test_report.clone()],
    )?;
    let rows = emit_catalog(&report.model, &unlabeled, &cfg.out_dir.join("catalog.csv"))?;
    Ok(RunOutcome {
        outputs: vec![
            "model.json".into(),
            "pipeline.json".into(),
            "losses.jsonl".into(),
            "catalog.csv".into(),
        ],
        details: serde_json::to_value(&report.manifest)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?,
        notes: vec![
            loss_note(&report.validation_report, "validation"),
            loss_note(&report.test_report, "test"),
            format!("catalog rows: {rows}"),
        ],
    })
}

/// What `evaluate` scores: a saved model, or a catalog aligned with the
/// labeled table's rows.
enum Scored {
    Model(Box<SavedModel>),
    Catalog(Vec<DensityGrid>),
}

pub(super) fn evaluate(
    cfg: &EvaluateConfig,
    variant: LossVariant,
    model: Option<&Path>,
    catalog: Option<&Path>,
) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let labeled_raw = load_table(&cfg.labeled, true)?;
    let scored = match (model, catalog) {
        (Some(m), None) => Scored::Model(Box::new(SavedModel::load(m)?)),
        (None, Some(c)) => {
            let grids = crate::grid::read_catalog(c)?;
            if grids.len() != labeled_raw.n() {
                return Err(Error::InvalidData(format!(
                    "catalog has {} rows but the labeled table has {}",
                    grids.len(),
                    labeled_raw.n()
                )));
            }
            Scored::Catalog(grids)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "pass exactly one of --model and --catalog".into(),
            ))
        }
    };

    // The rows the loss iterates over: model scoring standardizes them with
    // the model's recorded statistics; catalog scoring keys raw rows.
    let labeled_eval = match &scored {
        Scored::Model(saved) => saved.prepare(&labeled_raw)?,
        Scored::Catalog(_) => labeled_raw.clone(),
    };

    let weights: Option<Vec<f64>> = match (&variant, &cfg.weight_model) {
        (LossVariant::ShiftCorrected, Some(path)) => {
            Some(SavedWeightModel::load(path)?.weights_for(&labeled_raw)?)
        }
        (LossVariant::ShiftCorrected, None) => Some(vec![1.0; labeled_raw.n()]),
        _ => None,
    };
    let unlabeled_eval: Option<Sample> = match &variant {
        LossVariant::ShiftCorrected => {
            let path = cfg.unlabeled.as_ref().ok_or_else(|| {
                Error::Config("field `unlabeled` is required for --variant shifted".into())
            })?;
            let raw = load_table(path, false)?;
            Some(match &scored {
                Scored::Model(saved) => saved.prepare(&raw)?,
                Scored::Catalog(_) => {
                    return Err(Error::InvalidArgument(
                        "the shifted variant needs a saved model; one catalog cannot \
                         cover both evaluation tables"
                            .into(),
                    ))
                }
            })
        }
        _ => None,
    };

    let mut report = match &scored {
        Scored::Model(saved) => {
            let predict = |x: &ndarray::ArrayView1<'_, f64>| saved.model.predict(x);
            score(&predict, variant, &labeled_eval, weights.as_deref(), unlabeled_eval.as_ref(), cfg)?
        }
        Scored::Catalog(grids) => {
            let lookup = catalog_lookup(grids, &labeled_eval)?;
            let predict = |x: &ndarray::ArrayView1<'_, f64>| lookup(x);
            score(&predict, variant, &labeled_eval, weights.as_deref(), unlabeled_eval.as_ref(), cfg)?
        }
    };
    report.metadata.insert(
        "source".into(),
        match &scored {
            Scored::Model(_) => "model".into(),
            Scored::Catalog(_) => "catalog".into(),
        },
    );

    write_loss_rows(&cfg.out_dir.join("losses.jsonl"), &[report.clone()])?;
    let note = loss_note(&report, "evaluation");
    Ok(RunOutcome {
        outputs: vec!["losses.jsonl".into()],
        details: serde_json::to_value(&report)
            .map_err(|e| Error::Config(format!("report serialization: {e}")))?,
        notes: vec![note],
    })
}

/// Builds a lookup predictor over a catalog: each evaluation row's
/// covariates map (bitwise) to the catalog row emitted for it.
fn catalog_lookup<'a>(
    grids: &'a [DensityGrid],
    sample: &Sample,
) -> Result<impl Fn(&ndarray::ArrayView1<'_, f64>) -> Result<DensityGrid> + Sync + 'a> {
    let mut map: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    for i in 0..sample.n() {
        let key: Vec<u64> = sample.covariate_row(i).iter().map(|v| v.to_bits()).collect();
        map.entry(key).or_insert(i);
    }
    Ok(move |x: &ndarray::ArrayView1<'_, f64>| {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        match map.get(&key) {
            Some(&i) => Ok(grids[i].clone()),
            None => Err(Error::InvalidArgument(
                "covariate row does not appear in the table the catalog was built from".into(),
            )),
        }
    })
}

fn score(
    predict: &crate::losses::Predictor<'_>,
    variant: LossVariant,
    labeled_eval: &Sample,
    weights: Option<&[f64]>,
    unlabeled_eval: Option<&Sample>,
    cfg: &EvaluateConfig,
) -> Result<LossReport> {
    let report = match variant {
        LossVariant::LabeledOnly => loss_labeled(predict, labeled_eval)?,
        LossVariant::Oracle => loss_oracle(predict, labeled_eval)?,
        LossVariant::ShiftCorrected => {
            let w = weights.expect("weights resolved for the shifted variant");
            let u = unlabeled_eval.expect("unlabeled table resolved for the shifted variant");
            loss_shifted(predict, labeled_eval, w, u)?
        }
    };
    match cfg.bootstrap {
        None => Ok(report),
        Some(b) => {
            let se = match variant {
                LossVariant::LabeledOnly => components_labeled(predict, labeled_eval)?
                    .bootstrap_se(b.replicates, b.seed)?,
                LossVariant::Oracle => components_oracle(predict, labeled_eval)?
                    .bootstrap_se(b.replicates, b.seed)?,
                LossVariant::ShiftCorrected => {
                    let w = weights.expect("weights resolved for the shifted variant");
                    let u = unlabeled_eval.expect("unlabeled table resolved");
                    components_shifted(predict, labeled_eval, w, u)?
                        .bootstrap_se(b.replicates, b.seed)?
                }
            };
            report.with_se(se, b.replicates)
        }
    }
}

pub(super) fn diagnose_cmd(cfg: &DiagnoseConfig, model: &Path) -> Result<RunOutcome> {
    create_out_dir(&cfg.out_dir)?;
    let saved = SavedModel::load(model)?;
    let labeled_raw = load_table(&cfg.labeled, true)?;
    let prepared = saved.prepare(&labeled_raw)?;
    let weights = match &cfg.weight_model {
        Some(path) => SavedWeightModel::load(path)?.weights_for(&labeled_raw)?,
        None => vec![1.0; labeled_raw.n()],
    };
    let report = diagnose(
        &|x| saved.model.predict(x),
        &prepared,
        &weights,
        &cfg.c_grid,
        &cfg.alpha_grid,
        cfg.hpd_alpha,
        cfg.scaling,
    )?;

    write_json(&cfg.out_dir.join("diagnostics.json"), &report)?;
    let qq_rows: Vec<Vec<f64>> = report.qq.iter().map(|p| vec![p.c, p.c_hat]).collect();
    write_csv_table(&cfg.out_dir.join("qq.csv"), "c,c_hat", &qq_rows)?;
    let cov_rows: Vec<Vec<f64>> = report
        .coverage
        .iter()
        .map(|p| vec![p.alpha, p.alpha_hat, p.ci_low, p.ci_high])
        .collect();
    write_csv_table(
        &cfg.out_dir.join("coverage.csv"),
        "alpha,alpha_hat,ci_low,ci_high",
        &cov_rows,
    )?;

    Ok(RunOutcome {
        outputs: vec!["diagnostics.json".into(), "qq.csv".into(), "coverage.csv".into()],
        details: json!({
            "ks_statistic": report.ks_statistic,
            "ks_pvalue": report.ks_pvalue,
            "hpd_alpha": report.hpd_alpha,
            "n_test": labeled_raw.n(),
        }),
        notes: vec![format!(
            "KS statistic {:.4} (p = {:.4})",
            report.ks_statistic, report.ks_pvalue
        )],
    })
}

/// Counts the data rows of a delimited table without loading it.
fn count_data_rows(path: &Path) -> Result<usize> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::table(path, e.to_string()))?;
    Ok(reader.into_records().count())
}

pub(super) fn predict(model: &Path, input: &Path, out_dir: &Path) -> Result<RunOutcome> {
    create_out_dir(out_dir)?;
    let saved = SavedModel::load(model)?;
    let path = out_dir.join("catalog.csv");
    let rows = if count_data_rows(input)? == 0 {
        // Header-only input: a catalog with the grid header and no rows.
        let header = format!("{},0,1\n", saved.grid_size);
        std::fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
        0
    } else {
        let table = load_table(input, false)?;
        let prepared = saved.prepare(&table)?;
        emit_catalog(&saved.model, &prepared, &path)?
    };
    Ok(RunOutcome {
        outputs: vec!["catalog.csv".into()],
        details: json!({"rows": rows, "grid_size": saved.grid_size}),
        notes: vec![format!("catalog rows: {rows}")],
    })
}

/// A functional of the predicted conditional density, resolved from the
/// command line.
pub enum FunctionalSpec {
    /// ∫ z f̂(z|x) dz.
    Mean,
    /// ∫ z² f̂(z|x) dz.
    SecondMoment,
    /// F̂(t|x) for a fixed threshold t.
    ProbBelow(f64),
    /// The generalized inverse F̂⁻¹(c|x) at a fixed level c.
    Quantile(f64),
    /// ∫ g(z) f̂(z|x) dz for user-supplied grid values of g.
    Custom(Vec<f64>),
}

impl FunctionalSpec {
    fn name(&self) -> &'static str {
        match self {
            FunctionalSpec::Mean => "mean",
            FunctionalSpec::SecondMoment => "second-moment",
            FunctionalSpec::ProbBelow(_) => "prob-below",
            FunctionalSpec::Quantile(_) => "quantile",
            FunctionalSpec::Custom(_) => "custom",
        }
    }

    fn arg(&self) -> Option<f64> {
        match self {
            FunctionalSpec::ProbBelow(t) | FunctionalSpec::Quantile(t) => Some(*t),
            _ => None,
        }
    }

    fn apply(&self, density: &DensityGrid) -> Result<f64> {
        match self {
            FunctionalSpec::Mean => density.expected_functional(&density.knots()),
            FunctionalSpec::SecondMoment => {
                let g: Vec<f64> = density.knots().iter().map(|z| z * z).collect();
                density.expected_functional(&g)
            }
            FunctionalSpec::ProbBelow(t) => density.cdf(*t),
            FunctionalSpec::Quantile(c) => density.quantile(*c),
            FunctionalSpec::Custom(g) => density.expected_functional(g),
        }
    }
}

/// Parses a file of G comma- or whitespace-separated grid values of g(z).
pub(super) fn read_functional_values(path: &Path, grid_size: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::table(path, format!("bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    if values.len() != grid_size {
        return Err(Error::InvalidArgument(format!(
            "functional file has {} values but the model's grid has {grid_size} knots",
            values.len()
        )));
    }
    Ok(values)
}

pub(super) fn functional(
    model: &Path,
    input: &Path,
    spec: &FunctionalSpec,
    out_dir: &Path,
) -> Result<RunOutcome> {
    create_out_dir(out_dir)?;
    let saved = SavedModel::load(model)?;
    let table = load_table(input, false)?;
    let prepared = saved.prepare(&table)?;
    let densities = saved.model.predict_batch(&prepared)?;
    let rows: Vec<Vec<f64>> = densities
        .iter()
        .map(|d| spec.apply(d).map(|v| vec![v]))
        .collect::<Result<_>>()?;
    write_csv_table(&out_dir.join("functional.csv"), "value", &rows)?;
    Ok(RunOutcome {
        outputs: vec!["functional.csv".into()],
        details: json!({
            "kind": spec.name(),
            "arg": spec.arg(),
            "rows": rows.len(),
        }),
        notes: vec![format!("computed {} {} values", rows.len(), spec.name())],
    })
}
