//! Command-line front end.
//!
//! Eleven subcommands cover the full workflow: `simulate` and `clean`
//! prepare data, `fit-weights`/`fit-cde`/`stack`/`select-vars`/`pipeline`
//! fit models, and `evaluate`/`diagnose`/`predict`/`functional` consume
//! them. Each run reads a single JSON configuration document (or explicit
//! flags for the prediction-side commands), writes its artifacts into an
//! output directory, and finishes with a `manifest.json` recording the
//! command, crate version, a SHA-256 digest of the parsed configuration,
//! and every seed and output involved — enough to reproduce the run
//! byte for byte. Failures print a single machine-readable JSON object to
//! stderr and exit nonzero.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cde::CdeModel;
use crate::data::{standardize, ColumnStats, Sample};
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::weights::WeightModel;

pub use commands::FunctionalSpec;
pub use config::{
    BootstrapSpec, CdeMethod, CleanConfig, DiagnoseConfig, EvaluateConfig, FitCdeConfig,
    FitConfig, FitWeightsConfig, SimulateConfig, SimulateMode,
};

/// A fitted conditional density model plus the preprocessing it expects.
///
/// This is the `model.json` artifact. Prediction-time covariates are
/// standardized with the recorded statistics (when present) before they
/// reach the model, so a saved model scores raw tables exactly like the
/// run that fitted it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub model: CdeModel,
    /// Per-column statistics of the labeled training split, or `None` when
    /// the fitting run disabled standardization.
    pub standardization: Option<Vec<ColumnStats>>,
    /// Covariate names of the fitting table, in order; input tables must
    /// match them exactly.
    pub covariate_names: Vec<String>,
    pub grid_size: usize,
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<SavedModel> {
        read_json_file(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }

    /// Applies the recorded preprocessing to a raw table.
    pub fn prepare(&self, sample: &Sample) -> Result<Sample> {
        check_names(sample, &self.covariate_names)?;
        match &self.standardization {
            Some(stats) => standardize(sample, Some(stats)),
            None => Ok(sample.clone()),
        }
    }
}

/// A fitted importance-weight model plus the preprocessing it expects;
/// the `weight_model.json` artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedWeightModel {
    pub model: WeightModel,
    pub standardization: Option<Vec<ColumnStats>>,
    pub covariate_names: Vec<String>,
}

impl SavedWeightModel {
    pub fn load(path: &Path) -> Result<SavedWeightModel> {
        let loaded: SavedWeightModel = read_json_file(path)?;
        loaded.model.validate()?;
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_file(path, self)
    }

    /// Estimated weights β̂ for every row of a raw table.
    pub fn weights_for(&self, sample: &Sample) -> Result<Vec<f64>> {
        check_names(sample, &self.covariate_names)?;
        let prepared = match &self.standardization {
            Some(stats) => standardize(sample, Some(stats))?,
            None => sample.clone(),
        };
        self.model.predict_beta_batch(&prepared)
    }
}

fn check_names(sample: &Sample, expected: &[String]) -> Result<()> {
    if sample.covariate_names() != expected {
        return Err(Error::InvalidArgument(format!(
            "table columns {:?} do not match the model's covariates {:?}",
            sample.covariate_names(),
            expected
        )));
    }
    Ok(())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e.to_string()))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body =
        serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e.to_string()))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

/// Predicts a density for every row of `unlabeled` (already preprocessed to
/// the model's metric) and writes the catalog; returns the row count.
pub fn emit_catalog(model: &CdeModel, unlabeled: &Sample, path: &Path) -> Result<usize> {
    let grids = model.predict_batch(unlabeled)?;
    crate::grid::write_catalog(path, grids.iter())
}

/// What a subcommand hands back to the front end: artifacts written (paths
/// relative to the output directory), a details object for the manifest,
/// the seeds consumed, and human-readable progress notes.
pub(crate) struct RunOutcome {
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
    pub notes: Vec<String>,
}

/// The `manifest.json` written at the end of every successful run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    version: String,
    /// SHA-256 of the canonical JSON serialization of the parsed
    /// configuration (whitespace and key formatting in the input file do
    /// not affect it).
    config_sha256: String,
    seeds: Vec<u64>,
    outputs: Vec<String>,
    details: serde_json::Value,
}

#[derive(Parser)]
#[command(
    name = "cdeshift",
    version = crate::VERSION,
    about = "Conditional density estimation under covariate shift",
    disable_help_subcommand = true
)]
struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a selection-biased labeled/unlabeled pair from a pool, or a
    /// fully synthetic benchmark set with known ground truth.
    Simulate(ConfigArgs),
    /// Rebuild a labeled sample from a pool, dropping rows the importance
    /// weights put outside the unlabeled support.
    Clean(ConfigArgs),
    /// Fit the nearest-neighbor importance-weight model and write per-row
    /// weights.
    FitWeights(ConfigArgs),
    /// Tune a single conditional density estimator family.
    FitCde(FitCdeArgs),
    /// Fit both estimator families on all covariates and stack them.
    Stack(ConfigArgs),
    /// Run covariate selection for the weight model and the estimators.
    SelectVars(ConfigArgs),
    /// Run the full fitting pipeline and write a density catalog.
    Pipeline(ConfigArgs),
    /// Score a saved model or an on-disk catalog with one loss variant.
    Evaluate(EvaluateArgs),
    /// Goodness-of-fit diagnostics for a saved model on a labeled table.
    Diagnose(DiagnoseArgs),
    /// Write a density catalog for new covariate rows.
    Predict(PredictArgs),
    /// Integrate functionals against predicted densities.
    Functional(FunctionalArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct FitCdeArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Estimator family to tune.
    #[arg(long, value_enum)]
    method: CdeMethod,
    /// Tune with the shift-corrected validation loss (needs `m_grid` and
    /// the unlabeled table).
    #[arg(long)]
    corrected: bool,
}

/// Loss variant names accepted by `evaluate --variant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum VariantArg {
    /// Unweighted loss over the labeled rows.
    Labeled,
    /// β̂-weighted loss targeting the unlabeled population.
    Shifted,
    /// Loss over rows drawn from the target population with known
    /// responses.
    Oracle,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> LossVariant {
        match v {
            VariantArg::Labeled => LossVariant::LabeledOnly,
            VariantArg::Shifted => LossVariant::ShiftCorrected,
            VariantArg::Oracle => LossVariant::Oracle,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Loss variant to compute.
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Saved model JSON to score.
    #[arg(long, conflicts_with = "catalog")]
    model: Option<PathBuf>,
    /// Density catalog to score; its rows must align with the labeled
    /// table's rows.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Saved model JSON to diagnose.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    /// Saved model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Covariate table to score (no response column).
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Built-in functionals for `functional --kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FunctionalKind {
    /// Conditional mean ∫ z f̂(z|x) dz.
    Mean,
    /// Conditional second moment ∫ z² f̂(z|x) dz.
    SecondMoment,
    /// Conditional probability F̂(t|x); needs --arg t.
    ProbBelow,
    /// Conditional quantile F̂⁻¹(c|x); needs --arg c.
    Quantile,
}

#[derive(Args, Serialize)]
struct FunctionalArgs {
    /// Saved model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Covariate table to score (no response column).
    #[arg(long)]
    input: PathBuf,
    /// Built-in functional to compute.
    #[arg(long, value_enum, conflicts_with = "values")]
    kind: Option<FunctionalKind>,
    /// Threshold or level for prob-below and quantile.
    #[arg(long)]
    arg: Option<f64>,
    /// File with the model's G grid values of a custom g(z), comma- or
    /// whitespace-separated.
    #[arg(long)]
    values: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Entry point for the binary: parses `args` (including the program name),
/// runs the requested subcommand, and returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests parse as "errors" with exit code 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        // A pre-existing global pool (tests, embedding) is fine to keep.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match dispatch(&cli.command) {
        Ok(notes) => {
            for note in notes {
                println!("{note}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}

/// The machine-readable error object printed to stderr on failure.
fn error_json(e: &Error) -> String {
    let mut value = serde_json::json!({
        "error": e.to_string(),
        "kind": e.kind(),
    });
    if let Error::Stage { stage, .. } = e {
        value["stage"] = serde_json::json!(stage);
    }
    value.to_string()
}

fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)
        .map_err(|e| Error::Config(format!("configuration hashing: {e}")))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes the run manifest and turns the outcome into printable notes.
fn finish<C: Serialize>(
    command: &str,
    cfg: &C,
    seeds: Vec<u64>,
    out_dir: &Path,
    outcome: RunOutcome,
) -> Result<Vec<String>> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: crate::VERSION.to_string(),
        config_sha256: sha256_json(cfg)?,
        seeds,
        outputs: outcome.outputs,
        details: outcome.details,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_json_file(&manifest_path, &manifest)?;
    let mut notes = outcome.notes;
    for name in &manifest.outputs {
        notes.push(format!("wrote {}", out_dir.join(name).display()));
    }
    notes.push(format!("wrote {}", manifest_path.display()));
    Ok(notes)
}

fn dispatch(command: &Command) -> Result<Vec<String>> {
    match command {
        Command::Simulate(a) => {
            let cfg: SimulateConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::simulate(&cfg)?;
            finish("simulate", &cfg, cfg.seeds(), &cfg.out_dir, outcome)
        }
        Command::Clean(a) => {
            let cfg: CleanConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::clean(&cfg)?;
            finish("clean", &cfg, vec![cfg.seed], &cfg.out_dir, outcome)
        }
        Command::FitWeights(a) => {
            let cfg: FitWeightsConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::fit_weights(&cfg)?;
            finish("fit-weights", &cfg, vec![cfg.split.seed], &cfg.out_dir, outcome)
        }
        Command::FitCde(a) => {
            let cfg: FitCdeConfig = config::read_config(&a.config)?;
            cfg.validate(a.method, a.corrected)?;
            let outcome = commands::fit_cde(&cfg, a.method, a.corrected)?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                config: &'a FitCdeConfig,
                method: &'a str,
                corrected: bool,
            }
            let resolved =
                Resolved { config: &cfg, method: a.method.name(), corrected: a.corrected };
            finish("fit-cde", &resolved, vec![cfg.split.seed], &cfg.out_dir, outcome)
        }
        Command::Stack(a) => {
            let cfg: FitConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::stack(&cfg)?;
            let seeds = vec![cfg.split.seed, cfg.seed];
            finish("stack", &cfg, seeds, &cfg.out_dir, outcome)
        }
        Command::SelectVars(a) => {
            let cfg: FitConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::select_vars(&cfg)?;
            let seeds = vec![cfg.split.seed, cfg.seed];
            finish("select-vars", &cfg, seeds, &cfg.out_dir, outcome)
        }
        Command::Pipeline(a) => {
            let cfg: FitConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::pipeline(&cfg)?;
            let seeds = vec![cfg.split.seed, cfg.seed];
            finish("pipeline", &cfg, seeds, &cfg.out_dir, outcome)
        }
        Command::Evaluate(a) => {
            let cfg: EvaluateConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::evaluate(
                &cfg,
                a.variant.into(),
                a.model.as_deref(),
                a.catalog.as_deref(),
            )?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                config: &'a EvaluateConfig,
                variant: VariantArg,
                model: &'a Option<PathBuf>,
                catalog: &'a Option<PathBuf>,
            }
            let resolved = Resolved {
                config: &cfg,
                variant: a.variant,
                model: &a.model,
                catalog: &a.catalog,
            };
            let seeds = cfg.bootstrap.as_ref().map(|b| vec![b.seed]).unwrap_or_default();
            finish("evaluate", &resolved, seeds, &cfg.out_dir, outcome)
        }
        Command::Diagnose(a) => {
            let cfg: DiagnoseConfig = config::read_config(&a.config)?;
            cfg.validate()?;
            let outcome = commands::diagnose_cmd(&cfg, &a.model)?;
            #[derive(Serialize)]
            struct Resolved<'a> {
                config: &'a DiagnoseConfig,
                model: &'a Path,
            }
            let resolved = Resolved { config: &cfg, model: &a.model };
            finish("diagnose", &resolved, vec![], &cfg.out_dir, outcome)
        }
        Command::Predict(a) => {
            let outcome = commands::predict(&a.model, &a.input, &a.out_dir)?;
            finish("predict", a, vec![], &a.out_dir, outcome)
        }
        Command::Functional(a) => {
            let spec = resolve_functional(a)?;
            let outcome = commands::functional(&a.model, &a.input, &spec, &a.out_dir)?;
            finish("functional", a, vec![], &a.out_dir, outcome)
        }
    }
}

/// Turns the `functional` flags into a concrete functional, validating the
/// argument requirements.
fn resolve_functional(a: &FunctionalArgs) -> Result<FunctionalSpec> {
    match (a.kind, &a.values) {
        (Some(kind), None) => match kind {
            FunctionalKind::Mean => require_no_arg(a, FunctionalSpec::Mean),
            FunctionalKind::SecondMoment => require_no_arg(a, FunctionalSpec::SecondMoment),
            FunctionalKind::ProbBelow => {
                let t = a.arg.ok_or_else(|| {
                    Error::InvalidArgument("--kind prob-below needs --arg <threshold>".into())
                })?;
                Ok(FunctionalSpec::ProbBelow(t))
            }
            FunctionalKind::Quantile => {
                let c = a.arg.ok_or_else(|| {
                    Error::InvalidArgument("--kind quantile needs --arg <level>".into())
                })?;
                Ok(FunctionalSpec::Quantile(c))
            }
        },
        (None, Some(path)) => {
            let saved = SavedModel::load(&a.model)?;
            Ok(FunctionalSpec::Custom(commands::read_functional_values(
                path,
                saved.grid_size,
            )?))
        }
        _ => Err(Error::InvalidArgument(
            "pass exactly one of --kind and --values".into(),
        )),
    }
}

fn require_no_arg(a: &FunctionalArgs, spec: FunctionalSpec) -> Result<FunctionalSpec> {
    if a.arg.is_some() {
        return Err(Error::InvalidArgument(format!(
            "--arg is only meaningful with prob-below or quantile, not {}",
            spec_name(&spec)
        )));
    }
    Ok(spec)
}

fn spec_name(spec: &FunctionalSpec) -> &'static str {
    match spec {
        FunctionalSpec::Mean => "mean",
        FunctionalSpec::SecondMoment => "second-moment",
        _ => "this kind",
    }
}
