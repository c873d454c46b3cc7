//! JSON configuration documents for the command-line front end.
//!
//! Each subcommand reads one JSON document. Unknown fields are rejected and
//! every semantic check names the offending field, so a bad config fails
//! with a machine-actionable message before any work starts. All stochastic
//! behavior flows from seeds recorded here — no subcommand consults ambient
//! randomness or the clock.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cde::{NnTuningGrid, SeriesTuningGrid};
use crate::data::SplitSpec;
use crate::diagnostics::WeightScaling;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_BOOTSTRAP;
use crate::pipeline::{PipelineConfig, SelectionMode};
use crate::simulate::{OracleSpec, SchemeKind};

/// Reads and parses one JSON config document of type `T`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e.to_string()))
}

fn default_true() -> bool {
    true
}

fn default_grid_size() -> usize {
    crate::grid::DEFAULT_GRID_SIZE
}

fn default_bootstrap() -> usize {
    DEFAULT_BOOTSTRAP
}

fn default_selection() -> SelectionMode {
    SelectionMode::Stepwise
}

fn require_path(field: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "field `{field}`: path `{}` does not exist",
            path.display()
        )))
    }
}

fn require_nonempty<T>(field: &str, values: &[T]) -> Result<()> {
    if values.is_empty() {
        Err(Error::Config(format!("field `{field}` must not be empty")))
    } else {
        Ok(())
    }
}

/// Config for `simulate`: draw a dataset, either by rejection-sampling a
/// labeled pool table or from the fully synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub out_dir: PathBuf,
    pub mode: SimulateMode,
}

/// The two data sources `simulate` can draw from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    /// Rejection-sample a labeled pool into a selection-biased labeled
    /// sample; the unlabeled output is an unbiased draw from the same pool
    /// with responses dropped.
    Scheme {
        pool: PathBuf,
        scheme: SchemeKind,
        /// Column the selection probability acts on; its values must lie in
        /// [0,1].
        bias_column: String,
        seed: u64,
        /// Unlabeled rows drawn uniformly without replacement; the whole
        /// pool when absent.
        #[serde(default)]
        n_unlabeled: Option<usize>,
    },
    /// Fully synthetic labeled/unlabeled pair with closed-form ground
    /// truth; also writes the unlabeled responses for oracle scoring.
    Oracle(OracleSpec),
}

impl SimulateConfig {
    pub fn validate(&self) -> Result<()> {
        if let SimulateMode::Scheme { pool, n_unlabeled, .. } = &self.mode {
            require_path("mode.scheme.pool", pool)?;
            if let Some(k) = n_unlabeled {
                if *k == 0 {
                    return Err(Error::Config(
                        "field `mode.scheme.n_unlabeled` must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The seeds this run consumes.
    pub fn seeds(&self) -> Vec<u64> {
        match &self.mode {
            SimulateMode::Scheme { seed, .. } => vec![*seed],
            SimulateMode::Oracle(spec) => vec![spec.seed],
        }
    }
}

/// Config for `clean`: rebuild a labeled sample from a larger pool by
/// dropping rows the unlabeled data cannot see (preliminary weight zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanConfig {
    /// The larger labeled pool to draw replacement rows from.
    pub pool: PathBuf,
    /// The labeled sample the preliminary weight model is fitted on.
    pub current: PathBuf,
    pub unlabeled: PathBuf,
    pub out_dir: PathBuf,
    /// Rows the cleaned sample must contain.
    pub target_size: usize,
    /// M values scanned for the preliminary weight model.
    pub prelim_m_grid: Vec<usize>,
    /// Seed of the shuffle that picks among nonzero-weight pool rows.
    pub seed: u64,
    /// Standardize covariates (statistics from `current`) before the
    /// distance-based weight model; the cleaned output keeps raw values.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        require_path("pool", &self.pool)?;
        require_path("current", &self.current)?;
        require_path("unlabeled", &self.unlabeled)?;
        require_nonempty("prelim_m_grid", &self.prelim_m_grid)?;
        if self.target_size == 0 {
            return Err(Error::Config("field `target_size` must be positive".into()));
        }
        Ok(())
    }
}

/// Config for `fit-weights`: select M on a validation split and write the
/// fitted weight model plus per-row weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitWeightsConfig {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub out_dir: PathBuf,
    pub split: SplitSpec,
    pub m_grid: Vec<usize>,
    /// Covariate column indices used for neighbor distances; all when
    /// absent.
    #[serde(default)]
    pub subset: Option<Vec<usize>>,
    /// Standardize covariates with labeled-training statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl FitWeightsConfig {
    pub fn validate(&self) -> Result<()> {
        require_path("labeled", &self.labeled)?;
        require_path("unlabeled", &self.unlabeled)?;
        require_nonempty("m_grid", &self.m_grid)?;
        self.split.validate()?;
        if let Some(s) = &self.subset {
            require_nonempty("subset", s)?;
        }
        Ok(())
    }
}

/// Which estimator family `fit-cde` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CdeMethod {
    /// Weighted nearest-neighbor histogram.
    Nn,
    /// Weighted kernel-smoothed nearest-neighbor estimator.
    KerNn,
    /// Spectral-series estimator.
    Series,
}

impl CdeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CdeMethod::Nn => "nn",
            CdeMethod::KerNn => "ker-nn",
            CdeMethod::Series => "series",
        }
    }
}

/// Config for `fit-cde`: tune one estimator family on a train/validation
/// split. The family and the corrected/uncorrected choice come from the
/// command line (`--method`, `--corrected`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCdeConfig {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub out_dir: PathBuf,
    pub split: SplitSpec,
    /// M values for the weight model behind the corrected loss; required
    /// with `--corrected`.
    #[serde(default)]
    pub m_grid: Option<Vec<usize>>,
    /// Hyperparameter grid for the nearest-neighbor families.
    #[serde(default)]
    pub nn_grid: Option<NnTuningGrid>,
    /// Hyperparameter grid for the series family.
    #[serde(default)]
    pub series_grid: Option<SeriesTuningGrid>,
    /// Covariate column indices the estimator may use; all when absent.
    #[serde(default)]
    pub subset: Option<Vec<usize>>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl FitCdeConfig {
    pub fn validate(&self, method: CdeMethod, corrected: bool) -> Result<()> {
        require_path("labeled", &self.labeled)?;
        require_path("unlabeled", &self.unlabeled)?;
        self.split.validate()?;
        if corrected {
            match &self.m_grid {
                Some(g) => require_nonempty("m_grid", g)?,
                None => {
                    return Err(Error::Config(
                        "field `m_grid` is required with --corrected".into(),
                    ))
                }
            }
        }
        match method {
            CdeMethod::Nn | CdeMethod::KerNn => {
                let grid = self.nn_grid.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "field `nn_grid` is required with --method {}",
                        method.name()
                    ))
                })?;
                require_nonempty("nn_grid.n_neighbors", &grid.n_neighbors)?;
                match method {
                    CdeMethod::Nn => require_nonempty("nn_grid.bins", &grid.bins)?,
                    _ => require_nonempty("nn_grid.epsilons", &grid.epsilons)?,
                }
            }
            CdeMethod::Series => {
                let grid = self.series_grid.as_ref().ok_or_else(|| {
                    Error::Config("field `series_grid` is required with --method series".into())
                })?;
                require_nonempty("series_grid.epsilons", &grid.epsilons)?;
                require_nonempty("series_grid.n_eigenfunctions", &grid.n_eigenfunctions)?;
                require_nonempty("series_grid.n_response_basis", &grid.n_response_basis)?;
            }
        }
        if let Some(s) = &self.subset {
            require_nonempty("subset", s)?;
        }
        Ok(())
    }
}

/// Shared config for the end-to-end commands `stack`, `select-vars`, and
/// `pipeline`: data paths, the split, every hyperparameter grid, the search
/// mode, and the seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub out_dir: PathBuf,
    pub split: SplitSpec,
    pub m_grid: Vec<usize>,
    pub series_grid: SeriesTuningGrid,
    /// Kernel-family grid; the `bins` axis is ignored by these commands.
    pub nn_grid: NnTuningGrid,
    /// Covariate search mode (`pipeline` and `select-vars`).
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Bootstrap replicates behind reported standard errors.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// Master seed for bootstrap replicate streams.
    pub seed: u64,
    /// Standardize covariates with labeled-training statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        require_path("labeled", &self.labeled)?;
        require_path("unlabeled", &self.unlabeled)?;
        self.split.validate()?;
        require_nonempty("m_grid", &self.m_grid)?;
        require_nonempty("series_grid.epsilons", &self.series_grid.epsilons)?;
        require_nonempty("series_grid.n_eigenfunctions", &self.series_grid.n_eigenfunctions)?;
        require_nonempty("series_grid.n_response_basis", &self.series_grid.n_response_basis)?;
        require_nonempty("nn_grid.n_neighbors", &self.nn_grid.n_neighbors)?;
        require_nonempty("nn_grid.epsilons", &self.nn_grid.epsilons)?;
        if self.grid_size < 2 {
            return Err(Error::Config(format!(
                "field `grid_size` must be at least 2, got {}",
                self.grid_size
            )));
        }
        if self.bootstrap < 2 {
            return Err(Error::Config(format!(
                "field `bootstrap` must be at least 2, got {}",
                self.bootstrap
            )));
        }
        Ok(())
    }

    /// The inner pipeline configuration, with the search mode forced to
    /// `selection`.
    pub fn pipeline_config(&self, selection: SelectionMode) -> PipelineConfig {
        PipelineConfig {
            split: self.split,
            m_grid: self.m_grid.clone(),
            series_grid: self.series_grid.clone(),
            nn_grid: self.nn_grid.clone(),
            selection,
            grid_size: self.grid_size,
            bootstrap: self.bootstrap,
            seed: self.seed,
        }
    }
}

/// Bootstrap request for `evaluate`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
}

/// Config for `evaluate`: score a saved model or an on-disk catalog against
/// an evaluation table. The loss variant and the scored artifact come from
/// the command line (`--variant`, `--model`/`--catalog`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Evaluation rows carrying responses.
    pub labeled: PathBuf,
    /// Unlabeled evaluation rows; required for the shifted variant.
    #[serde(default)]
    pub unlabeled: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Saved weight model whose β̂ weights the shifted variant uses;
    /// all-ones when absent (the uncorrected evaluation).
    #[serde(default)]
    pub weight_model: Option<PathBuf>,
    /// Attach a bootstrap standard error.
    #[serde(default)]
    pub bootstrap: Option<BootstrapSpec>,
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        require_path("labeled", &self.labeled)?;
        if let Some(u) = &self.unlabeled {
            require_path("unlabeled", u)?;
        }
        if let Some(w) = &self.weight_model {
            require_path("weight_model", w)?;
        }
        if let Some(b) = &self.bootstrap {
            if b.replicates < 2 {
                return Err(Error::Config(format!(
                    "field `bootstrap.replicates` must be at least 2, got {}",
                    b.replicates
                )));
            }
        }
        Ok(())
    }
}

fn default_c_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

fn default_alpha_grid() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

fn default_hpd_alpha() -> f64 {
    0.95
}

fn default_scaling() -> WeightScaling {
    WeightScaling::SelfNormalized
}

/// Config for `diagnose`: goodness-of-fit diagnostics of a saved model on a
/// labeled test table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Labeled test rows the diagnostics are computed on.
    pub labeled: PathBuf,
    pub out_dir: PathBuf,
    /// Saved weight model for weighted diagnostics; unweighted when absent.
    #[serde(default)]
    pub weight_model: Option<PathBuf>,
    /// Coverage levels of the Q-Q curve.
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<f64>,
    /// Credible levels of the coverage curve.
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    /// Level of the reported highest-predictive-density regions.
    #[serde(default = "default_hpd_alpha")]
    pub hpd_alpha: f64,
    #[serde(default = "default_scaling")]
    pub scaling: WeightScaling,
}

impl DiagnoseConfig {
    pub fn validate(&self) -> Result<()> {
        require_path("labeled", &self.labeled)?;
        if let Some(w) = &self.weight_model {
            require_path("weight_model", w)?;
        }
        require_nonempty("c_grid", &self.c_grid)?;
        require_nonempty("alpha_grid", &self.alpha_grid)?;
        if !(0.0..1.0).contains(&self.hpd_alpha) {
            return Err(Error::Config(format!(
                "field `hpd_alpha` must lie in [0,1), got {}",
                self.hpd_alpha
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn unknown_fields_are_rejected_with_the_field_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "c.json",
            r#"{"out_dir": "o", "mode": {"oracle": {"dim": 1, "n_labeled": 100,
                "n_unlabeled": 100, "shift": 0.0, "noise": 0.1, "seed": 1}},
                "bogus": 3}"#,
        );
        let err = read_config::<SimulateConfig>(&path).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn missing_required_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "c.json", r#"{"out_dir": "o"}"#);
        let err = read_config::<SimulateConfig>(&path).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
    }

    #[test]
    fn missing_input_path_is_a_config_error_naming_the_field() {
        let cfg = CleanConfig {
            pool: PathBuf::from("/definitely/not/here.csv"),
            current: PathBuf::from("/also/not/here.csv"),
            unlabeled: PathBuf::from("/nor/here.csv"),
            out_dir: PathBuf::from("out"),
            target_size: 10,
            prelim_m_grid: vec![2],
            seed: 1,
            standardize: true,
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.kind(), "config");
        assert!(err.to_string().contains("`pool`"), "{err}");
    }

    #[test]
    fn scheme_kind_round_trips_through_snake_case_json() {
        let json = serde_json::to_string(&SchemeKind::Scheme3).unwrap();
        assert_eq!(json, "\"scheme3\"");
        let back: SchemeKind = serde_json::from_str("{\"custom\":{\"a\":2.0,\"b\":5.0}}").unwrap();
        assert_eq!(back, SchemeKind::Custom { a: 2.0, b: 5.0 });
    }

    #[test]
    fn fit_config_defaults_fill_in_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let labeled = write_file(&dir, "l.csv", "x,z\n0.5,0.5\n");
        let unlabeled = write_file(&dir, "u.csv", "x\n0.5\n");
        let body = format!(
            r#"{{"labeled": {:?}, "unlabeled": {:?}, "out_dir": "o",
                "split": {{"train_fraction": 0.6, "validation_fraction": 0.2,
                           "test_fraction": 0.2, "seed": 1}},
                "m_grid": [2, 4],
                "series_grid": {{"epsilons": [0.05], "n_eigenfunctions": [4],
                                 "n_response_basis": [6]}},
                "nn_grid": {{"n_neighbors": [4], "bins": [], "epsilons": [0.01]}},
                "seed": 7}}"#,
            labeled.to_str().unwrap(),
            unlabeled.to_str().unwrap(),
        );
        let path = write_file(&dir, "c.json", &body);
        let cfg: FitConfig = read_config(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid_size, crate::grid::DEFAULT_GRID_SIZE);
        assert_eq!(cfg.bootstrap, DEFAULT_BOOTSTRAP);
        assert_eq!(cfg.selection, SelectionMode::Stepwise);
        assert!(cfg.standardize);
    }
}
