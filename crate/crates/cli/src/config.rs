//! TOML experiment configuration.
//!
//! Every section and field is optional; unknown keys are rejected so typos
//! surface as errors with their line and column. Pair indices are zero-based.

use std::path::{Path, PathBuf};

use depca::estimator::EstimatorOptions;
use depca::eval::GridRange;
use depca::genmodel::{GenerationSpec, InverseGamma};
use depca::qpsolve::{QpOptions, DEFAULT_KKT_TOLERANCE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::matrix_io::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Generate,
    Estimate,
    Evaluate,
    ApproxCheck,
    Mds,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub format: Format,
    pub allow_nan: bool,
    pub input: InputConfig,
    pub generate: GenerateConfig,
    pub preprocess: PreprocessConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("out"),
            format: Format::Csv,
            allow_nan: false,
            input: InputConfig::default(),
            generate: GenerateConfig::default(),
            preprocess: PreprocessConfig::default(),
            estimator: EstimatorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Input files. `data` is the observation matrix for `estimate`, the
/// estimate directory for `evaluate` and the dependency matrix for `mds`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub data: Option<PathBuf>,
    /// True mixing matrix, needed by `evaluate`.
    pub mixing: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Independent,
    Block,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawConfig {
    pub shape: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub kind: SourceKind,
    pub dim: usize,
    pub samples: usize,
    /// Weight laws and active pairs; only read when `kind = "custom"`.
    pub diagonal: Option<LawConfig>,
    pub off_diagonal: Option<LawConfig>,
    pub pattern: Vec<[usize; 2]>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            kind: SourceKind::Block,
            dim: 10,
            samples: 20_000,
            diagonal: None,
            off_diagonal: None,
            pattern: Vec::new(),
        }
    }
}

impl GenerateConfig {
    pub fn spec(&self, seed: u64) -> Result<GenerationSpec> {
        let spec = match self.kind {
            SourceKind::Independent | SourceKind::Block => {
                if self.diagonal.is_some()
                    || self.off_diagonal.is_some()
                    || !self.pattern.is_empty()
                {
                    return Err(CliError::config(
                        "generate: diagonal, off_diagonal and pattern are only allowed with kind = \"custom\"",
                    ));
                }
                if self.kind == SourceKind::Block {
                    if self.dim < 3 {
                        return Err(CliError::config(format!(
                            "generate.dim: block sources need dim >= 3, got {}",
                            self.dim
                        )));
                    }
                    GenerationSpec::block(self.dim, self.samples, seed)
                } else {
                    GenerationSpec::independent(self.dim, self.samples, seed)
                }
            }
            SourceKind::Custom => {
                let law = |l: Option<LawConfig>, field: &str| {
                    let l = l.ok_or_else(|| {
                        CliError::config(format!("generate.{field} is required for custom sources"))
                    })?;
                    InverseGamma::new(l.shape, l.scale)
                        .map_err(|e| CliError::config(format!("generate.{field}: {e}")))
                };
                let diagonal = law(self.diagonal, "diagonal")?;
                let off_diagonal = match self.off_diagonal {
                    Some(_) => law(self.off_diagonal, "off_diagonal")?,
                    None if self.pattern.is_empty() => diagonal,
                    None => law(None, "off_diagonal")?,
                };
                GenerationSpec {
                    dim: self.dim,
                    diagonal,
                    off_diagonal,
                    pattern: self.pattern.iter().map(|p| (p[0], p[1])).collect(),
                    samples: self.samples,
                    seed,
                }
            }
        };
        spec.validate()
            .map_err(|e| CliError::config(format!("generate: {e}")))?;
        if spec.samples < spec.dim {
            return Err(CliError::config(format!(
                "generate.samples: need at least dim = {} samples, got {}",
                spec.dim, spec.samples
            )));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Principal dimensions kept by whitening; all when unset.
    pub dims: Option<usize>,
    /// Subtract each row's mean and rescale rows to the average norm first.
    pub remove_dc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub restarts: usize,
    pub max_outer_iters: usize,
    pub convergence_tol: f64,
    pub initial_step: f64,
    pub minibatch_size: Option<usize>,
    pub lambda: f64,
    pub ica_max_iters: usize,
    pub ica_tol: f64,
    pub kkt_tolerance: f64,
    pub qp_max_iter: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let d = EstimatorOptions::default();
        Self {
            restarts: d.restarts,
            max_outer_iters: d.max_outer_iters,
            convergence_tol: d.convergence_tol,
            initial_step: d.initial_step,
            minibatch_size: d.minibatch_size,
            lambda: d.lambda_sparsity,
            ica_max_iters: d.ica_max_iters,
            ica_tol: d.ica_tol,
            kkt_tolerance: DEFAULT_KKT_TOLERANCE,
            qp_max_iter: None,
        }
    }
}

impl EstimatorConfig {
    pub fn options(&self, seed: u64) -> Result<EstimatorOptions> {
        let opts = EstimatorOptions {
            restarts: self.restarts,
            max_outer_iters: self.max_outer_iters,
            convergence_tol: self.convergence_tol,
            initial_step: self.initial_step,
            minibatch_size: self.minibatch_size,
            lambda_sparsity: self.lambda,
            seed,
            ica_max_iters: self.ica_max_iters,
            ica_tol: self.ica_tol,
            qp: QpOptions {
                kkt_tolerance: self.kkt_tolerance,
                max_iter: self.qp_max_iter,
            },
        };
        opts.validate()
            .map_err(|e| CliError::config(format!("estimator: {e}")))?;
        if !(self.kkt_tolerance > 0.0) {
            return Err(CliError::config(format!(
                "estimator.kkt_tolerance must be positive, got {}",
                self.kkt_tolerance
            )));
        }
        Ok(opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Histogram bins per axis.
    pub bins: usize,
    /// Quantile range of the histogram support on each axis.
    pub quantiles: [f64; 2],
    /// Sparsity weights at which `M` is refitted with `W` held fixed.
    pub lambda_grid: Vec<f64>,
    /// Couplings compared by `approx-check`.
    pub m12: Vec<f64>,
    /// Samples per coupling in `approx-check`.
    pub approx_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 100,
            quantiles: [0.001, 0.999],
            lambda_grid: Vec::new(),
            m12: vec![0.0, 0.25, 0.5, 0.75, 0.95],
            approx_samples: 100_000,
        }
    }
}

impl EvalConfig {
    pub fn range(&self) -> GridRange {
        GridRange::Quantiles(self.quantiles[0], self.quantiles[1])
    }

    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(CliError::config(format!(
                "eval.bins must be at least 2, got {}",
                self.bins
            )));
        }
        let [lo, hi] = self.quantiles;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(CliError::config(format!(
                "eval.quantiles must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi}]"
            )));
        }
        if let Some(l) = self
            .lambda_grid
            .iter()
            .find(|l| !(**l >= 0.0 && l.is_finite()))
        {
            return Err(CliError::config(format!(
                "eval.lambda_grid entries must be finite and non-negative, got {l}"
            )));
        }
        if let Some(m) = self.m12.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(CliError::config(format!(
                "eval.m12 entries must be finite and non-negative, got {m}"
            )));
        }
        if self.approx_samples < 2 {
            return Err(CliError::config("eval.approx_samples must be at least 2"));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    pub fn mode(&self) -> Result<Mode> {
        self.mode
            .ok_or_else(|| CliError::config("no mode selected"))
    }

    /// Checks every setting the selected mode reads, including input paths.
    pub fn validate(&self) -> Result<()> {
        let mode = self.mode()?;
        if self.threads == Some(0) {
            return Err(CliError::config("threads must be positive"));
        }
        self.eval.validate()?;
        self.estimator.options(self.seed)?;
        if matches!(mode, Mode::Generate | Mode::Pipeline) {
            let spec = self.generate.spec(self.seed)?;
            if let Some(k) = self.preprocess.dims {
                if k == 0 || k > spec.dim {
                    return Err(CliError::config(format!(
                        "preprocess.dims must be between 1 and generate.dim = {}, got {k}",
                        spec.dim
                    )));
                }
                if mode == Mode::Pipeline && k != spec.dim {
                    return Err(CliError::config(format!(
                        "pipeline evaluation needs all sources: preprocess.dims = {k} differs from generate.dim = {}",
                        spec.dim
                    )));
                }
            }
        }
        let need = |path: &Option<PathBuf>, what: &str, flag: &str| -> Result<()> {
            match path {
                None => Err(CliError::config(format!(
                    "{mode:?} needs input.{what} (or {flag})"
                ))),
                Some(p) if !p.exists() => Err(CliError::config(format!(
                    "input.{what}: {} does not exist",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        match mode {
            Mode::Estimate | Mode::Mds => need(&self.input.data, "data", "--input")?,
            Mode::Evaluate => {
                need(&self.input.data, "data", "--input")?;
                need(&self.input.mixing, "mixing", "--mixing")?;
                self.generate.spec(self.seed)?;
            }
            Mode::Generate | Mode::ApproxCheck | Mode::Pipeline => {}
        }
        Ok(())
    }
}
