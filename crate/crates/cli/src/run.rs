//! Mode orchestration, artifact writing and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use depca::density::DependencyMatrix;
use depca::estimator::{estimate, fit_dependency, EstimationResult};
use depca::eval::{
    amari_index, correlation_matrices, density_comparison, error_m, match_permutation,
    mds_embedding, normalize_dependency, off_diagonal_mass, performance_matrix, reference_matrix,
};
use depca::genmodel::{generate_dataset, generate_sources, Dataset, GenerationSpec};
use depca::preprocess::{
    apply_whitening, fit_whitening, remove_dc_and_normalize, unmix_to_original,
};
use depca::scorematch::UnmixingMatrix;
use depca::{rng, DataMatrix};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};
use crate::matrix_io::{self, Format, NanPolicy};

/// Stream ids of the per-stage generators derived from the top-level seed.
pub const STREAM_GENERATE: u64 = 1;
pub const STREAM_ESTIMATE: u64 = 2;
pub const STREAM_APPROX_CHECK: u64 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub mode: Mode,
    pub seed: u64,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub depca_cli: &'static str,
    pub depca: &'static str,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex_digest(
        serde_json::to_string(cfg)
            .expect("config serializes")
            .as_bytes(),
    )
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let manifest = Manifest {
            mode: cfg.mode()?,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            versions: Versions {
                depca_cli: env!("CARGO_PKG_VERSION"),
                depca: depca::VERSION,
            },
            stages: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        };
        Ok(Self { cfg, dir, manifest })
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.manifest.stages.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("{stage} finished in {:.2}s", start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn emit(&mut self, file: String, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push(OutputRecord {
            file,
            sha256: hex_digest(bytes),
        });
        Ok(())
    }

    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let format = self.cfg.format;
        let bytes = match format {
            Format::Csv => matrix_io::encode_csv(name, m).into_bytes(),
            Format::Bin => matrix_io::encode_bin(m),
        };
        self.emit(format!("{name}.{}", format.extension()), &bytes)
    }

    /// Tidy CSV table; always text regardless of the matrix format.
    fn table(&mut self, file: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        self.emit(file.to_string(), text.as_bytes())
    }

    fn note(&mut self, msg: String) {
        log::warn!("{msg}");
        self.manifest.notes.push(msg);
    }

    fn finish(self) -> Result<PathBuf> {
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(self.dir)
    }

    fn nan_policy(&self) -> NanPolicy {
        if self.cfg.allow_nan {
            NanPolicy::Allow
        } else {
            NanPolicy::Reject
        }
    }
}

/// Executes the configured mode and returns the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut run = Run::new(cfg)?;
    match cfg.mode()? {
        Mode::Generate => {
            generate(&mut run)?;
        }
        Mode::Estimate => {
            let x = read(&run, cfg.input.data.as_deref().expect("validated"))?;
            estimate_stage(&mut run, &x)?;
        }
        Mode::Evaluate => evaluate_from_files(&mut run)?,
        Mode::ApproxCheck => approx_check(&mut run)?,
        Mode::Mds => {
            let m = read(&run, cfg.input.data.as_deref().expect("validated"))?;
            let m = DependencyMatrix::new(m)?;
            run.timed("mds", |run| mds(run, &m))?;
        }
        Mode::Pipeline => {
            let (spec, data) = generate(&mut run)?;
            let est = estimate_stage(&mut run, &data.x)?;
            run.timed("evaluate", |run| {
                let ica = (est.result.ica.w.as_matrix(), &est.result.ica.m);
                evaluate(
                    run,
                    &spec,
                    &data.mixing,
                    &est.projection,
                    est.result.w_hat.as_matrix(),
                    &est.result.m_hat,
                    Some(ica),
                )
            })?;
            run.timed("mds", |run| mds(run, &est.result.m_hat))?;
        }
    }
    run.finish()
}

fn read(run: &Run, path: &Path) -> Result<DataMatrix> {
    Ok(matrix_io::read_matrix(path, run.nan_policy())?.data)
}

fn generate(run: &mut Run) -> Result<(GenerationSpec, Dataset)> {
    let spec = run.cfg.generate.spec(run.cfg.seed)?;
    run.timed("generate", |run| {
        let mut rng = rng::stream(run.cfg.seed, STREAM_GENERATE);
        let data = generate_dataset(&spec, &mut rng)?;
        run.matrix("X", &data.x)?;
        run.matrix("A", &data.mixing)?;
        run.matrix("S", &data.sources)?;
        Ok((spec, data))
    })
}

struct Estimated {
    projection: DMatrix<f64>,
    result: EstimationResult,
}

fn estimate_stage(run: &mut Run, x: &DataMatrix) -> Result<Estimated> {
    let (z, whitening) = run.timed("preprocess", |run| {
        let cleaned;
        let x = if run.cfg.preprocess.remove_dc {
            cleaned = remove_dc_and_normalize(x)?;
            &cleaned
        } else {
            x
        };
        let keep = run.cfg.preprocess.dims.unwrap_or(x.ncols());
        let whitening = fit_whitening(x, keep)?;
        let z = apply_whitening(&whitening, x)?;
        run.matrix("V", &whitening.projection)?;
        Ok((z, whitening))
    })?;

    let result = run.timed("estimate", |run| {
        let opts = run.cfg.estimator.options(run.cfg.seed)?;
        let mut rng = rng::stream(run.cfg.seed, STREAM_ESTIMATE);
        Ok(estimate(&z, &opts, &mut rng)?)
    })?;
    if !result.converged {
        run.note(format!(
            "estimator stopped after {} outer iterations without converging",
            result.outer_iterations
        ));
    }
    if result.non_identifiable {
        run.note("more than one estimated component looks Gaussian; those components are not identifiable".into());
    }

    let w = result.w_hat.as_matrix();
    run.matrix("W_hat", w)?;
    run.matrix("W_hat_input", &(w * &whitening.projection))?;
    run.matrix("basis", &unmix_to_original(&whitening, w)?)?;
    run.matrix("M_hat", result.m_hat.as_matrix())?;
    run.matrix("M_hat_normalized", &normalize_dependency(&result.m_hat))?;
    run.matrix("W_ica", result.ica.w.as_matrix())?;
    run.matrix("M_ica", result.ica.m.as_matrix())?;

    let trace = result
        .objective_trace
        .iter()
        .enumerate()
        .map(|(k, v)| vec![k.to_string(), v.to_string()])
        .collect();
    run.table("trace.csv", &["iteration", "objective"], trace)?;
    let restarts = result
        .restart_objectives
        .iter()
        .enumerate()
        .map(|(k, v)| {
            vec![
                k.to_string(),
                v.to_string(),
                (k == result.selected_restart).to_string(),
            ]
        })
        .collect();
    run.table(
        "restarts.csv",
        &["restart", "objective", "selected"],
        restarts,
    )?;

    let sources = &z * w.transpose();
    let corr = correlation_matrices(&sources)?;
    run.matrix("corr_linear", &corr.linear)?;
    run.matrix("corr_energy", &corr.energy)?;

    if !run.cfg.eval.lambda_grid.is_empty() {
        lambda_path(run, &z, &result.w_hat)?;
    }
    Ok(Estimated {
        projection: whitening.projection,
        result,
    })
}

/// Refits `M` along the sparsity grid with `W` held at its estimate.
fn lambda_path(run: &mut Run, z: &DataMatrix, w: &UnmixingMatrix) -> Result<()> {
    let grid = run.cfg.eval.lambda_grid.clone();
    let qp = run.cfg.estimator.options(run.cfg.seed)?.qp;
    let d = w.dim();
    let mut rows = Vec::with_capacity(grid.len());
    let mut warm = None;
    for &lambda in &grid {
        let sol = fit_dependency(z, w, lambda, &qp, warm.as_ref())?;
        let m = sol.dependency_matrix(d)?;
        rows.push(vec![
            lambda.to_string(),
            sol.objective.to_string(),
            sol.m.sum().to_string(),
            off_diagonal_mass(&normalize_dependency(&m)).to_string(),
            sol.kkt_residual.to_string(),
        ]);
        warm = Some(sol.m);
    }
    run.table(
        "lambda_path.csv",
        &[
            "lambda",
            "objective",
            "total_mass",
            "off_diagonal_mass",
            "kkt_residual",
        ],
        rows,
    )
}

fn evaluate(
    run: &mut Run,
    spec: &GenerationSpec,
    mixing: &DMatrix<f64>,
    projection: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    m_hat: &DependencyMatrix,
    ica: Option<(&DMatrix<f64>, &DependencyMatrix)>,
) -> Result<()> {
    let reference = reference_matrix(spec);
    if reference.nrows() != m_hat.dim() {
        return Err(CliError::config(format!(
            "generate.dim = {} does not match the {}-dimensional estimate",
            reference.nrows(),
            m_hat.dim()
        )));
    }
    let mut rows = Vec::new();
    let mut score =
        |method: &str, w: &DMatrix<f64>, m: &DependencyMatrix| -> Result<DMatrix<f64>> {
            let p = performance_matrix(w, mixing, Some(projection))?;
            let matching = match_permutation(&p);
            rows.push(vec![
                method.to_string(),
                amari_index(&p)?.to_string(),
                error_m(m, &reference, &matching)?.to_string(),
                off_diagonal_mass(&normalize_dependency(m)).to_string(),
            ]);
            Ok(p.as_matrix().clone())
        };
    let p = score("full", w_hat, m_hat)?;
    if let Some((w, m)) = ica {
        score("ica", w, m)?;
    }
    run.matrix("P", &p)?;
    run.table(
        "metrics.csv",
        &["method", "amari_index", "error_m", "off_diagonal_mass"],
        rows,
    )
}

/// Loads `name` from `dir` in either format, preferring the configured one.
fn find_matrix(run: &Run, dir: &Path, name: &str) -> Result<Option<DataMatrix>> {
    let preferred = run.cfg.format;
    let other = match preferred {
        Format::Csv => Format::Bin,
        Format::Bin => Format::Csv,
    };
    for format in [preferred, other] {
        let path = dir.join(format!("{name}.{}", format.extension()));
        if path.exists() {
            return Ok(Some(read(run, &path)?));
        }
    }
    Ok(None)
}

fn evaluate_from_files(run: &mut Run) -> Result<()> {
    let dir = run.cfg.input.data.clone().expect("validated");
    let mixing = read(run, run.cfg.input.mixing.as_deref().expect("validated"))?;
    let spec = run.cfg.generate.spec(run.cfg.seed)?;
    let require = |name: &str, found: Option<DataMatrix>| {
        found.ok_or_else(|| {
            CliError::config(format!("{} has no {name}.csv or {name}.bin", dir.display()))
        })
    };
    let w_hat = require("W_hat", find_matrix(run, &dir, "W_hat")?)?;
    let m_hat = DependencyMatrix::new(require("M_hat", find_matrix(run, &dir, "M_hat")?)?)?;
    let projection = require("V", find_matrix(run, &dir, "V")?)?;
    let ica = match (
        find_matrix(run, &dir, "W_ica")?,
        find_matrix(run, &dir, "M_ica")?,
    ) {
        (Some(w), Some(m)) => Some((w, DependencyMatrix::new(m)?)),
        _ => None,
    };
    run.timed("evaluate", |run| {
        evaluate(
            run,
            &spec,
            &mixing,
            &projection,
            &w_hat,
            &m_hat,
            ica.as_ref().map(|(w, m)| (w, m)),
        )
    })
}

fn mds(run: &mut Run, m: &DependencyMatrix) -> Result<()> {
    let emb = mds_embedding(m);
    run.matrix("mds_coords", &emb.coords)?;
    run.matrix("mds_distance", &emb.distance)
}

fn approx_check(run: &mut Run) -> Result<()> {
    let eval = run.cfg.eval.clone();
    run.timed("approx-check", |run| {
        let mut rng = rng::stream(run.cfg.seed, STREAM_APPROX_CHECK);
        let mut rows = Vec::new();
        for &m12 in &eval.m12 {
            let spec = GenerationSpec::pair_with_coupling(m12, eval.approx_samples, run.cfg.seed)?;
            let sources = generate_sources(&spec, &mut rng)?;
            let m = DependencyMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, m12, m12, 1.0]))?;
            let cmp = density_comparison(&sources, &m, eval.bins, eval.range())?;
            for (name, measures) in [
                ("model", cmp.model),
                ("gaussian", cmp.gaussian),
                ("laplace", cmp.laplace),
            ] {
                rows.push(vec![
                    m12.to_string(),
                    name.to_string(),
                    measures.ang.to_string(),
                    measures.kl.to_string(),
                    measures.sq.to_string(),
                ]);
            }
        }
        run.table(
            "approx_check.csv",
            &["m12", "distribution", "ang", "kl", "sq"],
            rows,
        )
    })
}
