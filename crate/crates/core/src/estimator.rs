//! Joint estimation of the unmixing matrix and the dependency matrix.
//!
//! Each restart draws a random orthogonal starting point, fits a
//! maximum-likelihood ICA model (`G = log cosh`) by projected gradient descent,
//! fits `M` at that solution, and then alternates one gradient step on `W`
//! with an exact QP solve for `M` until the objective stalls. The restart with
//! the smallest final objective is returned.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::density::{log_cosh, DependencyMatrix};
use crate::preprocess::mean_and_covariance;
use crate::qpsolve::{solve_dependency_qp_from, QPSolution, QpOptions, QpStatus};
use crate::scorematch::{
    assemble_quadratic, normalize_rows, objective_and_grad, objective_j, UnmixingMatrix,
};
use crate::{DataMatrix, Error, Result};

/// `E[log cosh Z]` for standard normal `Z`.
pub const GAUSSIAN_LOG_COSH_MEAN: f64 = 0.374_567_207_491_438;

/// Largest deviation of the sample covariance from identity before warning.
pub const WHITENESS_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub restarts: usize,
    pub max_outer_iters: usize,
    /// Relative objective change over one outer iteration that counts as converged.
    pub convergence_tol: f64,
    pub initial_step: f64,
    /// Rows drawn (without replacement) per outer iteration; `None` uses all data.
    pub minibatch_size: Option<usize>,
    pub lambda_sparsity: f64,
    pub seed: u64,
    pub ica_max_iters: usize,
    pub ica_tol: f64,
    pub qp: QpOptions,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_outer_iters: 500,
            convergence_tol: 1e-6,
            initial_step: 0.1,
            minibatch_size: None,
            lambda_sparsity: 0.0,
            seed: 0,
            ica_max_iters: 1000,
            ica_tol: 1e-9,
            qp: QpOptions::default(),
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::param("at least one restart is required"));
        }
        if !(self.convergence_tol >= 0.0) || !(self.ica_tol >= 0.0) {
            return Err(Error::param("convergence tolerances must be non-negative"));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::param(format!(
                "initial step must be positive, got {}",
                self.initial_step
            )));
        }
        if !(self.lambda_sparsity >= 0.0) || !self.lambda_sparsity.is_finite() {
            return Err(Error::param(format!(
                "sparsity weight must be non-negative, got {}",
                self.lambda_sparsity
            )));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::param("minibatch size must be positive"));
        }
        Ok(())
    }
}

/// Outcome of the step-size search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub step: f64,
    pub value: f64,
    /// `false` when no tried step decreased the objective.
    pub improved: bool,
    pub evaluations: usize,
}

pub const MAX_STEP_HALVINGS: usize = 20;

/// Tries `2μ`, `μ`, `μ/2` and keeps the best; if none beats `current`, keeps
/// halving up to [`MAX_STEP_HALVINGS`] times.
pub fn adaptive_step(
    prev_step: f64,
    current: f64,
    mut objective_at: impl FnMut(f64) -> Result<f64>,
) -> Result<StepOutcome> {
    let mut best = StepOutcome {
        step: prev_step,
        value: f64::INFINITY,
        improved: false,
        evaluations: 0,
    };
    for step in [2.0 * prev_step, prev_step, 0.5 * prev_step] {
        let value = objective_at(step)?;
        best.evaluations += 1;
        if value < best.value {
            best.step = step;
            best.value = value;
        }
    }
    if best.value < current {
        best.improved = true;
        return Ok(best);
    }
    let mut step = 0.5 * prev_step;
    for _ in 0..MAX_STEP_HALVINGS {
        step *= 0.5;
        let value = objective_at(step)?;
        best.evaluations += 1;
        if value < current {
            return Ok(StepOutcome {
                step,
                value,
                improved: true,
                evaluations: best.evaluations,
            });
        }
    }
    Ok(StepOutcome {
        step,
        value: current,
        improved: false,
        evaluations: best.evaluations,
    })
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for k in 0..d {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// `(1/T) sum_t sum_i log cosh(w_iᵀ x_t) - log |det W|`.
pub fn ica_objective(x: &DataMatrix, w: &DMatrix<f64>) -> Result<f64> {
    let det = w.clone().lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular("ICA iterate is singular".into()));
    }
    let y = x * w.transpose();
    let total: f64 = y.iter().map(|&v| log_cosh(v)).sum();
    Ok(total / x.nrows() as f64 - det.abs().ln())
}

fn ica_gradient(x: &DataMatrix, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let y = (x * w.transpose()).map(f64::tanh);
    let inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("ICA iterate is singular".into()))?;
    Ok(y.tr_mul(x) / x.nrows() as f64 - inv.transpose())
}

fn step_on_sphere(w: &DMatrix<f64>, grad: &DMatrix<f64>, step: f64) -> Result<DMatrix<f64>> {
    let mut next = w - grad * step;
    normalize_rows(&mut next)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct IcaFit {
    pub w: UnmixingMatrix,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected gradient descent on the ICA objective from a given start.
pub fn fit_ica_from(
    x: &DataMatrix,
    start: DMatrix<f64>,
    opts: &EstimatorOptions,
) -> Result<IcaFit> {
    let mut w = start;
    normalize_rows(&mut w)?;
    let mut value = ica_objective(x, &w)?;
    let mut step = opts.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.ica_max_iters {
        iterations += 1;
        let grad = ica_gradient(x, &w)?;
        let outcome = adaptive_step(step, value, |mu| match step_on_sphere(&w, &grad, mu) {
            Ok(cand) => ica_objective(x, &cand).or(Ok(f64::INFINITY)),
            Err(_) => Ok(f64::INFINITY),
        })?;
        if !outcome.improved {
            converged = true;
            break;
        }
        w = step_on_sphere(&w, &grad, outcome.step)?;
        step = outcome.step;
        let change = (value - outcome.value).abs() / value.abs().max(f64::MIN_POSITIVE);
        value = outcome.value;
        if change < opts.ica_tol {
            converged = true;
            break;
        }
    }
    Ok(IcaFit {
        w: UnmixingMatrix::new(w)?,
        objective: value,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct IcaInit {
    pub w: UnmixingMatrix,
    pub objective: f64,
    pub restart_objectives: Vec<f64>,
    /// Set when the components look Gaussian, so the unmixing is not identifiable.
    pub non_identifiable: bool,
}

/// Best-of-`restarts` ICA fit from random orthogonal starting points.
pub fn ica_init<R: Rng + ?Sized>(
    x: &DataMatrix,
    opts: &EstimatorOptions,
    rng: &mut R,
) -> Result<IcaInit> {
    opts.validate()?;
    check_whitened(x)?;
    let seeds: Vec<u64> = (0..opts.restarts).map(|_| rng.random()).collect();
    let fits: Vec<Result<IcaFit>> = seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            fit_ica_from(x, random_orthogonal(x.ncols(), &mut r), opts)
        })
        .collect();
    let restart_objectives: Vec<f64> = fits
        .iter()
        .map(|f| f.as_ref().map(|f| f.objective).unwrap_or(f64::INFINITY))
        .collect();
    let best = fits
        .into_iter()
        .filter_map(|f| f.ok())
        .filter(|f| f.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .ok_or_else(|| Error::Estimation(format!("all {} ICA restarts diverged", opts.restarts)))?;
    let non_identifiable = looks_gaussian(x, best.w.as_matrix());
    if non_identifiable {
        log::warn!("estimated components are indistinguishable from Gaussian; the unmixing is not identifiable");
    }
    Ok(IcaInit {
        w: best.w,
        objective: best.objective,
        restart_objectives,
        non_identifiable,
    })
}

/// `Var[log cosh Z]` for standard normal `Z`.
const GAUSSIAN_LOG_COSH_VARIANCE: f64 = 0.189_767_449_172_365_4;

/// Null standard errors a statistic must exceed for a component to count as non-Gaussian.
const GAUSSIANITY_Z_THRESHOLD: f64 = 4.0;

/// Fewer than `d - 1` components detectably non-Gaussian, by either the mean
/// of `log cosh` or the excess kurtosis, each against its standard error
/// under a Gaussian null.
fn looks_gaussian(x: &DataMatrix, w: &DMatrix<f64>) -> bool {
    let y = x * w.transpose();
    let t = y.nrows() as f64;
    let distinct = y
        .column_iter()
        .filter(|col| {
            let mean = col.sum() / t;
            let m2 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
            let m4 = col.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / t;
            let kurtosis_z = (m4 / (m2 * m2) - 3.0).abs() / (24.0 / t).sqrt();
            let sd = m2.sqrt();
            let lc = col.iter().map(|v| log_cosh((v - mean) / sd)).sum::<f64>() / t;
            let log_cosh_z =
                (lc - GAUSSIAN_LOG_COSH_MEAN).abs() / (GAUSSIAN_LOG_COSH_VARIANCE / t).sqrt();
            kurtosis_z > GAUSSIANITY_Z_THRESHOLD || log_cosh_z > GAUSSIANITY_Z_THRESHOLD
        })
        .count();
    distinct + 1 < y.ncols()
}

fn check_whitened(x: &DataMatrix) -> Result<()> {
    let d = x.ncols();
    if x.nrows() < d || d < 1 {
        return Err(Error::Input(format!(
            "need at least as many samples as dimensions, got {}x{d}",
            x.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("data matrix has non-finite entries".into()));
    }
    let (_, cov) = mean_and_covariance(x)?;
    let dev = (cov - DMatrix::identity(d, d)).amax();
    if dev > WHITENESS_TOLERANCE {
        log::warn!("input is not whitened: covariance deviates from identity by {dev:.3}");
    }
    Ok(())
}

/// Fits `M` at fixed `W` by the constrained QP, optionally warm-started.
pub fn fit_dependency(
    x: &DataMatrix,
    w: &UnmixingMatrix,
    lambda: f64,
    qp: &QpOptions,
    warm: Option<&DVector<f64>>,
) -> Result<QPSolution> {
    let q = assemble_quadratic(x, w)?;
    let sol = solve_dependency_qp_from(&q, w.dim(), lambda, qp, warm)?;
    if sol.status == QpStatus::MaxIter {
        log::warn!(
            "dependency QP hit its iteration limit (KKT residual {:e})",
            sol.kkt_residual
        );
    }
    Ok(sol)
}

/// ICA solution with the best ICA objective and the dependency matrix fitted at it.
#[derive(Debug, Clone)]
pub struct IcaBaseline {
    pub w: UnmixingMatrix,
    pub m: DependencyMatrix,
    pub ica_objective: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub w_hat: UnmixingMatrix,
    pub m_hat: DependencyMatrix,
    /// Penalized objective after every outer iteration of the selected restart, start first.
    pub objective_trace: Vec<f64>,
    /// Final full-data objective of every restart.
    pub restart_objectives: Vec<f64>,
    pub selected_restart: usize,
    pub converged: bool,
    pub outer_iterations: usize,
    pub ica: IcaBaseline,
    pub non_identifiable: bool,
}

struct RestartRun {
    ica: IcaFit,
    ica_m: DependencyMatrix,
    ica_value: f64,
    w: UnmixingMatrix,
    m: DependencyMatrix,
    trace: Vec<f64>,
    value: f64,
    converged: bool,
    outer_iterations: usize,
}

fn penalized(value: f64, m: &DependencyMatrix, lambda: f64) -> f64 {
    value + lambda * m.to_upper().iter().sum::<f64>()
}

fn run_restart(x: &DataMatrix, opts: &EstimatorOptions, seed: u64) -> Result<RestartRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = x.ncols();
    let ica = fit_ica_from(x, random_orthogonal(d, &mut rng), opts)?;
    let lambda = opts.lambda_sparsity;
    let sol = fit_dependency(x, &ica.w, lambda, &opts.qp, None)?;
    let ica_m = sol.dependency_matrix(d)?;
    let ica_value = sol.objective;

    let mut w = ica.w.clone();
    let mut m_vec = sol.m.clone();
    let mut m = ica_m.clone();
    let mut value = ica_value;
    let mut trace = vec![value];
    let mut step = opts.initial_step;
    let mut converged = opts.max_outer_iters == 0;
    let mut outer_iterations = 0;

    while outer_iterations < opts.max_outer_iters {
        outer_iterations += 1;
        let batch = opts
            .minibatch_size
            .filter(|&b| b < x.nrows())
            .map(|b| select_rows(x, &sample_indices(&mut rng, x.nrows(), b).into_vec()));
        let data = batch.as_ref().unwrap_or(x);
        let (raw, grad) = objective_and_grad(data, &w, &m)?;
        let current = penalized(raw, &m, lambda);
        let outcome = adaptive_step(step, current, |mu| {
            let cand = match step_on_sphere(w.as_matrix(), &grad, mu).and_then(UnmixingMatrix::new)
            {
                Ok(c) => c,
                Err(_) => return Ok(f64::INFINITY),
            };
            Ok(penalized(objective_j(data, &cand, &m)?, &m, lambda))
        })?;
        if !outcome.improved {
            converged = true;
            break;
        }
        step = outcome.step;
        w = UnmixingMatrix::new(step_on_sphere(w.as_matrix(), &grad, step)?)?;
        let sol = fit_dependency(data, &w, lambda, &opts.qp, Some(&m_vec))?;
        m_vec = sol.m.clone();
        m = sol.dependency_matrix(d)?;
        let next = sol.objective;
        if !next.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became {next} at outer iteration {outer_iterations} (step {step:e})"
            )));
        }
        trace.push(next);
        let change = (value - next).abs() / value.abs().max(f64::MIN_POSITIVE);
        value = next;
        if batch.is_none() && change < opts.convergence_tol {
            converged = true;
            break;
        }
    }
    if opts.minibatch_size.is_some() {
        value = penalized(objective_j(x, &w, &m)?, &m, lambda);
    }
    Ok(RestartRun {
        ica,
        ica_m,
        ica_value,
        w,
        m,
        trace,
        value,
        converged,
        outer_iterations,
    })
}

fn select_rows(x: &DataMatrix, rows: &[usize]) -> DataMatrix {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Runs every restart and keeps the one with the smallest final objective.
pub fn estimate<R: Rng + ?Sized>(
    x: &DataMatrix,
    opts: &EstimatorOptions,
    rng: &mut R,
) -> Result<EstimationResult> {
    opts.validate()?;
    check_whitened(x)?;
    let seeds: Vec<u64> = (0..opts.restarts).map(|_| rng.random()).collect();
    let runs: Vec<Result<RestartRun>> =
        seeds.par_iter().map(|&s| run_restart(x, opts, s)).collect();

    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(r) if r.value.is_finite() => ok.push((k, r)),
            Ok(r) => failures.push(format!("restart {k}: final objective {}", r.value)),
            Err(e) => failures.push(format!("restart {k}: {e}")),
        }
    }
    if ok.is_empty() {
        return Err(Error::Estimation(format!(
            "every restart failed: {}",
            failures.join("; ")
        )));
    }
    for f in &failures {
        log::warn!("{f}");
    }
    let mut restart_objectives = vec![f64::INFINITY; opts.restarts];
    for (k, r) in &ok {
        restart_objectives[*k] = r.value;
    }
    let best_ica = ok
        .iter()
        .min_by(|a, b| a.1.ica.objective.total_cmp(&b.1.ica.objective))
        .map(|(_, r)| IcaBaseline {
            w: r.ica.w.clone(),
            m: r.ica_m.clone(),
            ica_objective: r.ica.objective,
            objective: r.ica_value,
        })
        .expect("non-empty");
    let (selected_restart, best) = ok
        .into_iter()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .expect("non-empty");
    let non_identifiable = looks_gaussian(x, best.w.as_matrix());
    Ok(EstimationResult {
        w_hat: best.w,
        m_hat: best.m,
        objective_trace: best.trace,
        restart_objectives,
        selected_restart,
        converged: best.converged,
        outer_iterations: best.outer_iterations,
        ica: best_ica,
        non_identifiable,
    })
}
