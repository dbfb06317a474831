//! Constrained quadratic program for the dependency parameters.
//!
//! Minimizes `mᵀ H m / 2 + mᵀ (b + λ 1)` subject to `m ≥ 0` and
//! `sum_{j≠i} m_ij ≤ m_ii`. The feasible set is the cone generated by the
//! columns of an invertible matrix `B`: writing every off-diagonal parameter
//! as itself and every diagonal parameter as `m_ii = s_i + sum_{j≠i} m_ij`
//! with a slack `s_i ≥ 0` maps the coupled constraints onto plain
//! non-negativity `z ≥ 0`. The resulting bound-constrained problem is solved by
//! a primal active-set method whose iterates stay feasible and whose objective
//! never increases.

use nalgebra::{DMatrix, DVector};

use crate::density::DependencyMatrix;
use crate::index::UpperIndex;
use crate::scorematch::QuadraticForm;
use crate::{Error, Result};

/// Tolerance of the returned point against the constraints.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_KKT_TOLERANCE: f64 = 1e-6;

/// Linear constraints of the dependency QP, written as `a_kᵀ m ≤ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// `-m_p ≤ 0`
    NonNegative(usize),
    /// `sum_{j≠i} m_ij - m_ii ≤ 0`
    RowDominance(usize),
}

#[derive(Debug, Clone)]
pub struct ConstraintSet {
    index: UpperIndex,
}

impl ConstraintSet {
    pub fn new(dim: usize) -> Self {
        Self {
            index: UpperIndex::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn n_params(&self) -> usize {
        self.index.len()
    }

    pub fn constraints(&self) -> impl Iterator<Item = Constraint> {
        let p = self.index.len();
        let d = self.index.dim();
        (0..p)
            .map(Constraint::NonNegative)
            .chain((0..d).map(Constraint::RowDominance))
    }

    /// `a_kᵀ m`; non-positive when satisfied.
    pub fn value(&self, c: Constraint, m: &DVector<f64>) -> f64 {
        match c {
            Constraint::NonNegative(p) => -m[p],
            Constraint::RowDominance(i) => {
                let d = self.dim();
                let off: f64 = (0..d)
                    .filter(|&j| j != i)
                    .map(|j| m[self.index.flat(i, j)])
                    .sum();
                off - m[self.index.flat(i, i)]
            }
        }
    }

    pub fn normal(&self, c: Constraint) -> DVector<f64> {
        let mut a = DVector::zeros(self.n_params());
        match c {
            Constraint::NonNegative(p) => a[p] = -1.0,
            Constraint::RowDominance(i) => {
                for j in 0..self.dim() {
                    if j == i {
                        a[self.index.flat(i, i)] = -1.0;
                    } else {
                        a[self.index.flat(i, j)] = 1.0;
                    }
                }
            }
        }
        a
    }

    /// Violated constraints beyond `tol`, formatted for diagnostics.
    pub fn violations(&self, m: &DVector<f64>, tol: f64) -> Vec<String> {
        self.constraints()
            .filter_map(|c| {
                let v = self.value(c, m);
                (v > tol).then(|| match c {
                    Constraint::NonNegative(p) => {
                        let (i, j) = self.index.pair(p);
                        format!("m[{i}][{j}] = {} < 0", m[p])
                    }
                    Constraint::RowDominance(i) => format!("row {i} exceeds its diagonal by {v:e}"),
                })
            })
            .collect()
    }

    /// Generator matrix `B` with `m = B z`.
    fn generator(&self) -> DMatrix<f64> {
        let p = self.n_params();
        let mut b = DMatrix::zeros(p, p);
        for (col, &(i, j)) in self.index.pairs().iter().enumerate() {
            b[(col, col)] = 1.0;
            if i != j {
                b[(self.index.flat(i, i), col)] = 1.0;
                b[(self.index.flat(j, j), col)] = 1.0;
            }
        }
        b
    }

    /// `z = B⁻¹ m`: off-diagonals unchanged, diagonals replaced by their row slack.
    fn to_generator_coords(&self, m: &DVector<f64>) -> DVector<f64> {
        let mut z = m.clone();
        for i in 0..self.dim() {
            z[self.index.flat(i, i)] = -self.value(Constraint::RowDominance(i), m);
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Numerical,
}

#[derive(Debug, Clone)]
pub struct QPSolution {
    pub m: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Multiple of the identity added to `H` before solving (zero if none).
    pub ridge: f64,
    /// Objective after every accepted active-set step, starting point first.
    pub objective_trace: Vec<f64>,
}

impl QPSolution {
    pub fn dependency_matrix(&self, dim: usize) -> Result<DependencyMatrix> {
        DependencyMatrix::from_upper(dim, self.m.as_slice())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub kkt_tolerance: f64,
    /// Defaults to `50 p + 100` active-set steps.
    pub max_iter: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            kkt_tolerance: DEFAULT_KKT_TOLERANCE,
            max_iter: None,
        }
    }
}

pub fn solve_dependency_qp(q: &QuadraticForm, dim: usize, lambda: f64) -> Result<QPSolution> {
    solve_dependency_qp_from(q, dim, lambda, &QpOptions::default(), None)
}

/// As [`solve_dependency_qp`], optionally warm-started from a (feasible) `m`.
pub fn solve_dependency_qp_from(
    q: &QuadraticForm,
    dim: usize,
    lambda: f64,
    opts: &QpOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<QPSolution> {
    let constraints = ConstraintSet::new(dim);
    let p = constraints.n_params();
    validate_problem(q, p, lambda)?;

    let trace = q.h.trace();
    let min_eig = q.h.clone().symmetric_eigenvalues().min();
    let ridge = if min_eig < 1e-12 * trace {
        1e-10 * if trace > 0.0 { trace } else { 1.0 }
    } else {
        0.0
    };
    let mut h = q.h.clone();
    for k in 0..p {
        h[(k, k)] += ridge;
    }
    let linear = q.b.add_scalar(lambda);

    let gen = constraints.generator();
    let qz = gen.transpose() * &h * &gen;
    let qz = (&qz + qz.transpose()) * 0.5;
    let rz = gen.transpose() * &linear;

    let z0 = match warm_start {
        Some(m) if m.len() == p && m.iter().all(|v| v.is_finite()) => {
            constraints.to_generator_coords(m).map(|v| v.max(0.0))
        }
        Some(m) if m.len() != p => {
            return Err(Error::dim(format!(
                "warm start has {} entries, expected {p}",
                m.len()
            )))
        }
        _ => DVector::zeros(p),
    };
    let max_iter = opts.max_iter.unwrap_or(50 * p + 100);
    let outcome = nonnegative_qp(&qz, &rz, z0, max_iter)?;

    let m = &gen * &outcome.z;
    let objective = q.value(&m) + lambda * m.sum();
    let kkt = kkt_residual(q, dim, lambda, &m)?;
    let status = if !outcome.converged {
        QpStatus::MaxIter
    } else if kkt > opts.kkt_tolerance {
        QpStatus::Numerical
    } else {
        QpStatus::Optimal
    };
    if status != QpStatus::Optimal {
        log::warn!("dependency QP finished with status {status:?}, KKT residual {kkt:e}");
    }
    Ok(QPSolution {
        m,
        objective,
        kkt_residual: kkt,
        iterations: outcome.iterations,
        status,
        ridge,
        objective_trace: outcome.trace,
    })
}

fn validate_problem(q: &QuadraticForm, p: usize, lambda: f64) -> Result<()> {
    if q.h.nrows() != p || q.h.ncols() != p || q.b.len() != p {
        return Err(Error::dim(format!(
            "quadratic form is {}x{} with {} linear terms, expected {p}",
            q.h.nrows(),
            q.h.ncols(),
            q.b.len()
        )));
    }
    if q.h.iter().chain(q.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input(
            "quadratic form contains NaN or infinite entries".into(),
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!(
            "sparsity weight must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

struct ActiveSetOutcome {
    z: DVector<f64>,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn nnqp_objective(q: &DMatrix<f64>, r: &DVector<f64>, z: &DVector<f64>) -> f64 {
    0.5 * z.dot(&(q * z)) + r.dot(z)
}

/// Primal active-set method for `min zᵀQz/2 + rᵀz` subject to `z ≥ 0`, `Q` positive definite.
fn nonnegative_qp(
    q: &DMatrix<f64>,
    r: &DVector<f64>,
    mut z: DVector<f64>,
    max_iter: usize,
) -> Result<ActiveSetOutcome> {
    let n = r.len();
    let mut free: Vec<bool> = z.iter().map(|&v| v > 0.0).collect();
    let tol = 1e-12 * (1.0 + r.amax() + q.diagonal().amax());
    let mut trace = vec![nnqp_objective(q, r, &z)];
    let mut iterations = 0;

    loop {
        // Move to the minimizer over the current free set, dropping blocking coordinates.
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| free[k]).collect();
            let target = subspace_minimizer(q, r, &idx)?;
            if target.iter().all(|&v| v > 0.0) {
                z.fill(0.0);
                for (pos, &k) in idx.iter().enumerate() {
                    z[k] = target[pos];
                }
                break;
            }
            let mut step = 1.0f64;
            let mut blocking = idx[0];
            for (pos, &k) in idx.iter().enumerate() {
                if target[pos] <= 0.0 {
                    let ratio = z[k] / (z[k] - target[pos]);
                    if ratio < step {
                        step = ratio;
                        blocking = k;
                    }
                }
            }
            for (pos, &k) in idx.iter().enumerate() {
                z[k] += step * (target[pos] - z[k]);
                if z[k] <= 0.0 || k == blocking {
                    z[k] = 0.0;
                    free[k] = false;
                }
            }
            iterations += 1;
            trace.push(nnqp_objective(q, r, &z));
            if iterations >= max_iter {
                return Ok(ActiveSetOutcome {
                    z,
                    iterations,
                    converged: false,
                    trace,
                });
            }
        }
        trace.push(nnqp_objective(q, r, &z));

        let grad = q * &z + r;
        let entering = (0..n)
            .filter(|&k| !free[k])
            .min_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .filter(|&k| grad[k] < -tol);
        match entering {
            None => {
                return Ok(ActiveSetOutcome {
                    z,
                    iterations,
                    converged: true,
                    trace,
                })
            }
            Some(k) => free[k] = true,
        }
        iterations += 1;
        if iterations >= max_iter {
            return Ok(ActiveSetOutcome {
                z,
                iterations,
                converged: false,
                trace,
            });
        }
    }
}

fn subspace_minimizer(q: &DMatrix<f64>, r: &DVector<f64>, idx: &[usize]) -> Result<DVector<f64>> {
    if idx.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| q[(idx[a], idx[b])]);
    let rhs = DVector::from_fn(idx.len(), |a, _| -r[idx[a]]);
    let chol = sub
        .cholesky()
        .ok_or_else(|| Error::Numerical("reduced QP Hessian is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// Infinity-norm KKT residual of a feasible `m`.
///
/// Multipliers of the active constraints come from a non-negative least-squares
/// fit of the stationarity condition; the residual adds the complementarity
/// violation `sum μ_k |a_kᵀ m|`.
pub fn kkt_residual(q: &QuadraticForm, dim: usize, lambda: f64, m: &DVector<f64>) -> Result<f64> {
    let constraints = ConstraintSet::new(dim);
    let p = constraints.n_params();
    validate_problem(q, p, lambda)?;
    if m.len() != p {
        return Err(Error::dim(format!(
            "m has {} entries, expected {p}",
            m.len()
        )));
    }
    let violated = constraints.violations(m, FEASIBILITY_TOLERANCE);
    if !violated.is_empty() {
        return Err(Error::Infeasible(violated.join("; ")));
    }
    let grad = q.gradient(m).add_scalar(lambda);
    let activity_tol = 1e-9 * (1.0 + m.amax());
    let active: Vec<Constraint> = constraints
        .constraints()
        .filter(|&c| constraints.value(c, m) >= -activity_tol)
        .collect();
    if active.is_empty() {
        return Ok(grad.amax());
    }
    let mut normals = DMatrix::zeros(p, active.len());
    for (k, &c) in active.iter().enumerate() {
        normals.set_column(k, &constraints.normal(c));
    }
    let multipliers = nnls(&normals, &(-&grad))?;
    let stationarity = (&grad + &normals * &multipliers).amax();
    let complementarity: f64 = active
        .iter()
        .zip(multipliers.iter())
        .map(|(&c, &mu)| mu * constraints.value(c, m).abs())
        .sum();
    Ok(stationarity + complementarity)
}

/// Lawson–Hanson non-negative least squares: `min |E μ - f|` subject to `μ ≥ 0`.
pub fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> Result<DVector<f64>> {
    let n = e.ncols();
    let mut mu = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + f.amax()) * (1.0 + e.amax());
    let max_iter = 3 * n + 30;

    for _ in 0..max_iter {
        let grad = e.transpose() * (f - e * &mu);
        let entering = (0..n)
            .filter(|&k| !passive[k])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]))
            .filter(|&k| grad[k] > tol);
        let Some(k) = entering else {
            return Ok(mu);
        };
        passive[k] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = DMatrix::from_fn(e.nrows(), idx.len(), |r, c| e[(r, idx[c])]);
            let target = sub.svd(true, true).solve(f, 1e-12).map_err(|msg| {
                Error::Numerical(format!("least squares on passive set failed: {msg}"))
            })?;
            if target.iter().all(|&v| v > 0.0) {
                mu.fill(0.0);
                for (pos, &k) in idx.iter().enumerate() {
                    mu[k] = target[pos];
                }
                break;
            }
            let mut step = 1.0f64;
            for (pos, &k) in idx.iter().enumerate() {
                if target[pos] <= 0.0 {
                    step = step.min(mu[k] / (mu[k] - target[pos]));
                }
            }
            for (pos, &k) in idx.iter().enumerate() {
                mu[k] += step * (target[pos] - mu[k]);
                if mu[k] <= tol {
                    mu[k] = 0.0;
                    passive[k] = false;
                }
            }
            if idx.iter().all(|&k| !passive[k]) {
                break;
            }
        }
    }
    Ok(mu)
}
