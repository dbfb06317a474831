//! Score-matching objective for the dependency model.
//!
//! Every term of the log-density has the form `-m_p G(v_p · x)` with
//! `v_p = w_i` for a diagonal parameter and `v_p = w_i - w_j` for a pair.
//! The model score is therefore `ψ = -sum_p m_p G'(u_p) v_p` and its divergence
//! is `-sum_p m_p G''(u_p) |v_p|²`, so
//!
//! ```text
//! J(W, m) = (1/T) sum_t [ |ψ|² / 2 + div ψ ]
//! ```
//!
//! is quadratic in `m` for fixed `W`. Row coefficients `a_i` collect the
//! `m_p G'(u_p)` contributions per row of `W`, which gives `ψ = -Wᵀ a` and
//! `|ψ|² = aᵀ (W Wᵀ) a` at `O(d²)` cost per sample.

use nalgebra::{DMatrix, DVector};

use crate::density::{log_cosh_derivatives, nonlinearity, DependencyMatrix};
use crate::index::UpperIndex;
use crate::{DataMatrix, Error, Result};

/// Row norms farther than this from one trigger a warning.
pub const ROW_NORM_TOLERANCE: f64 = 1e-8;

/// Square, full-rank unmixing matrix; row `i` extracts source `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixingMatrix(DMatrix<f64>);

impl UnmixingMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::dim(format!(
                "unmixing matrix must be square and non-empty, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "unmixing matrix has non-finite entries".into(),
            ));
        }
        let det = w.clone().lu().determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular("unmixing matrix is rank deficient".into()));
        }
        Ok(Self(w))
    }

    /// Rescales every row to unit Euclidean norm.
    pub fn with_unit_rows(mut w: DMatrix<f64>) -> Result<Self> {
        normalize_rows(&mut w)?;
        Self::new(w)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Largest `| |w_i| - 1 |` over rows.
    pub fn row_norm_error(&self) -> f64 {
        self.0
            .row_iter()
            .map(|r| (r.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn normalize_rows(w: &mut DMatrix<f64>) -> Result<()> {
    for i in 0..w.nrows() {
        let n = w.row(i).norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Singular(format!(
                "row {i} of the unmixing matrix has norm {n}"
            )));
        }
        w.row_mut(i).unscale_mut(n);
    }
    Ok(())
}

/// `J(m) = mᵀ H m / 2 + mᵀ b` over the upper-triangular parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticForm {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn value(&self, m: &DVector<f64>) -> f64 {
        0.5 * m.dot(&(&self.h * m)) + m.dot(&self.b)
    }

    pub fn gradient(&self, m: &DVector<f64>) -> DVector<f64> {
        &self.h * m + &self.b
    }
}

/// Per-sample coefficients of `m` in the score (`g`) and its diagonal derivatives (`h`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVectors {
    /// `g[(k, p)]`: coefficient of `m_p` in `ψ_k`.
    pub g: DMatrix<f64>,
    /// `h[(k, p)]`: coefficient of `m_p` in `∂ψ_k / ∂x_k`.
    pub h: DMatrix<f64>,
}

pub fn feature_vectors(x: &[f64], w: &UnmixingMatrix) -> Result<FeatureVectors> {
    let d = w.dim();
    if x.len() != d {
        return Err(Error::dim(format!(
            "sample has length {} but W is {d}x{d}",
            x.len()
        )));
    }
    let wm = w.as_matrix();
    let y = wm * DVector::from_column_slice(x);
    let idx = UpperIndex::new(d);
    let mut g = DMatrix::zeros(d, idx.len());
    let mut h = DMatrix::zeros(d, idx.len());
    for (p, &(i, j)) in idx.pairs().iter().enumerate() {
        let u = if i == j { y[i] } else { y[i] - y[j] };
        let nl = nonlinearity(u);
        for k in 0..d {
            let v = if i == j {
                wm[(i, k)]
            } else {
                wm[(i, k)] - wm[(j, k)]
            };
            g[(k, p)] = -nl.g1 * v;
            h[(k, p)] = -nl.g2 * v * v;
        }
    }
    Ok(FeatureVectors { g, h })
}

fn check_inputs(x: &DataMatrix, w: &UnmixingMatrix, m: Option<&DependencyMatrix>) -> Result<()> {
    let d = w.dim();
    if x.nrows() == 0 {
        return Err(Error::Input("data matrix has no samples".into()));
    }
    if x.ncols() != d {
        return Err(Error::dim(format!(
            "data has {} columns but W is {d}x{d}",
            x.ncols()
        )));
    }
    if let Some(m) = m {
        if m.dim() != d {
            return Err(Error::dim(format!(
                "M is {0}x{0} but W is {d}x{d}",
                m.dim()
            )));
        }
    }
    let err = w.row_norm_error();
    if err > ROW_NORM_TOLERANCE {
        log::warn!("unmixing rows deviate from unit norm by up to {err:e}");
    }
    Ok(())
}

/// `|w_i - w_j|²` (or `|w_i|²` on the diagonal) for every parameter.
fn direction_norms(gram: &DMatrix<f64>, idx: &UpperIndex) -> Vec<f64> {
    idx.pairs()
        .iter()
        .map(|&(i, j)| {
            if i == j {
                gram[(i, i)]
            } else {
                gram[(i, i)] + gram[(j, j)] - 2.0 * gram[(i, j)]
            }
        })
        .collect()
}

/// Projections `W xᵀ` as a `d × T` matrix, one contiguous column per sample.
fn projections(x: &DataMatrix, w: &DMatrix<f64>) -> DMatrix<f64> {
    w * x.transpose()
}

pub fn objective_j(x: &DataMatrix, w: &UnmixingMatrix, m: &DependencyMatrix) -> Result<f64> {
    check_inputs(x, w, Some(m))?;
    let d = w.dim();
    let wm = w.as_matrix();
    let mm = m.as_matrix();
    let gram = wm * wm.transpose();
    let idx = UpperIndex::new(d);
    let norms = direction_norms(&gram, &idx);
    let y = projections(x, wm);
    let mut a = DVector::zeros(d);
    let mut q = DVector::zeros(d);
    let mut total = 0.0;
    for t in 0..x.nrows() {
        let yt = y.column(t);
        a.fill(0.0);
        let mut divergence = 0.0;
        for (p, &(i, j)) in idx.pairs().iter().enumerate() {
            let coef = mm[(i, j)];
            if coef == 0.0 {
                continue;
            }
            let [g1, g2, _] = log_cosh_derivatives(if i == j { yt[i] } else { yt[i] - yt[j] });
            a[i] += coef * g1;
            if i != j {
                a[j] -= coef * g1;
            }
            divergence -= coef * g2 * norms[p];
        }
        gram.mul_to(&a, &mut q);
        total += 0.5 * a.dot(&q) + divergence;
    }
    let value = total / x.nrows() as f64;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "score-matching objective is {value}"
        )));
    }
    Ok(value)
}

/// Objective and its gradient with respect to the entries of `W`.
pub fn objective_and_grad(
    x: &DataMatrix,
    w: &UnmixingMatrix,
    m: &DependencyMatrix,
) -> Result<(f64, DMatrix<f64>)> {
    check_inputs(x, w, Some(m))?;
    let d = w.dim();
    let n_samples = x.nrows();
    let wm = w.as_matrix();
    let mm = m.as_matrix();
    let gram = wm * wm.transpose();
    let idx = UpperIndex::new(d);
    let norms = direction_norms(&gram, &idx);
    let y = projections(x, wm);

    // Coefficients of xᵀ per sample, row-wise; contracted with X by one product at the end.
    let mut data_coef = DMatrix::zeros(d, n_samples);
    let mut score_outer = DMatrix::zeros(d, d);
    let mut direction_coef = DMatrix::zeros(d, d);
    let mut a = DVector::zeros(d);
    let mut q = DVector::zeros(d);
    let mut second = vec![0.0; idx.len()];
    let mut third = vec![0.0; idx.len()];
    let mut total = 0.0;

    for t in 0..n_samples {
        let yt = y.column(t);
        a.fill(0.0);
        let mut divergence = 0.0;
        for (p, &(i, j)) in idx.pairs().iter().enumerate() {
            let coef = mm[(i, j)];
            if coef == 0.0 {
                continue;
            }
            let [g1, g2, g3] = log_cosh_derivatives(if i == j { yt[i] } else { yt[i] - yt[j] });
            second[p] = g2;
            third[p] = g3;
            a[i] += coef * g1;
            if i != j {
                a[j] -= coef * g1;
            }
            divergence -= coef * g2 * norms[p];
        }
        gram.mul_to(&a, &mut q);
        total += 0.5 * a.dot(&q) + divergence;
        // ψ = -Wᵀa, so W ψ = -q.
        let mut col = data_coef.column_mut(t);
        for (p, &(i, j)) in idx.pairs().iter().enumerate() {
            let coef = mm[(i, j)];
            if coef == 0.0 {
                continue;
            }
            let score_proj = if i == j { -q[i] } else { q[j] - q[i] };
            let alpha = -coef * (second[p] * score_proj + third[p] * norms[p]);
            let gamma = -2.0 * coef * second[p];
            col[i] += alpha;
            direction_coef[(i, i)] += gamma;
            if i != j {
                col[j] -= alpha;
                direction_coef[(j, j)] += gamma;
                direction_coef[(i, j)] -= gamma;
                direction_coef[(j, i)] -= gamma;
            }
        }
        score_outer.ger(1.0, &a, &a, 1.0);
    }

    let scale = 1.0 / n_samples as f64;
    let mut grad = &data_coef * x;
    grad += (score_outer + direction_coef) * wm;
    grad *= scale;
    let value = total * scale;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "score-matching objective {value} or its gradient is not finite"
        )));
    }
    Ok((value, grad))
}

pub fn grad_w(x: &DataMatrix, w: &UnmixingMatrix, m: &DependencyMatrix) -> Result<DMatrix<f64>> {
    objective_and_grad(x, w, m).map(|(_, g)| g)
}

/// PSD floor applied to the assembled `H`, relative to its trace.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Exact quadratic form of `J` in the upper-triangular vector of `M`.
///
/// `H = (V Vᵀ) ∘ (Φᵀ Φ / T)` with `V` stacking the directions `v_p` and
/// `Φ[t][p] = G'(v_p · x_t)`.
pub fn assemble_quadratic(x: &DataMatrix, w: &UnmixingMatrix) -> Result<QuadraticForm> {
    check_inputs(x, w, None)?;
    let d = w.dim();
    let n_samples = x.nrows();
    let wm = w.as_matrix();
    let idx = UpperIndex::new(d);
    let n_params = idx.len();
    let y = projections(x, wm);

    // Φᵀ, one contiguous column per sample.
    let mut phi_t = DMatrix::zeros(n_params, n_samples);
    let mut curvature = vec![0.0; n_params];
    for t in 0..n_samples {
        let yt = y.column(t);
        let mut col = phi_t.column_mut(t);
        for (p, &(i, j)) in idx.pairs().iter().enumerate() {
            let [g1, g2, _] = log_cosh_derivatives(if i == j { yt[i] } else { yt[i] - yt[j] });
            col[p] = g1;
            curvature[p] += g2;
        }
    }

    let mut directions = DMatrix::zeros(n_params, d);
    for (p, &(i, j)) in idx.pairs().iter().enumerate() {
        let mut row = directions.row_mut(p);
        row += wm.row(i);
        if i != j {
            row -= wm.row(j);
        }
    }
    let direction_gram = &directions * directions.transpose();
    let scale = 1.0 / n_samples as f64;
    let mut h = (&phi_t * phi_t.transpose()).component_mul(&direction_gram) * scale;
    h = (&h + h.transpose()) * 0.5;
    let b = DVector::from_iterator(
        n_params,
        (0..n_params).map(|p| -curvature[p] * direction_gram[(p, p)] * scale),
    );
    if h.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "quadratic form has non-finite entries".into(),
        ));
    }
    let trace = h.trace();
    let min_eig = h.clone().symmetric_eigenvalues().min();
    if min_eig < -PSD_TOLERANCE * trace.max(1.0) {
        return Err(Error::Numerical(format!(
            "assembled H is not positive semidefinite: smallest eigenvalue {min_eig:e}, trace {trace:e}"
        )));
    }
    Ok(QuadraticForm { h, b })
}
