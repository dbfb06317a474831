//! Approximate (unnormalized) source and data densities.
//!
//! Replacing `|Λ|` by the product of the diagonal weights turns the marginal
//! over `U` into a product of one-dimensional transforms `g_ij`. For the
//! inverse-Gamma weight laws these are `log g(v) = -m sqrt(v) + const`,
//! which gives
//!
//! ```text
//! log p~(s) = -sum_i m_ii φ(s_i) - sum_{i<j} m_ij φ(s_i - s_j)
//! ```
//!
//! with `φ = |.|`, or its smooth surrogate `log cosh` for estimation.

use nalgebra::{DMatrix, DVector};
use std::collections::BinaryHeap;

use crate::genmodel::SignPattern;
use crate::index::UpperIndex;
use crate::{Error, Result};

/// `G(v) = log cosh v` and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nonlinearity {
    pub g: f64,
    /// `tanh v`
    pub g1: f64,
    /// `sech² v`
    pub g2: f64,
    /// `-2 sech² v tanh v`
    pub g3: f64,
}

/// Overflow-safe evaluation of `log cosh v` and derivatives.
#[inline]
pub fn nonlinearity(v: f64) -> Nonlinearity {
    let a = v.abs();
    let e = (-2.0 * a).exp();
    let denom = 1.0 + e;
    let g = a + e.ln_1p() - std::f64::consts::LN_2;
    let t = (1.0 - e) / denom;
    let g1 = if v < 0.0 { -t } else { t };
    let g2 = 4.0 * e / (denom * denom);
    Nonlinearity {
        g,
        g1,
        g2,
        g3: -2.0 * g2 * g1,
    }
}

/// First three derivatives of `log cosh` at `v`, without evaluating `G` itself.
#[inline]
pub fn log_cosh_derivatives(v: f64) -> [f64; 3] {
    let e = (-2.0 * v.abs()).exp();
    let denom = 1.0 + e;
    let t = (1.0 - e) / denom;
    let g1 = if v < 0.0 { -t } else { t };
    let g2 = 4.0 * e / (denom * denom);
    [g1, g2, -2.0 * g2 * g1]
}

#[inline]
pub fn log_cosh(v: f64) -> f64 {
    let a = v.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Which function stands in for `|.|` in the model density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothingPolicy {
    #[default]
    ExactAbs,
    LogCosh,
}

impl SmoothingPolicy {
    #[inline]
    pub fn phi(self, v: f64) -> f64 {
        match self {
            SmoothingPolicy::ExactAbs => v.abs(),
            SmoothingPolicy::LogCosh => log_cosh(v),
        }
    }
}

/// Symmetric, entrywise non-negative dependency matrix `M`.
///
/// The estimation side additionally keeps every row dominated by its
/// diagonal; see [`DependencyMatrix::check_row_dominance`].
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyMatrix(DMatrix<f64>);

impl DependencyMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dim(format!(
                "dependency matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in 0..d {
                let v = m[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::param(format!(
                        "m[{i}][{j}] = {v} must be finite and non-negative"
                    )));
                }
                if v != m[(j, i)] {
                    return Err(Error::param(format!(
                        "dependency matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DMatrix::zeros(d, d))
    }

    /// Builds `M` from its upper-triangular parameter vector.
    pub fn from_upper(d: usize, m: &[f64]) -> Result<Self> {
        let idx = UpperIndex::new(d);
        if m.len() != idx.len() {
            return Err(Error::dim(format!(
                "expected {} parameters for d = {d}, got {}",
                idx.len(),
                m.len()
            )));
        }
        let mut out = DMatrix::zeros(d, d);
        for (p, &(i, j)) in idx.pairs().iter().enumerate() {
            out[(i, j)] = m[p];
            out[(j, i)] = m[p];
        }
        Self::new(out)
    }

    pub fn to_upper(&self) -> Vec<f64> {
        UpperIndex::new(self.dim())
            .pairs()
            .iter()
            .map(|&(i, j)| self.0[(i, j)])
            .collect()
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

    /// Errors unless `sum_{j != i} m_ij <= m_ii + tol` for every row.
    pub fn check_row_dominance(&self, tol: f64) -> Result<()> {
        let d = self.dim();
        let bad: Vec<String> = (0..d)
            .filter_map(|i| {
                let off: f64 = (0..d).filter(|&j| j != i).map(|j| self.0[(i, j)]).sum();
                (off > self.0[(i, i)] + tol).then(|| format!("row {i}: {off} > {}", self.0[(i, i)]))
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Infeasible(bad.join("; ")))
        }
    }
}

/// Unnormalized log-density of the sources.
pub fn log_ptilde_s(s: &[f64], m: &DependencyMatrix, smoothing: SmoothingPolicy) -> Result<f64> {
    let d = m.dim();
    if s.len() != d {
        return Err(Error::dim(format!(
            "source vector has length {} but M is {d}x{d}",
            s.len()
        )));
    }
    let mm = m.as_matrix();
    let mut acc = 0.0;
    for i in 0..d {
        acc += mm[(i, i)] * smoothing.phi(s[i]);
        for j in i + 1..d {
            let w = mm[(i, j)];
            if w != 0.0 {
                acc += w * smoothing.phi(s[i] - s[j]);
            }
        }
    }
    Ok(-acc)
}

/// Unnormalized log-density of an observation: `log p~(W x) + log |det W|`.
pub fn log_ptilde_x(
    x: &[f64],
    w: &DMatrix<f64>,
    m: &DependencyMatrix,
    smoothing: SmoothingPolicy,
) -> Result<f64> {
    if !w.is_square() || w.nrows() != x.len() {
        return Err(Error::dim(format!(
            "unmixing matrix is {}x{} but x has length {}",
            w.nrows(),
            w.ncols(),
            x.len()
        )));
    }
    let det = w.clone().lu().determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular(
            "unmixing matrix has zero determinant".into(),
        ));
    }
    let s = w * DVector::from_column_slice(x);
    Ok(log_ptilde_s(s.as_slice(), m, smoothing)? + det.abs().ln())
}

/// Closed-form `log g(v) = -m sqrt(v)` (additive constant dropped).
pub fn g_closed_form(v: f64, m: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("g is defined for v >= 0, got {v}")));
    }
    Ok(-m * v.sqrt())
}

/// Relative tolerance of [`g_numeric`].
pub const G_QUADRATURE_RTOL: f64 = 1e-8;

/// `∫_0^∞ [sqrt(u)] exp(-v u / 2) p(u) du` by adaptive Gauss–Kronrod quadrature.
///
/// `with_sqrt` selects the diagonal form, which carries the extra `sqrt(u)`
/// left over from the determinant approximation.
pub fn g_numeric(v: f64, weight_density: &dyn Fn(f64) -> f64, with_sqrt: bool) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::Domain(format!("g is defined for v >= 0, got {v}")));
    }
    let integrand = |u: f64| {
        let base = (-0.5 * v * u).exp() * weight_density(u);
        if with_sqrt {
            base * u.sqrt()
        } else {
            base
        }
    };
    integrate_half_line(&integrand, G_QUADRATURE_RTOL)
}

/// Adaptive Gauss–Kronrod (7/15) integration over `(0, ∞)` with `u = t / (1 - t)`.
pub fn integrate_half_line(f: &dyn Fn(f64) -> f64, rtol: f64) -> Result<f64> {
    let mapped = |t: f64| {
        let one_minus = 1.0 - t;
        let u = t / one_minus;
        let val = f(u) / (one_minus * one_minus);
        if val.is_finite() {
            val
        } else {
            0.0
        }
    };
    adaptive_gk15(&mapped, 0.0, 1.0, rtol, 64, 20_000)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_8,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * KRONROD_WEIGHTS[7];
    let mut gauss = fc * GAUSS_WEIGHTS[3];
    for k in 0..7 {
        let x = h * GK_NODES[k];
        let pair = f(c - x) + f(c + x);
        kronrod += KRONROD_WEIGHTS[k] * pair;
        if k % 2 == 1 {
            gauss += GAUSS_WEIGHTS[k / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn adaptive_gk15(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    rtol: f64,
    initial: usize,
    max_segments: usize,
) -> Result<f64> {
    let mut heap = BinaryHeap::new();
    let width = (b - a) / initial as f64;
    for k in 0..initial {
        let lo = a + k as f64 * width;
        let hi = if k + 1 == initial { b } else { lo + width };
        let (value, error) = gk15(f, lo, hi);
        heap.push(Segment {
            a: lo,
            b: hi,
            value,
            error,
        });
    }
    loop {
        let total: f64 = heap.iter().map(|s| s.value).sum();
        let err: f64 = heap.iter().map(|s| s.error).sum();
        if err <= rtol * total.abs() || err <= f64::MIN_POSITIVE {
            return Ok(total);
        }
        if heap.len() >= max_segments {
            return Err(Error::Numerical(format!(
                "quadrature did not converge: estimate {total:e}, error estimate {err:e}, \
                 {} segments, relative tolerance {rtol:e}",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Numerical(format!(
                "quadrature segment [{}, {}] cannot be bisected further; estimate {total:e}, error {err:e}",
                worst.a, worst.b
            )));
        }
        for (lo, hi) in [(worst.a, mid), (mid, worst.b)] {
            let (value, error) = gk15(f, lo, hi);
            heap.push(Segment {
                a: lo,
                b: hi,
                value,
                error,
            });
        }
    }
}

/// Offset added under the square root when the generalized density is smoothed.
pub const GENERAL_SMOOTHING_EPS: f64 = 1e-9;

/// Unnormalized log-density of the sign-pattern generalization:
///
/// `-sum_i θ_ii m_ii φ(s_i) - sum_{i<j} m_ij sqrt(θ_ii s_i² + θ_jj s_j² + 2 θ_ij s_i s_j)`.
pub fn log_ptilde_s_general(
    s: &[f64],
    m: &DependencyMatrix,
    theta: &SignPattern,
    smoothing: SmoothingPolicy,
) -> Result<f64> {
    let d = m.dim();
    if s.len() != d || theta.dim() != d {
        return Err(Error::dim(format!(
            "source length {}, M is {d}x{d}, sign pattern is {1}x{1}",
            s.len(),
            theta.dim()
        )));
    }
    let mm = m.as_matrix();
    let th = theta.as_matrix();
    let mut acc = 0.0;
    for i in 0..d {
        acc += th[(i, i)] * mm[(i, i)] * smoothing.phi(s[i]);
        for j in i + 1..d {
            let w = mm[(i, j)];
            if w == 0.0 {
                continue;
            }
            let squares = th[(i, i)] * s[i] * s[i] + th[(j, j)] * s[j] * s[j];
            let mut radicand = squares + 2.0 * th[(i, j)] * s[i] * s[j];
            if radicand < 0.0 {
                if radicand >= -1e-12 * squares.max(f64::MIN_POSITIVE) {
                    radicand = 0.0;
                } else {
                    return Err(Error::Domain(format!(
                        "negative radicand {radicand} for pair ({i},{j})"
                    )));
                }
            }
            let root = match smoothing {
                SmoothingPolicy::ExactAbs => radicand.sqrt(),
                SmoothingPolicy::LogCosh => (radicand + GENERAL_SMOOTHING_EPS).sqrt(),
            };
            acc += w * root;
        }
    }
    Ok(-acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genmodel::InverseGamma;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    #[test]
    fn nonlinearity_at_origin_and_far_out() {
        let n = nonlinearity(0.0);
        assert_eq!((n.g, n.g1, n.g2), (0.0, 0.0, 1.0));
        assert_relative_eq!(
            nonlinearity(1.0).g,
            0.433_780_830_483_027_2,
            epsilon = 1e-15
        );
        let far = nonlinearity(50.0);
        assert_relative_eq!(far.g, 50.0 - std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(far.g1, 1.0, epsilon = 1e-15);
        assert!(far.g2 < 1e-40 && far.g2 >= 0.0);
        let huge = nonlinearity(-1e308);
        assert!(huge.g.is_finite() && huge.g1 == -1.0);
    }

    #[test]
    fn nonlinearity_derivatives_match_finite_differences() {
        for &v in &[-3.0, -0.7, 0.1, 0.9, 2.5] {
            let h = 1e-6;
            let n = nonlinearity(v);
            let fd1 = (log_cosh(v + h) - log_cosh(v - h)) / (2.0 * h);
            let fd2 = (nonlinearity(v + h).g1 - nonlinearity(v - h).g1) / (2.0 * h);
            let fd3 = (nonlinearity(v + h).g2 - nonlinearity(v - h).g2) / (2.0 * h);
            assert_relative_eq!(n.g1, fd1, epsilon = 1e-8);
            assert_relative_eq!(n.g2, fd2, epsilon = 1e-8);
            assert_relative_eq!(n.g3, fd3, epsilon = 1e-8);
            assert_eq!(log_cosh_derivatives(v), [n.g1, n.g2, n.g3]);
        }
    }

    proptest! {
        #[test]
        fn log_cosh_is_within_ln2_of_abs(v in -1e3f64..1e3) {
            let g = log_cosh(v);
            prop_assert!(g <= v.abs() + 1e-12);
            prop_assert!(v.abs() - g <= std::f64::consts::LN_2 + 1e-12);
        }

        #[test]
        fn smoothing_gap_is_bounded(s in proptest::collection::vec(-20f64..20.0, 3), m01 in 0f64..1.0, m02 in 0f64..1.0) {
            let m = DependencyMatrix::from_upper(3, &[2.0, m01, m02, 1.5, 0.3, 1.0]).unwrap();
            let exact = log_ptilde_s(&s, &m, SmoothingPolicy::ExactAbs).unwrap();
            let smooth = log_ptilde_s(&s, &m, SmoothingPolicy::LogCosh).unwrap();
            let total: f64 = m.to_upper().iter().sum();
            prop_assert!((exact - smooth).abs() <= std::f64::consts::LN_2 * total + 1e-9);
        }
    }

    #[test]
    fn source_density_examples() {
        let ident = DependencyMatrix::identity(2);
        assert_eq!(
            log_ptilde_s(&[1.0, -1.0], &ident, SmoothingPolicy::ExactAbs).unwrap(),
            -2.0
        );
        let coupled = DependencyMatrix::new(dmatrix![1.0, 0.5; 0.5, 1.0]).unwrap();
        assert_eq!(
            log_ptilde_s(&[1.0, -1.0], &coupled, SmoothingPolicy::ExactAbs).unwrap(),
            -3.0
        );
        assert_eq!(
            log_ptilde_s(&[1.0, 1.0], &coupled, SmoothingPolicy::ExactAbs).unwrap(),
            -2.0
        );
        assert!(log_ptilde_s(&[1.0], &coupled, SmoothingPolicy::ExactAbs).is_err());
    }

    #[test]
    fn data_density_examples() {
        let m = DependencyMatrix::new(dmatrix![1.0, 0.3; 0.3, 2.0]).unwrap();
        let x = [0.4, -1.2];
        let eye = DMatrix::identity(2, 2);
        for policy in [SmoothingPolicy::ExactAbs, SmoothingPolicy::LogCosh] {
            assert_eq!(
                log_ptilde_x(&x, &eye, &m, policy).unwrap(),
                log_ptilde_s(&x, &m, policy).unwrap()
            );
        }
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = dmatrix![c, -s; s, c];
        let y = &rot * DVector::from_column_slice(&x);
        assert_relative_eq!(
            log_ptilde_x(&x, &rot, &m, SmoothingPolicy::ExactAbs).unwrap(),
            log_ptilde_s(y.as_slice(), &m, SmoothingPolicy::ExactAbs).unwrap(),
            epsilon = 1e-14
        );
        assert!(log_ptilde_x(
            &x,
            &dmatrix![1.0, 1.0; 1.0, 1.0],
            &m,
            SmoothingPolicy::ExactAbs
        )
        .is_err());
    }

    #[test]
    fn data_density_matches_recomputation() {
        let w = dmatrix![1.2, -0.3, 0.5; 0.1, 0.9, -0.4; -0.7, 0.2, 1.1];
        let m = DependencyMatrix::from_upper(3, &[1.0, 0.2, 0.1, 0.8, 0.3, 1.4]).unwrap();
        let x = [0.3, -0.8, 1.7];
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = (0..3).map(|k| w[(i, k)] * x[k]).sum();
        }
        let mut expected = -(1.0 * log_cosh(s[0]) + 0.8 * log_cosh(s[1]) + 1.4 * log_cosh(s[2]));
        expected -=
            0.2 * log_cosh(s[0] - s[1]) + 0.1 * log_cosh(s[0] - s[2]) + 0.3 * log_cosh(s[1] - s[2]);
        expected += w.determinant().abs().ln();
        assert_relative_eq!(
            log_ptilde_x(&x, &w, &m, SmoothingPolicy::LogCosh).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn closed_form_g() {
        assert_eq!(g_closed_form(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(g_closed_form(4.0, 1.0).unwrap(), -2.0);
        assert!(g_closed_form(-1.0, 1.0).is_err());
    }

    #[test]
    fn quadrature_reproduces_closed_form_up_to_constant() {
        for m in [0.5, 1.0, 2.0] {
            for (law, sqrt) in [
                (InverseGamma::off_diagonal_for(m).unwrap(), false),
                (InverseGamma::diagonal_for(m).unwrap(), true),
            ] {
                let pdf = |u: f64| law.pdf(u);
                let offsets: Vec<f64> = [0.01, 0.1, 0.5, 1.0, 4.0, 10.0, 25.0]
                    .iter()
                    .map(|&v| g_numeric(v, &pdf, sqrt).unwrap().ln() - g_closed_form(v, m).unwrap())
                    .collect();
                for o in &offsets {
                    assert!((o - offsets[0]).abs() < 1e-6, "{offsets:?}");
                }
            }
        }
    }

    #[test]
    fn off_diagonal_transform_at_unit_argument() {
        // exp(-m sqrt(v)) exactly: the inverse-Gamma(1/2, m²/2) law integrates to one.
        let law = InverseGamma::off_diagonal_for(1.0).unwrap();
        let g = g_numeric(1.0, &|u| law.pdf(u), false).unwrap();
        assert_relative_eq!(g, (-1.0f64).exp(), max_relative = 1e-8);
    }

    #[test]
    fn narrow_weight_law_gives_linear_log_g() {
        // Gamma(shape k, rate k / u0) concentrates at u0 as k grows.
        let (k, u0) = (4000.0f64, 1.5f64);
        let rate = k / u0;
        let ln_norm = k * rate.ln() - crate::genmodel::ln_gamma(k);
        let pdf = move |u: f64| {
            if u <= 0.0 {
                0.0
            } else {
                (ln_norm + (k - 1.0) * u.ln() - rate * u).exp()
            }
        };
        for v in [0.5, 1.0, 2.0] {
            let lg = g_numeric(v, &pdf, false).unwrap().ln();
            assert!((lg + v * u0 / 2.0).abs() < 2e-3 * v, "v={v}: {lg}");
        }
    }

    #[test]
    fn log_g_is_decreasing_and_convex_for_gamma_weights() {
        let pdf = |u: f64| u * (-u).exp();
        let grid: Vec<f64> = (0..100).map(|k| 0.1 + k as f64 * 0.1).collect();
        let lg: Vec<f64> = grid
            .iter()
            .map(|&v| g_numeric(v, &pdf, false).unwrap().ln())
            .collect();
        for k in 1..lg.len() - 1 {
            assert!(lg[k + 1] < lg[k]);
            assert!(lg[k + 1] - 2.0 * lg[k] + lg[k - 1] >= -1e-8);
        }
    }

    #[test]
    fn general_density_reduces_to_laplacian_model() {
        let m = DependencyMatrix::from_upper(3, &[1.0, 0.4, 0.2, 1.3, 0.5, 0.9]).unwrap();
        let s = [0.7, -1.1, 0.25];
        assert_eq!(
            log_ptilde_s_general(
                &s,
                &m,
                &SignPattern::laplacian(3),
                SmoothingPolicy::ExactAbs
            )
            .unwrap(),
            log_ptilde_s(&s, &m, SmoothingPolicy::ExactAbs).unwrap()
        );
    }

    #[test]
    fn general_density_sign_patterns() {
        let m = DependencyMatrix::new(dmatrix![1.0, 0.5; 0.5, 1.0]).unwrap();
        let plus = SignPattern::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        // radicand (s1 + s2)^2 = 0
        assert_eq!(
            log_ptilde_s_general(&[1.0, -1.0], &m, &plus, SmoothingPolicy::ExactAbs).unwrap(),
            -2.0
        );
        let zero = SignPattern::new(dmatrix![1.0, 0.0; 0.0, 1.0]).unwrap();
        let s = [0.6, -0.8];
        assert_relative_eq!(
            log_ptilde_s_general(&s, &m, &zero, SmoothingPolicy::ExactAbs).unwrap(),
            -(0.6 + 0.8) - 0.5 * 1.0,
            epsilon = 1e-15
        );
        let smoothed =
            log_ptilde_s_general(&[1.0, -1.0], &m, &plus, SmoothingPolicy::LogCosh).unwrap();
        assert!(smoothed.is_finite());
    }

    #[test]
    fn general_density_tolerates_rounding_in_radicand() {
        // Valid sign patterns keep the radicand non-negative up to rounding.
        let m = DependencyMatrix::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let theta = SignPattern::new(dmatrix![1.0, 1.0; 1.0, 1.0]).unwrap();
        let v = log_ptilde_s_general(&[0.1, -0.1 - 1e-17], &m, &theta, SmoothingPolicy::ExactAbs)
            .unwrap();
        assert_relative_eq!(v, -0.2, epsilon = 1e-12);
    }

    #[test]
    fn dependency_matrix_round_trip_and_validation() {
        let m = DependencyMatrix::from_upper(3, &[1.0, 0.2, 0.3, 2.0, 0.4, 3.0]).unwrap();
        assert_eq!(m.to_upper(), vec![1.0, 0.2, 0.3, 2.0, 0.4, 3.0]);
        assert!(m.check_row_dominance(0.0).is_ok());
        let bad = DependencyMatrix::from_upper(2, &[0.1, 0.5, 1.0]).unwrap();
        assert!(bad.check_row_dominance(1e-10).is_err());
        assert!(DependencyMatrix::new(dmatrix![1.0, -0.1; -0.1, 1.0]).is_err());
        assert!(DependencyMatrix::new(dmatrix![1.0, 0.1; 0.2, 1.0]).is_err());
    }
}
