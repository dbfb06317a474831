//! Hierarchical generative model for dependent non-Gaussian sources.
//!
//! For every sample a fresh symmetric weight matrix `U` is drawn, turned into
//! the precision matrix `Λ` of a weighted graph Laplacian (off-diagonal
//! `-u_ij`, diagonal `sum_k u_ik`), and a zero-mean Gaussian vector with that
//! precision is drawn. Marginally over `U` the sources are super-Gaussian and
//! have both linear and energy correlations wherever `u_ij` is active.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::{DataMatrix, Error, Result};

/// Inverse-Gamma law with density proportional to `x^(-shape-1) exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::param(format!(
                "inverse-Gamma shape must be positive, got {shape}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(format!(
                "inverse-Gamma scale must be positive, got {scale}"
            )));
        }
        Ok(Self { shape, scale })
    }

    /// Diagonal weight law whose Laplace-type transform gives `exp(-m |s|)`:
    /// shape 1, scale `m^2 / 2`.
    pub fn diagonal_for(m: f64) -> Result<Self> {
        Self::new(1.0, m * m / 2.0)
    }

    /// Off-diagonal weight law giving `exp(-m |s_i - s_j|)`: shape 1/2, scale `m^2 / 2`.
    pub fn off_diagonal_for(m: f64) -> Result<Self> {
        Self::new(0.5, m * m / 2.0)
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    pub fn mode(&self) -> f64 {
        self.scale / (self.shape + 1.0)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln()
            - ln_gamma(self.shape)
            - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let gamma = Gamma::new(self.shape, 1.0).expect("validated shape");
        loop {
            let g: f64 = gamma.sample(rng);
            let x = self.scale / g;
            if g > 0.0 && x.is_finite() {
                return x;
            }
        }
    }
}

/// `n` independent inverse-Gamma draws (Gamma draw, reciprocal, scale).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(
    shape: f64,
    scale: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let law = InverseGamma::new(shape, scale)?;
    if n == 0 {
        return Err(Error::param("sample count must be at least 1"));
    }
    Ok((0..n).map(|_| law.sample(rng)).collect())
}

/// Symmetric non-negative weights `u_ij` with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        if !u.is_square() {
            return Err(Error::dim(format!(
                "weight matrix must be square, got {}x{}",
                u.nrows(),
                u.ncols()
            )));
        }
        let d = u.nrows();
        for i in 0..d {
            if !(u[(i, i)] > 0.0) || !u[(i, i)].is_finite() {
                return Err(Error::param(format!(
                    "u[{i}][{i}] must be positive, got {}",
                    u[(i, i)]
                )));
            }
            for j in 0..d {
                if !(u[(i, j)] >= 0.0) || !u[(i, j)].is_finite() {
                    return Err(Error::param(format!(
                        "u[{i}][{j}] must be non-negative, got {}",
                        u[(i, j)]
                    )));
                }
                if u[(i, j)] != u[(j, i)] {
                    return Err(Error::param(format!(
                        "weight matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self(u))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Symmetric positive definite precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionMatrix(DMatrix<f64>);

impl PrecisionMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `lambda_ii > sum_{j != i} |lambda_ij|` for every row.
    pub fn is_strictly_diagonally_dominant(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            let off: f64 = (0..d)
                .filter(|&j| j != i)
                .map(|j| self.0[(i, j)].abs())
                .sum();
            self.0[(i, i)] > off
        })
    }

    pub fn is_positive_definite(&self) -> bool {
        self.0.clone().cholesky().is_some()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }
}

/// Deterministic sign pattern for the generalized (Hadamard) precision model.
///
/// Diagonal entries are positive, off-diagonal entries are in `{-1, 0, 1}`
/// and never exceed the diagonal of their row in magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SignPattern(DMatrix<f64>);

impl SignPattern {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if !theta.is_square() {
            return Err(Error::dim("sign pattern must be square"));
        }
        let d = theta.nrows();
        for i in 0..d {
            let tii = theta[(i, i)];
            if !(tii > 0.0) || !tii.is_finite() {
                return Err(Error::param(format!(
                    "theta[{i}][{i}] must be positive, got {tii}"
                )));
            }
            for j in 0..d {
                if i == j {
                    continue;
                }
                let t = theta[(i, j)];
                if t != -1.0 && t != 0.0 && t != 1.0 {
                    return Err(Error::param(format!(
                        "theta[{i}][{j}] must be -1, 0 or 1, got {t}"
                    )));
                }
                if t != theta[(j, i)] {
                    return Err(Error::param(format!(
                        "sign pattern is not symmetric at ({i},{j})"
                    )));
                }
                if tii < t.abs() {
                    return Err(Error::param(format!(
                        "theta[{i}][{i}] = {tii} is smaller than |theta[{i}][{j}]|"
                    )));
                }
            }
        }
        Ok(Self(theta))
    }

    /// Unit diagonal, all off-diagonal entries `-1`: the plain Laplacian model.
    pub fn laplacian(d: usize) -> Self {
        Self(DMatrix::from_fn(
            d,
            d,
            |i, j| if i == j { 1.0 } else { -1.0 },
        ))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Declarative description of a synthetic source distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSpec {
    pub dim: usize,
    /// Law of the diagonal weights `u_ii`.
    pub diagonal: InverseGamma,
    /// Law of the active off-diagonal weights `u_ij`, `(i, j)` in `pattern`.
    pub off_diagonal: InverseGamma,
    /// Active pairs, zero-based with `i < j`.
    pub pattern: Vec<(usize, usize)>,
    pub samples: usize,
    pub seed: u64,
}

impl GenerationSpec {
    /// Independent sources: diagonal shape 2, scale 1, no active pairs.
    pub fn independent(dim: usize, samples: usize, seed: u64) -> Self {
        Self {
            dim,
            diagonal: InverseGamma {
                shape: 2.0,
                scale: 1.0,
            },
            off_diagonal: InverseGamma {
                shape: 2.0,
                scale: 1.0 / 3.0,
            },
            pattern: Vec::new(),
            samples,
            seed,
        }
    }

    /// First three sources dependent: diagonal shape 2 / scale 1, pairs
    /// (0,1), (0,2), (1,2) with shape 2 / scale 1/3.
    pub fn block(dim: usize, samples: usize, seed: u64) -> Self {
        Self {
            pattern: vec![(0, 1), (0, 2), (1, 2)],
            ..Self::independent(dim, samples, seed)
        }
    }

    /// Two sources with weights whose transforms give exactly
    /// `exp(-|s_1| - |s_2| - m12 |s_1 - s_2|)` in the approximate model.
    pub fn pair_with_coupling(m12: f64, samples: usize, seed: u64) -> Result<Self> {
        if !(m12 >= 0.0) {
            return Err(Error::param(format!(
                "coupling must be non-negative, got {m12}"
            )));
        }
        let diagonal = InverseGamma::diagonal_for(1.0)?;
        let (off_diagonal, pattern) = if m12 > 0.0 {
            (InverseGamma::off_diagonal_for(m12)?, vec![(0, 1)])
        } else {
            (InverseGamma::off_diagonal_for(1.0)?, Vec::new())
        };
        Ok(Self {
            dim: 2,
            diagonal,
            off_diagonal,
            pattern,
            samples,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::param(format!(
                "dimension must be at least 2, got {}",
                self.dim
            )));
        }
        if self.samples < 1 {
            return Err(Error::param("sample count must be at least 1"));
        }
        InverseGamma::new(self.diagonal.shape, self.diagonal.scale)?;
        if !self.pattern.is_empty() {
            InverseGamma::new(self.off_diagonal.shape, self.off_diagonal.scale)?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &self.pattern {
            if i >= j || j >= self.dim {
                return Err(Error::param(format!(
                    "pattern pair ({i},{j}) must satisfy i < j < {}",
                    self.dim
                )));
            }
            if !seen.insert((i, j)) {
                return Err(Error::param(format!("pattern pair ({i},{j}) listed twice")));
            }
        }
        Ok(())
    }
}

/// Draws one weight matrix: diagonal from the diagonal law, active pairs
/// from the off-diagonal law, every other entry exactly zero.
pub fn sample_weights<R: Rng + ?Sized>(spec: &GenerationSpec, rng: &mut R) -> Result<WeightMatrix> {
    spec.validate()?;
    Ok(draw_weights(spec, rng))
}

fn draw_weights<R: Rng + ?Sized>(spec: &GenerationSpec, rng: &mut R) -> WeightMatrix {
    let d = spec.dim;
    let mut u = DMatrix::zeros(d, d);
    for i in 0..d {
        u[(i, i)] = spec.diagonal.sample(rng);
    }
    for &(i, j) in &spec.pattern {
        let w = spec.off_diagonal.sample(rng);
        u[(i, j)] = w;
        u[(j, i)] = w;
    }
    WeightMatrix(u)
}

/// Graph Laplacian of the weights: `-u_ij` off the diagonal, `sum_k u_ik` on it.
pub fn build_precision(u: &WeightMatrix) -> PrecisionMatrix {
    let w = u.as_matrix();
    let d = w.nrows();
    let mut lambda = -w.clone();
    for i in 0..d {
        lambda[(i, i)] = w.row(i).sum();
    }
    PrecisionMatrix(lambda)
}

/// Generalized precision `Ω ∘ Θ` where `Ω` has `u_ij` off the diagonal and
/// `sum_k u_ik` on it.
pub fn build_precision_general(u: &WeightMatrix, theta: &SignPattern) -> Result<PrecisionMatrix> {
    if u.dim() != theta.dim() {
        return Err(Error::dim(format!(
            "weights are {0}x{0} but sign pattern is {1}x{1}",
            u.dim(),
            theta.dim()
        )));
    }
    let w = u.as_matrix();
    let d = w.nrows();
    let mut omega = w.clone();
    for i in 0..d {
        omega[(i, i)] = w.row(i).sum();
    }
    Ok(PrecisionMatrix(omega.component_mul(theta.as_matrix())))
}

/// `t` i.i.d. zero-mean Gaussian rows with precision `lambda`.
///
/// With `Λ = L Lᵀ`, `s = L⁻ᵀ z` for standard normal `z` has covariance `Λ⁻¹`.
pub fn sample_sources<R: Rng + ?Sized>(
    lambda: &PrecisionMatrix,
    t: usize,
    rng: &mut R,
) -> Result<DataMatrix> {
    let d = lambda.dim();
    let chol = lambda
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("precision matrix has no Cholesky factor".into()))?;
    let lt = chol.l().transpose();
    let mut out = DMatrix::zeros(t, d);
    let mut z = DVector::zeros(d);
    for row in 0..t {
        for k in 0..d {
            z[k] = rng.sample(StandardNormal);
        }
        let s = lt
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
        out.row_mut(row).copy_from(&s.transpose());
    }
    Ok(out)
}

/// Output of [`generate_dataset`]: observations `x = S Aᵀ`, the mixing matrix
/// and the standardized sources.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DataMatrix,
    pub mixing: DMatrix<f64>,
    pub sources: DataMatrix,
}

/// Condition number above which a drawn mixing matrix is rejected.
pub const MAX_MIXING_CONDITION: f64 = 1e12;
const MIXING_ATTEMPTS: usize = 10;

/// Draws standardized sources (one hierarchical draw per sample) and mixes
/// them with a standard-normal mixing matrix.
pub fn generate_dataset<R: Rng + ?Sized>(spec: &GenerationSpec, rng: &mut R) -> Result<Dataset> {
    let mut sources = generate_sources(spec, rng)?;
    standardize_columns(&mut sources)?;
    let mixing = draw_mixing(spec.dim, rng)?;
    let x = &sources * mixing.transpose();
    Ok(Dataset { x, mixing, sources })
}

/// Raw (unstandardized) sources, one fresh `U` and `Λ` per sample.
pub fn generate_sources<R: Rng + ?Sized>(spec: &GenerationSpec, rng: &mut R) -> Result<DataMatrix> {
    spec.validate()?;
    let d = spec.dim;
    let mut out = DMatrix::zeros(spec.samples, d);
    let mut z = DVector::zeros(d);
    for t in 0..spec.samples {
        let u = draw_weights(spec, rng);
        let lambda = build_precision(&u);
        let chol = lambda.0.cholesky().ok_or_else(|| {
            Error::Singular(format!("precision of sample {t} is not positive definite"))
        })?;
        for k in 0..d {
            z[k] = rng.sample(StandardNormal);
        }
        let s = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
        out.row_mut(t).copy_from(&s.transpose());
    }
    Ok(out)
}

/// Zero mean, unit (population) variance per column.
pub fn standardize_columns(s: &mut DataMatrix) -> Result<()> {
    let t = s.nrows() as f64;
    for mut col in s.column_iter_mut() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / t;
        if !(var > 0.0) {
            return Err(Error::Numerical(
                "cannot standardize a constant source column".into(),
            ));
        }
        col /= var.sqrt();
    }
    Ok(())
}

fn draw_mixing<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    for _ in 0..MIXING_ATTEMPTS {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sv = a.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min > 0.0 && max / min <= MAX_MIXING_CONDITION {
            return Ok(a);
        }
    }
    Err(Error::Singular(format!(
        "no well-conditioned mixing matrix in {MIXING_ATTEMPTS} attempts"
    )))
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (k, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}
