//! Evaluation: separation quality, dependency-matrix recovery, density
//! approximation quality and MDS embeddings of estimated dependencies.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::density::{log_ptilde_s, DependencyMatrix, SmoothingPolicy};
use crate::genmodel::GenerationSpec;
use crate::{DataMatrix, Error, Result};

/// `P = Ŵ A` (or `Ŵ V A` with whitening map `V`).
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceMatrix(DMatrix<f64>);

impl PerformanceMatrix {
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::dim(format!(
                "performance matrix must be square, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "performance matrix has non-finite entries".into(),
            ));
        }
        Ok(Self(p))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

pub fn performance_matrix(
    w_hat: &DMatrix<f64>,
    mixing: &DMatrix<f64>,
    whitening: Option<&DMatrix<f64>>,
) -> Result<PerformanceMatrix> {
    let effective = match whitening {
        Some(v) => {
            if v.ncols() != mixing.nrows() {
                return Err(Error::dim(format!(
                    "whitening map is {}x{} but the mixing matrix has {} rows",
                    v.nrows(),
                    v.ncols(),
                    mixing.nrows()
                )));
            }
            v * mixing
        }
        None => mixing.clone(),
    };
    if w_hat.ncols() != effective.nrows() {
        return Err(Error::dim(format!(
            "unmixing matrix is {}x{} but the (whitened) mixing matrix is {}x{}",
            w_hat.nrows(),
            w_hat.ncols(),
            effective.nrows(),
            effective.ncols()
        )));
    }
    PerformanceMatrix::new(w_hat * effective)
}

/// Estimated component `i` corresponds to true source `perm[i]`, up to `signs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub perm: Vec<usize>,
    pub signs: Vec<f64>,
}

impl Matching {
    pub fn identity(d: usize) -> Self {
        Self {
            perm: (0..d).collect(),
            signs: vec![1.0; d],
        }
    }

    /// `P'[perm[i]][j]`-style reordering: row `perm[i]` of the result is the
    /// sign-corrected row `i` of `p`.
    pub fn align_rows(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(p.nrows(), p.ncols());
        for (i, &target) in self.perm.iter().enumerate() {
            out.set_row(target, &(p.row(i) * self.signs[i]));
        }
        out
    }

    /// Applies the index permutation to both rows and columns of a dependency matrix.
    pub fn align_symmetric(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.perm.len();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                out[(self.perm[i], self.perm[j])] = m[(i, j)];
            }
        }
        out
    }
}

/// Permutation maximizing `sum_i |P[i][σ(i)]|`, with signs making the matched entries non-negative.
pub fn match_permutation(p: &PerformanceMatrix) -> Matching {
    let m = p.as_matrix();
    let d = m.nrows();
    let cost = DMatrix::from_fn(d, d, |i, j| -m[(i, j)].abs());
    let perm = min_cost_assignment(&cost);
    let signs = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| if m[(i, j)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    Matching { perm, signs }
}

/// Hungarian method with potentials; returns the column assigned to each row.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let reduced = cost[(r - 1, c - 1)] - u[r] - v[c];
                if reduced < minv[c] {
                    minv[c] = reduced;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for c in 1..=n {
        assignment[owner[c] - 1] = c - 1;
    }
    assignment
}

/// Amari index in `[0, 1]`; zero exactly for scaled, signed permutations.
pub fn amari_index(p: &PerformanceMatrix) -> Result<f64> {
    let a = p.as_matrix().abs();
    let d = a.nrows();
    if d < 2 {
        return Err(Error::param(
            "the Amari index needs at least two components",
        ));
    }
    let mut total = 0.0;
    for i in 0..d {
        let row = a.row(i);
        let max = row.max();
        if max == 0.0 {
            return Err(Error::Input(format!("performance matrix row {i} is zero")));
        }
        total += row.sum() / max - 1.0;
    }
    for j in 0..d {
        let col = a.column(j);
        let max = col.max();
        if max == 0.0 {
            return Err(Error::Input(format!(
                "performance matrix column {j} is zero"
            )));
        }
        total += col.sum() / max - 1.0;
    }
    Ok(total / (2.0 * d as f64 * (d as f64 - 1.0)))
}

/// Diagonal entries at or below this are treated as a vanished component.
pub const DEGENERATE_DIAGONAL: f64 = 1e-12;

/// `m_ij / sqrt(m_ii m_jj)`, unit diagonal.
pub fn normalize_dependency(m: &DependencyMatrix) -> DMatrix<f64> {
    let mm = m.as_matrix();
    let d = m.dim();
    let degenerate: Vec<bool> = (0..d).map(|i| mm[(i, i)] <= DEGENERATE_DIAGONAL).collect();
    if degenerate.iter().any(|&b| b) {
        log::warn!(
            "dependency matrix has vanishing diagonal entries; their couplings are set to zero"
        );
    }
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if degenerate[i] || degenerate[j] {
            0.0
        } else {
            mm[(i, j)] / (mm[(i, i)] * mm[(j, j)]).sqrt()
        }
    })
}

/// Sum of the strictly upper-triangular entries.
pub fn off_diagonal_mass(normalized: &DMatrix<f64>) -> f64 {
    let d = normalized.nrows();
    (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| normalized[(i, j)])
        .sum()
}

/// Reference dependency matrix implied by a synthetic spec.
///
/// With `m'` the square roots of the inverse-Gamma scales, active pairs get
/// `m'_ij / sqrt(r_i r_j)`, where `r_i` is the full row sum of `m'` including
/// the diagonal. Diagonal entries are one, inactive pairs zero.
pub fn reference_matrix(spec: &GenerationSpec) -> DMatrix<f64> {
    let d = spec.dim;
    let mut raw = DMatrix::identity(d, d) * spec.diagonal.scale.sqrt();
    let off = spec.off_diagonal.scale.sqrt();
    for &(i, j) in &spec.pattern {
        raw[(i, j)] = off;
        raw[(j, i)] = off;
    }
    let sums: Vec<f64> = raw.row_iter().map(|r| r.sum()).collect();
    DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            raw[(i, j)] / (sums[i] * sums[j]).sqrt()
        }
    })
}

/// Frobenius distance between the reference and the normalized, aligned estimate.
pub fn error_m(
    m_hat: &DependencyMatrix,
    reference: &DMatrix<f64>,
    matching: &Matching,
) -> Result<f64> {
    let d = m_hat.dim();
    if reference.nrows() != d || reference.ncols() != d || matching.perm.len() != d {
        return Err(Error::dim(format!(
            "estimate is {d}x{d}, reference {}x{}, matching over {} indices",
            reference.nrows(),
            reference.ncols(),
            matching.perm.len()
        )));
    }
    let aligned = matching.align_symmetric(&normalize_dependency(m_hat));
    Ok((reference - aligned).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlations {
    pub linear: DMatrix<f64>,
    /// Correlation of the squared columns.
    pub energy: DMatrix<f64>,
}

pub fn correlation_matrices(s: &DataMatrix) -> Result<Correlations> {
    if s.nrows() < 2 {
        return Err(Error::Input(
            "correlations need at least two samples".into(),
        ));
    }
    let squared = s.map(|v| v * v);
    Ok(Correlations {
        linear: pearson(s)?,
        energy: pearson(&squared)?,
    })
}

fn pearson(x: &DataMatrix) -> Result<DMatrix<f64>> {
    let t = x.nrows() as f64;
    let mut centered = x.clone();
    for (k, mut col) in centered.column_iter_mut().enumerate() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(Error::Input(format!("column {k} has zero variance")));
        }
        col /= norm;
    }
    let mut c = centered.tr_mul(&centered);
    c.fill_diagonal(1.0);
    Ok(c)
}

/// Support of the 2-D histogram on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridRange {
    /// Per-axis empirical quantiles `(lower, upper)`.
    Quantiles(f64, f64),
    Fixed {
        x: (f64, f64),
        y: (f64, f64),
    },
}

impl Default for GridRange {
    fn default() -> Self {
        GridRange::Quantiles(0.001, 0.999)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: DMatrix<f64>,
    /// Bin masses summing to one.
    pub mass: DMatrix<f64>,
}

impl Histogram2D {
    pub fn bins(&self) -> usize {
        self.counts.nrows()
    }

    pub fn x_center(&self, l: usize) -> f64 {
        0.5 * (self.x_edges[l] + self.x_edges[l + 1])
    }

    pub fn y_center(&self, k: usize) -> f64 {
        0.5 * (self.y_edges[k] + self.y_edges[k + 1])
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn axis_range(values: &[f64], range: GridRange, axis: usize) -> Result<(f64, f64)> {
    let (lo, hi) = match range {
        GridRange::Quantiles(a, b) => {
            if !(0.0..1.0).contains(&a) || !(a < b && b <= 1.0) {
                return Err(Error::param(format!(
                    "quantile range ({a}, {b}) must satisfy 0 <= a < b <= 1"
                )));
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            (quantile(&sorted, a), quantile(&sorted, b))
        }
        GridRange::Fixed { x, y } => {
            if axis == 0 {
                x
            } else {
                y
            }
        }
    };
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Input(format!(
            "degenerate histogram range [{lo}, {hi}] on axis {axis}"
        )));
    }
    Ok((lo, hi))
}

/// Normalized histogram of the two columns of `s2`; samples outside the range are ignored.
pub fn histogram_2d(s2: &DataMatrix, bins: usize, range: GridRange) -> Result<Histogram2D> {
    if s2.ncols() != 2 {
        return Err(Error::dim(format!(
            "expected two columns, got {}",
            s2.ncols()
        )));
    }
    if bins == 0 || s2.nrows() == 0 {
        return Err(Error::param(
            "histogram needs at least one bin and one sample",
        ));
    }
    let xs: Vec<f64> = s2.column(0).iter().copied().collect();
    let ys: Vec<f64> = s2.column(1).iter().copied().collect();
    let (x0, x1) = axis_range(&xs, range, 0)?;
    let (y0, y1) = axis_range(&ys, range, 1)?;
    let edges = |a: f64, b: f64| {
        (0..=bins)
            .map(|k| a + (b - a) * k as f64 / bins as f64)
            .collect::<Vec<_>>()
    };
    let mut counts = DMatrix::zeros(bins, bins);
    let (wx, wy) = ((x1 - x0) / bins as f64, (y1 - y0) / bins as f64);
    let mut inside = 0usize;
    for (&x, &y) in xs.iter().zip(&ys) {
        if !(x0..=x1).contains(&x) || !(y0..=y1).contains(&y) {
            continue;
        }
        let l = (((x - x0) / wx) as usize).min(bins - 1);
        let k = (((y - y0) / wy) as usize).min(bins - 1);
        counts[(l, k)] += 1.0;
        inside += 1;
    }
    if inside == 0 {
        return Err(Error::Input(
            "no samples fall inside the histogram range".into(),
        ));
    }
    let mass = &counts / inside as f64;
    Ok(Histogram2D {
        x_edges: edges(x0, x1),
        y_edges: edges(y0, y1),
        counts,
        mass,
    })
}

/// Agreement between a reference bin-mass table `p` and a model table `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measures {
    /// Cosine of the angle between the two tables; larger is better.
    pub ang: f64,
    /// `sum p log(p / q)` over non-empty bins of `p`, `q` floored at 1e-300.
    pub kl: f64,
    /// `sum (p - q)² p`.
    pub sq: f64,
}

pub fn compare_masses(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Measures {
    let dot = p.dot(q);
    let ang = dot / (p.norm_squared() * q.norm_squared()).sqrt();
    let mut kl = 0.0;
    let mut sq = 0.0;
    for (&pv, &qv) in p.iter().zip(q.iter()) {
        if pv > 0.0 {
            kl += pv * (pv / qv.max(1e-300)).ln();
        }
        sq += (pv - qv).powi(2) * pv;
    }
    Measures { ang, kl, sq }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityComparison {
    pub histogram: Histogram2D,
    pub model_mass: DMatrix<f64>,
    pub model: Measures,
    pub gaussian: Measures,
    pub laplace: Measures,
}

/// Bin masses of a log-density evaluated at bin centers, normalized over the grid.
pub fn grid_masses(
    hist: &Histogram2D,
    log_density: impl Fn(f64, f64) -> Result<f64>,
) -> Result<DMatrix<f64>> {
    let n = hist.bins();
    let mut logs = DMatrix::zeros(n, n);
    for l in 0..n {
        for k in 0..n {
            logs[(l, k)] = log_density(hist.x_center(l), hist.y_center(k))?;
        }
    }
    let top = logs.max();
    if !top.is_finite() {
        return Err(Error::Numerical(
            "log-density is not finite on the grid".into(),
        ));
    }
    let weights = logs.map(|v| (v - top).exp());
    let total = weights.sum();
    Ok(weights / total)
}

/// Fraction of the model's 99% highest-mass bins that may be empty in the histogram.
pub const MAX_EMPTY_FRACTION: f64 = 0.5;

pub fn density_comparison(
    s2: &DataMatrix,
    m: &DependencyMatrix,
    bins: usize,
    range: GridRange,
) -> Result<DensityComparison> {
    if m.dim() != 2 {
        return Err(Error::dim(format!(
            "density comparison is two-dimensional, M is {0}x{0}",
            m.dim()
        )));
    }
    let hist = histogram_2d(s2, bins, range)?;
    let model_mass = grid_masses(&hist, |x, y| {
        log_ptilde_s(&[x, y], m, SmoothingPolicy::ExactAbs)
    })?;
    check_grid_support(&hist, &model_mass)?;

    let t = s2.nrows() as f64;
    let mean = [s2.column(0).sum() / t, s2.column(1).sum() / t];
    let centered: Vec<[f64; 2]> = s2
        .row_iter()
        .map(|r| [r[0] - mean[0], r[1] - mean[1]])
        .collect();
    let cov = |a: usize, b: usize| centered.iter().map(|c| c[a] * c[b]).sum::<f64>() / t;
    let (vxx, vxy, vyy) = (cov(0, 0), cov(0, 1), cov(1, 1));
    let det = vxx * vyy - vxy * vxy;
    if !(det > 0.0) {
        return Err(Error::Numerical(format!(
            "sample covariance is singular (determinant {det:e})"
        )));
    }
    let gaussian_mass = grid_masses(&hist, |x, y| {
        let (dx, dy) = (x - mean[0], y - mean[1]);
        Ok(-0.5 * (vyy * dx * dx - 2.0 * vxy * dx * dy + vxx * dy * dy) / det)
    })?;
    let (bx, by) = ((vxx / 2.0).sqrt(), (vyy / 2.0).sqrt());
    let laplace_mass = grid_masses(&hist, |x, y| {
        Ok(-(x - mean[0]).abs() / bx - (y - mean[1]).abs() / by)
    })?;

    Ok(DensityComparison {
        model: compare_masses(&hist.mass, &model_mass),
        gaussian: compare_masses(&hist.mass, &gaussian_mass),
        laplace: compare_masses(&hist.mass, &laplace_mass),
        histogram: hist,
        model_mass,
    })
}

fn check_grid_support(hist: &Histogram2D, model_mass: &DMatrix<f64>) -> Result<()> {
    let mut order: Vec<usize> = (0..model_mass.len()).collect();
    order.sort_by(|&a, &b| model_mass[b].total_cmp(&model_mass[a]));
    let mut covered = 0.0;
    let mut region = 0usize;
    let mut empty = 0usize;
    for &idx in &order {
        if covered >= 0.99 {
            break;
        }
        covered += model_mass[idx];
        region += 1;
        if hist.counts[idx] == 0.0 {
            empty += 1;
        }
    }
    if empty as f64 > MAX_EMPTY_FRACTION * region as f64 {
        return Err(Error::Numerical(format!(
            "{empty} of {region} bins in the model's 99% mass region are empty; use fewer bins or more samples"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdsEmbedding {
    pub distance: DMatrix<f64>,
    /// One row of planar coordinates per component.
    pub coords: DMatrix<f64>,
}

/// Classical MDS of `D_ij = 1 - sqrt(M'_ij)`.
pub fn mds_embedding(m_hat: &DependencyMatrix) -> MdsEmbedding {
    let normalized = normalize_dependency(m_hat);
    let d = normalized.nrows();
    let distance = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.0
        } else {
            1.0 - normalized[(i, j)].clamp(0.0, 1.0).sqrt()
        }
    });
    let squared = distance.map(|v| v * v);
    let row_means: Vec<f64> = squared.row_iter().map(|r| r.mean()).collect();
    let grand = squared.mean();
    let centered = DMatrix::from_fn(d, d, |i, j| {
        -0.5 * (squared[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    let eig = SymmetricEigen::new(centered);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.amax();
    let mut coords = DMatrix::zeros(d, 2);
    for (axis, &k) in order.iter().take(2).enumerate() {
        let mut value = eig.eigenvalues[k];
        if value < -1e-12 * scale {
            log::warn!("MDS eigenvalue {value:e} clamped to zero");
        }
        if value <= 1e-12 * scale {
            value = 0.0;
        }
        coords.set_column(axis, &(eig.eigenvectors.column(k) * value.sqrt()));
    }
    MdsEmbedding { distance, coords }
}
