//! DC removal, per-sample norm rescaling and PCA whitening.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{DataMatrix, Error, Result};

/// Retained eigenvalues must exceed this fraction of the largest one.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Centers every row across its coordinates and rescales it to unit norm.
///
/// Rows that vanish after centering are dropped.
pub fn remove_dc_and_normalize(x: &DataMatrix) -> Result<DataMatrix> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Input("cannot normalize an empty data matrix".into()));
    }
    let mut kept = Vec::with_capacity(x.nrows());
    for row in x.row_iter() {
        let scale = row.amax().max(f64::MIN_POSITIVE);
        let centered = row.add_scalar(-row.mean());
        let norm = centered.norm();
        if norm <= 1e-12 * scale {
            continue;
        }
        kept.push(centered / norm);
    }
    let dropped = x.nrows() - kept.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} rows that are constant across coordinates");
    }
    if kept.is_empty() {
        return Err(Error::Input(
            "every row is constant across coordinates".into(),
        ));
    }
    Ok(DMatrix::from_rows(&kept))
}

/// Affine map from the input space to unit-covariance principal coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// `d × d₀`, rows `e_kᵀ / sqrt(λ_k)`.
    pub projection: DMatrix<f64>,
    /// All `d₀` covariance eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Matching unit eigenvectors as columns.
    pub eigenvectors: DMatrix<f64>,
}

impl WhiteningTransform {
    /// Centering only; the projection is the identity.
    pub fn centering(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            projection: DMatrix::identity(d, d),
            eigenvalues: DVector::from_element(d, 1.0),
            eigenvectors: DMatrix::identity(d, d),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// `d₀ × d` right inverse of the projection, columns `e_k sqrt(λ_k)`.
    pub fn dewhitening(&self) -> DMatrix<f64> {
        let d = self.output_dim();
        let mut out = self.eigenvectors.columns(0, d).clone_owned();
        for k in 0..d {
            out.column_mut(k).scale_mut(self.eigenvalues[k].sqrt());
        }
        out
    }
}

/// Sample mean and `1/T` covariance of the rows.
pub fn mean_and_covariance(x: &DataMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::Input("data matrix has no samples".into()));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / x.nrows() as f64;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

pub fn fit_whitening(x: &DataMatrix, d_keep: usize) -> Result<WhiteningTransform> {
    let d0 = x.ncols();
    if d_keep == 0 || d_keep > d0 {
        return Err(Error::dim(format!(
            "cannot keep {d_keep} of {d0} dimensions"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("data matrix has non-finite entries".into()));
    }
    let (mean, cov) = mean_and_covariance(x)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d0).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues =
        DVector::from_iterator(d0, order.iter().map(|&k| eig.eigenvalues[k].max(0.0)));
    let eigenvectors = DMatrix::from_fn(d0, d0, |r, c| eig.eigenvectors[(r, order[c])]);

    let top = eigenvalues[0];
    let usable = eigenvalues
        .iter()
        .take_while(|&&l| l > RANK_TOLERANCE * top)
        .count();
    if top <= 0.0 || usable < d_keep {
        return Err(Error::dim(format!(
            "covariance has only {usable} eigenvalues above {RANK_TOLERANCE:e} of the largest; \
             keep at most {usable} dimensions instead of {d_keep}"
        )));
    }
    let mut projection = eigenvectors.columns(0, d_keep).transpose();
    for k in 0..d_keep {
        projection.row_mut(k).unscale_mut(eigenvalues[k].sqrt());
    }
    Ok(WhiteningTransform {
        mean,
        projection,
        eigenvalues,
        eigenvectors,
    })
}

pub fn apply_whitening(t: &WhiteningTransform, x: &DataMatrix) -> Result<DataMatrix> {
    if x.ncols() != t.input_dim() {
        return Err(Error::dim(format!(
            "data has {} columns, transform expects {}",
            x.ncols(),
            t.input_dim()
        )));
    }
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= t.mean.transpose();
    }
    Ok(centered * t.projection.transpose())
}

/// Maps whitened coordinates back into the input space.
pub fn reconstruct(t: &WhiteningTransform, z: &DataMatrix) -> Result<DataMatrix> {
    if z.ncols() != t.output_dim() {
        return Err(Error::dim(format!(
            "coordinates have {} columns, transform yields {}",
            z.ncols(),
            t.output_dim()
        )));
    }
    let mut out = z * t.dewhitening().transpose();
    for mut row in out.row_iter_mut() {
        row += t.mean.transpose();
    }
    Ok(out)
}

/// Basis vectors of the estimated components in the input space, one per column.
///
/// This is the pseudo-inverse of the composed unmixing `Ŵ V`.
pub fn unmix_to_original(t: &WhiteningTransform, w_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = t.output_dim();
    if w_hat.nrows() != d || w_hat.ncols() != d {
        return Err(Error::dim(format!(
            "unmixing matrix is {}x{}, expected {d}x{d}",
            w_hat.nrows(),
            w_hat.ncols()
        )));
    }
    let inv = w_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("unmixing matrix is not invertible".into()))?;
    Ok(t.dewhitening() * inv)
}
