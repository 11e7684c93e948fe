//! Complex principal component analysis of CSI matrices.
//!
//! Rows are locations, columns are subcarriers. The model is the full
//! eigensystem of the Hermitian sample covariance of the mean-centered rows;
//! a [`Decomposition`] splits each row into the part spanned by the leading
//! `d_hat` eigenvectors (plus the mean) and the residual orthogonal to it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Column-wise mean of the fitted matrix.
    pub mean: DVector<Complex64>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: DVector<f64>,
    /// Column `k` is the unit eigenvector paired with `eigenvalues[k]`. In each
    /// column the entry of largest magnitude is real and non-negative.
    pub eigenvectors: DMatrix<Complex64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Leading `d_hat` eigenvector columns.
    pub fn basis(&self, d_hat: usize) -> Result<DMatrix<Complex64>> {
        if d_hat > self.dim() {
            return Err(Error::Argument(format!(
                "d_hat = {d_hat} exceeds the model dimension {}",
                self.dim()
            )));
        }
        Ok(self.eigenvectors.columns(0, d_hat).into_owned())
    }

    /// Fraction of total variance carried by each component. All zeros when the
    /// covariance vanishes.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let clipped: Vec<f64> = self.eigenvalues.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        if total == 0.0 {
            return vec![0.0; clipped.len()];
        }
        clipped.iter().map(|v| v / total).collect()
    }

    fn centered(&self, h: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
        if h.ncols() != self.dim() {
            return Err(Error::Argument(format!(
                "matrix has {} columns, model expects {}",
                h.ncols(),
                self.dim()
            )));
        }
        let mut c = h.clone();
        for mut row in c.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(c)
    }
}

/// Predictable/residual split of a CSI matrix for a chosen number of
/// retained components.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub d_hat: usize,
    /// N x d_hat principal component scores.
    pub scores: DMatrix<Complex64>,
    /// N x M reconstruction from the retained components, mean included.
    pub predictable: DMatrix<Complex64>,
    /// N x M remainder, `input - predictable`.
    pub residual: DMatrix<Complex64>,
}

fn check_finite(h: &DMatrix<Complex64>) -> Result<()> {
    if h.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Data("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Rotates `column` so its largest-magnitude entry (first one on ties) is real
/// and non-negative.
fn fix_phase(column: &mut [Complex64]) {
    let mut pivot = 0;
    let mut best = -1.0;
    for (i, z) in column.iter().enumerate() {
        let mag = z.norm();
        if mag > best {
            best = mag;
            pivot = i;
        }
    }
    if best <= 0.0 {
        return;
    }
    let rot = column[pivot].conj() / best;
    for z in column.iter_mut() {
        *z *= rot;
    }
    column[pivot] = Complex64::new(column[pivot].norm(), 0.0);
}

/// Fits the model on an N x M matrix, N >= 2.
pub fn fit_pca(h: &DMatrix<Complex64>) -> Result<PcaModel> {
    let (n, m) = h.shape();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if m == 0 {
        return Err(Error::Data("matrix has no columns".into()));
    }
    check_finite(h)?;

    let mean = DVector::from_iterator(m, h.column_iter().map(|c| c.sum() / n as f64));
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = (centered.adjoint() * &centered).unscale(n as f64 - 1.0);
    // Exact Hermitian symmetry before the solver sees it.
    for i in 0..m {
        cov[(i, i)] = Complex64::new(cov[(i, i)].re, 0.0);
        for j in (i + 1)..m {
            let v = (cov[(i, j)] + cov[(j, i)].conj()) * 0.5;
            cov[(i, j)] = v;
            cov[(j, i)] = v.conj();
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let eigenvalues = DVector::from_iterator(m, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<Complex64> = eig.eigenvectors.column(src).iter().copied().collect();
        fix_phase(&mut col);
        eigenvectors.set_column(dst, &DVector::from_vec(col));
    }

    Ok(PcaModel {
        mean,
        eigenvalues,
        eigenvectors,
    })
}

/// Scores `(H - mean) U_d`, an N x d_hat matrix.
pub fn project(
    h: &DMatrix<Complex64>,
    model: &PcaModel,
    d_hat: usize,
) -> Result<DMatrix<Complex64>> {
    let basis = model.basis(d_hat)?;
    Ok(model.centered(h)? * basis)
}

/// Inverse transform `W U_dᴴ + mean`, the predictable part.
pub fn reconstruct(scores: &DMatrix<Complex64>, model: &PcaModel) -> Result<DMatrix<Complex64>> {
    let basis = model.basis(scores.ncols())?;
    let mut out = scores * basis.adjoint();
    for mut row in out.row_iter_mut() {
        row += model.mean.transpose();
    }
    Ok(out)
}

pub fn residuals(h: &DMatrix<Complex64>, model: &PcaModel, d_hat: usize) -> Result<Decomposition> {
    check_finite(h)?;
    let scores = project(h, model, d_hat)?;
    let predictable = reconstruct(&scores, model)?;
    let residual = h - &predictable;
    Ok(Decomposition {
        d_hat,
        scores,
        predictable,
        residual,
    })
}
