//! Small dense linear algebra helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for every pseudoinverse in the crate.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

pub fn solve(a: DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.lu().solve(b).ok_or(Error::Singular(what))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what))
    }
}

pub fn solve_matrix(a: DMatrix<f64>, b: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let x = a.lu().solve(b).ok_or(Error::Singular(what))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what))
    }
}

/// Thin SVD `a = u diag(s) v^T`.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// SVD computed by faer.
///
/// nalgebra's bidiagonal QR can stop with reconstruction errors far above
/// machine precision when some singular values are exactly zero, which is the
/// normal case for the softmax Jacobian.
pub fn svd(a: &DMatrix<f64>) -> Svd {
    let (m, n) = a.shape();
    let k = m.min(n);
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    match fa.thin_svd() {
        Ok(d) => {
            let (u, s, v) = (d.U(), d.S().column_vector(), d.V());
            Svd {
                u: DMatrix::from_fn(m, k, |i, j| u[(i, j)]),
                singular_values: DVector::from_fn(k, |i, _| s[i]),
                v: DMatrix::from_fn(n, k, |i, j| v[(i, j)]),
            }
        }
        Err(_) => Svd {
            u: DMatrix::zeros(m, k),
            singular_values: DVector::from_element(k, f64::NAN),
            v: DMatrix::zeros(n, k),
        },
    }
}

/// Moore-Penrose pseudoinverse via SVD, discarding singular values below
/// `rel_cutoff * sigma_max`.
pub fn pseudo_inverse(a: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = svd(a);
    let (u, v) = (&svd.u, &svd.v);
    let s_max = svd.singular_values.max();
    let mut out = DMatrix::zeros(n, m);
    if !(s_max > 0.0) {
        return out;
    }
    let cut = rel_cutoff * s_max;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            out += (v.column(k) * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Minimum-norm least-squares solution of `a x = b` with the same relative
/// cutoff convention as [`pseudo_inverse`].
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_cutoff: f64) -> DVector<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DVector::zeros(n);
    }
    let svd = svd(a);
    let (u, v) = (&svd.u, &svd.v);
    let s_max = svd.singular_values.max();
    let mut x = DVector::zeros(n);
    if !(s_max > 0.0) {
        return x;
    }
    let cut = rel_cutoff * s_max;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            let coef = u.column(k).dot(b) / s;
            x += v.column(k) * coef;
        }
    }
    x
}

/// Numerical rank with a relative singular-value threshold.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = svd(a).singular_values;
    let s_max = sv.max();
    if !(s_max > 0.0) {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * s_max).count()
}

/// Orthonormal basis (as columns) of the kernel of `a`.
///
/// Computed from the spectral decomposition of the orthogonal projector onto
/// `ker a`, whose eigenvalues are exactly 0 or 1.
pub fn kernel_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    let gram = a * a.transpose();
    let proj = DMatrix::identity(n, n) - a.transpose() * pseudo_inverse(&gram, 1e-12) * a;
    let proj = (&proj + proj.transpose()) * 0.5;
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.5)
        .map(|(k, _)| eig.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
