//! Small complex dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Eigenvalue floor used by matrix square roots.
pub const EIG_FLOOR: f64 = 1e-12;

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Replace `a` by `(a + a^H) / 2`.
pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

pub fn is_hermitian(a: &CMat, tol: f64) -> bool {
    a.is_square() && (a - a.adjoint()).iter().all(|z| z.norm() <= tol)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &CMat) -> Vec<f64> {
    let mut ev: Vec<f64> = hermitize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// `f(A) = U f(Λ) U^H` for a Hermitian `A`, with eigenvalues floored at [`EIG_FLOOR`].
fn hermitian_fn(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let eig = hermitize(a).symmetric_eigen();
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = f(lam.max(EIG_FLOOR));
        scaled.column_mut(j).scale_mut(s);
    }
    scaled * u.adjoint()
}

/// Principal square root of a Hermitian PSD matrix.
pub fn hermitian_sqrt(a: &CMat) -> CMat {
    hermitian_fn(a, f64::sqrt)
}

/// Inverse principal square root of a Hermitian positive definite matrix.
pub fn hermitian_inv_sqrt(a: &CMat) -> Result<CMat> {
    if !a.is_square() {
        return Err(Error::Shape("inverse square root of a non-square matrix".into()));
    }
    let ev = hermitian_eigenvalues(a);
    if ev.first().is_some_and(|&l| l <= 0.0) {
        return Err(Error::Domain(format!("matrix is not positive definite (min eigenvalue {})", ev[0])));
    }
    Ok(hermitian_fn(a, |l| 1.0 / l.sqrt()))
}

/// Inverse of a Hermitian positive definite matrix via Cholesky.
pub fn hpd_inverse(a: &CMat) -> Result<CMat> {
    a.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Domain("matrix is not positive definite".into()))
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}
