//! Symmetric factorizations: Cholesky, eigendecomposition and PSD square roots.

use nalgebra::DMatrix;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Eigenvalues below `-PSD_TOLERANCE * max(1, λ_max)` reject a matrix as not PSD;
/// anything between that and zero is clamped.
pub const PSD_TOLERANCE: f64 = 1e-10;

fn require_square(a: &Matrix, op: &str) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(Error::Shape(format!("{op} needs a square matrix, got {}x{}", a.rows(), a.cols())));
    }
    Ok(a.rows())
}

/// Lower-triangular `L` with `A = L·Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = require_square(a, "cholesky")?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if !(diag > 0.0) {
            return Err(Error::Domain(format!("cholesky: matrix not positive definite at pivot {j}")));
        }
        let d = diag.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Ok(l)
}

/// Eigenvalues (ascending) and eigenvectors (as columns) of the symmetrized input.
pub fn symmetric_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = require_square(a, "symmetric_eig")?;
    a.check_finite("symmetric_eig input")?;
    let sym = a.symmetrize()?;
    let eig = DMatrix::from_row_slice(n, n, sym.as_slice()).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, col, eig.eigenvectors[(row, src)]);
        }
    }
    Ok((values, vectors))
}

/// `V · diag(f(λ)) · Vᵀ`
fn spectral_apply(values: &[f64], vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = values.len();
    let mut scaled = vectors.clone();
    for i in 0..n {
        for (j, &lambda) in values.iter().enumerate() {
            let v = scaled.get(i, j) * f(lambda);
            scaled.set(i, j, v);
        }
    }
    scaled.matmul_nt(vectors).expect("square factors")
}

fn psd_spectrum(a: &Matrix, op: &str) -> Result<(Vec<f64>, Matrix)> {
    let (values, vectors) = symmetric_eig(a)?;
    let scale = values.last().copied().unwrap_or(0.0).max(1.0);
    if let Some(&min) = values.first() {
        if min < -PSD_TOLERANCE * scale {
            return Err(Error::Domain(format!("{op}: matrix is not positive semidefinite (eigenvalue {min:e})")));
        }
    }
    Ok((values.into_iter().map(|v| v.max(0.0)).collect(), vectors))
}

/// Principal square root of a symmetric positive-semidefinite matrix.
pub fn matrix_sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (values, vectors) = psd_spectrum(a, "matrix_sqrt_psd")?;
    Ok(spectral_apply(&values, &vectors, f64::sqrt))
}

/// `A^{-1/2}` for a symmetric positive-definite matrix.
pub fn matrix_inv_sqrt_pd(a: &Matrix) -> Result<Matrix> {
    let (values, vectors) = psd_spectrum(a, "matrix_inv_sqrt_pd")?;
    let scale = values.last().copied().unwrap_or(0.0).max(1.0);
    if values.first().is_some_and(|&v| v <= PSD_TOLERANCE * scale) {
        return Err(Error::Domain("matrix_inv_sqrt_pd: matrix is singular".into()));
    }
    Ok(spectral_apply(&values, &vectors, |v| 1.0 / v.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_psd(n: usize, rng: &mut Rng) -> Matrix {
        let mut b = Matrix::zeros(n, n);
        rng.fill_normal(b.as_mut_slice());
        b.matmul_nt(&b).unwrap()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i = Matrix::identity(3);
        assert!(matrix_sqrt_psd(&i).unwrap().max_abs_diff(&i).unwrap() < 1e-14);
        let d = Matrix::from_diag(&[4.0, 9.0]);
        let s = matrix_sqrt_psd(&d).unwrap();
        assert!(s.max_abs_diff(&Matrix::from_diag(&[2.0, 3.0])).unwrap() < 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = Rng::new(11);
        for n in [1, 2, 5, 8] {
            let a = random_psd(n, &mut rng);
            let s = matrix_sqrt_psd(&a).unwrap();
            let back = s.matmul(&s).unwrap();
            assert!(back.sub(&a).unwrap().frobenius_norm() < 1e-8, "n={n}");
        }
    }

    #[test]
    fn inverse_sqrt() {
        let mut rng = Rng::new(5);
        let a = random_psd(4, &mut rng).add(&Matrix::identity(4)).unwrap();
        let r = matrix_inv_sqrt_pd(&a).unwrap();
        let prod = r.matmul(&a).unwrap().matmul(&r).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(4)).unwrap() < 1e-10);
        assert!(matches!(matrix_inv_sqrt_pd(&Matrix::zeros(2, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_negative_eigenvalues_are_clamped() {
        // rank-one matrix with rounding noise
        let v = [0.6, 0.8];
        let mut a = Matrix::zeros(2, 2);
        for i in 0..2 {
            for j in 0..2 {
                a.set(i, j, v[i] * v[j]);
            }
        }
        a.set(1, 1, a.get(1, 1) - 1e-13);
        assert!(matrix_sqrt_psd(&a).is_ok());
        let neg = Matrix::from_diag(&[1.0, -1e-3]);
        assert!(matches!(matrix_sqrt_psd(&neg), Err(Error::Domain(_))));
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = Rng::new(3);
        let a = random_psd(5, &mut rng).add(&Matrix::identity(5)).unwrap();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul_nt(&l).unwrap().max_abs_diff(&a).unwrap() < 1e-10);
        assert!(cholesky(&Matrix::from_diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn eigen_decomposition_is_sorted_and_orthonormal() {
        let mut rng = Rng::new(8);
        let a = random_psd(6, &mut rng);
        let (values, vectors) = symmetric_eig(&a).unwrap();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        let vtv = vectors.matmul_tn(&vectors).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(6)).unwrap() < 1e-10);
    }
}
