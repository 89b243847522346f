//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense column vector used throughout the crate.
pub type Vector = DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = DMatrix<f64>;

/// Largest singular value.
pub fn operator_norm(matrix: &Matrix) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    matrix
        .clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Symmetric part `(A + Aᵀ) / 2`.
pub fn symmetric_part(matrix: &Matrix) -> Matrix {
    (matrix + matrix.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(matrix: &Matrix) -> f64 {
    symmetric_part(matrix)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Applies `func` to the eigenvalues of a symmetric matrix.
fn spectral_map(matrix: &Matrix, func: impl Fn(f64) -> f64) -> Matrix {
    let eig = symmetric_part(matrix).symmetric_eigen();
    let mapped = eig.eigenvalues.map(func);
    &eig.eigenvectors * Matrix::from_diagonal(&mapped) * eig.eigenvectors.transpose()
}

/// Principal square root of a symmetric nonnegative matrix.
pub fn sqrt_psd(matrix: &Matrix, what: &str) -> Result<Matrix> {
    let scale = operator_norm(matrix).max(1.0);
    let floor = -1e-12 * scale;
    if min_eigenvalue(matrix) < floor {
        return Err(Error::InvalidData(format!("{what} is not nonnegative definite")));
    }
    Ok(spectral_map(matrix, |value| value.max(0.0).sqrt()))
}

/// Inverse principal square root of a symmetric positive definite matrix.
pub fn inv_sqrt_pd(matrix: &Matrix, what: &str) -> Result<Matrix> {
    if min_eigenvalue(matrix) <= 0.0 {
        return Err(Error::InvalidData(format!("{what} is not positive definite")));
    }
    Ok(spectral_map(matrix, |value| 1.0 / value.sqrt()))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn inverse_pd(matrix: &Matrix, what: &str) -> Result<Matrix> {
    matrix
        .clone()
        .cholesky()
        .map(|chol| chol.inverse())
        .ok_or_else(|| Error::InvalidData(format!("{what} is not positive definite")))
}

/// Checks symmetry to a relative tolerance.
pub fn is_symmetric(matrix: &Matrix) -> bool {
    if !matrix.is_square() {
        return false;
    }
    let scale = matrix.amax().max(1.0);
    (matrix - matrix.transpose()).amax() <= 1e-12 * scale
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Vector with i.i.d. standard normal entries.
pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Random matrix rescaled to the requested operator norm.
pub fn matrix_with_norm<R: Rng>(rng: &mut R, rows: usize, cols: usize, norm: f64) -> Matrix {
    let raw = gaussian_matrix(rng, rows, cols);
    let current = operator_norm(&raw);
    if current == 0.0 {
        raw
    } else {
        raw * (norm / current)
    }
}

/// Random symmetric matrix with eigenvalues drawn uniformly from `[low, high]`.
pub fn spd_with_spectrum<R: Rng>(rng: &mut R, dim: usize, low: f64, high: f64) -> Matrix {
    let raw = gaussian_matrix(rng, dim, dim);
    let orthogonal = raw.qr().q();
    let values = Vector::from_fn(dim, |_, _| rng.gen_range(low..=high));
    &orthogonal * Matrix::from_diagonal(&values) * orthogonal.transpose()
}

/// Vector consisting of `x ↦ tanh(x)` applied componentwise.
pub fn tanh(vector: &Vector) -> Vector {
    vector.map(f64::tanh)
}

/// True when every entry is finite.
pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|value| value.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_roots_square_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spd = spd_with_spectrum(&mut rng, 3, 0.5, 2.0);
        let root = sqrt_psd(&spd, "test").unwrap();
        assert!((&root * &root - &spd).amax() < 1e-12);
        let inv_root = inv_sqrt_pd(&spd, "test").unwrap();
        let identity = &inv_root * &spd * &inv_root;
        assert!((identity - Matrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn norm_rescaling_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scaled = matrix_with_norm(&mut rng, 2, 3, 0.7);
        assert!((operator_norm(&scaled) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_has_no_root() {
        let matrix = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(sqrt_psd(&matrix, "m").is_err());
        assert!(inverse_pd(&matrix, "m").is_err());
    }
}
