//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{linalg::balancing, DMatrix, DVector, Schur, SymmetricEigen, SVD};
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Matrix<T> = DMatrix<T>;
pub type Vector<T> = DVector<T>;

/// Eigenvalues of a general real square matrix, sorted by descending real part.
pub fn eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<Complex<T>>> {
    if !a.is_square() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let mut m = a.clone();
    balancing::balance_parlett_reinsch(&mut m);
    let n = m.nrows();
    let schur = Schur::try_new(m, T::eps(), 200 * n.max(10)).ok_or_else(|| {
        Error::Eigen(format!(
            "Schur iteration did not converge ({n}x{n}, cond ~ {:e})",
            condition_number(a).as_f64()
        ))
    })?;
    let mut ev: Vec<Complex<T>> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| {
        y.re.partial_cmp(&x.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y.im.partial_cmp(&x.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(ev)
}

/// Largest real part over the spectrum. `-inf` for an empty matrix.
pub fn spectral_abscissa<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(T::lit(f64::NEG_INFINITY), |m, r| if r > m { r } else { m }))
}

pub fn sym_part<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

/// Smallest eigenvalue of the symmetric part `(A + Aᵀ)/2`.
pub fn lambda_min_sym<T: Scalar>(a: &Matrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    SymmetricEigen::new(sym_part(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(T::lit(f64::INFINITY), |m, v| if v < m { v } else { m })
}

pub fn lambda_max_sym<T: Scalar>(a: &Matrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    SymmetricEigen::new(sym_part(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(T::lit(f64::NEG_INFINITY), |m, v| if v > m { v } else { m })
}

/// Largest singular value (spectral norm). Zero for empty matrices.
pub fn sigma_max<T: Scalar>(a: &Matrix<T>) -> T {
    if a.nrows() == 0 || a.ncols() == 0 {
        return T::zero();
    }
    SVD::new(a.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

/// 2-norm condition number; `inf` for singular matrices.
pub fn condition_number<T: Scalar>(a: &Matrix<T>) -> T {
    if a.nrows() == 0 || a.ncols() == 0 {
        return T::one();
    }
    let sv = SVD::new(a.clone(), false, false).singular_values;
    let max = sv.iter().copied().fold(T::zero(), |m, v| if v > m { v } else { m });
    let min = sv
        .iter()
        .copied()
        .fold(T::lit(f64::INFINITY), |m, v| if v < m { v } else { m });
    if min <= T::zero() {
        T::lit(f64::INFINITY)
    } else {
        max / min
    }
}

pub fn is_positive_definite<T: Scalar>(a: &Matrix<T>) -> bool {
    a.is_square() && a.clone().cholesky().is_some()
}

/// Solves `A X = B` by partial-pivot LU, reporting singularity instead of panicking.
pub fn solve<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, what: &str) -> Result<Matrix<T>> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            got: b.nrows(),
        });
    }
    if a.nrows() == 0 {
        return Ok(Matrix::zeros(0, b.ncols()));
    }
    let singular = || Error::Singular {
        what: what.to_string(),
        cond: condition_number(a).as_f64(),
    };
    let x = a.clone().lu().solve(b).ok_or_else(singular)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(x)
}

pub fn solve_vec<T: Scalar>(a: &Matrix<T>, b: &Vector<T>, what: &str) -> Result<Vector<T>> {
    let bm = Matrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve(a, &bm, what)?;
    Ok(Vector::from_column_slice(x.as_slice()))
}

/// Max-abs entry.
pub fn max_abs<T: Scalar>(a: &Matrix<T>) -> T {
    a.iter()
        .map(|v| v.abs())
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

/// ∞-norm (max absolute row sum).
pub fn inf_norm<T: Scalar>(a: &Matrix<T>) -> T {
    a.row_iter()
        .map(|r| r.iter().fold(T::zero(), |s, v| s + v.abs()))
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

pub fn vec_inf_norm<T: Scalar>(v: &Vector<T>) -> T {
    v.iter()
        .map(|x| x.abs())
        .fold(T::zero(), |m, x| if x > m { x } else { m })
}

/// Row-major copy, for serialization and CSV export.
pub fn to_rows<T: Scalar>(a: &Matrix<T>) -> Vec<Vec<T>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `serialize_with` adapter writing a matrix as a list of rows.
pub fn serialize_rows<T: Scalar, S: serde::Serializer>(
    a: &Matrix<T>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&to_rows(a), s)
}
