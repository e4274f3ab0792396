//! Small dense helpers on top of nalgebra for the symmetric systems that show
//! up in the closed-form and majorize-minimize updates.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, ShapeBuilder};

use crate::error::{Error, Result};

pub(crate) fn to_nalgebra(a: ArrayView2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    let (r, c) = m.shape();
    Array2::from_shape_vec((r, c).f(), m.as_slice().to_vec()).expect("column-major buffer")
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor.
pub(crate) fn spd_inverse(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = to_nalgebra(a);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Unsupported("matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    // symmetrise; the triangular solves leave O(eps) asymmetry
    let inv = (&inv + inv.transpose()) * 0.5;
    Ok(from_nalgebra(&inv))
}

/// Moore-Penrose pseudo-inverse.
pub(crate) fn pseudo_inverse(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let m = to_nalgebra(a);
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let pinv = m
        .pseudo_inverse(1e-12 * scale * a.nrows().max(a.ncols()) as f64)
        .map_err(|e| Error::Unsupported(e.to_string()))?;
    Ok(from_nalgebra(&pinv))
}

/// Largest squared singular value of `a`, from the smaller of its two Gram
/// matrices.
pub(crate) fn max_singular_sq(a: ArrayView2<f64>) -> f64 {
    let (r, c) = a.dim();
    if r == 0 || c == 0 {
        return 0.0;
    }
    let gram = if r <= c { a.dot(&a.t()) } else { a.t().dot(&a) };
    let eig = to_nalgebra(gram.view()).symmetric_eigenvalues();
    eig.iter().fold(0.0f64, |acc, &v| acc.max(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverse_of_two_by_two() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let inv = spd_inverse(a.view()).unwrap();
        let expect = array![[2.0, -1.0], [-1.0, 2.0]] / 3.0;
        for (x, y) in inv.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(spd_inverse(array![[1.0, 2.0], [2.0, 1.0]].view()).is_err());
    }

    #[test]
    fn singular_values() {
        let a = array![[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]];
        assert!((max_singular_sq(a.view()) - 16.0).abs() < 1e-12);
        assert!((max_singular_sq(a.t()) - 16.0).abs() < 1e-12);
        let p = pseudo_inverse(array![[1.0, 1.0], [1.0, 1.0]].view()).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn conversion_round_trip() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(from_nalgebra(&to_nalgebra(a.view())), a);
    }
}
