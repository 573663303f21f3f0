use super::{Matrix, Scalar};
use crate::error::{shape_err, Error, Result};

/// Householder QR factorization of a square matrix.
///
/// Signs are normalized so that `r` has a non-negative diagonal; with that
/// convention the factorization of a full-rank matrix is unique and the `q`
/// of a standard-normal draw is Haar distributed.
pub fn qr_decompose<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    if !a.is_square() || a.rows() == 0 {
        return Err(shape_err(
            "qr_decompose",
            format!(
                "expected non-empty square matrix, got {}x{}",
                a.rows(),
                a.cols()
            ),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("qr_decompose"));
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut q = Matrix::<T>::identity(n);
    let two = T::from_f64(2.0);
    let mut v = vec![T::ZERO; n];

    for k in 0..n.saturating_sub(1) {
        let len = n - k;
        let mut norm_sq = T::ZERO;
        for i in 0..len {
            let x = r.get(k + i, k);
            v[i] = x;
            norm_sq += x * x;
        }
        let alpha = norm_sq.sqrt();
        if alpha == T::ZERO {
            continue;
        }
        // v = x + sign(x0)·‖x‖·e1 avoids cancellation in the first component.
        if v[0] >= T::ZERO {
            v[0] += alpha;
        } else {
            v[0] -= alpha;
        }
        let vv: T = v[..len].iter().map(|&x| x * x).sum();
        if vv == T::ZERO {
            continue;
        }

        for j in k..n {
            let mut dot = T::ZERO;
            for i in 0..len {
                dot += v[i] * r.get(k + i, j);
            }
            let s = two * dot / vv;
            for i in 0..len {
                let cur = r.get(k + i, j);
                r.set(k + i, j, cur - s * v[i]);
            }
        }
        for i in 1..len {
            r.set(k + i, k, T::ZERO);
        }

        for row in 0..n {
            let qrow = &mut q.row_mut(row)[k..];
            let mut dot = T::ZERO;
            for i in 0..len {
                dot += qrow[i] * v[i];
            }
            let s = two * dot / vv;
            for i in 0..len {
                qrow[i] -= s * v[i];
            }
        }
    }

    for k in 0..n {
        if r.get(k, k) < T::ZERO {
            for j in 0..n {
                let cur = r.get(k, j);
                r.set(k, j, -cur);
            }
            for i in 0..n {
                let cur = q.get(i, k);
                q.set(i, k, -cur);
            }
        }
    }
    Ok((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use crate::rng::SeededRng;

    fn orthogonality_error(q: &Matrix<f64>) -> f64 {
        matmul(&q.transpose(), q).unwrap().max_identity_deviation()
    }

    #[test]
    fn identity_factors_to_identity() {
        let (q, r) = qr_decompose(&Matrix::<f64>::identity(4)).unwrap();
        assert_eq!(q, Matrix::identity(4));
        assert_eq!(r, Matrix::identity(4));
    }

    #[test]
    fn diagonal_input_gives_signed_unit_q() {
        let (q, r) = qr_decompose(&Matrix::<f64>::diag(&[2.0, 3.0])).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let v = q.get(i, j);
                if i == j {
                    assert_eq!(v.abs(), 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(r.get(0, 0), 2.0);
        assert_eq!(r.get(1, 1), 3.0);
    }

    #[test]
    fn random_8x8_reconstructs() {
        let mut rng = SeededRng::new(11, 0);
        let a = rng.gaussian_matrix::<f64>(8, 8);
        let (q, r) = qr_decompose(&a).unwrap();
        assert!(orthogonality_error(&q) <= 1e-12);
        assert!(matmul(&q, &r).unwrap().relative_frobenius_error(&a) <= 1e-10);
        for i in 0..8 {
            assert!(r.get(i, i) >= 0.0);
            for j in 0..i {
                assert_eq!(r.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn one_by_one() {
        let (q, r) = qr_decompose(&Matrix::new(1, 1, vec![-3.0f64]).unwrap()).unwrap();
        assert_eq!(q.data(), &[-1.0]);
        assert_eq!(r.data(), &[3.0]);
    }

    #[test]
    fn rank_deficient_column_is_tolerated() {
        let a = Matrix::from_rows(&[vec![0.0f64, 1.0], vec![0.0, 2.0]]).unwrap();
        let (q, r) = qr_decompose(&a).unwrap();
        assert!(orthogonality_error(&q) <= 1e-12);
        assert!(matmul(&q, &r).unwrap().max_abs_diff(&a) <= 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_non_square() {
        let bad = Matrix::new(2, 2, vec![1.0f64, f64::INFINITY, 0.0, 1.0]).unwrap();
        assert!(matches!(qr_decompose(&bad), Err(Error::NonFinite(_))));
        assert!(qr_decompose(&Matrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn large_orthogonality_f64() {
        let mut rng = SeededRng::new(5, 3);
        let a = rng.gaussian_matrix::<f64>(512, 512);
        let (q, _) = qr_decompose(&a).unwrap();
        assert!(orthogonality_error(&q) <= 1e-6);
    }
}
