use super::{Matrix, Scalar};
use crate::error::{shape_err, Result};

/// LU factorization with partial pivoting, `P·A = L·U`, computed in f64.
pub struct Lu {
    n: usize,
    /// Packed factors: strict lower part holds L (unit diagonal), upper holds U.
    lu: Vec<f64>,
    perm: Vec<usize>,
    singular: bool,
}

impl Lu {
    /// Factorizes `a`. A pivot with magnitude at or below `pivot_floor` marks
    /// the matrix as numerically singular; factorization still completes.
    pub fn factor<T: Scalar>(a: &Matrix<T>, pivot_floor: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(shape_err(
                "lu",
                format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let mut lu: Vec<f64> = a.data().iter().map(|v| v.to_f64()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut singular = false;
        for k in 0..n {
            let (mut p, mut best) = (k, lu[k * n + k].abs());
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= pivot_floor {
                singular = true;
                continue;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            singular,
        })
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ z = b, Lᵀ y = z, then x = Pᵀ y.
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for j in 0..i {
                s -= self.lu[j * n + i] * z[j];
            }
            z[i] = s / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for j in i + 1..n {
                s -= self.lu[j * n + i] * z[j];
            }
            z[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_and_transposed_solves() {
        let a = Matrix::from_rows(&[
            vec![0.0f64, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let lu = Lu::factor(&a, 0.0).unwrap();
        assert!(!lu.is_singular());
        let b = [1.0, 2.0, 3.0];
        let x = lu.solve(&b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a.get(i, j) * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
        let y = lu.solve_transpose(&b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a.get(j, i) * y[j]).sum();
            assert!((r - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flags_singular() {
        let a = Matrix::from_rows(&[vec![1.0f64, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(Lu::factor(&a, 1e-14).unwrap().is_singular());
    }
}
