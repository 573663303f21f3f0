use super::lu::Lu;
use super::{Matrix, Scalar};
use crate::error::{shape_err, Error, Result};
use crate::rng::{stream, SeededRng};

/// Iteration limits for [`singular_extremes_with`].
#[derive(Debug, Clone, Copy)]
pub struct SpectrumConfig {
    pub max_iters: usize,
    /// Stop once the relative change of the Rayleigh quotient drops below this.
    pub tol: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            max_iters: 20_000,
            tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularExtremes {
    pub sigma_max: f64,
    /// Zero when `singular` is set.
    pub sigma_min: f64,
    pub singular: bool,
}

impl SingularExtremes {
    /// `σmax / σmin`, or `+∞` for a (numerically) singular matrix.
    pub fn condition_number(&self) -> f64 {
        if self.singular || self.sigma_min == 0.0 {
            f64::INFINITY
        } else {
            self.sigma_max / self.sigma_min
        }
    }
}

pub fn singular_extremes<T: Scalar>(a: &Matrix<T>) -> Result<SingularExtremes> {
    singular_extremes_with(a, &SpectrumConfig::default())
}

/// Largest and smallest singular values of a square matrix.
///
/// `σmax²` is the top eigenvalue of `aᵀa`, found by power iteration; `σmin²`
/// is the bottom one, found by inverse iteration through an LU factorization
/// of `a` (each step solves `aᵀ z = x` then `a y = z`). Both run in f64.
pub fn singular_extremes_with<T: Scalar>(
    a: &Matrix<T>,
    cfg: &SpectrumConfig,
) -> Result<SingularExtremes> {
    if !a.is_square() || a.rows() == 0 {
        return Err(shape_err(
            "singular_extremes",
            format!(
                "expected non-empty square matrix, got {}x{}",
                a.rows(),
                a.cols()
            ),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_extremes"));
    }
    let n = a.rows();
    let a64: Matrix<f64> = a.cast();
    let scale = a64.max_abs();
    if scale == 0.0 {
        return Ok(SingularExtremes {
            sigma_max: 0.0,
            sigma_min: 0.0,
            singular: true,
        });
    }

    let start = {
        let mut rng = SeededRng::new(0x5eed, stream::SVD_START | n as u64);
        normalized((0..n).map(|_| rng.normal()).collect())
    };

    let sigma_max = {
        let mut x = start.clone();
        let mut lambda = 0.0f64;
        for _ in 0..cfg.max_iters {
            let ax = matvec(&a64, &x);
            let next = dot(&ax, &ax);
            let y = matvec_t(&a64, &ax);
            x = normalized(y);
            let done = (next - lambda).abs() <= cfg.tol * next;
            lambda = next;
            if done {
                break;
            }
        }
        lambda.sqrt()
    };

    let pivot_floor = n as f64 * f64::EPSILON * scale;
    let lu = Lu::factor(&a64, pivot_floor)?;
    if lu.is_singular() {
        return Ok(SingularExtremes {
            sigma_max,
            sigma_min: 0.0,
            singular: true,
        });
    }

    let sigma_min = {
        let mut x = start;
        let mut mu = 0.0f64;
        for _ in 0..cfg.max_iters {
            // z = a⁻ᵀ x, so ‖z‖² = xᵀ (aᵀa)⁻¹ x.
            let z = lu.solve_transpose(&x);
            let next = dot(&z, &z);
            let y = lu.solve(&z);
            x = normalized(y);
            let done = (next - mu).abs() <= cfg.tol * next;
            mu = next;
            if done {
                break;
            }
        }
        1.0 / mu.sqrt()
    };

    if !sigma_min.is_finite() || sigma_min <= sigma_max * f64::EPSILON {
        return Ok(SingularExtremes {
            sigma_max,
            sigma_min: 0.0,
            singular: true,
        });
    }
    Ok(SingularExtremes {
        sigma_max,
        sigma_min,
        singular: false,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn matvec(a: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), x)).collect()
}

fn matvec_t(a: &Matrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(a.row(i)) {
            *o += v * xi;
        }
    }
    out
}
