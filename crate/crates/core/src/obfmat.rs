//! Obfuscation key generation.
//!
//! A key is a random square matrix `r` together with its inverse. Host-side
//! weights and activations are multiplied by `r` or `r⁻¹`, so the conditioning
//! of `r` bounds how much rounding error the round trip adds. Three families
//! are provided:
//!
//! * orthogonal keys, the Q factor of a standard-normal draw (κ = 1, inverse
//!   is the exact transpose);
//! * keys with a prescribed condition number, `r = Q_A · S · Q_B` with a chosen
//!   singular spectrum `S`;
//! * raw standard-normal matrices inverted by Gauss–Jordan elimination, the
//!   unconditioned baseline.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{matmul, qr_decompose, singular_extremes, Matrix, Scalar};
use crate::rng::{stream, SeededRng};

/// Range the largest singular value of a prescribed-κ key is drawn from.
pub const SIGMA_MAX_RANGE: (f64, f64) = (0.5, 2.0);

/// Relative pivot threshold below which a raw draw is considered singular.
pub const RAW_PIVOT_FLOOR: f64 = 1e-12;

const MAX_REDRAWS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyKind {
    /// `r = I`; used to check that the protected path reduces to the plain one.
    Identity,
    Orthogonal,
    PrescribedKappa,
    RawRandom,
}

impl KeyKind {
    pub fn code(self) -> u8 {
        match self {
            KeyKind::Identity => 0,
            KeyKind::Orthogonal => 1,
            KeyKind::PrescribedKappa => 2,
            KeyKind::RawRandom => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => KeyKind::Identity,
            1 => KeyKind::Orthogonal,
            2 => KeyKind::PrescribedKappa,
            3 => KeyKind::RawRandom,
            _ => return None,
        })
    }
}

/// Which family of keys to draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeySpec {
    Identity,
    Orthogonal,
    Kappa(f64),
    Raw,
}

impl KeySpec {
    /// Short label used in reports: `identity`, `orthogonal`, `raw`, or the κ value.
    pub fn label(&self) -> String {
        match self {
            KeySpec::Identity => "identity".into(),
            KeySpec::Orthogonal => "orthogonal".into(),
            KeySpec::Kappa(k) => format!("{k}"),
            KeySpec::Raw => "raw".into(),
        }
    }
}

impl fmt::Display for KeySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for KeySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(KeySpec::Identity),
            "orthogonal" | "ortho" => Ok(KeySpec::Orthogonal),
            "raw" | "random" => Ok(KeySpec::Raw),
            other => {
                let k: f64 = other
                    .parse()
                    .map_err(|_| format!("invalid key kind or kappa {s:?}"))?;
                if !k.is_finite() || k < 1.0 {
                    return Err(format!("kappa must be finite and >= 1, got {k}"));
                }
                Ok(KeySpec::Kappa(k))
            }
        }
    }
}

/// Singular values used to build a prescribed-κ key.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub interior: Vec<f64>,
}

impl SingularSpectrum {
    /// All singular values, largest first, smallest last.
    pub fn values(&self, n: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(n);
        v.push(self.sigma_max);
        v.extend_from_slice(&self.interior);
        if n > 1 {
            v.push(self.sigma_min);
        }
        v
    }
}

/// A random invertible matrix with its inverse, held in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationKey {
    pub r: Matrix<f64>,
    pub r_inv: Matrix<f64>,
    pub kind: KeyKind,
    pub target_kappa: Option<f64>,
    pub measured_kappa: f64,
    pub seed: u64,
    /// Substream the key was drawn from (key index within a model).
    pub stream: u64,
    /// Number of singular raw draws that were discarded.
    pub redraws: u32,
    pub spectrum: Option<SingularSpectrum>,
}

impl ObfuscationKey {
    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    /// `‖r · r_inv − I‖_max`, evaluated in f64.
    pub fn inversion_error(&self) -> f64 {
        matmul(&self.r, &self.r_inv)
            .expect("key matrices are square and equal-sized")
            .max_identity_deviation()
    }

    /// The key rounded to working precision.
    pub fn in_precision<T: Scalar>(&self) -> (Matrix<T>, Matrix<T>) {
        (self.r.cast(), self.r_inv.cast())
    }
}

fn measured_kappa(r: &Matrix<f64>) -> Result<f64> {
    Ok(singular_extremes(r)?.condition_number())
}

fn key_rng(seed: u64, index: u64) -> SeededRng {
    SeededRng::new(seed, stream::KEYS | (index & 0xFFFF_FFFF))
}

pub fn identity_key(n: usize) -> ObfuscationKey {
    ObfuscationKey {
        r: Matrix::identity(n),
        r_inv: Matrix::identity(n),
        kind: KeyKind::Identity,
        target_kappa: Some(1.0),
        measured_kappa: 1.0,
        seed: 0,
        stream: 0,
        redraws: 0,
        spectrum: None,
    }
}

pub fn random_orthogonal(n: usize, seed: u64) -> Result<ObfuscationKey> {
    random_orthogonal_at(n, seed, 0)
}

/// Orthogonal key on substream `index` of `seed`.
pub fn random_orthogonal_at(n: usize, seed: u64, index: u64) -> Result<ObfuscationKey> {
    if n == 0 {
        return Err(Error::InvalidArgument("key dimension must be >= 1".into()));
    }
    let mut rng = key_rng(seed, index);
    let (q, _) = qr_decompose(&rng.gaussian_matrix::<f64>(n, n))?;
    let r_inv = q.transpose();
    let measured_kappa = measured_kappa(&q)?;
    Ok(ObfuscationKey {
        r: q,
        r_inv,
        kind: KeyKind::Orthogonal,
        target_kappa: Some(1.0),
        measured_kappa,
        seed,
        stream: index,
        redraws: 0,
        spectrum: None,
    })
}

pub fn random_prescribed_kappa(n: usize, kappa: f64, seed: u64) -> Result<ObfuscationKey> {
    random_prescribed_kappa_at(n, kappa, seed, 0)
}

/// Key with condition number `kappa`: `r = Q_A · S · Q_B` and
/// `r⁻¹ = Q_Bᵀ · S⁻¹ · Q_Aᵀ`, where `Q_A`, `Q_B` come from QR of two Gaussian
/// draws, `σmax ~ U[0.5, 2]`, `σmin = σmax / κ` and the remaining singular
/// values are uniform in `[σmin, σmax]`.
pub fn random_prescribed_kappa_at(
    n: usize,
    kappa: f64,
    seed: u64,
    index: u64,
) -> Result<ObfuscationKey> {
    if n == 0 {
        return Err(Error::InvalidArgument("key dimension must be >= 1".into()));
    }
    if !kappa.is_finite() || kappa < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "kappa must be finite and >= 1, got {kappa}"
        )));
    }
    if n == 1 && kappa > 1.0 {
        return Err(Error::InvalidArgument(
            "a 1x1 key always has kappa = 1".into(),
        ));
    }
    let mut rng = key_rng(seed, index);
    let (qa, _) = qr_decompose(&rng.gaussian_matrix::<f64>(n, n))?;
    let (qb, _) = qr_decompose(&rng.gaussian_matrix::<f64>(n, n))?;
    let sigma_max = rng.uniform(SIGMA_MAX_RANGE.0, SIGMA_MAX_RANGE.1);
    let sigma_min = sigma_max / kappa;
    let interior: Vec<f64> = (0..n.saturating_sub(2))
        .map(|_| rng.uniform(sigma_min, sigma_max))
        .collect();
    let spectrum = SingularSpectrum {
        sigma_max,
        sigma_min,
        interior,
    };
    let s = spectrum.values(n);
    let s_inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();

    let r = matmul(&matmul(&qa, &Matrix::diag(&s))?, &qb)?;
    let r_inv = matmul(
        &matmul(&qb.transpose(), &Matrix::diag(&s_inv))?,
        &qa.transpose(),
    )?;
    let measured_kappa = measured_kappa(&r)?;
    Ok(ObfuscationKey {
        r,
        r_inv,
        kind: KeyKind::PrescribedKappa,
        target_kappa: Some(kappa),
        measured_kappa,
        seed,
        stream: index,
        redraws: 0,
        spectrum: Some(spectrum),
    })
}

pub fn random_raw(n: usize, seed: u64) -> Result<ObfuscationKey> {
    random_raw_at(n, seed, 0)
}

/// Standard-normal key inverted numerically. A draw whose elimination hits a
/// pivot below `1e-12·‖r‖_F` is discarded and the next substream is used.
pub fn random_raw_at(n: usize, seed: u64, index: u64) -> Result<ObfuscationKey> {
    if n == 0 {
        return Err(Error::InvalidArgument("key dimension must be >= 1".into()));
    }
    for redraw in 0..MAX_REDRAWS {
        // Redraws move to the next substream above the 32-bit key index.
        let sub = (index & 0xFFFF_FFFF) | (u64::from(redraw) << 32);
        let mut rng = SeededRng::new(seed, stream::KEYS | sub);
        let r = rng.gaussian_matrix::<f64>(n, n);
        let floor = RAW_PIVOT_FLOOR * r.frobenius_norm();
        if let Some(r_inv) = gauss_jordan_inverse(&r, floor)? {
            let measured_kappa = measured_kappa(&r)?;
            return Ok(ObfuscationKey {
                r,
                r_inv,
                kind: KeyKind::RawRandom,
                target_kappa: None,
                measured_kappa,
                seed,
                stream: index,
                redraws: redraw,
                spectrum: None,
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "no invertible raw draw after {MAX_REDRAWS} attempts"
    )))
}

/// Draws a key of the requested family on substream `index`.
pub fn generate_key(spec: KeySpec, n: usize, seed: u64, index: u64) -> Result<ObfuscationKey> {
    match spec {
        KeySpec::Identity => Ok(identity_key(n)),
        KeySpec::Orthogonal => random_orthogonal_at(n, seed, index),
        KeySpec::Kappa(k) => random_prescribed_kappa_at(n, k, seed, index),
        KeySpec::Raw => random_raw_at(n, seed, index),
    }
}

/// Gauss–Jordan inversion with partial pivoting. Returns `None` when a pivot
/// magnitude falls at or below `pivot_floor`.
pub fn gauss_jordan_inverse(a: &Matrix<f64>, pivot_floor: f64) -> Result<Option<Matrix<f64>>> {
    if !a.is_square() {
        return Err(shape_err(
            "gauss_jordan_inverse",
            format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
        ));
    }
    let n = a.rows();
    let w = 2 * n;
    let mut aug = vec![0.0f64; n * w];
    for i in 0..n {
        aug[i * w..i * w + n].copy_from_slice(a.row(i));
        aug[i * w + n + i] = 1.0;
    }
    for k in 0..n {
        let mut p = k;
        for i in k + 1..n {
            if aug[i * w + k].abs() > aug[p * w + k].abs() {
                p = i;
            }
        }
        if aug[p * w + k].abs() <= pivot_floor {
            return Ok(None);
        }
        if p != k {
            for j in 0..w {
                aug.swap(k * w + j, p * w + j);
            }
        }
        let pivot = aug[k * w + k];
        for j in 0..w {
            aug[k * w + j] /= pivot;
        }
        let pivot_row: Vec<f64> = aug[k * w..(k + 1) * w].to_vec();
        for i in 0..n {
            if i == k {
                continue;
            }
            let f = aug[i * w + k];
            if f != 0.0 {
                for (x, &pv) in aug[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                    *x -= f * pv;
                }
            }
        }
    }
    let mut inv = Vec::with_capacity(n * n);
    for i in 0..n {
        inv.extend_from_slice(&aug[i * w + n..(i + 1) * w]);
    }
    Ok(Some(Matrix::new(n, n, inv)?))
}

/// `κ₂(a) = σmax / σmin`; `+∞` for singular input.
pub fn condition_number<T: Scalar>(a: &Matrix<T>) -> Result<f64> {
    if !a.is_square() {
        return Err(shape_err(
            "condition_number",
            format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
        ));
    }
    Ok(singular_extremes(a)?.condition_number())
}
