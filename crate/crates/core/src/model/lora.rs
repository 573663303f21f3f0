use super::config::{LoraConfig, ModelConfig};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Scalar};
use crate::rng::{stream, SeededRng};

/// The six adapted projections of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoraSite {
    Q,
    K,
    V,
    O,
    Fc1,
    Fc2,
}

impl LoraSite {
    pub const ALL: [LoraSite; 6] = [
        LoraSite::Q,
        LoraSite::K,
        LoraSite::V,
        LoraSite::O,
        LoraSite::Fc1,
        LoraSite::Fc2,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LoraSite::Q => "q",
            LoraSite::K => "k",
            LoraSite::V => "v",
            LoraSite::O => "o",
            LoraSite::Fc1 => "fc1",
            LoraSite::Fc2 => "fc2",
        }
    }

    /// `(d_in, d_out)` of the adapted projection.
    pub fn dims(self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_model;
        match self {
            LoraSite::Q | LoraSite::K | LoraSite::V | LoraSite::O => (d, d),
            LoraSite::Fc1 => (d, config.d_ff),
            LoraSite::Fc2 => (config.d_ff, d),
        }
    }

    /// Whether the adapted projection reads an obfuscated input (its `A`
    /// factor is stored as `R⁻¹·A`); otherwise its output is obfuscated and
    /// `B` is stored as `B·R`.
    pub fn input_side(self) -> bool {
        matches!(
            self,
            LoraSite::Q | LoraSite::K | LoraSite::V | LoraSite::Fc1
        )
    }
}

/// One adapter: the effective weight update is `scale · A · B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLora<T> {
    pub pairs: [LoraPair<T>; 6],
}

impl<T> BlockLora<T> {
    pub fn get(&self, site: LoraSite) -> &LoraPair<T> {
        &self.pairs[site.index()]
    }

    pub fn get_mut(&mut self, site: LoraSite) -> &mut LoraPair<T> {
        &mut self.pairs[site.index()]
    }
}

/// Adapter matrices for every block; also used to hold their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet<T> {
    pub blocks: Vec<BlockLora<T>>,
}

impl<T: Scalar> LoraSet<T> {
    pub fn zeros_like(config: &ModelConfig, rank: usize) -> Self {
        let blocks = (0..config.n_layer)
            .map(|_| BlockLora {
                pairs: LoraSite::ALL.map(|site| {
                    let (din, dout) = site.dims(config);
                    LoraPair {
                        a: Matrix::zeros(din, rank),
                        b: Matrix::zeros(rank, dout),
                    }
                }),
            })
            .collect();
        LoraSet { blocks }
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.pairs.iter())
            .map(|p| p.a.len() + p.b.len())
            .sum()
    }

    /// All matrices in a fixed order (block, site, A then B).
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix<T>> {
        self.blocks
            .iter()
            .flat_map(|b| b.pairs.iter())
            .flat_map(|p| [&p.a, &p.b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.pairs.iter_mut())
            .flat_map(|p| [&mut p.a, &mut p.b])
    }

    /// Every entry in [`tensors`](Self::tensors) order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for m in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a set of the same shape.
    pub fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape_err(
                "assign_flat",
                format!(
                    "{} values for {} parameters",
                    values.len(),
                    self.param_count()
                ),
            ));
        }
        let mut at = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Largest entrywise difference across all matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> LoraSet<U> {
        LoraSet {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockLora {
                    pairs: b.pairs.clone().map(|p| LoraPair {
                        a: p.a.cast(),
                        b: p.b.cast(),
                    }),
                })
                .collect(),
        }
    }
}

/// Trainable adapters plus their hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub config: LoraConfig,
    pub set: LoraSet<T>,
}

impl<T: Scalar> LoraAdapters<T> {
    pub fn scale(&self) -> T {
        T::from_f64(self.config.scale())
    }

    pub fn param_count(&self) -> usize {
        self.set.param_count()
    }

    /// Fills every `B` with Gaussian noise. Zero-initialized `B` makes the
    /// gradient of `A` vanish, which hides errors in gradient checks.
    pub fn randomize_b(&mut self, seed: u64, std: f64) {
        let mut rng = SeededRng::new(seed, stream::LORA_INIT | 0xB);
        for block in &mut self.set.blocks {
            for pair in block.pairs.iter_mut() {
                let (r, c) = pair.b.shape();
                pair.b = rng.gaussian_matrix_scaled(r, c, std);
            }
        }
    }
}

/// Standard LoRA initialization: `A ~ N(0, 0.02²)`, `B = 0`.
pub fn init_lora<T: Scalar>(
    model: &ModelConfig,
    config: LoraConfig,
    seed: u64,
) -> Result<LoraAdapters<T>> {
    config.validate()?;
    let mut rng = SeededRng::new(seed, stream::LORA_INIT);
    let mut set = LoraSet::<T>::zeros_like(model, config.rank);
    for block in &mut set.blocks {
        for pair in block.pairs.iter_mut() {
            let (r, c) = pair.a.shape();
            pair.a = rng.gaussian_matrix_scaled(r, c, super::params::INIT_STD);
        }
    }
    Ok(LoraAdapters { config, set })
}

/// Plain gradient descent: `p ← p − lr·g` for every adapter matrix.
pub fn sgd_step<T: Scalar>(
    adapters: &LoraAdapters<T>,
    grads: &LoraSet<T>,
    lr: f64,
) -> Result<LoraAdapters<T>> {
    let mut out = adapters.clone();
    sgd_step_in_place(&mut out.set, grads, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place<T: Scalar>(
    set: &mut LoraSet<T>,
    grads: &LoraSet<T>,
    lr: f64,
) -> Result<()> {
    if set.blocks.len() != grads.blocks.len() {
        return Err(shape_err(
            "sgd_step",
            format!(
                "{} adapter blocks, {} gradient blocks",
                set.blocks.len(),
                grads.blocks.len()
            ),
        ));
    }
    let lr = T::from_f64(lr);
    for (p, g) in set.tensors_mut().zip(grads.tensors()) {
        p.sub_scaled_assign(lr, g)?;
    }
    Ok(())
}
