use super::config::{LoraConfig, ModelConfig};
use super::lora::LoraSite;
use crate::numerics::{Matrix, Scalar};
use crate::rng::{stream, SeededRng};

/// Execution mode. Dropout masks exist only in training mode and are a pure
/// function of `(seed, block, slot)`, so plain and protected runs sharing a
/// seed drop exactly the same units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Multiplicative masks for one block (entries `0` or `1/(1−p)`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockMasks<T> {
    /// One `seq × seq` mask per head, on the attention probabilities.
    pub attn: Option<Vec<Matrix<T>>>,
    /// One `seq × rank` mask per adapter, on the bottleneck activations.
    pub lora: [Option<Matrix<T>>; 6],
}

impl<T: Scalar> BlockMasks<T> {
    pub fn none() -> Self {
        BlockMasks {
            attn: None,
            lora: Default::default(),
        }
    }

    pub fn lora(&self, site: LoraSite) -> Option<&Matrix<T>> {
        self.lora[site.index()].as_ref()
    }

    pub fn element_count(&self) -> usize {
        self.attn.iter().flatten().map(Matrix::len).sum::<usize>()
            + self.lora.iter().flatten().map(Matrix::len).sum::<usize>()
    }
}

fn mask<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, p: f64) -> Matrix<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    Matrix::from_fn(
        rows,
        cols,
        |_, _| if rng.unit() < p { T::ZERO } else { keep },
    )
}

/// Masks for `block` at sequence length `seq`.
pub fn block_masks<T: Scalar>(
    mode: Mode,
    block: usize,
    seq: usize,
    model: &ModelConfig,
    lora: Option<&LoraConfig>,
) -> BlockMasks<T> {
    let Mode::Train { seed } = mode else {
        return BlockMasks::none();
    };
    let base = stream::DROPOUT | ((block as u64) << 8);
    let attn = (model.attn_dropout > 0.0).then(|| {
        let mut rng = SeededRng::new(seed, base);
        (0..model.n_head)
            .map(|_| mask(&mut rng, seq, seq, model.attn_dropout))
            .collect()
    });
    let lora_masks = LoraSite::ALL.map(|site| {
        lora.filter(|l| l.dropout > 0.0).map(|l| {
            let mut rng = SeededRng::new(seed, base | (1 + site.index() as u64));
            mask(&mut rng, seq, l.rank, l.dropout)
        })
    });
    BlockMasks {
        attn,
        lora: lora_masks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_has_no_masks() {
        let m = block_masks::<f32>(
            Mode::Eval,
            0,
            4,
            &ModelConfig::toy(),
            Some(&LoraConfig::default()),
        );
        assert_eq!(m, BlockMasks::none());
    }

    #[test]
    fn masks_are_deterministic_and_scaled() {
        let mut cfg = ModelConfig::new(2, 2, 8, 5, 8);
        cfg.attn_dropout = 0.5;
        let lora = LoraConfig {
            rank: 3,
            alpha: 6.0,
            dropout: 0.25,
        };
        let a = block_masks::<f64>(Mode::Train { seed: 3 }, 1, 8, &cfg, Some(&lora));
        let b = block_masks::<f64>(Mode::Train { seed: 3 }, 1, 8, &cfg, Some(&lora));
        assert_eq!(a, b);
        let c = block_masks::<f64>(Mode::Train { seed: 3 }, 0, 8, &cfg, Some(&lora));
        assert_ne!(a, c);
        let attn = a.attn.as_ref().unwrap();
        assert_eq!(attn.len(), 2);
        assert!(attn[0].data().iter().all(|&v| v == 0.0 || v == 2.0));
        let q = a.lora(LoraSite::Q).unwrap();
        assert_eq!(q.shape(), (8, 3));
        assert!(q
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
    }
}
