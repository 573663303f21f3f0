use super::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Matrix, Scalar};
use crate::rng::{stream, SeededRng};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn unit(d: usize) -> Self {
        LayerNormParams {
            gain: vec![T::ONE; d],
            bias: vec![T::ZERO; d],
        }
    }
}

/// Attention projections that live outside the trusted zone once obfuscated.
/// `w_q`, `w_k`, `w_v` are assembled over heads (`d_model × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_q: Vec<T>,
    pub b_k: Vec<T>,
    pub b_v: Vec<T>,
    pub w_o: Matrix<T>,
}

/// Feed-forward weights: `w_1` is `d_model × d_ff`, `w_2` is `d_ff × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    pub w_1: Matrix<T>,
    pub b_1: Vec<T>,
    pub w_2: Matrix<T>,
}

/// Heavy per-block weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub attn: AttentionWeights<T>,
    pub mlp: MlpWeights<T>,
}

/// Light per-block parameters that always stay in the trusted zone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkBlock<T> {
    pub ln1: LayerNormParams<T>,
    pub b_o: Vec<T>,
    pub ln2: LayerNormParams<T>,
    pub b_2: Vec<T>,
}

/// Embeddings, normalization, output biases and the (tied) output head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams<T> {
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub blocks: Vec<TrunkBlock<T>>,
    pub ln_f: LayerNormParams<T>,
}

/// Full unprotected parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainParams<T> {
    pub config: ModelConfig,
    pub trunk: TrunkParams<T>,
    pub blocks: Vec<BlockWeights<T>>,
}

impl<T: Scalar> PlainParams<T> {
    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        let t = &self.trunk;
        let mut n = t.token_embedding.len() + t.position_embedding.len();
        n += 2 * t.ln_f.gain.len();
        for b in &t.blocks {
            n += b.ln1.gain.len() * 2 + b.ln2.gain.len() * 2 + b.b_o.len() + b.b_2.len();
        }
        for b in &self.blocks {
            let a = &b.attn;
            n += a.w_q.len() + a.w_k.len() + a.w_v.len() + a.w_o.len();
            n += a.b_q.len() + a.b_k.len() + a.b_v.len();
            n += b.mlp.w_1.len() + b.mlp.b_1.len() + b.mlp.w_2.len();
        }
        n
    }

    /// Replaces every bias and layernorm affine parameter with small random
    /// values. Fresh GPT-2 initialization zeroes them, which would leave the
    /// bias routing untested.
    pub fn randomize_affine(&mut self, seed: u64, scale: f64) {
        let mut rng = SeededRng::new(seed, stream::MISC | 0xAFF);
        let mut fill = |v: &mut Vec<T>, center: f64| {
            for x in v.iter_mut() {
                *x = T::from_f64(center + scale * rng.normal());
            }
        };
        for b in &mut self.trunk.blocks {
            fill(&mut b.ln1.gain, 1.0);
            fill(&mut b.ln1.bias, 0.0);
            fill(&mut b.ln2.gain, 1.0);
            fill(&mut b.ln2.bias, 0.0);
            fill(&mut b.b_o, 0.0);
            fill(&mut b.b_2, 0.0);
        }
        fill(&mut self.trunk.ln_f.gain, 1.0);
        fill(&mut self.trunk.ln_f.bias, 0.0);
        for b in &mut self.blocks {
            fill(&mut b.attn.b_q, 0.0);
            fill(&mut b.attn.b_k, 0.0);
            fill(&mut b.attn.b_v, 0.0);
            fill(&mut b.mlp.b_1, 0.0);
        }
    }

    pub fn cast<U: Scalar>(&self) -> PlainParams<U> {
        let v = |x: &Vec<T>| {
            x.iter()
                .map(|&a| U::from_f64(a.to_f64()))
                .collect::<Vec<U>>()
        };
        let ln = |l: &LayerNormParams<T>| LayerNormParams {
            gain: v(&l.gain),
            bias: v(&l.bias),
        };
        PlainParams {
            config: self.config.clone(),
            trunk: TrunkParams {
                token_embedding: self.trunk.token_embedding.cast(),
                position_embedding: self.trunk.position_embedding.cast(),
                blocks: self
                    .trunk
                    .blocks
                    .iter()
                    .map(|b| TrunkBlock {
                        ln1: ln(&b.ln1),
                        b_o: v(&b.b_o),
                        ln2: ln(&b.ln2),
                        b_2: v(&b.b_2),
                    })
                    .collect(),
                ln_f: ln(&self.trunk.ln_f),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn: AttentionWeights {
                        w_q: b.attn.w_q.cast(),
                        w_k: b.attn.w_k.cast(),
                        w_v: b.attn.w_v.cast(),
                        b_q: v(&b.attn.b_q),
                        b_k: v(&b.attn.b_k),
                        b_v: v(&b.attn.b_v),
                        w_o: b.attn.w_o.cast(),
                    },
                    mlp: MlpWeights {
                        w_1: b.mlp.w_1.cast(),
                        b_1: v(&b.mlp.b_1),
                        w_2: b.mlp.w_2.cast(),
                    },
                })
                .collect(),
        }
    }
}

/// GPT-2 initialization: weights `N(0, 0.02²)`, the two residual output
/// projections scaled by `1/√(2·n_layer)`, biases zero, layernorm gains one.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<PlainParams<T>> {
    config.validate()?;
    let d = config.d_model;
    let ff = config.d_ff;
    let mut rng = SeededRng::new(seed, stream::INIT);
    let resid_std = INIT_STD / (2.0 * config.n_layer.max(1) as f64).sqrt();

    let token_embedding = rng.gaussian_matrix_scaled(config.vocab_size, d, INIT_STD);
    let position_embedding = rng.gaussian_matrix_scaled(config.context_len, d, INIT_STD);
    let mut trunk_blocks = Vec::with_capacity(config.n_layer);
    let mut blocks = Vec::with_capacity(config.n_layer);
    for _ in 0..config.n_layer {
        let attn = AttentionWeights {
            w_q: rng.gaussian_matrix_scaled(d, d, INIT_STD),
            w_k: rng.gaussian_matrix_scaled(d, d, INIT_STD),
            w_v: rng.gaussian_matrix_scaled(d, d, INIT_STD),
            b_q: vec![T::ZERO; d],
            b_k: vec![T::ZERO; d],
            b_v: vec![T::ZERO; d],
            w_o: rng.gaussian_matrix_scaled(d, d, resid_std),
        };
        let mlp = MlpWeights {
            w_1: rng.gaussian_matrix_scaled(d, ff, INIT_STD),
            b_1: vec![T::ZERO; ff],
            w_2: rng.gaussian_matrix_scaled(ff, d, resid_std),
        };
        blocks.push(BlockWeights { attn, mlp });
        trunk_blocks.push(TrunkBlock {
            ln1: LayerNormParams::unit(d),
            b_o: vec![T::ZERO; d],
            ln2: LayerNormParams::unit(d),
            b_2: vec![T::ZERO; d],
        });
    }
    Ok(PlainParams {
        config: config.clone(),
        trunk: TrunkParams {
            token_embedding,
            position_embedding,
            blocks: trunk_blocks,
            ln_f: LayerNormParams::unit(d),
        },
        blocks,
    })
}
