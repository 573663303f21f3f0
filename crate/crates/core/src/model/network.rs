//! The layer loop shared by the plain model and the trusted-zone executor.
//!
//! Embedding, layer norms, output biases, residual adds, the tied output head
//! and the loss are evaluated here; the heavy sublayers are delegated to a
//! [`BlockExecutor`]. The plain path executes them directly, the protected
//! path hands obfuscated activations to the host zone. Both therefore share
//! one evaluation order for everything that is not obfuscated.

use super::config::{LoraConfig, ModelConfig};
use super::dropout::{block_masks, BlockMasks, Mode};
use super::params::TrunkParams;
use super::tokenizer::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{
    layernorm, layernorm_backward, matmul, matmul_nt, LayerNormCache, Matrix, Scalar,
};

/// Runs the two heavy sublayers of a block, forward and reverse.
///
/// `attention`/`mlp` receive the layer-normed residual stream and return the
/// sublayer output without its output bias. The backward methods receive the
/// gradient of that output and return the gradient of the layer-normed input.
pub trait BlockExecutor<T: Scalar> {
    fn attention(
        &mut self,
        block: usize,
        xln: &Matrix<T>,
        masks: &BlockMasks<T>,
    ) -> Result<Matrix<T>>;
    fn mlp(&mut self, block: usize, xln: &Matrix<T>, masks: &BlockMasks<T>) -> Result<Matrix<T>>;
    fn attention_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>>;
    fn mlp_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>>;
}

/// Activations kept by [`run_forward`] for [`run_backward`].
#[derive(Debug, Clone)]
pub struct NetworkCache<T> {
    ln1: Vec<LayerNormCache<T>>,
    ln2: Vec<LayerNormCache<T>>,
    ln_f: LayerNormCache<T>,
}

/// Token plus position embedding, one row per token.
pub fn embed<T: Scalar>(trunk: &TrunkParams<T>, batch: &TokenBatch) -> Matrix<T> {
    let d = trunk.token_embedding.cols();
    let mut x = Matrix::zeros(batch.len(), d);
    for (i, &t) in batch.tokens.iter().enumerate() {
        let tok = trunk.token_embedding.row(t as usize);
        let pos = trunk.position_embedding.row(i);
        for ((o, &a), &b) in x.row_mut(i).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    x
}

pub fn run_forward<T: Scalar, E: BlockExecutor<T>>(
    config: &ModelConfig,
    trunk: &TrunkParams<T>,
    exec: &mut E,
    batch: &TokenBatch,
    mode: Mode,
    lora: Option<&LoraConfig>,
) -> Result<(Matrix<T>, NetworkCache<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "batch must contain at least one token".into(),
        ));
    }
    batch.validate(config.vocab_size, config.context_len)?;
    let eps = config.layernorm_eps;
    let seq = batch.len();
    let mut x = embed(trunk, batch);
    let mut ln1 = Vec::with_capacity(trunk.blocks.len());
    let mut ln2 = Vec::with_capacity(trunk.blocks.len());
    for (b, tb) in trunk.blocks.iter().enumerate() {
        let masks = block_masks(mode, b, seq, config, lora);

        let (xln, c1) = layernorm(&x, &tb.ln1.gain, &tb.ln1.bias, eps)?;
        let mut o = exec.attention(b, &xln, &masks)?;
        o.add_row_vector(&tb.b_o)?;
        x.add_assign(&o)?;
        ln1.push(c1);

        let (xln, c2) = layernorm(&x, &tb.ln2.gain, &tb.ln2.bias, eps)?;
        let mut y = exec.mlp(b, &xln, &masks)?;
        y.add_row_vector(&tb.b_2)?;
        x.add_assign(&y)?;
        ln2.push(c2);
    }
    let (xf, ln_f) = layernorm(&x, &trunk.ln_f.gain, &trunk.ln_f.bias, eps)?;
    let logits = matmul_nt(&xf, &trunk.token_embedding)?;
    Ok((logits, NetworkCache { ln1, ln2, ln_f }))
}

/// Propagates `g_logits` back through every block. Parameter gradients are
/// accumulated by the executor.
pub fn run_backward<T: Scalar, E: BlockExecutor<T>>(
    trunk: &TrunkParams<T>,
    exec: &mut E,
    cache: &NetworkCache<T>,
    g_logits: &Matrix<T>,
) -> Result<()> {
    let g_xf = matmul(g_logits, &trunk.token_embedding)?;
    let mut g_x = layernorm_backward(&cache.ln_f, &trunk.ln_f.gain, &g_xf);
    for (b, tb) in trunk.blocks.iter().enumerate().rev() {
        let g_xln = exec.mlp_backward(b, &g_x)?;
        g_x.add_assign(&layernorm_backward(&cache.ln2[b], &tb.ln2.gain, &g_xln))?;
        let g_xln = exec.attention_backward(b, &g_x)?;
        g_x.add_assign(&layernorm_backward(&cache.ln1[b], &tb.ln1.gain, &g_xln))?;
    }
    Ok(())
}

/// Mean next-token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<(f64, Matrix<T>)> {
    if targets.len() != logits.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} positions",
            targets.len(),
            logits.rows()
        )));
    }
    let n = targets.len();
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::TokenOutOfRange {
                id: t as u32,
                vocab: row.len(),
            });
        }
        let max = row
            .iter()
            .copied()
            .fold(T::from_f64(f64::NEG_INFINITY), |m, v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += (lse - row[t]).to_f64();
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = if j == t {
                (p - T::ONE) * inv_n
            } else {
                p * inv_n
            };
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Matrix::<f64>::zeros(3, 7);
        let (loss, g) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.9459).abs() < 1e-4);
        for i in 0..3 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Matrix::<f64>::from_fn(2, 5, |i, j| ((i * 5 + j) as f64 * 0.37).sin());
        let targets = [4, 1];
        let (_, g) = cross_entropy(&logits, &targets).unwrap();
        let h = 1e-6;
        for idx in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[idx] += h;
            let mut m = logits.clone();
            m.data_mut()[idx] -= h;
            let fd = (cross_entropy(&p, &targets).unwrap().0
                - cross_entropy(&m, &targets).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-9);
        }
    }
}
