//! Unprotected execution: the reference every protected run is compared to.

use super::dropout::{BlockMasks, Mode};
use super::layers::{
    attention_backward, attention_forward, mlp_backward, mlp_forward, AttentionCache, LoraView,
    MlpCache,
};
use super::lora::{LoraAdapters, LoraSet};
use super::network::{cross_entropy, run_backward, run_forward, BlockExecutor};
use super::params::PlainParams;
use super::tokenizer::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

struct PlainExecutor<'a, T> {
    params: &'a PlainParams<T>,
    lora: Option<&'a LoraAdapters<T>>,
    attn: Vec<Option<AttentionCache<T>>>,
    mlp: Vec<Option<MlpCache<T>>>,
    grads: Option<LoraSet<T>>,
}

impl<'a, T: Scalar> PlainExecutor<'a, T> {
    fn new(
        params: &'a PlainParams<T>,
        lora: Option<&'a LoraAdapters<T>>,
        with_grads: bool,
    ) -> Self {
        let n = params.blocks.len();
        PlainExecutor {
            params,
            lora,
            attn: vec![None; n],
            mlp: vec![None; n],
            grads: match (with_grads, lora) {
                (true, Some(l)) => Some(LoraSet::zeros_like(&params.config, l.config.rank)),
                _ => None,
            },
        }
    }

    fn view(&self, block: usize) -> Option<LoraView<'a, T>> {
        self.lora.map(|l| LoraView {
            block: &l.set.blocks[block],
            scale: l.scale(),
        })
    }
}

impl<T: Scalar> BlockExecutor<T> for PlainExecutor<'_, T> {
    fn attention(
        &mut self,
        block: usize,
        xln: &Matrix<T>,
        masks: &BlockMasks<T>,
    ) -> Result<Matrix<T>> {
        let (out, cache) = attention_forward(
            xln,
            &self.params.blocks[block].attn,
            self.view(block),
            self.params.config.n_head,
            masks,
        )?;
        if self.grads.is_some() {
            self.attn[block] = Some(cache);
        }
        Ok(out)
    }

    fn mlp(&mut self, block: usize, xln: &Matrix<T>, masks: &BlockMasks<T>) -> Result<Matrix<T>> {
        let (out, cache) =
            mlp_forward(xln, &self.params.blocks[block].mlp, self.view(block), masks)?;
        if self.grads.is_some() {
            self.mlp[block] = Some(cache);
        }
        Ok(out)
    }

    fn attention_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>> {
        let cache = self.attn[block]
            .take()
            .ok_or_else(|| Error::InvalidArgument("attention backward without forward".into()))?;
        let view = self.view(block);
        let grads = self.grads.as_mut().map(|g| &mut g.blocks[block]);
        attention_backward(
            &cache,
            &self.params.blocks[block].attn,
            view,
            self.params.config.n_head,
            g_out,
            grads,
        )
    }

    fn mlp_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>> {
        let cache = self.mlp[block]
            .take()
            .ok_or_else(|| Error::InvalidArgument("mlp backward without forward".into()))?;
        let view = self.view(block);
        let grads = self.grads.as_mut().map(|g| &mut g.blocks[block]);
        mlp_backward(&cache, &self.params.blocks[block].mlp, view, g_out, grads)
    }
}

/// Logits (`seq × vocab`) of the unprotected model.
pub fn forward_plain<T: Scalar>(
    params: &PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    batch: &TokenBatch,
    mode: Mode,
) -> Result<Matrix<T>> {
    let mut exec = PlainExecutor::new(params, adapters, false);
    let lora_cfg = adapters.map(|a| &a.config);
    let (logits, _) = run_forward(
        &params.config,
        &params.trunk,
        &mut exec,
        batch,
        mode,
        lora_cfg,
    )?;
    Ok(logits)
}

/// Mean next-token loss without gradients.
pub fn loss_plain<T: Scalar>(
    params: &PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    batch: &TokenBatch,
    mode: Mode,
) -> Result<f64> {
    let targets = batch.targets.as_ref().ok_or(Error::MissingTargets)?;
    let logits = forward_plain(params, adapters, batch, mode)?;
    Ok(cross_entropy(&logits, targets)?.0)
}

/// Loss and its gradient with respect to every adapter matrix; base weights
/// are frozen.
pub fn loss_and_grads_plain<T: Scalar>(
    params: &PlainParams<T>,
    adapters: &LoraAdapters<T>,
    batch: &TokenBatch,
    mode: Mode,
) -> Result<(f64, LoraSet<T>)> {
    let targets = batch.targets.as_ref().ok_or(Error::MissingTargets)?;
    let mut exec = PlainExecutor::new(params, Some(adapters), true);
    let (logits, cache) = run_forward(
        &params.config,
        &params.trunk,
        &mut exec,
        batch,
        mode,
        Some(&adapters.config),
    )?;
    let (loss, g_logits) = cross_entropy(&logits, targets)?;
    run_backward(&params.trunk, &mut exec, &cache, &g_logits)?;
    let grads = exec.grads.take().expect("gradient accumulator");
    Ok((loss, grads))
}
