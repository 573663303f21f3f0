//! Attention and feed-forward sublayers with their reverse passes.
//!
//! These are the computations that run outside the trusted zone. They are
//! agnostic to obfuscation: given plain weights and a plain input they compute
//! the plain sublayer; given `R⁻¹·W` / `W·R` weights and an obfuscated input
//! they compute the obfuscated one. The output biases `b_o` and `b_2` are not
//! part of them.

use super::dropout::BlockMasks;
use super::lora::{BlockLora, LoraPair, LoraSite};
use super::params::{AttentionWeights, MlpWeights};
use crate::error::Result;
use crate::numerics::{
    gelu, gelu_backward, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Matrix,
    Scalar,
};

/// Adapters of one block together with the `alpha / rank` multiplier.
#[derive(Clone, Copy)]
pub struct LoraView<'a, T> {
    pub block: &'a BlockLora<T>,
    pub scale: T,
}

fn lora_delta<T: Scalar>(
    x: &Matrix<T>,
    pair: &LoraPair<T>,
    scale: T,
    mask: Option<&Matrix<T>>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut u = matmul(x, &pair.a)?;
    if let Some(m) = mask {
        u = u.hadamard(m)?;
    }
    let delta = matmul(&u, &pair.b)?.scale(scale);
    Ok((delta, u))
}

/// Returns the input gradient; adds `∂/∂A` and `∂/∂B` into `grad`.
fn lora_backward<T: Scalar>(
    x: &Matrix<T>,
    u_kept: &Matrix<T>,
    pair: &LoraPair<T>,
    scale: T,
    mask: Option<&Matrix<T>>,
    g_out: &Matrix<T>,
    grad: Option<&mut LoraPair<T>>,
) -> Result<Matrix<T>> {
    let gs = g_out.scale(scale);
    let mut g_u = matmul_nt(&gs, &pair.b)?;
    if let Some(m) = mask {
        g_u = g_u.hadamard(m)?;
    }
    if let Some(g) = grad {
        g.b.add_assign(&matmul_tn(u_kept, &gs)?)?;
        g.a.add_assign(&matmul_tn(x, &g_u)?)?;
    }
    matmul_nt(&g_u, &pair.a)
}

/// `x·W (+ scale·drop(x·A)·B) (+ bias)`, in that order.
fn project<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    bias: Option<&[T]>,
    lora: Option<(&LoraPair<T>, T)>,
    mask: Option<&Matrix<T>>,
) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
    let mut y = matmul(x, w)?;
    let mut u = None;
    if let Some((pair, scale)) = lora {
        let (delta, kept) = lora_delta(x, pair, scale, mask)?;
        y.add_assign(&delta)?;
        u = Some(kept);
    }
    if let Some(b) = bias {
        y.add_row_vector(b)?;
    }
    Ok((y, u))
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    kept: Vec<Matrix<T>>,
    h: Matrix<T>,
    /// Bottleneck activations for the q, k, v, o adapters.
    lora_u: [Option<Matrix<T>>; 4],
    attn_masks: Option<Vec<Matrix<T>>>,
    lora_masks: [Option<Matrix<T>>; 4],
}

impl<T: Scalar> AttentionCache<T> {
    /// The `Q`, `K`, `V` intermediates (visible to whoever runs the sublayer).
    pub fn qkv(&self) -> (&Matrix<T>, &Matrix<T>, &Matrix<T>) {
        (&self.q, &self.k, &self.v)
    }
}

/// Multi-head causal self-attention followed by the output projection.
pub fn attention_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &AttentionWeights<T>,
    lora: Option<LoraView<'_, T>>,
    n_head: usize,
    masks: &BlockMasks<T>,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    let site = |s: LoraSite| lora.map(|l| (l.block.get(s), l.scale));
    let (q, uq) = project(
        x,
        &w.w_q,
        Some(&w.b_q),
        site(LoraSite::Q),
        masks.lora(LoraSite::Q),
    )?;
    let (k, uk) = project(
        x,
        &w.w_k,
        Some(&w.b_k),
        site(LoraSite::K),
        masks.lora(LoraSite::K),
    )?;
    let (v, uv) = project(
        x,
        &w.w_v,
        Some(&w.b_v),
        site(LoraSite::V),
        masks.lora(LoraSite::V),
    )?;

    let seq = x.rows();
    let d = q.cols();
    let dh = d / n_head;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let neg_inf = T::from_f64(f64::NEG_INFINITY);
    let mut h = Matrix::zeros(seq, d);
    let mut probs = Vec::with_capacity(n_head);
    let mut kept = Vec::with_capacity(n_head);
    for head in 0..n_head {
        let qh = q.column_block(head * dh, dh);
        let kh = k.column_block(head * dh, dh);
        let vh = v.column_block(head * dh, dh);
        let mut scores = matmul_nt(&qh, &kh)?.scale(inv_sqrt);
        for i in 0..seq {
            for j in i + 1..seq {
                scores.set(i, j, neg_inf);
            }
        }
        let p = softmax_rows(&scores);
        let pk = match &masks.attn {
            Some(m) => p.hadamard(&m[head])?,
            None => p.clone(),
        };
        h.set_column_block(head * dh, &matmul(&pk, &vh)?);
        probs.push(p);
        kept.push(pk);
    }
    let (out, uo) = project(&h, &w.w_o, None, site(LoraSite::O), masks.lora(LoraSite::O))?;
    let pick = |s: LoraSite| masks.lora(s).cloned();
    let cache = AttentionCache {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        kept,
        h,
        lora_u: [uq, uk, uv, uo],
        attn_masks: masks.attn.clone(),
        lora_masks: [
            pick(LoraSite::Q),
            pick(LoraSite::K),
            pick(LoraSite::V),
            pick(LoraSite::O),
        ],
    };
    Ok((out, cache))
}

/// Reverse pass of [`attention_forward`]. Returns the input gradient and adds
/// adapter gradients into `grads` when given.
pub fn attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    w: &AttentionWeights<T>,
    lora: Option<LoraView<'_, T>>,
    n_head: usize,
    g_out: &Matrix<T>,
    mut grads: Option<&mut BlockLora<T>>,
) -> Result<Matrix<T>> {
    let mut g_h = matmul_nt(g_out, &w.w_o)?;
    if let Some(l) = lora {
        let gx = lora_backward(
            &cache.h,
            cache.lora_u[3].as_ref().expect("lora cache"),
            l.block.get(LoraSite::O),
            l.scale,
            cache.lora_masks[3].as_ref(),
            g_out,
            grads.as_deref_mut().map(|g| g.get_mut(LoraSite::O)),
        )?;
        g_h.add_assign(&gx)?;
    }

    let seq = cache.x.rows();
    let d = cache.q.cols();
    let dh = d / n_head;
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut g_q = Matrix::zeros(seq, d);
    let mut g_k = Matrix::zeros(seq, d);
    let mut g_v = Matrix::zeros(seq, d);
    for head in 0..n_head {
        let qh = cache.q.column_block(head * dh, dh);
        let kh = cache.k.column_block(head * dh, dh);
        let vh = cache.v.column_block(head * dh, dh);
        let g_hh = g_h.column_block(head * dh, dh);
        let mut g_p = matmul_nt(&g_hh, &vh)?;
        let g_vh = matmul_tn(&cache.kept[head], &g_hh)?;
        if let Some(m) = &cache.attn_masks {
            g_p = g_p.hadamard(&m[head])?;
        }
        let g_s = softmax_rows_backward(&cache.probs[head], &g_p).scale(inv_sqrt);
        g_q.set_column_block(head * dh, &matmul(&g_s, &kh)?);
        g_k.set_column_block(head * dh, &matmul_tn(&g_s, &qh)?);
        g_v.set_column_block(head * dh, &g_vh);
    }

    let mut g_x = matmul_nt(&g_q, &w.w_q)?;
    g_x.add_assign(&matmul_nt(&g_k, &w.w_k)?)?;
    g_x.add_assign(&matmul_nt(&g_v, &w.w_v)?)?;
    if let Some(l) = lora {
        for (slot, (site, g)) in [
            (LoraSite::Q, &g_q),
            (LoraSite::K, &g_k),
            (LoraSite::V, &g_v),
        ]
        .into_iter()
        .enumerate()
        {
            let gx = lora_backward(
                &cache.x,
                cache.lora_u[slot].as_ref().expect("lora cache"),
                l.block.get(site),
                l.scale,
                cache.lora_masks[slot].as_ref(),
                g,
                grads.as_deref_mut().map(|gr| gr.get_mut(site)),
            )?;
            g_x.add_assign(&gx)?;
        }
    }
    Ok(g_x)
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
    lora_u: [Option<Matrix<T>>; 2],
    lora_masks: [Option<Matrix<T>>; 2],
}

/// `gelu(x·W_1 + b_1)·W_2`, with adapters on both projections.
pub fn mlp_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &MlpWeights<T>,
    lora: Option<LoraView<'_, T>>,
    masks: &BlockMasks<T>,
) -> Result<(Matrix<T>, MlpCache<T>)> {
    let site = |s: LoraSite| lora.map(|l| (l.block.get(s), l.scale));
    let (pre, u1) = project(
        x,
        &w.w_1,
        Some(&w.b_1),
        site(LoraSite::Fc1),
        masks.lora(LoraSite::Fc1),
    )?;
    let act = gelu(&pre);
    let (out, u2) = project(
        &act,
        &w.w_2,
        None,
        site(LoraSite::Fc2),
        masks.lora(LoraSite::Fc2),
    )?;
    let cache = MlpCache {
        x: x.clone(),
        pre,
        act,
        lora_u: [u1, u2],
        lora_masks: [
            masks.lora(LoraSite::Fc1).cloned(),
            masks.lora(LoraSite::Fc2).cloned(),
        ],
    };
    Ok((out, cache))
}

pub fn mlp_backward<T: Scalar>(
    cache: &MlpCache<T>,
    w: &MlpWeights<T>,
    lora: Option<LoraView<'_, T>>,
    g_out: &Matrix<T>,
    mut grads: Option<&mut BlockLora<T>>,
) -> Result<Matrix<T>> {
    let mut g_act = matmul_nt(g_out, &w.w_2)?;
    if let Some(l) = lora {
        let gx = lora_backward(
            &cache.act,
            cache.lora_u[1].as_ref().expect("lora cache"),
            l.block.get(LoraSite::Fc2),
            l.scale,
            cache.lora_masks[1].as_ref(),
            g_out,
            grads.as_deref_mut().map(|g| g.get_mut(LoraSite::Fc2)),
        )?;
        g_act.add_assign(&gx)?;
    }
    let g_pre = gelu_backward(&cache.pre, &g_act);
    let mut g_x = matmul_nt(&g_pre, &w.w_1)?;
    if let Some(l) = lora {
        let gx = lora_backward(
            &cache.x,
            cache.lora_u[0].as_ref().expect("lora cache"),
            l.block.get(LoraSite::Fc1),
            l.scale,
            cache.lora_masks[0].as_ref(),
            &g_pre,
            grads.as_deref_mut().map(|g| g.get_mut(LoraSite::Fc1)),
        )?;
        g_x.add_assign(&gx)?;
    }
    Ok(g_x)
}
