//! Splitting a plain model into a trusted side and an obfuscated host side.
//!
//! Attention and feed-forward weight matrices leave the trusted zone as
//! products with keys: projections that read the residual stream are stored
//! as `R_in⁻¹·W`, projections that write back to it as `W·R_out`. Embeddings,
//! layer norms, the output biases `b_o`/`b_2`, the tied output head and the
//! keys themselves stay in the trusted zone. Adapter matrices live on the
//! host, with the factor that touches obfuscated coordinates transformed the
//! same way as its base weight.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{shape_err, Result};
use crate::model::{
    AttentionWeights, BlockLora, LoraAdapters, LoraConfig, LoraPair, LoraSet, LoraSite, MlpWeights,
    ModelConfig, PlainParams, TrunkParams,
};
use crate::numerics::{matmul, Matrix, Scalar};
use crate::obfmat::{generate_key, KeySpec, ObfuscationKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Residency {
    Tee,
    Host,
}

impl Residency {
    pub fn name(self) -> &'static str {
        match self {
            Residency::Tee => "tee",
            Residency::Host => "host",
        }
    }
}

/// Whether blocks reuse one pair of keys or each draw their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyPolicy {
    /// One input key and one output key for every sublayer of every block.
    Shared,
    /// Four keys per block: attention in/out and MLP in/out.
    PerBlock,
}

impl std::str::FromStr for KeyPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "shared" | "shared_keys" => Ok(KeyPolicy::Shared),
            "per_block" | "per-block" | "per_block_keys" => Ok(KeyPolicy::PerBlock),
            other => Err(format!("unknown key policy {other:?}")),
        }
    }
}

impl std::fmt::Display for KeyPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KeyPolicy::Shared => "shared",
            KeyPolicy::PerBlock => "per_block",
        })
    }
}

/// Indices into [`TeeSide::keys`] protecting one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKeyIds {
    pub attn_in: usize,
    pub attn_out: usize,
    pub mlp_in: usize,
    pub mlp_out: usize,
}

impl BlockKeyIds {
    fn for_site(&self, site: LoraSite) -> usize {
        match site {
            LoraSite::Q | LoraSite::K | LoraSite::V => self.attn_in,
            LoraSite::O => self.attn_out,
            LoraSite::Fc1 => self.mlp_in,
            LoraSite::Fc2 => self.mlp_out,
        }
    }
}

/// Everything the host holds for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscatedBlockWeights<T> {
    /// `w_q = R_a⁻¹·W_q` (likewise k, v), `w_o = W_o·R_b`; the q/k/v biases
    /// are plain.
    pub attn: AttentionWeights<T>,
    /// `w_1 = R_a'⁻¹·W_1`, `w_2 = W_2·R_b'`; `b_1` is plain.
    pub mlp: MlpWeights<T>,
    pub lora: Option<BlockLora<T>>,
    pub keys: BlockKeyIds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostSide<T> {
    pub n_head: usize,
    pub lora_config: Option<LoraConfig>,
    pub blocks: Vec<ObfuscatedBlockWeights<T>>,
}

impl<T: Scalar> HostSide<T> {
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                let a = &b.attn;
                let m = &b.mlp;
                let lora = b
                    .lora
                    .as_ref()
                    .map_or(0, |l| l.pairs.iter().map(|p| p.a.len() + p.b.len()).sum());
                a.w_q.len()
                    + a.w_k.len()
                    + a.w_v.len()
                    + a.w_o.len()
                    + a.b_q.len()
                    + a.b_k.len()
                    + a.b_v.len()
                    + m.w_1.len()
                    + m.b_1.len()
                    + m.w_2.len()
                    + lora
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeeSide<T> {
    pub trunk: TrunkParams<T>,
    pub keys: Vec<ObfuscationKey>,
    pub block_keys: Vec<BlockKeyIds>,
    pub lora_config: Option<LoraConfig>,
    pub key_spec: KeySpec,
    pub key_policy: KeyPolicy,
    pub key_seed: u64,
}

impl<T: Scalar> TeeSide<T> {
    pub fn param_count(&self) -> usize {
        let t = &self.trunk;
        t.token_embedding.len()
            + t.position_embedding.len()
            + 2 * t.ln_f.gain.len()
            + t.blocks
                .iter()
                .map(|b| 2 * b.ln1.gain.len() + 2 * b.ln2.gain.len() + b.b_o.len() + b.b_2.len())
                .sum::<usize>()
    }

    /// Worst measured condition number over all keys.
    pub fn max_key_kappa(&self) -> f64 {
        self.keys
            .iter()
            .map(|k| k.measured_kappa)
            .fold(1.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel<T> {
    pub config: ModelConfig,
    pub tee: TeeSide<T>,
    pub host: HostSide<T>,
}

/// Closed-form parameter counts by category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub token_embedding: u64,
    pub position_embedding: u64,
    pub layernorm: u64,
    pub attn_weights: u64,
    pub attn_qkv_bias: u64,
    pub attn_out_bias: u64,
    pub mlp_weights: u64,
    pub mlp_in_bias: u64,
    pub mlp_out_bias: u64,
    pub lora: u64,
}

impl ParamCounts {
    /// `(name, residency, count)` for every category.
    pub fn categories(&self) -> [(&'static str, Residency, u64); 10] {
        use Residency::*;
        [
            ("token_embedding", Tee, self.token_embedding),
            ("position_embedding", Tee, self.position_embedding),
            ("layernorm", Tee, self.layernorm),
            ("attn_out_bias", Tee, self.attn_out_bias),
            ("mlp_out_bias", Tee, self.mlp_out_bias),
            ("attn_weights", Host, self.attn_weights),
            ("attn_qkv_bias", Host, self.attn_qkv_bias),
            ("mlp_weights", Host, self.mlp_weights),
            ("mlp_in_bias", Host, self.mlp_in_bias),
            ("lora", Host, self.lora),
        ]
    }

    /// Parameters of the base model (adapters excluded).
    pub fn base_total(&self) -> u64 {
        self.total() - self.lora
    }

    pub fn total(&self) -> u64 {
        self.categories().iter().map(|c| c.2).sum()
    }

    pub fn residing(&self, residency: Residency) -> u64 {
        self.categories()
            .iter()
            .filter(|c| c.1 == residency)
            .map(|c| c.2)
            .sum()
    }
}

/// Parameter counts from shapes alone; `lora = None` counts no adapters.
pub fn count_params(config: &ModelConfig, lora: Option<&LoraConfig>) -> ParamCounts {
    let l = config.n_layer as u64;
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let lora = lora.map_or(0, |c| {
        let r = c.rank as u64;
        // q, k, v, o: d→d; fc1: d→ff; fc2: ff→d.
        l * r * (4 * 2 * d + 2 * (d + ff))
    });
    ParamCounts {
        token_embedding: config.vocab_size as u64 * d,
        position_embedding: config.context_len as u64 * d,
        layernorm: l * 4 * d + 2 * d,
        attn_weights: l * 4 * d * d,
        attn_qkv_bias: l * 3 * d,
        attn_out_bias: l * d,
        mlp_weights: l * 2 * d * ff,
        mlp_in_bias: l * ff,
        mlp_out_bias: l * d,
        lora,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub tee_param_count: u64,
    pub host_param_count: u64,
    pub tee_fraction: f64,
    pub counts: ParamCounts,
    /// Scalars held by the keys (kept in the trusted zone, not counted as
    /// model parameters).
    pub key_scalars: u64,
}

impl PartitionReport {
    pub fn from_counts(counts: ParamCounts, key_scalars: u64) -> Self {
        let tee = counts.residing(Residency::Tee);
        let host = counts.residing(Residency::Host);
        PartitionReport {
            tee_param_count: tee,
            host_param_count: host,
            tee_fraction: tee as f64 / (tee + host) as f64,
            counts,
            key_scalars,
        }
    }

    /// Report for a model config without materializing any weights.
    pub fn for_config(config: &ModelConfig, lora: Option<&LoraConfig>, policy: KeyPolicy) -> Self {
        let keys = match policy {
            KeyPolicy::Shared => 2,
            KeyPolicy::PerBlock => 4 * config.n_layer as u64,
        };
        // each key stores r and r⁻¹
        let d = config.d_model as u64;
        Self::from_counts(count_params(config, lora), keys * 2 * d * d)
    }

    /// `key: value` lines.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tee_param_count: {}", self.tee_param_count);
        let _ = writeln!(s, "host_param_count: {}", self.host_param_count);
        let _ = writeln!(s, "tee_fraction: {:.6}", self.tee_fraction);
        let _ = writeln!(s, "key_scalars: {}", self.key_scalars);
        for (name, res, n) in self.counts.categories() {
            let _ = writeln!(s, "{}.{}: {}", res.name(), name, n);
        }
        s
    }
}

fn check_key(key: &ObfuscationKey, n: usize, what: &'static str) -> Result<()> {
    if key.dim() != n {
        return Err(shape_err(
            what,
            format!("key of dimension {} for width {n}", key.dim()),
        ));
    }
    Ok(())
}

/// `w_{q,k,v} ← R_a⁻¹·w_{q,k,v}`, `w_o ← W_o·R_b`, evaluated in the working
/// precision. Biases pass through unchanged.
pub fn obfuscate_attention_block<T: Scalar>(
    w: &AttentionWeights<T>,
    key_a: &ObfuscationKey,
    key_b: &ObfuscationKey,
) -> Result<AttentionWeights<T>> {
    let d = w.w_q.rows();
    check_key(key_a, d, "obfuscate_attention_block")?;
    check_key(key_b, w.w_o.cols(), "obfuscate_attention_block")?;
    let (_, a_inv) = key_a.in_precision::<T>();
    let (b, _) = key_b.in_precision::<T>();
    Ok(AttentionWeights {
        w_q: matmul(&a_inv, &w.w_q)?,
        w_k: matmul(&a_inv, &w.w_k)?,
        w_v: matmul(&a_inv, &w.w_v)?,
        b_q: w.b_q.clone(),
        b_k: w.b_k.clone(),
        b_v: w.b_v.clone(),
        w_o: matmul(&w.w_o, &b)?,
    })
}

/// `w_1 ← R_a'⁻¹·W_1`, `w_2 ← W_2·R_b'`.
pub fn obfuscate_mlp_block<T: Scalar>(
    w: &MlpWeights<T>,
    key_a: &ObfuscationKey,
    key_b: &ObfuscationKey,
) -> Result<MlpWeights<T>> {
    check_key(key_a, w.w_1.rows(), "obfuscate_mlp_block")?;
    check_key(key_b, w.w_2.cols(), "obfuscate_mlp_block")?;
    let (_, a_inv) = key_a.in_precision::<T>();
    let (b, _) = key_b.in_precision::<T>();
    Ok(MlpWeights {
        w_1: matmul(&a_inv, &w.w_1)?,
        b_1: w.b_1.clone(),
        w_2: matmul(&w.w_2, &b)?,
    })
}

/// Moves adapters into obfuscated coordinates: `A ← R_in⁻¹·A` for sites that
/// read the obfuscated stream, `B ← B·R_out` for sites that write to it.
pub fn obfuscate_lora_block<T: Scalar>(
    lora: &BlockLora<T>,
    keys: &[ObfuscationKey],
    ids: BlockKeyIds,
) -> Result<BlockLora<T>> {
    let mut out = lora.clone();
    for site in LoraSite::ALL {
        let key = &keys[ids.for_site(site)];
        let pair = out.get_mut(site);
        if site.input_side() {
            pair.a = matmul(&key.r_inv.cast::<T>(), &pair.a)?;
        } else {
            pair.b = matmul(&pair.b, &key.r.cast::<T>())?;
        }
    }
    Ok(out)
}

/// Inverse of [`obfuscate_lora_block`], evaluated in f64.
pub fn deobfuscate_lora_block<T: Scalar>(
    lora: &BlockLora<T>,
    keys: &[ObfuscationKey],
    ids: BlockKeyIds,
) -> Result<BlockLora<T>> {
    let mut out = lora.clone();
    for site in LoraSite::ALL {
        let key = &keys[ids.for_site(site)];
        let pair = out.get_mut(site);
        if site.input_side() {
            pair.a = matmul(&key.r, &pair.a.cast::<f64>())?.cast();
        } else {
            pair.b = matmul(&pair.b.cast::<f64>(), &key.r_inv)?.cast();
        }
    }
    Ok(out)
}

fn block_key_ids(policy: KeyPolicy, block: usize) -> BlockKeyIds {
    match policy {
        KeyPolicy::Shared => BlockKeyIds {
            attn_in: 0,
            attn_out: 1,
            mlp_in: 0,
            mlp_out: 1,
        },
        KeyPolicy::PerBlock => BlockKeyIds {
            attn_in: 4 * block,
            attn_out: 4 * block + 1,
            mlp_in: 4 * block + 2,
            mlp_out: 4 * block + 3,
        },
    }
}

fn draw_keys(
    config: &ModelConfig,
    policy: KeyPolicy,
    spec: KeySpec,
    seed: u64,
) -> Result<(Vec<ObfuscationKey>, Vec<BlockKeyIds>)> {
    let n_keys = match policy {
        KeyPolicy::Shared => 2,
        KeyPolicy::PerBlock => 4 * config.n_layer,
    };
    let keys = (0..n_keys)
        .map(|i| generate_key(spec, config.d_model, seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..config.n_layer)
        .map(|b| block_key_ids(policy, b))
        .collect();
    Ok((keys, ids))
}

/// Draws keys, obfuscates every block and tags residency.
pub fn partition_model<T: Scalar>(
    params: &PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    policy: KeyPolicy,
    spec: KeySpec,
    seed: u64,
) -> Result<(PartitionedModel<T>, PartitionReport)> {
    let config = &params.config;
    config.validate()?;
    let (keys, ids) = draw_keys(config, policy, spec, seed)?;
    let mut blocks = Vec::with_capacity(config.n_layer);
    for (b, w) in params.blocks.iter().enumerate() {
        let k = ids[b];
        blocks.push(ObfuscatedBlockWeights {
            attn: obfuscate_attention_block(&w.attn, &keys[k.attn_in], &keys[k.attn_out])?,
            mlp: obfuscate_mlp_block(&w.mlp, &keys[k.mlp_in], &keys[k.mlp_out])?,
            lora: adapters
                .map(|a| obfuscate_lora_block(&a.set.blocks[b], &keys, k))
                .transpose()?,
            keys: k,
        });
    }
    let lora_config = adapters.map(|a| a.config);
    let model = PartitionedModel {
        config: config.clone(),
        tee: TeeSide {
            trunk: params.trunk.clone(),
            keys,
            block_keys: ids,
            lora_config,
            key_spec: spec,
            key_policy: policy,
            key_seed: seed,
        },
        host: HostSide {
            n_head: config.n_head,
            lora_config,
            blocks,
        },
    };
    let report = model.report();
    Ok((model, report))
}

impl<T: Scalar> PartitionedModel<T> {
    /// Residency accounting from the tensors actually held.
    pub fn report(&self) -> PartitionReport {
        let counts = count_params(&self.config, self.tee.lora_config.as_ref());
        let key_scalars = self
            .tee
            .keys
            .iter()
            .map(|k| (k.r.len() + k.r_inv.len()) as u64)
            .sum();
        PartitionReport::from_counts(counts, key_scalars)
    }

    /// Host adapters mapped back to plain coordinates (trusted-zone view).
    pub fn plain_lora(&self) -> Result<Option<LoraAdapters<T>>> {
        let Some(config) = self.host.lora_config else {
            return Ok(None);
        };
        let blocks = self
            .host
            .blocks
            .iter()
            .map(|b| {
                deobfuscate_lora_block(
                    b.lora.as_ref().expect("adapters present"),
                    &self.tee.keys,
                    b.keys,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(LoraAdapters {
            config,
            set: LoraSet { blocks },
        }))
    }

    /// Host adapters in their stored (obfuscated) coordinates.
    pub fn host_lora(&self) -> Option<LoraSet<T>> {
        self.host.lora_config?;
        Some(LoraSet {
            blocks: self
                .host
                .blocks
                .iter()
                .map(|b| b.lora.clone().expect("adapters present"))
                .collect(),
        })
    }

    /// Replaces the host adapters (obfuscated coordinates).
    pub fn set_host_lora(&mut self, set: &LoraSet<T>) -> Result<()> {
        if set.blocks.len() != self.host.blocks.len() {
            return Err(shape_err("set_host_lora", "block count"));
        }
        for (b, l) in self.host.blocks.iter_mut().zip(&set.blocks) {
            b.lora = Some(l.clone());
        }
        Ok(())
    }
}

/// Re-keys a partitioned model with fresh keys drawn from `new_seed`.
///
/// Each host tensor is mapped through `R_new⁻¹·R_old` (or `R_old⁻¹·R_new` on
/// the output side) in f64, so trained adapters carry over. Returns the
/// elapsed wall time alongside the new model.
pub fn reobfuscate<T: Scalar>(
    model: &PartitionedModel<T>,
    new_seed: u64,
) -> Result<(PartitionedModel<T>, Duration)> {
    let start = Instant::now();
    let tee = &model.tee;
    let (keys, ids) = draw_keys(&model.config, tee.key_policy, tee.key_spec, new_seed)?;
    let old = &tee.keys;

    let rekey_in =
        |w: &Matrix<T>, old_k: &ObfuscationKey, new_k: &ObfuscationKey| -> Result<Matrix<T>> {
            let plain = matmul(&old_k.r, &w.cast::<f64>())?;
            Ok(matmul(&new_k.r_inv, &plain)?.cast())
        };
    let rekey_out =
        |w: &Matrix<T>, old_k: &ObfuscationKey, new_k: &ObfuscationKey| -> Result<Matrix<T>> {
            let plain = matmul(&w.cast::<f64>(), &old_k.r_inv)?;
            Ok(matmul(&plain, &new_k.r)?.cast())
        };

    let mut blocks = Vec::with_capacity(model.host.blocks.len());
    for (b, ob) in model.host.blocks.iter().enumerate() {
        let (o, n) = (ob.keys, ids[b]);
        let attn = AttentionWeights {
            w_q: rekey_in(&ob.attn.w_q, &old[o.attn_in], &keys[n.attn_in])?,
            w_k: rekey_in(&ob.attn.w_k, &old[o.attn_in], &keys[n.attn_in])?,
            w_v: rekey_in(&ob.attn.w_v, &old[o.attn_in], &keys[n.attn_in])?,
            b_q: ob.attn.b_q.clone(),
            b_k: ob.attn.b_k.clone(),
            b_v: ob.attn.b_v.clone(),
            w_o: rekey_out(&ob.attn.w_o, &old[o.attn_out], &keys[n.attn_out])?,
        };
        let mlp = MlpWeights {
            w_1: rekey_in(&ob.mlp.w_1, &old[o.mlp_in], &keys[n.mlp_in])?,
            b_1: ob.mlp.b_1.clone(),
            w_2: rekey_out(&ob.mlp.w_2, &old[o.mlp_out], &keys[n.mlp_out])?,
        };
        let lora = match &ob.lora {
            None => None,
            Some(l) => {
                let mut out = l.clone();
                for site in LoraSite::ALL {
                    let (ok, nk) = (&old[o.for_site(site)], &keys[n.for_site(site)]);
                    let LoraPair { a, b } = out.get_mut(site);
                    if site.input_side() {
                        *a = rekey_in(a, ok, nk)?;
                    } else {
                        *b = rekey_out(b, ok, nk)?;
                    }
                }
                Some(out)
            }
        };
        blocks.push(ObfuscatedBlockWeights {
            attn,
            mlp,
            lora,
            keys: n,
        });
    }
    let out = PartitionedModel {
        config: model.config.clone(),
        tee: TeeSide {
            trunk: tee.trunk.clone(),
            keys,
            block_keys: ids,
            lora_config: tee.lora_config,
            key_spec: tee.key_spec,
            key_policy: tee.key_policy,
            key_seed: new_seed,
        },
        host: HostSide {
            n_head: model.host.n_head,
            lora_config: model.host.lora_config,
            blocks,
        },
    };
    Ok((out, start.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_lora, init_params};
    use crate::obfmat::{identity_key, random_orthogonal_at};
    use crate::rng::SeededRng;

    #[test]
    fn embedding_count_for_xl_dims() {
        let c = count_params(&ModelConfig::gpt2_xl(), None);
        assert_eq!(c.token_embedding + c.position_embedding, 82_049_600);
    }

    #[test]
    fn xl_total_matches_public_size() {
        // 1,557,611,200 parameters with a tied head.
        assert_eq!(
            count_params(&ModelConfig::gpt2_xl(), None).base_total(),
            1_557_611_200
        );
    }

    #[test]
    fn single_block_attention_count() {
        let c = count_params(&ModelConfig::new(1, 1, 4, 7, 3), None);
        assert_eq!(
            c.attn_weights + c.attn_qkv_bias + c.attn_out_bias,
            4 * (4 * 4) + 4 * 4
        );
    }

    #[test]
    fn counts_agree_with_materialized_tensors() {
        let cfg = ModelConfig::new(3, 2, 8, 11, 5);
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let lora = init_lora::<f32>(
            &cfg,
            LoraConfig {
                rank: 3,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let counts = count_params(&cfg, Some(&lora.config));
        assert_eq!(counts.base_total() as usize, params.param_count());
        assert_eq!(counts.lora as usize, lora.param_count());
        let (model, report) = partition_model(
            &params,
            Some(&lora),
            KeyPolicy::PerBlock,
            KeySpec::Orthogonal,
            1,
        )
        .unwrap();
        assert_eq!(report.tee_param_count as usize, model.tee.param_count());
        assert_eq!(report.host_param_count as usize, model.host.param_count());
        assert_eq!(
            model.tee.param_count() + model.host.param_count(),
            params.param_count() + lora.param_count()
        );
        assert!(
            (report.tee_fraction - report.tee_param_count as f64 / counts.total() as f64).abs()
                < 1e-15
        );
    }

    #[test]
    fn identity_keys_pass_weights_through() {
        let mut rng = SeededRng::new(0, 0);
        let w = AttentionWeights::<f64> {
            w_q: rng.gaussian_matrix(4, 4),
            w_k: rng.gaussian_matrix(4, 4),
            w_v: rng.gaussian_matrix(4, 4),
            b_q: vec![0.1; 4],
            b_k: vec![0.2; 4],
            b_v: vec![0.3; 4],
            w_o: rng.gaussian_matrix(4, 4),
        };
        let id = identity_key(4);
        assert_eq!(obfuscate_attention_block(&w, &id, &id).unwrap(), w);
        let m = MlpWeights::<f64> {
            w_1: rng.gaussian_matrix(4, 16),
            b_1: vec![0.5; 16],
            w_2: rng.gaussian_matrix(16, 4),
        };
        assert_eq!(obfuscate_mlp_block(&m, &id, &id).unwrap(), m);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let w = MlpWeights::<f64> {
            w_1: Matrix::zeros(4, 8),
            b_1: vec![0.0; 8],
            w_2: Matrix::zeros(8, 4),
        };
        let k3 = identity_key(3);
        let k4 = identity_key(4);
        assert!(obfuscate_mlp_block(&w, &k3, &k4).is_err());
        assert!(obfuscate_mlp_block(&w, &k4, &k3).is_err());
    }

    #[test]
    fn lora_round_trip_through_keys() {
        let cfg = ModelConfig::new(2, 2, 8, 11, 5);
        let mut lora = init_lora::<f64>(
            &cfg,
            LoraConfig {
                rank: 2,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        lora.randomize_b(3, 0.1);
        let keys: Vec<_> = (0..8)
            .map(|i| random_orthogonal_at(8, 5, i).unwrap())
            .collect();
        let ids = block_key_ids(KeyPolicy::PerBlock, 1);
        let ob = obfuscate_lora_block(&lora.set.blocks[1], &keys, ids).unwrap();
        let back = deobfuscate_lora_block(&ob, &keys, ids).unwrap();
        for (x, y) in back.pairs.iter().zip(&lora.set.blocks[1].pairs) {
            assert!(x.a.max_abs_diff(&y.a) < 1e-14);
            assert!(x.b.max_abs_diff(&y.b) < 1e-14);
        }
    }

    #[test]
    fn tee_fraction_decreases_with_depth() {
        let mut last = 1.0;
        for n_layer in 1..=12 {
            let cfg = ModelConfig::new(n_layer, 4, 128, 256, 128);
            let f = PartitionReport::for_config(&cfg, None, KeyPolicy::PerBlock).tee_fraction;
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn record_lists_fraction() {
        let r = PartitionReport::for_config(
            &ModelConfig::gpt2_xl(),
            Some(&LoraConfig::default()),
            KeyPolicy::PerBlock,
        );
        let rec = r.to_record();
        assert!(rec.contains("tee_fraction: 0.05"), "{rec}");
        assert!(rec.contains("host.lora: "));
    }
}
