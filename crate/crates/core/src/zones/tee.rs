//! The trusted zone: keys, embeddings, layer norms, output biases, the loss,
//! and the session that drives the host.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::network::{run_backward, run_forward, NetworkCache};
use crate::model::{
    cross_entropy, BlockExecutor, BlockMasks, LoraAdapters, LoraConfig, LoraSet, LoraSite, Mode,
    ModelConfig, TokenBatch,
};
use crate::numerics::{matmul, Matrix, Scalar};
use crate::obfmat::ObfuscationKey;
use crate::partition::{deobfuscate_lora_block, BlockKeyIds, PartitionedModel, TeeSide};

use super::envelope::{AuthToken, Envelope};
use super::host::SessionConfig;
use super::ledger::{Direction, ZoneLedger};
use super::link::{HostLink, InProcessLink, ProcessLink, TransportConfig};
use super::wire::{op, Message, WireTensor, PROTOCOL_VERSION};

/// Where the host zone runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServeMode {
    InProcess,
    TwoProcess(TransportConfig),
}

struct KeyMats<T> {
    r: Matrix<T>,
    r_inv: Matrix<T>,
    r_t: Matrix<T>,
    r_inv_t: Matrix<T>,
}

impl<T: Scalar> KeyMats<T> {
    fn new(k: &ObfuscationKey) -> Self {
        let (r, r_inv) = k.in_precision::<T>();
        KeyMats {
            r_t: r.transpose(),
            r_inv_t: r_inv.transpose(),
            r,
            r_inv,
        }
    }
}

/// One protected session: the trusted zone plus a link to its host zone.
///
/// Any transport or protocol failure poisons the session; later calls fail
/// immediately instead of running against a host in an unknown state.
pub struct TeeSession<T: Scalar> {
    config: ModelConfig,
    tee: TeeSide<T>,
    mats: Vec<KeyMats<T>>,
    link: Box<dyn HostLink>,
    owners: HashMap<String, Vec<u8>>,
    poisoned: Option<String>,
    setup: ZoneLedger,
}

fn session_token() -> Vec<u8> {
    use rand::RngCore;
    let mut t = vec![0u8; 32];
    rand::rng().fill_bytes(&mut t);
    t
}

/// Starts a host zone, ships it the obfuscated weights and returns the
/// trusted-zone handle. The host half of `model` is consumed.
pub fn serve_zones<T: Scalar>(
    model: PartitionedModel<T>,
    mode: &ServeMode,
) -> Result<TeeSession<T>> {
    let token = session_token();
    let link: Box<dyn HostLink> = match mode {
        ServeMode::InProcess => Box::new(InProcessLink::new(token.clone())),
        ServeMode::TwoProcess(cfg) => Box::new(ProcessLink::spawn(cfg, &token)?),
    };
    TeeSession::start(model, link, &token)
}

struct Exec<'a, T: Scalar> {
    mats: &'a [KeyMats<T>],
    ids: &'a [BlockKeyIds],
    link: &'a mut dyn HostLink,
    ledger: &'a mut ZoneLedger,
}

fn expect_result(reply: Message) -> Result<WireTensor> {
    match reply {
        Message::Result(t) => Ok(t),
        Message::Error { code, message } => Err(Error::Remote { code, message }),
        other => Err(Error::Protocol(format!(
            "expected RESULT, got message type 0x{:02x}",
            other.kind()
        ))),
    }
}

fn mask_tensors<T: Scalar>(masks: &BlockMasks<T>, sites: &[LoraSite]) -> Vec<WireTensor> {
    let mut out = Vec::new();
    if let Some(attn) = masks.attn.as_ref().filter(|_| sites.contains(&LoraSite::Q)) {
        let seq = attn[0].rows() as u32;
        let flat: Vec<T> = attn.iter().flat_map(|m| m.data().iter().copied()).collect();
        out.push(WireTensor::from_slice(
            "mask.attn",
            vec![attn.len() as u32, seq, seq],
            &flat,
        ));
    }
    for &site in sites {
        if let Some(m) = masks.lora(site) {
            out.push(WireTensor::from_matrix(
                format!("mask.lora.{}", site.name()),
                m,
            ));
        }
    }
    out
}

impl<T: Scalar> Exec<'_, T> {
    /// One lock-step exchange: `tensors` out, one result back.
    fn call(
        &mut self,
        opcode: u8,
        block: usize,
        tensors: Vec<WireTensor>,
        kinds: (&'static str, &'static str),
    ) -> Result<Matrix<T>> {
        let elements = tensors.iter().map(WireTensor::element_count).sum();
        self.ledger
            .record(Direction::TeeToHost, kinds.0, block, elements);
        for t in tensors {
            self.link.send(&Message::Tensor(t))?;
        }
        self.link.send(&Message::Compute {
            op: opcode,
            block: block as u32,
        })?;
        let t0 = Instant::now();
        let reply = self.link.recv();
        self.ledger.host_time += t0.elapsed();
        let t = expect_result(reply?)?;
        self.ledger
            .record(Direction::HostToTee, kinds.1, block, t.element_count());
        t.to_matrix()
    }
}

const ATTN_SITES: [LoraSite; 4] = [LoraSite::Q, LoraSite::K, LoraSite::V, LoraSite::O];
const MLP_SITES: [LoraSite; 2] = [LoraSite::Fc1, LoraSite::Fc2];

impl<T: Scalar> BlockExecutor<T> for Exec<'_, T> {
    fn attention(
        &mut self,
        block: usize,
        xln: &Matrix<T>,
        masks: &BlockMasks<T>,
    ) -> Result<Matrix<T>> {
        let ids = self.ids[block];
        let x = matmul(xln, &self.mats[ids.attn_in].r)?;
        let mut ts = vec![WireTensor::from_matrix("x", &x)];
        ts.extend(mask_tensors(masks, &ATTN_SITES));
        let o = self.call(op::ATTENTION, block, ts, ("attn.in", "attn.out"))?;
        matmul(&o, &self.mats[ids.attn_out].r_inv)
    }

    fn mlp(&mut self, block: usize, xln: &Matrix<T>, masks: &BlockMasks<T>) -> Result<Matrix<T>> {
        let ids = self.ids[block];
        let x = matmul(xln, &self.mats[ids.mlp_in].r)?;
        let mut ts = vec![WireTensor::from_matrix("x", &x)];
        ts.extend(mask_tensors(masks, &MLP_SITES));
        let y = self.call(op::MLP, block, ts, ("mlp.in", "mlp.out"))?;
        matmul(&y, &self.mats[ids.mlp_out].r_inv)
    }

    fn attention_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>> {
        let ids = self.ids[block];
        let g = matmul(g_out, &self.mats[ids.attn_out].r_inv_t)?;
        let ts = vec![WireTensor::from_matrix("grad", &g)];
        let gx = self.call(
            op::ATTENTION_BACKWARD,
            block,
            ts,
            ("attn.grad_out", "attn.grad_in"),
        )?;
        matmul(&gx, &self.mats[ids.attn_in].r_t)
    }

    fn mlp_backward(&mut self, block: usize, g_out: &Matrix<T>) -> Result<Matrix<T>> {
        let ids = self.ids[block];
        let g = matmul(g_out, &self.mats[ids.mlp_out].r_inv_t)?;
        let ts = vec![WireTensor::from_matrix("grad", &g)];
        let gx = self.call(op::MLP_BACKWARD, block, ts, ("mlp.grad_out", "mlp.grad_in"))?;
        matmul(&gx, &self.mats[ids.mlp_in].r_t)
    }
}

impl<T: Scalar> TeeSession<T> {
    fn start(model: PartitionedModel<T>, link: Box<dyn HostLink>, token: &[u8]) -> Result<Self> {
        let PartitionedModel { config, tee, host } = model;
        let mats = tee.keys.iter().map(KeyMats::new).collect();
        let mut s = TeeSession {
            config,
            tee,
            mats,
            link,
            owners: HashMap::new(),
            poisoned: None,
            setup: ZoneLedger::new(T::PRECISION.size_of()),
        };
        s.guard(|s| {
            s.link.send(&Message::Hello {
                version: PROTOCOL_VERSION,
                precision: T::PRECISION.code(),
            })?;
            match s.link.recv()? {
                Message::Hello { version, .. } if version == PROTOCOL_VERSION => {}
                Message::Error { code, message } => return Err(Error::Remote { code, message }),
                _ => return Err(Error::Protocol("bad HELLO reply".into())),
            }
            s.link.send(&Message::Auth(token.to_vec()))?;
            expect_result(s.link.recv()?)?;

            let lora = s.tee.lora_config;
            let session = SessionConfig {
                n_layer: s.config.n_layer,
                n_head: s.config.n_head,
                d_model: s.config.d_model,
                d_ff: s.config.d_ff,
                lora_rank: lora.map_or(0, |l| l.rank),
                lora_scale: lora.map_or(0.0, |l| l.scale()),
            };
            s.control(op::CONFIGURE, 0, vec![session.to_tensor::<T>()])?;
            for (b, blk) in host.blocks.iter().enumerate() {
                let a = &blk.attn;
                let m = &blk.mlp;
                let vec1 = |id: &str, v: &[T]| WireTensor::from_slice(id, vec![v.len() as u32], v);
                let mut ts = vec![
                    WireTensor::from_matrix("w_q", &a.w_q),
                    WireTensor::from_matrix("w_k", &a.w_k),
                    WireTensor::from_matrix("w_v", &a.w_v),
                    vec1("b_q", &a.b_q),
                    vec1("b_k", &a.b_k),
                    vec1("b_v", &a.b_v),
                    WireTensor::from_matrix("w_o", &a.w_o),
                    WireTensor::from_matrix("w_1", &m.w_1),
                    vec1("b_1", &m.b_1),
                    WireTensor::from_matrix("w_2", &m.w_2),
                ];
                if let Some(l) = &blk.lora {
                    for site in LoraSite::ALL {
                        let p = l.get(site);
                        ts.push(WireTensor::from_matrix(
                            format!("lora.{}.a", site.name()),
                            &p.a,
                        ));
                        ts.push(WireTensor::from_matrix(
                            format!("lora.{}.b", site.name()),
                            &p.b,
                        ));
                    }
                }
                s.control(op::LOAD_BLOCK, b, ts)?;
            }
            Ok(())
        })?;
        s.setup.close();
        Ok(s)
    }

    /// Runs `f`, poisoning the session if it fails at the transport or
    /// protocol level.
    fn guard<R>(&mut self, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        if let Some(why) = &self.poisoned {
            return Err(Error::Protocol(format!(
                "session is unusable after an earlier failure: {why}"
            )));
        }
        let r = f(self);
        if let Err(e) = &r {
            if matches!(
                e,
                Error::Transport { .. } | Error::Protocol(_) | Error::Remote { .. }
            ) {
                self.poisoned = Some(e.to_string());
            }
        }
        r
    }

    /// Request/response outside the activation path (setup, optimizer, export).
    fn control(
        &mut self,
        opcode: u8,
        block: usize,
        tensors: Vec<WireTensor>,
    ) -> Result<WireTensor> {
        let elements: usize = tensors.iter().map(WireTensor::element_count).sum();
        self.setup.record_control(elements);
        for t in tensors {
            self.link.send(&Message::Tensor(t))?;
        }
        self.link.send(&Message::Compute {
            op: opcode,
            block: block as u32,
        })?;
        expect_result(self.link.recv()?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<LoraConfig> {
        self.tee.lora_config
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.is_some()
    }

    /// Control traffic and timing of session setup.
    pub fn setup_ledger(&self) -> &ZoneLedger {
        &self.setup
    }

    pub fn keys(&self) -> &[ObfuscationKey] {
        &self.tee.keys
    }

    /// Allows `token.caller_id` to query the model with `token.secret`.
    pub fn register_owner(&mut self, token: &AuthToken) {
        self.owners
            .insert(token.caller_id.clone(), token.secret.clone());
    }

    fn open(&self, envelope: &Envelope, token: &AuthToken) -> Result<TokenBatch> {
        match self.owners.get(&token.caller_id) {
            Some(secret) if *secret == token.secret => envelope.open(secret),
            _ => Err(Error::Unauthenticated(format!(
                "caller {:?} is not authorized",
                token.caller_id
            ))),
        }
    }

    fn run(
        &mut self,
        batch: &TokenBatch,
        mode: Mode,
        ledger: &mut ZoneLedger,
    ) -> Result<(Matrix<T>, NetworkCache<T>)> {
        let Self {
            config,
            tee,
            mats,
            link,
            ..
        } = self;
        let mut exec = Exec {
            mats,
            ids: &tee.block_keys,
            link: link.as_mut(),
            ledger,
        };
        run_forward(
            config,
            &tee.trunk,
            &mut exec,
            batch,
            mode,
            tee.lora_config.as_ref(),
        )
    }

    fn backward(
        &mut self,
        cache: &NetworkCache<T>,
        g: &Matrix<T>,
        ledger: &mut ZoneLedger,
    ) -> Result<()> {
        let Self {
            tee, mats, link, ..
        } = self;
        let mut exec = Exec {
            mats,
            ids: &tee.block_keys,
            link: link.as_mut(),
            ledger,
        };
        run_backward(&tee.trunk, &mut exec, cache, g)
    }

    /// Logits for a sealed batch. The ledger covers this call only.
    pub fn forward_protected(
        &mut self,
        envelope: &Envelope,
        token: &AuthToken,
        mode: Mode,
    ) -> Result<(Matrix<T>, ZoneLedger)> {
        let batch = self.open(envelope, token)?;
        self.guard(|s| {
            let mut ledger = ZoneLedger::new(T::PRECISION.size_of());
            let (logits, _) = s.run(&batch, mode, &mut ledger)?;
            ledger.close();
            Ok((logits, ledger))
        })
    }

    fn loss_and_backward(
        &mut self,
        batch: &TokenBatch,
        mode: Mode,
        ledger: &mut ZoneLedger,
    ) -> Result<f64> {
        if self.tee.lora_config.is_none() {
            return Err(Error::InvalidArgument("training needs adapters".into()));
        }
        let targets = batch.targets.as_ref().ok_or(Error::MissingTargets)?;
        let (logits, cache) = self.run(batch, mode, ledger)?;
        let (loss, g) = cross_entropy(&logits, targets)?;
        self.backward(&cache, &g, ledger)?;
        Ok(loss)
    }

    /// Loss and adapter gradients in the host's (obfuscated) coordinates.
    pub fn loss_and_grads_protected(
        &mut self,
        envelope: &Envelope,
        token: &AuthToken,
        mode: Mode,
    ) -> Result<(f64, LoraSet<T>, ZoneLedger)> {
        let batch = self.open(envelope, token)?;
        self.guard(|s| {
            let mut ledger = ZoneLedger::new(T::PRECISION.size_of());
            let loss = s.loss_and_backward(&batch, mode, &mut ledger)?;
            let flat = s.control(op::EXPORT_GRADS, 0, vec![])?.to_vec::<T>()?;
            ledger.record_control(flat.len());
            let mut grads = s.zero_lora();
            grads.assign_flat(&flat)?;
            ledger.close();
            Ok((loss, grads, ledger))
        })
    }

    /// One SGD step on the host-resident adapters. Fails with
    /// [`Error::Diverged`] when the loss is not finite.
    pub fn train_step_protected(
        &mut self,
        envelope: &Envelope,
        token: &AuthToken,
        lr: f64,
        mode: Mode,
    ) -> Result<(f64, ZoneLedger)> {
        self.train_step_accumulated(std::slice::from_ref(envelope), token, lr, &[mode])
    }

    /// One SGD step on the mean gradient of several sealed sequences; the
    /// returned loss is their mean.
    pub fn train_step_accumulated(
        &mut self,
        envelopes: &[Envelope],
        token: &AuthToken,
        lr: f64,
        modes: &[Mode],
    ) -> Result<(f64, ZoneLedger)> {
        if envelopes.is_empty() || envelopes.len() != modes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} envelopes with {} modes",
                envelopes.len(),
                modes.len()
            )));
        }
        let batches = envelopes
            .iter()
            .map(|e| self.open(e, token))
            .collect::<Result<Vec<_>>>()?;
        let kappa = self.tee.max_key_kappa();
        let n = batches.len() as f64;
        self.guard(|s| {
            let mut ledger = ZoneLedger::new(T::PRECISION.size_of());
            let mut total = 0.0;
            for (batch, &mode) in batches.iter().zip(modes) {
                total += s.loss_and_backward(batch, mode, &mut ledger)?;
            }
            let loss = total / n;
            if !loss.is_finite() {
                let _ = s.control(op::EXPORT_GRADS, 0, vec![])?;
                return Err(Error::Diverged {
                    step: 0,
                    loss,
                    kappa,
                });
            }
            let lr_t = WireTensor::from_slice("lr", vec![1], &[T::from_f64(lr / n)]);
            ledger.record_control(1);
            s.control(op::SGD, 0, vec![lr_t])?;
            ledger.close();
            Ok((loss, ledger))
        })
    }

    fn zero_lora(&self) -> LoraSet<T> {
        LoraSet::zeros_like(&self.config, self.tee.lora_config.map_or(0, |l| l.rank))
    }

    /// Adapters as stored on the host (obfuscated coordinates).
    pub fn export_lora_host(&mut self) -> Result<LoraSet<T>> {
        self.guard(|s| {
            let flat = s.control(op::EXPORT_LORA, 0, vec![])?.to_vec::<T>()?;
            let mut set = s.zero_lora();
            set.assign_flat(&flat)?;
            Ok(set)
        })
    }

    /// Replaces the host adapters (obfuscated coordinates).
    pub fn import_lora_host(&mut self, set: &LoraSet<T>) -> Result<()> {
        self.guard(|s| {
            let flat = set.flatten();
            let t = WireTensor::from_slice("lora", vec![flat.len() as u32], &flat);
            s.control(op::IMPORT_LORA, 0, vec![t]).map(|_| ())
        })
    }

    /// Host adapters mapped back to plain coordinates with the keys.
    pub fn export_lora_plain(&mut self) -> Result<LoraAdapters<T>> {
        let config = self
            .tee
            .lora_config
            .ok_or_else(|| Error::InvalidArgument("model has no adapters".into()))?;
        let host = self.export_lora_host()?;
        let blocks = host
            .blocks
            .iter()
            .zip(&self.tee.block_keys)
            .map(|(b, &ids)| deobfuscate_lora_block(b, &self.tee.keys, ids))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoraAdapters {
            config,
            set: LoraSet { blocks },
        })
    }

    /// Maps host-coordinate gradients to plain coordinates:
    /// `g_A = R⁻ᵀ·g_A*` on the input side, `g_B = g_B*·Rᵀ` on the output side.
    pub fn grads_to_plain(&self, grads: &LoraSet<T>) -> Result<LoraSet<T>> {
        let mut out = grads.clone();
        for (blk, &ids) in out.blocks.iter_mut().zip(&self.tee.block_keys) {
            for site in LoraSite::ALL {
                let pair = blk.get_mut(site);
                if site.input_side() {
                    let k = &self.tee.keys[ids_for(ids, site)];
                    pair.a = matmul(&k.r_inv.transpose(), &pair.a.cast::<f64>())?.cast();
                } else {
                    let k = &self.tee.keys[ids_for(ids, site)];
                    pair.b = matmul(&pair.b.cast::<f64>(), &k.r.transpose())?.cast();
                }
            }
        }
        Ok(out)
    }

    /// Host weight tensors, when the host shares this address space.
    pub fn host_audit_tensors(&self) -> Option<Vec<(String, Matrix<f64>)>> {
        self.link.audit_tensors()
    }

    /// Ends the session politely.
    pub fn shutdown(mut self) -> Result<()> {
        if self.poisoned.is_none() {
            self.link.send(&Message::Bye)?;
        }
        Ok(())
    }

    /// Sends raw bytes to the host, for fault-injection tests. Only
    /// meaningful for two-process sessions.
    pub fn link_mut(&mut self) -> &mut dyn HostLink {
        self.link.as_mut()
    }

    /// Marks the session unusable.
    pub fn poison(&mut self, why: impl Into<String>) {
        self.poisoned = Some(why.into());
    }
}

fn ids_for(ids: BlockKeyIds, site: LoraSite) -> usize {
    match site {
        LoraSite::Q | LoraSite::K | LoraSite::V => ids.attn_in,
        LoraSite::O => ids.attn_out,
        LoraSite::Fc1 => ids.mlp_in,
        LoraSite::Fc2 => ids.mlp_out,
    }
}

/// Wall-clock comparison of the protected and plain forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slowdown {
    pub t_protected: f64,
    pub t_plain: f64,
    pub ratio: f64,
}

fn median(mut v: Vec<Duration>) -> f64 {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].as_secs_f64()
    } else {
        (v[n / 2 - 1].as_secs_f64() + v[n / 2].as_secs_f64()) / 2.0
    }
}

/// Median forward times over `repetitions` runs of each path.
pub fn measure_slowdown<T: Scalar>(
    params: &crate::model::PlainParams<T>,
    adapters: Option<&LoraAdapters<T>>,
    batch: &TokenBatch,
    repetitions: usize,
    spec: crate::obfmat::KeySpec,
    mode: &ServeMode,
) -> Result<Slowdown> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument(
            "repetitions must be positive".into(),
        ));
    }
    let (model, _) = crate::partition::partition_model(
        params,
        adapters,
        crate::partition::KeyPolicy::PerBlock,
        spec,
        0x5107,
    )?;
    let mut session = serve_zones(model, mode)?;
    let mut owner = super::envelope::DataOwner::new("bench", b"bench-secret".to_vec());
    session.register_owner(owner.token());
    let env = owner.seal(batch);
    // warm-up
    crate::model::forward_plain(params, adapters, batch, Mode::Eval)?;
    session.forward_protected(&env, owner.token(), Mode::Eval)?;

    let mut plain = Vec::with_capacity(repetitions);
    let mut protected = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        crate::model::forward_plain(params, adapters, batch, Mode::Eval)?;
        plain.push(t0.elapsed());
        let t0 = Instant::now();
        session.forward_protected(&env, owner.token(), Mode::Eval)?;
        protected.push(t0.elapsed());
    }
    session.shutdown()?;
    let t_plain = median(plain);
    let t_protected = median(protected);
    Ok(Slowdown {
        t_protected,
        t_plain,
        ratio: t_protected / t_plain,
    })
}
