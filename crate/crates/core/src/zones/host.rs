//! The untrusted zone: obfuscated weights, host-resident adapters, and the
//! request loop that serves them.
//!
//! Nothing here has access to keys or plain base weights; every tensor the
//! host holds arrived over the protocol.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::layers::{
    attention_backward, attention_forward, mlp_backward, mlp_forward, AttentionCache, LoraView,
    MlpCache,
};
use crate::model::{
    AttentionWeights, BlockMasks, LoraPair, LoraSet, LoraSite, MlpWeights, ModelConfig,
};
use crate::numerics::{Matrix, Precision, Scalar};

use super::wire::{
    code, op, read_frame, write_frame, FrameError, Message, WireTensor, PROTOCOL_VERSION,
};

/// Session parameters carried by the `session.config` tensor, in order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Zero when the model has no adapters.
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl SessionConfig {
    pub const TENSOR_ID: &'static str = "session.config";

    pub fn to_tensor<T: Scalar>(&self) -> WireTensor {
        let v = [
            self.n_layer as f64,
            self.n_head as f64,
            self.d_model as f64,
            self.d_ff as f64,
            self.lora_rank as f64,
            self.lora_scale,
        ]
        .map(T::from_f64);
        WireTensor::from_slice(Self::TENSOR_ID, vec![6], &v)
    }

    fn from_tensor<T: Scalar>(t: &WireTensor) -> Result<(Self, T)> {
        let v = t.to_vec::<T>()?;
        if v.len() != 6 {
            return Err(Error::Protocol("session.config needs 6 entries".into()));
        }
        let int = |x: T| {
            let f = x.to_f64();
            if f >= 0.0 && f.fract() == 0.0 && f < 1e9 {
                Ok(f as usize)
            } else {
                Err(Error::Protocol(format!("bad session.config entry {f}")))
            }
        };
        let cfg = SessionConfig {
            n_layer: int(v[0])?,
            n_head: int(v[1])?,
            d_model: int(v[2])?,
            d_ff: int(v[3])?,
            lora_rank: int(v[4])?,
            lora_scale: v[5].to_f64(),
        };
        if cfg.n_head == 0 || cfg.d_model % cfg.n_head != 0 {
            return Err(Error::Protocol("session.config: bad head count".into()));
        }
        Ok((cfg, v[5]))
    }

    fn model_shape(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.n_layer, self.n_head, self.d_model, 1, 1);
        c.d_ff = self.d_ff;
        c
    }
}

struct HostBlock<T> {
    attn: AttentionWeights<T>,
    mlp: MlpWeights<T>,
}

/// Host-side state for one session.
pub struct HostZone<T> {
    config: SessionConfig,
    scale: T,
    blocks: Vec<Option<HostBlock<T>>>,
    lora: Option<LoraSet<T>>,
    grads: Option<LoraSet<T>>,
    attn_cache: Vec<Option<AttentionCache<T>>>,
    mlp_cache: Vec<Option<MlpCache<T>>>,
}

type Pending = HashMap<String, WireTensor>;

fn take(p: &mut Pending, id: &str) -> Result<WireTensor> {
    p.remove(id)
        .ok_or_else(|| Error::Protocol(format!("missing tensor {id:?}")))
}

fn take_matrix<T: Scalar>(
    p: &mut Pending,
    id: &str,
    rows: usize,
    cols: usize,
) -> Result<Matrix<T>> {
    let m: Matrix<T> = take(p, id)?.to_matrix()?;
    if m.shape() != (rows, cols) {
        return Err(Error::Protocol(format!(
            "tensor {id:?} is {}x{}, expected {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

fn take_vec<T: Scalar>(p: &mut Pending, id: &str, n: usize) -> Result<Vec<T>> {
    let v = take(p, id)?.to_vec::<T>()?;
    if v.len() != n {
        return Err(Error::Protocol(format!(
            "tensor {id:?} has {} entries, expected {n}",
            v.len()
        )));
    }
    Ok(v)
}

impl<T: Scalar> HostZone<T> {
    pub fn new(config: SessionConfig, scale: T) -> Self {
        let shape = config.model_shape();
        let lora = (config.lora_rank > 0).then(|| LoraSet::zeros_like(&shape, config.lora_rank));
        HostZone {
            config,
            scale,
            blocks: (0..config.n_layer).map(|_| None).collect(),
            grads: lora.clone(),
            lora,
            attn_cache: vec![None; config.n_layer],
            mlp_cache: vec![None; config.n_layer],
        }
    }

    fn block(&self, b: usize) -> Result<&HostBlock<T>> {
        self.blocks
            .get(b)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Protocol(format!("block {b} not loaded")))
    }

    fn view(&self, b: usize) -> Option<LoraView<'_, T>> {
        self.lora.as_ref().map(|l| LoraView {
            block: &l.blocks[b],
            scale: self.scale,
        })
    }

    fn masks(&self, p: &mut Pending, seq: usize) -> Result<BlockMasks<T>> {
        let mut masks = BlockMasks::none();
        if let Some(t) = p.remove("mask.attn") {
            let h = self.config.n_head;
            let v = t.to_vec::<T>()?;
            if t.dims != [h as u32, seq as u32, seq as u32] {
                return Err(Error::Protocol("mask.attn has the wrong shape".into()));
            }
            masks.attn = Some(
                v.chunks_exact(seq * seq)
                    .map(|c| Matrix::new(seq, seq, c.to_vec()))
                    .collect::<Result<_>>()?,
            );
        }
        for site in LoraSite::ALL {
            let id = format!("mask.lora.{}", site.name());
            if p.contains_key(&id) {
                masks.lora[site.index()] = Some(take_matrix(p, &id, seq, self.config.lora_rank)?);
            }
        }
        Ok(masks)
    }

    fn load_block(&mut self, b: usize, p: &mut Pending) -> Result<()> {
        if b >= self.config.n_layer {
            return Err(Error::Protocol(format!("block {b} out of range")));
        }
        let (d, ff) = (self.config.d_model, self.config.d_ff);
        let attn = AttentionWeights {
            w_q: take_matrix(p, "w_q", d, d)?,
            w_k: take_matrix(p, "w_k", d, d)?,
            w_v: take_matrix(p, "w_v", d, d)?,
            b_q: take_vec(p, "b_q", d)?,
            b_k: take_vec(p, "b_k", d)?,
            b_v: take_vec(p, "b_v", d)?,
            w_o: take_matrix(p, "w_o", d, d)?,
        };
        let mlp = MlpWeights {
            w_1: take_matrix(p, "w_1", d, ff)?,
            b_1: take_vec(p, "b_1", ff)?,
            w_2: take_matrix(p, "w_2", ff, d)?,
        };
        if let Some(lora) = &mut self.lora {
            let shape = self.config.model_shape();
            let r = self.config.lora_rank;
            for site in LoraSite::ALL {
                let (din, dout) = site.dims(&shape);
                let a = take_matrix(p, &format!("lora.{}.a", site.name()), din, r)?;
                let bm = take_matrix(p, &format!("lora.{}.b", site.name()), r, dout)?;
                *lora.blocks[b].get_mut(site) = LoraPair { a, b: bm };
            }
        }
        self.blocks[b] = Some(HostBlock { attn, mlp });
        Ok(())
    }

    fn reset_grads(&mut self) {
        if let Some(g) = &mut self.grads {
            g.tensors_mut().for_each(|m| m.data_mut().fill(T::ZERO));
        }
    }

    fn lora_ref(&self) -> Result<&LoraSet<T>> {
        self.lora
            .as_ref()
            .ok_or_else(|| Error::Protocol("session has no adapters".into()))
    }

    /// Executes one COMPUTE request against the pending tensors.
    pub fn compute(&mut self, opcode: u8, block: u32, p: &mut Pending) -> Result<WireTensor> {
        let b = block as usize;
        let d = self.config.d_model;
        match opcode {
            op::LOAD_BLOCK => {
                self.load_block(b, p)?;
                Ok(WireTensor::empty("ok"))
            }
            op::ATTENTION => {
                let x: Matrix<T> = take(p, "x")?.to_matrix()?;
                check_width(&x, d)?;
                let masks = self.masks(p, x.rows())?;
                let (out, cache) = attention_forward(
                    &x,
                    &self.block(b)?.attn,
                    self.view(b),
                    self.config.n_head,
                    &masks,
                )?;
                self.attn_cache[b] = Some(cache);
                Ok(WireTensor::from_matrix("out", &out))
            }
            op::MLP => {
                let x: Matrix<T> = take(p, "x")?.to_matrix()?;
                check_width(&x, d)?;
                let masks = self.masks(p, x.rows())?;
                let (out, cache) = mlp_forward(&x, &self.block(b)?.mlp, self.view(b), &masks)?;
                self.mlp_cache[b] = Some(cache);
                Ok(WireTensor::from_matrix("out", &out))
            }
            op::ATTENTION_BACKWARD => {
                let g: Matrix<T> = take(p, "grad")?.to_matrix()?;
                let cache = self.attn_cache[b].take().ok_or_else(|| {
                    Error::Protocol(format!("no attention activations for block {b}"))
                })?;
                let mut grads = self.grads.take();
                let res = self.block(b).and_then(|blk| {
                    attention_backward(
                        &cache,
                        &blk.attn,
                        self.view(b),
                        self.config.n_head,
                        &g,
                        grads.as_mut().map(|g| &mut g.blocks[b]),
                    )
                });
                self.grads = grads;
                Ok(WireTensor::from_matrix("grad", &res?))
            }
            op::MLP_BACKWARD => {
                let g: Matrix<T> = take(p, "grad")?.to_matrix()?;
                let cache = self.mlp_cache[b]
                    .take()
                    .ok_or_else(|| Error::Protocol(format!("no mlp activations for block {b}")))?;
                let mut grads = self.grads.take();
                let res = self.block(b).and_then(|blk| {
                    mlp_backward(
                        &cache,
                        &blk.mlp,
                        self.view(b),
                        &g,
                        grads.as_mut().map(|g| &mut g.blocks[b]),
                    )
                });
                self.grads = grads;
                Ok(WireTensor::from_matrix("grad", &res?))
            }
            op::SGD => {
                let lr = take_vec::<T>(p, "lr", 1)?[0];
                let grads = self
                    .grads
                    .take()
                    .ok_or_else(|| Error::Protocol("session has no adapters".into()))?;
                let lora = self.lora.as_mut().expect("adapters present with grads");
                for (w, g) in lora.tensors_mut().zip(grads.tensors()) {
                    w.sub_scaled_assign(lr, g)?;
                }
                self.grads = Some(grads);
                self.reset_grads();
                Ok(WireTensor::empty("ok"))
            }
            op::EXPORT_GRADS => {
                let g = self
                    .grads
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("session has no adapters".into()))?;
                let flat = g.flatten();
                self.reset_grads();
                Ok(WireTensor::from_slice(
                    "grads",
                    vec![flat.len() as u32],
                    &flat,
                ))
            }
            op::EXPORT_LORA => {
                let flat = self.lora_ref()?.flatten();
                Ok(WireTensor::from_slice(
                    "lora",
                    vec![flat.len() as u32],
                    &flat,
                ))
            }
            op::IMPORT_LORA => {
                let v = take(p, "lora")?.to_vec::<T>()?;
                self.lora
                    .as_mut()
                    .ok_or_else(|| Error::Protocol("session has no adapters".into()))?
                    .assign_flat(&v)?;
                Ok(WireTensor::empty("ok"))
            }
            other => Err(Error::Protocol(format!("unknown op 0x{other:02x}"))),
        }
    }

    /// Tensors reachable from the host zone, for hygiene audits.
    pub fn weight_tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            if let Some(blk) = blk {
                for (name, m) in [
                    ("w_q", &blk.attn.w_q),
                    ("w_k", &blk.attn.w_k),
                    ("w_v", &blk.attn.w_v),
                    ("w_o", &blk.attn.w_o),
                    ("w_1", &blk.mlp.w_1),
                    ("w_2", &blk.mlp.w_2),
                ] {
                    out.push((format!("block{b}.{name}"), m));
                }
            }
        }
        out
    }
}

fn check_width<T: Scalar>(x: &Matrix<T>, d: usize) -> Result<()> {
    if x.cols() != d || x.rows() == 0 {
        return Err(Error::Protocol(format!(
            "activation is {}x{}, width must be {d}",
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

enum AnyZone {
    F32(HostZone<f32>),
    F64(HostZone<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    AwaitHello,
    AwaitAuth,
    Ready,
    Closed,
}

/// Protocol state machine of the host zone, independent of transport.
///
/// A connection must open with HELLO and then AUTH carrying the session
/// token; anything else before that is refused and the connection closed.
/// TENSOR frames are buffered until the COMPUTE that consumes them, which is
/// answered with exactly one RESULT or ERROR.
pub struct HostEndpoint {
    token: Vec<u8>,
    state: State,
    precision: Precision,
    zone: Option<AnyZone>,
    pending: Pending,
    failed: bool,
}

impl HostEndpoint {
    pub fn new(session_token: Vec<u8>) -> Self {
        HostEndpoint {
            token: session_token,
            state: State::AwaitHello,
            precision: Precision::F32,
            zone: None,
            pending: HashMap::new(),
            failed: false,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    /// Whether the connection ended because of an error.
    pub fn failed(&self) -> bool {
        self.failed
    }

    fn refuse(&mut self, code: u16, message: impl Into<String>) -> Option<Message> {
        self.state = State::Closed;
        self.failed = true;
        self.pending.clear();
        Some(Message::error(code, message))
    }

    /// Handles one message and returns the reply, if any.
    pub fn handle(&mut self, msg: Message) -> Option<Message> {
        match (self.state, msg) {
            (State::Closed, _) => None,
            (_, Message::Bye) => {
                self.state = State::Closed;
                None
            }
            (State::AwaitHello, Message::Hello { version, precision }) => {
                if version != PROTOCOL_VERSION {
                    return self.refuse(
                        code::VERSION,
                        format!("protocol version {version} is not supported (expected {PROTOCOL_VERSION})"),
                    );
                }
                let Some(p) = Precision::from_code(precision) else {
                    return self
                        .refuse(code::DECODE, format!("unknown precision code {precision}"));
                };
                self.precision = p;
                self.state = State::AwaitAuth;
                Some(Message::Hello {
                    version: PROTOCOL_VERSION,
                    precision,
                })
            }
            (State::AwaitAuth, Message::Auth(token)) => {
                if !constant_time_eq(&token, &self.token) {
                    return self.refuse(code::UNAUTHENTICATED, "bad session token");
                }
                self.state = State::Ready;
                Some(Message::Result(WireTensor::empty("auth")))
            }
            (State::AwaitHello | State::AwaitAuth, _) => self.refuse(
                code::UNAUTHENTICATED,
                "HELLO and AUTH must precede any request",
            ),
            (State::Ready, Message::Tensor(t)) => {
                self.pending.insert(t.id.clone(), t);
                None
            }
            (State::Ready, Message::Compute { op: opcode, block }) => {
                let res = self.compute(opcode, block);
                self.pending.clear();
                Some(match res {
                    Ok(t) => Message::Result(t),
                    Err(e) => Message::error(code::COMPUTE, e.to_string()),
                })
            }
            (State::Ready, other) => self.refuse(
                code::UNKNOWN_TYPE,
                format!("unexpected message type 0x{:02x}", other.kind()),
            ),
        }
    }

    fn compute(&mut self, opcode: u8, block: u32) -> Result<WireTensor> {
        if opcode == op::CONFIGURE {
            let t = take(&mut self.pending, SessionConfig::TENSOR_ID)?;
            self.zone = Some(match self.precision {
                Precision::F32 => {
                    let (c, s) = SessionConfig::from_tensor::<f32>(&t)?;
                    AnyZone::F32(HostZone::new(c, s))
                }
                Precision::F64 => {
                    let (c, s) = SessionConfig::from_tensor::<f64>(&t)?;
                    AnyZone::F64(HostZone::new(c, s))
                }
            });
            return Ok(WireTensor::empty("ok"));
        }
        match &mut self.zone {
            None => Err(Error::Protocol("session not configured".into())),
            Some(AnyZone::F32(z)) => z.compute(opcode, block, &mut self.pending),
            Some(AnyZone::F64(z)) => z.compute(opcode, block, &mut self.pending),
        }
    }

    /// Every weight tensor the host holds, widened to f64.
    pub fn audit_tensors(&self) -> Vec<(String, Matrix<f64>)> {
        match &self.zone {
            None => Vec::new(),
            Some(AnyZone::F32(z)) => z
                .weight_tensors()
                .into_iter()
                .map(|(n, m)| (n, m.cast()))
                .collect(),
            Some(AnyZone::F64(z)) => z
                .weight_tensors()
                .into_iter()
                .map(|(n, m)| (n, m.cast()))
                .collect(),
        }
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Serves one connection over a byte stream. Returns the process exit code:
/// 0 after BYE or a clean end of stream, 1 after any protocol failure.
pub fn serve_stream(input: &mut impl Read, output: &mut impl Write, session_token: Vec<u8>) -> i32 {
    let mut ep = HostEndpoint::new(session_token);
    loop {
        let msg = match read_frame(input) {
            Ok(m) => m,
            Err(FrameError::Closed) => return i32::from(ep.failed()),
            Err(e) => {
                let _ = write_frame(output, &Message::error(e.code(), e.to_string()));
                let _ = output.flush();
                return 1;
            }
        };
        if let Some(reply) = ep.handle(msg) {
            if write_frame(output, &reply)
                .and_then(|_| output.flush())
                .is_err()
            {
                return 1;
            }
        }
        if ep.is_closed() {
            return i32::from(ep.failed());
        }
    }
}

/// Environment variable through which a spawned host learns the session token (hex).
pub const SESSION_TOKEN_ENV: &str = "OBFT_SESSION_TOKEN";

/// Entry point for a host-zone process on stdin/stdout.
pub fn run_host_process() -> i32 {
    let token = match std::env::var(SESSION_TOKEN_ENV).map(|t| hex::decode(t.trim())) {
        Ok(Ok(t)) => t,
        _ => {
            eprintln!("obft-host: {SESSION_TOKEN_ENV} must hold the hex session token");
            return 2;
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = std::io::BufReader::new(stdin.lock());
    let mut output = std::io::BufWriter::new(stdout.lock());
    serve_stream(&mut input, &mut output, token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ready() -> HostEndpoint {
        let mut ep = HostEndpoint::new(b"tok".to_vec());
        assert!(matches!(
            ep.handle(Message::Hello {
                version: 1,
                precision: 1
            }),
            Some(Message::Hello { .. })
        ));
        assert!(matches!(
            ep.handle(Message::Auth(b"tok".to_vec())),
            Some(Message::Result(_))
        ));
        ep
    }

    #[test]
    fn refuses_requests_before_auth() {
        let mut ep = HostEndpoint::new(b"tok".to_vec());
        let r = ep.handle(Message::Compute {
            op: op::ATTENTION,
            block: 0,
        });
        assert!(matches!(
            r,
            Some(Message::Error {
                code: code::UNAUTHENTICATED,
                ..
            })
        ));
        assert!(ep.is_closed() && ep.failed());
    }

    #[test]
    fn refuses_bad_token_and_version() {
        let mut ep = HostEndpoint::new(b"tok".to_vec());
        ep.handle(Message::Hello {
            version: 1,
            precision: 0,
        });
        let r = ep.handle(Message::Auth(b"nope".to_vec()));
        assert!(matches!(
            r,
            Some(Message::Error {
                code: code::UNAUTHENTICATED,
                ..
            })
        ));

        let mut ep = HostEndpoint::new(b"tok".to_vec());
        let r = ep.handle(Message::Hello {
            version: 2,
            precision: 0,
        });
        assert!(matches!(
            r,
            Some(Message::Error {
                code: code::VERSION,
                ..
            })
        ));
        assert!(ep.is_closed());
    }

    #[test]
    fn compute_errors_keep_connection() {
        let mut ep = ready();
        let r = ep.handle(Message::Compute {
            op: op::ATTENTION,
            block: 0,
        });
        assert!(matches!(
            r,
            Some(Message::Error {
                code: code::COMPUTE,
                ..
            })
        ));
        assert!(!ep.is_closed());
        let cfg = SessionConfig {
            n_layer: 1,
            n_head: 1,
            d_model: 2,
            d_ff: 8,
            lora_rank: 0,
            lora_scale: 0.0,
        };
        ep.handle(Message::Tensor(cfg.to_tensor::<f64>()));
        assert!(matches!(
            ep.handle(Message::Compute {
                op: op::CONFIGURE,
                block: 0
            }),
            Some(Message::Result(_))
        ));
        let r = ep.handle(Message::Compute {
            op: op::MLP,
            block: 0,
        });
        assert!(matches!(
            r,
            Some(Message::Error {
                code: code::COMPUTE,
                ..
            })
        ));
    }

    #[test]
    fn stream_server_reports_truncation() {
        let mut input = Vec::new();
        write_frame(
            &mut input,
            &Message::Hello {
                version: 1,
                precision: 0,
            },
        )
        .unwrap();
        write_frame(&mut input, &Message::Auth(b"t".to_vec())).unwrap();
        let frame = super::super::wire::encode_frame(&Message::Compute {
            op: op::MLP,
            block: 0,
        });
        input.extend_from_slice(&frame[..6]);
        let mut out = Vec::new();
        let code = serve_stream(&mut &input[..], &mut out, b"t".to_vec());
        assert_eq!(code, 1);
        let mut r = &out[..];
        assert!(matches!(read_frame(&mut r).unwrap(), Message::Hello { .. }));
        assert!(matches!(read_frame(&mut r).unwrap(), Message::Result(_)));
        assert!(matches!(
            read_frame(&mut r).unwrap(),
            Message::Error {
                code: code::DECODE,
                ..
            }
        ));
    }

    #[test]
    fn unknown_type_closes_stream() {
        let input = [0u8, 0, 0, 0, 0x55];
        let mut out = Vec::new();
        assert_eq!(serve_stream(&mut &input[..], &mut out, vec![]), 1);
        assert!(matches!(
            read_frame(&mut &out[..]).unwrap(),
            Message::Error {
                code: code::UNKNOWN_TYPE,
                ..
            }
        ));
    }
}
