//! Framed byte protocol between the trusted zone and the host zone.
//!
//! All integers are little-endian. A frame is `[u32 payload_len][u8 type][payload]`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

pub const PROTOCOL_VERSION: u16 = 1;
/// Largest accepted payload, 1 GiB.
pub const MAX_FRAME: u32 = 1 << 30;

/// Message type bytes.
pub mod kind {
    pub const HELLO: u8 = 0x01;
    pub const AUTH: u8 = 0x02;
    pub const TENSOR: u8 = 0x03;
    pub const COMPUTE: u8 = 0x04;
    pub const RESULT: u8 = 0x05;
    pub const ERROR: u8 = 0x06;
    pub const BYE: u8 = 0x07;
}

/// COMPUTE op codes.
pub mod op {
    pub const ATTENTION: u8 = 0x10;
    pub const MLP: u8 = 0x11;
    pub const ATTENTION_BACKWARD: u8 = 0x12;
    pub const MLP_BACKWARD: u8 = 0x13;
    /// `lora ← lora − lr·grad`, then zero the gradients. Expects tensor `lr`.
    pub const SGD: u8 = 0x14;
    /// Returns the accumulated adapter gradients as one flat `grads` tensor
    /// and zeroes them.
    pub const EXPORT_GRADS: u8 = 0x15;
    pub const EXPORT_LORA: u8 = 0x16;
    /// Replaces the adapters with the flat `lora` tensor.
    pub const IMPORT_LORA: u8 = 0x17;
    /// Installs one block's obfuscated weights from the pending tensors.
    pub const LOAD_BLOCK: u8 = 0x20;
    /// Starts a session from the `session.config` tensor.
    pub const CONFIGURE: u8 = 0x21;
}

/// ERROR codes.
pub mod code {
    pub const UNKNOWN_TYPE: u16 = 1;
    pub const DECODE: u16 = 2;
    pub const UNAUTHENTICATED: u16 = 3;
    pub const VERSION: u16 = 4;
    pub const COMPUTE: u16 = 5;
    pub const TOO_LARGE: u16 = 6;
}

/// A named tensor with raw little-endian scalars, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireTensor {
    pub id: String,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl WireTensor {
    pub fn from_slice<T: Scalar>(id: impl Into<String>, dims: Vec<u32>, values: &[T]) -> Self {
        let mut data = Vec::with_capacity(values.len() * T::PRECISION.size_of());
        for &v in values {
            v.write_le(&mut data);
        }
        WireTensor {
            id: id.into(),
            dims,
            data,
        }
    }

    pub fn from_matrix<T: Scalar>(id: impl Into<String>, m: &Matrix<T>) -> Self {
        Self::from_slice(id, vec![m.rows() as u32, m.cols() as u32], m.data())
    }

    pub fn empty(id: impl Into<String>) -> Self {
        WireTensor {
            id: id.into(),
            dims: vec![0],
            data: Vec::new(),
        }
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    /// Bytes per element, inferred from the payload; `None` for empty tensors.
    pub fn element_size(&self) -> Option<usize> {
        let n = self.element_count();
        (n > 0).then(|| self.data.len() / n)
    }

    pub fn to_vec<T: Scalar>(&self) -> Result<Vec<T>> {
        let w = T::PRECISION.size_of();
        if self.data.len() != self.element_count() * w {
            return Err(Error::Protocol(format!(
                "tensor {:?}: {} bytes for {} elements of width {w}",
                self.id,
                self.data.len(),
                self.element_count()
            )));
        }
        Ok(self.data.chunks_exact(w).map(T::read_le).collect())
    }

    /// Two-dimensional tensors map to matrices directly; one-dimensional ones
    /// become a single row.
    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        let (r, c) = match self.dims[..] {
            [n] => (1, n as usize),
            [r, c] => (r as usize, c as usize),
            _ => {
                return Err(Error::Protocol(format!(
                    "tensor {:?} has {} dims, expected 1 or 2",
                    self.id,
                    self.dims.len()
                )))
            }
        };
        Matrix::new(r, c, self.to_vec()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello { version: u16, precision: u8 },
    Auth(Vec<u8>),
    Tensor(WireTensor),
    Compute { op: u8, block: u32 },
    Result(WireTensor),
    Error { code: u16, message: String },
    Bye,
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello { .. } => kind::HELLO,
            Message::Auth(_) => kind::AUTH,
            Message::Tensor(_) => kind::TENSOR,
            Message::Compute { .. } => kind::COMPUTE,
            Message::Result(_) => kind::RESULT,
            Message::Error { .. } => kind::ERROR,
            Message::Bye => kind::BYE,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
        }
    }
}

/// Why a frame could not be read.
#[derive(Debug)]
pub enum FrameError {
    /// Clean end of stream at a frame boundary.
    Closed,
    Io(io::Error),
    Truncated,
    TooLarge(u32),
    UnknownType(u8),
    Malformed(String),
}

impl FrameError {
    pub fn code(&self) -> u16 {
        match self {
            FrameError::UnknownType(_) => code::UNKNOWN_TYPE,
            FrameError::TooLarge(_) => code::TOO_LARGE,
            _ => code::DECODE,
        }
    }
}

impl std::fmt::Display for FrameError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameError::Closed => write!(f, "stream closed"),
            FrameError::Io(e) => write!(f, "i/o error: {e}"),
            FrameError::Truncated => write!(f, "truncated frame"),
            FrameError::TooLarge(n) => write!(f, "frame of {n} bytes exceeds the 1 GiB limit"),
            FrameError::UnknownType(t) => write!(f, "unknown message type 0x{t:02x}"),
            FrameError::Malformed(m) => write!(f, "malformed payload: {m}"),
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &WireTensor) {
    let id = t.id.as_bytes();
    out.push(id.len() as u8);
    out.extend_from_slice(id);
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.data);
}

pub fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello { version, precision } => {
            out.extend_from_slice(&version.to_le_bytes());
            out.push(*precision);
        }
        Message::Auth(token) => {
            out.extend_from_slice(&(token.len() as u16).to_le_bytes());
            out.extend_from_slice(token);
        }
        Message::Tensor(t) | Message::Result(t) => put_tensor(&mut out, t),
        Message::Compute { op, block } => {
            out.push(*op);
            out.extend_from_slice(&block.to_le_bytes());
        }
        Message::Error { code, message } => {
            let m = message.as_bytes();
            let m = &m[..m.len().min(u16::MAX as usize)];
            out.extend_from_slice(&code.to_le_bytes());
            out.extend_from_slice(&(m.len() as u16).to_le_bytes());
            out.extend_from_slice(m);
        }
        Message::Bye => {}
    }
    out
}

/// The whole frame, header included.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(msg.kind());
    out.extend_from_slice(&payload);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FrameError> {
        if self.buf.len() < n {
            return Err(FrameError::Malformed(format!(
                "needed {n} bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> std::result::Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(self) -> std::result::Result<(), FrameError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(FrameError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len()
            )))
        }
    }
}

fn get_tensor(c: &mut Cursor<'_>) -> std::result::Result<WireTensor, FrameError> {
    let id_len = c.u8()? as usize;
    let id = String::from_utf8(c.take(id_len)?.to_vec())
        .map_err(|_| FrameError::Malformed("tensor id is not utf-8".into()))?;
    let ndim = c.u8()? as usize;
    let dims = (0..ndim)
        .map(|_| c.u32())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let data = std::mem::take(&mut c.buf).to_vec();
    let n: u128 = dims.iter().map(|&d| d as u128).product();
    let ok = if n == 0 {
        data.is_empty()
    } else {
        data.len() as u128 == 4 * n || data.len() as u128 == 8 * n
    };
    if !ok {
        return Err(FrameError::Malformed(format!(
            "tensor {id:?}: {} data bytes for {n} elements",
            data.len()
        )));
    }
    Ok(WireTensor { id, dims, data })
}

pub fn decode_payload(ty: u8, payload: &[u8]) -> std::result::Result<Message, FrameError> {
    let mut c = Cursor { buf: payload };
    let msg = match ty {
        kind::HELLO => Message::Hello {
            version: c.u16()?,
            precision: c.u8()?,
        },
        kind::AUTH => {
            let n = c.u16()? as usize;
            Message::Auth(c.take(n)?.to_vec())
        }
        kind::TENSOR => Message::Tensor(get_tensor(&mut c)?),
        kind::COMPUTE => Message::Compute {
            op: c.u8()?,
            block: c.u32()?,
        },
        kind::RESULT => Message::Result(get_tensor(&mut c)?),
        kind::ERROR => {
            let code = c.u16()?;
            let n = c.u16()? as usize;
            let message = String::from_utf8_lossy(c.take(n)?).into_owned();
            Message::Error { code, message }
        }
        kind::BYE => Message::Bye,
        other => return Err(FrameError::UnknownType(other)),
    };
    c.finish()?;
    Ok(msg)
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::result::Result<usize, FrameError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrameError::Io(e)),
        }
    }
    Ok(filled)
}

/// Reads one frame. A stream that ends inside a frame is `Truncated`; one
/// that ends before the first header byte is `Closed`.
pub fn read_frame(r: &mut impl Read) -> std::result::Result<Message, FrameError> {
    let mut header = [0u8; 5];
    match read_full(r, &mut header)? {
        0 => return Err(FrameError::Closed),
        5 => {}
        _ => return Err(FrameError::Truncated),
    }
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let ty = header[4];
    if !(kind::HELLO..=kind::BYE).contains(&ty) {
        return Err(FrameError::UnknownType(ty));
    }
    let mut payload = vec![0u8; len as usize];
    if read_full(r, &mut payload)? != payload.len() {
        return Err(FrameError::Truncated);
    }
    decode_payload(ty, &payload)
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&encode_frame(msg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_layout_is_bit_exact() {
        let f = encode_frame(&Message::Hello {
            version: 1,
            precision: 0,
        });
        assert_eq!(f, vec![3, 0, 0, 0, 0x01, 1, 0, 0]);
    }

    #[test]
    fn tensor_layout_is_bit_exact() {
        let t = WireTensor::from_slice::<f32>("x", vec![1, 2], &[1.0, -2.0]);
        let f = encode_frame(&Message::Tensor(t));
        let mut expected = vec![19, 0, 0, 0, 0x03, 1, b'x', 2, 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(f, expected);
    }

    #[test]
    fn compute_and_error_layout() {
        assert_eq!(
            encode_frame(&Message::Compute {
                op: op::MLP,
                block: 3
            }),
            vec![5, 0, 0, 0, 0x04, 0x11, 3, 0, 0, 0]
        );
        assert_eq!(
            encode_frame(&Message::error(2, "no")),
            vec![6, 0, 0, 0, 0x06, 2, 0, 2, 0, b'n', b'o']
        );
        assert_eq!(encode_frame(&Message::Bye), vec![0, 0, 0, 0, 0x07]);
    }

    #[test]
    fn round_trip_every_message() {
        let m = Matrix::<f64>::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64);
        let msgs = vec![
            Message::Hello {
                version: 1,
                precision: 1,
            },
            Message::Auth(vec![1, 2, 3]),
            Message::Tensor(WireTensor::from_matrix("w", &m)),
            Message::Compute {
                op: op::ATTENTION,
                block: 7,
            },
            Message::Result(WireTensor::empty("ok")),
            Message::error(5, "boom"),
            Message::Bye,
        ];
        let mut bytes = Vec::new();
        for msg in &msgs {
            write_frame(&mut bytes, msg).unwrap();
        }
        let mut r = &bytes[..];
        for msg in &msgs {
            assert_eq!(&read_frame(&mut r).unwrap(), msg);
        }
        assert!(matches!(read_frame(&mut r), Err(FrameError::Closed)));
    }

    #[test]
    fn truncated_and_oversized_frames() {
        let f = encode_frame(&Message::Compute { op: 0x10, block: 0 });
        assert!(matches!(
            read_frame(&mut &f[..7]),
            Err(FrameError::Truncated)
        ));
        assert!(matches!(
            read_frame(&mut &f[..3]),
            Err(FrameError::Truncated)
        ));
        let mut big = ((MAX_FRAME + 1).to_le_bytes()).to_vec();
        big.push(kind::TENSOR);
        let e = read_frame(&mut &big[..]).unwrap_err();
        assert_eq!(e.code(), code::TOO_LARGE);
        let unknown = [0u8, 0, 0, 0, 0x42];
        assert_eq!(
            read_frame(&mut &unknown[..]).unwrap_err().code(),
            code::UNKNOWN_TYPE
        );
    }

    #[test]
    fn tensor_width_must_match_dims() {
        let mut t = WireTensor::from_slice::<f32>("x", vec![3], &[1.0, 2.0, 3.0]);
        t.data.pop();
        let f = encode_frame(&Message::Tensor(t));
        assert_eq!(read_frame(&mut &f[..]).unwrap_err().code(), code::DECODE);
    }

    #[test]
    fn matrix_round_trip_is_bitwise() {
        let m = Matrix::<f32>::from_fn(4, 3, |i, j| (i * 3 + j) as f32 / 7.0);
        let back: Matrix<f32> = WireTensor::from_matrix("m", &m).to_matrix().unwrap();
        assert!(back.bitwise_eq(&m));
        assert!(WireTensor::from_matrix("m", &m).to_matrix::<f64>().is_err());
    }
}
