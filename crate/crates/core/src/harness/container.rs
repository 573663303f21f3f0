//! `OBFT` files: magic, `u16` version, then TENSOR frames.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LoraAdapters, LoraConfig, LoraSet, LoraSite, ModelConfig};
use crate::numerics::{Matrix, Scalar};
use crate::obfmat::{KeyKind, ObfuscationKey};
use crate::zones::wire::{read_frame, write_frame, FrameError, Message, WireTensor};

pub const MAGIC: &[u8; 4] = b"OBFT";
pub const CONTAINER_VERSION: u16 = 1;

pub fn write_container(out: &mut impl Write, tensors: &[WireTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for t in tensors {
        write_frame(out, &Message::Tensor(t.clone()))?;
    }
    Ok(())
}

pub fn read_container(input: &mut impl Read) -> Result<Vec<WireTensor>> {
    let mut head = [0u8; 6];
    input.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Protocol("not an OBFT container".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != CONTAINER_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported container version {version}"
        )));
    }
    let mut out = Vec::new();
    loop {
        match read_frame(input) {
            Ok(Message::Tensor(t)) => out.push(t),
            Ok(other) => {
                return Err(Error::Protocol(format!(
                    "container holds message type 0x{:02x}",
                    other.kind()
                )))
            }
            Err(FrameError::Closed) => return Ok(out),
            Err(e) => return Err(Error::Protocol(e.to_string())),
        }
    }
}

pub fn save_container(path: &Path, tensors: &[WireTensor]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_container(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<WireTensor>> {
    read_container(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

fn find<'a>(tensors: &'a [WireTensor], id: &str) -> Result<&'a WireTensor> {
    tensors
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Protocol(format!("container has no tensor {id:?}")))
}

/// `r`, `r_inv` and a `key.meta` vector
/// `[kind, target κ or NaN, measured κ, seed_hi, seed_lo, redraws]`.
pub fn key_to_tensors(key: &ObfuscationKey) -> Vec<WireTensor> {
    let meta = [
        f64::from(key.kind.code()),
        key.target_kappa.unwrap_or(f64::NAN),
        key.measured_kappa,
        (key.seed >> 32) as f64,
        (key.seed & 0xFFFF_FFFF) as f64,
        f64::from(key.redraws),
    ];
    vec![
        WireTensor::from_matrix("r", &key.r),
        WireTensor::from_matrix("r_inv", &key.r_inv),
        WireTensor::from_slice("key.meta", vec![meta.len() as u32], &meta),
    ]
}

pub fn key_from_tensors(tensors: &[WireTensor]) -> Result<ObfuscationKey> {
    let r: Matrix<f64> = find(tensors, "r")?.to_matrix()?;
    let r_inv: Matrix<f64> = find(tensors, "r_inv")?.to_matrix()?;
    let meta = find(tensors, "key.meta")?.to_vec::<f64>()?;
    if meta.len() != 6 {
        return Err(Error::Protocol("key.meta needs 6 entries".into()));
    }
    let kind = KeyKind::from_code(meta[0] as u8)
        .ok_or_else(|| Error::Protocol(format!("unknown key kind {}", meta[0])))?;
    if !r.is_square() || r.shape() != r_inv.shape() {
        return Err(Error::Protocol(
            "key matrices must be square and equal-sized".into(),
        ));
    }
    Ok(ObfuscationKey {
        r,
        r_inv,
        kind,
        target_kappa: (!meta[1].is_nan()).then_some(meta[1]),
        measured_kappa: meta[2],
        seed: ((meta[3] as u64) << 32) | meta[4] as u64,
        stream: 0,
        redraws: meta[5] as u32,
        spectrum: None,
    })
}

/// Adapter checkpoint: `lora.config` `[rank, alpha, dropout]` and one tensor
/// per factor, `b{block}.{site}.{a|b}`.
pub fn lora_to_tensors<T: Scalar>(lora: &LoraAdapters<T>) -> Vec<WireTensor> {
    let c = lora.config;
    let mut out = vec![WireTensor::from_slice(
        "lora.config",
        vec![3],
        &[c.rank as f64, c.alpha, c.dropout],
    )];
    for (b, blk) in lora.set.blocks.iter().enumerate() {
        for site in LoraSite::ALL {
            let p = blk.get(site);
            out.push(WireTensor::from_matrix(
                format!("b{b}.{}.a", site.name()),
                &p.a,
            ));
            out.push(WireTensor::from_matrix(
                format!("b{b}.{}.b", site.name()),
                &p.b,
            ));
        }
    }
    out
}

pub fn lora_from_tensors<T: Scalar>(
    model: &ModelConfig,
    tensors: &[WireTensor],
) -> Result<LoraAdapters<T>> {
    let c = find(tensors, "lora.config")?.to_vec::<f64>()?;
    if c.len() != 3 {
        return Err(Error::Protocol("lora.config needs 3 entries".into()));
    }
    let config = LoraConfig {
        rank: c[0] as usize,
        alpha: c[1],
        dropout: c[2],
    };
    config.validate()?;
    let mut set = LoraSet::<T>::zeros_like(model, config.rank);
    for (b, blk) in set.blocks.iter_mut().enumerate() {
        for site in LoraSite::ALL {
            let p = blk.get_mut(site);
            let a: Matrix<T> = find(tensors, &format!("b{b}.{}.a", site.name()))?.to_matrix()?;
            let bm: Matrix<T> = find(tensors, &format!("b{b}.{}.b", site.name()))?.to_matrix()?;
            if a.shape() != p.a.shape() || bm.shape() != p.b.shape() {
                return Err(Error::Protocol(format!(
                    "adapter b{b}.{} has the wrong shape",
                    site.name()
                )));
            }
            p.a = a;
            p.b = bm;
        }
    }
    Ok(LoraAdapters { config, set })
}
