//! Data-owner credentials and the sealed batch wrapper.
//!
//! The wrapper is a stand-in for an authenticated cipher: a SHA-256 counter
//! keystream XORed over the payload plus a truncated SHA-256 tag. It keeps
//! ciphertext length equal to plaintext length and detects tampering; it is
//! not meant to be secure.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const TAG_LEN: usize = 16;

/// Credentials presented by the data owner on every protected call.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthToken {
    pub caller_id: String,
    pub secret: Vec<u8>,
}

impl std::fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthToken")
            .field("caller_id", &self.caller_id)
            .finish_non_exhaustive()
    }
}

impl AuthToken {
    pub fn new(caller_id: impl Into<String>, secret: impl Into<Vec<u8>>) -> Self {
        AuthToken {
            caller_id: caller_id.into(),
            secret: secret.into(),
        }
    }
}

/// A sealed [`TokenBatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub nonce: u64,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

fn keystream_xor(secret: &[u8], nonce: u64, data: &mut [u8]) {
    for (counter, chunk) in data.chunks_mut(32).enumerate() {
        let block = Sha256::new()
            .chain_update(b"obft-stream")
            .chain_update(secret)
            .chain_update(nonce.to_le_bytes())
            .chain_update((counter as u64).to_le_bytes())
            .finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
}

fn tag(secret: &[u8], nonce: u64, ciphertext: &[u8]) -> [u8; TAG_LEN] {
    let d = Sha256::new()
        .chain_update(b"obft-tag")
        .chain_update(secret)
        .chain_update(nonce.to_le_bytes())
        .chain_update(ciphertext)
        .finalize();
    d[..TAG_LEN].try_into().unwrap()
}

/// `u32 n, n × u32 tokens, u8 has_targets, [n × u32 targets]`.
fn serialize(batch: &TokenBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 8 * batch.len());
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for t in &batch.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    match &batch.targets {
        Some(ts) => {
            out.push(1);
            for t in ts {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

fn deserialize(bytes: &[u8]) -> Result<TokenBatch> {
    let bad = || Error::Envelope("malformed batch".into());
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(bad)
    };
    let n = word(0)? as usize;
    let tokens_end = 4usize
        .checked_add(n.checked_mul(4).ok_or_else(bad)?)
        .ok_or_else(bad)?;
    let tokens = (0..n)
        .map(|i| word(4 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    let flag = *bytes.get(tokens_end).ok_or_else(bad)?;
    let (targets, end) = match flag {
        0 => (None, tokens_end + 1),
        1 => {
            let ts = (0..n)
                .map(|i| word(tokens_end + 1 + 4 * i))
                .collect::<Result<Vec<_>>>()?;
            (Some(ts), tokens_end + 1 + 4 * n)
        }
        _ => return Err(bad()),
    };
    if end != bytes.len() {
        return Err(bad());
    }
    Ok(TokenBatch { tokens, targets })
}

impl Envelope {
    pub fn seal(batch: &TokenBatch, secret: &[u8], nonce: u64) -> Self {
        let mut ciphertext = serialize(batch);
        keystream_xor(secret, nonce, &mut ciphertext);
        let tag = tag(secret, nonce, &ciphertext);
        Envelope {
            nonce,
            ciphertext,
            tag,
        }
    }

    /// Checks the tag, then decrypts. Only the trusted zone holds `secret`.
    pub fn open(&self, secret: &[u8]) -> Result<TokenBatch> {
        if tag(secret, self.nonce, &self.ciphertext) != self.tag {
            return Err(Error::Envelope("integrity tag mismatch".into()));
        }
        let mut plain = self.ciphertext.clone();
        keystream_xor(secret, self.nonce, &mut plain);
        deserialize(&plain)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + TAG_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.nonce.to_le_bytes());
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + TAG_LEN {
            return Err(Error::Envelope(format!(
                "{} bytes is too short",
                bytes.len()
            )));
        }
        Ok(Envelope {
            nonce: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
            tag: bytes[8..8 + TAG_LEN].try_into().unwrap(),
            ciphertext: bytes[8 + TAG_LEN..].to_vec(),
        })
    }
}

/// Convenience for the party that owns the data.
#[derive(Debug, Clone)]
pub struct DataOwner {
    token: AuthToken,
    nonce: u64,
}

impl DataOwner {
    pub fn new(caller_id: impl Into<String>, secret: impl Into<Vec<u8>>) -> Self {
        DataOwner {
            token: AuthToken::new(caller_id, secret),
            nonce: 0,
        }
    }

    pub fn token(&self) -> &AuthToken {
        &self.token
    }

    pub fn seal(&mut self, batch: &TokenBatch) -> Envelope {
        self.nonce += 1;
        Envelope::seal(batch, &self.token.secret, self.nonce)
    }
}
