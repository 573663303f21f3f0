use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::{stream, SeededRng};

/// Public-domain English text bundled with the crate.
pub const BUNDLED_CORPUS: &[u8] = include_bytes!("../../data/corpus.txt");

/// Window indices at and above this are held out for evaluation.
const EVAL_BASE: u64 = 1 << 40;

/// A byte corpus cut into random next-token windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Default for Corpus {
    fn default() -> Self {
        Corpus {
            bytes: BUNDLED_CORPUS.to_vec(),
        }
    }
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Corpus { bytes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Corpus::from_bytes(std::fs::read(path)?))
    }

    /// The file at `path`, or the bundled text.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Corpus::default()), Corpus::load)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Window `index` of length `seq` for data order `seed`.
    pub fn window(&self, seed: u64, index: u64, seq: usize) -> Result<TokenBatch> {
        if seq == 0 || self.bytes.len() < seq + 2 {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} bytes is too short for windows of {seq}",
                self.bytes.len()
            )));
        }
        let mut rng = SeededRng::new(seed, stream::CORPUS | (index & 0x00FF_FFFF_FFFF_FFFF));
        let start = rng.below(self.bytes.len() - seq - 1);
        TokenBatch::next_token_window(&self.bytes[start..start + seq + 1])
    }

    /// Training window `i` of step `step` with `batch` windows per step.
    pub fn train_window(
        &self,
        seed: u64,
        step: usize,
        i: usize,
        batch: usize,
        seq: usize,
    ) -> Result<TokenBatch> {
        self.window(seed, (step * batch + i) as u64, seq)
    }

    /// `n` held-out windows, disjoint in index from every training window.
    pub fn eval_windows(&self, seed: u64, n: usize, seq: usize) -> Result<Vec<TokenBatch>> {
        (0..n as u64)
            .map(|i| self.window(seed, EVAL_BASE + i, seq))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_deterministic_shifted_pairs() {
        let c = Corpus::default();
        let a = c.window(3, 9, 32).unwrap();
        assert_eq!(a, c.window(3, 9, 32).unwrap());
        let t = a.targets.as_ref().unwrap();
        assert_eq!(&a.tokens[1..], &t[..31]);
        assert_ne!(a, c.window(4, 9, 32).unwrap());
    }

    #[test]
    fn short_corpus_is_rejected() {
        assert!(Corpus::from_bytes(b"abc".to_vec()).window(0, 0, 8).is_err());
    }
}
