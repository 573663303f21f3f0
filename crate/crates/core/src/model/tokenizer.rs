use crate::error::{Error, Result};

/// Vocabulary size of the byte-level tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// A sequence of token ids with optional next-token targets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub targets: Option<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenBatch {
            tokens,
            targets: None,
        }
    }

    pub fn with_targets(tokens: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        if tokens.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tokens but {} targets",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(TokenBatch {
            tokens,
            targets: Some(targets),
        })
    }

    /// Inputs `window[..n-1]` with targets shifted by one.
    pub fn next_token_window(window: &[u8]) -> Result<Self> {
        if window.len() < 2 {
            return Err(Error::InvalidArgument(
                "a training window needs at least two bytes".into(),
            ));
        }
        let ids: Vec<u32> = window.iter().map(|&b| u32::from(b)).collect();
        Self::with_targets(ids[..ids.len() - 1].to_vec(), ids[1..].to_vec())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks ids against the vocabulary and length against the context.
    pub fn validate(&self, vocab: usize, context: usize) -> Result<()> {
        if self.tokens.len() > context {
            return Err(Error::InvalidArgument(format!(
                "batch length {} exceeds context {context}",
                self.tokens.len()
            )));
        }
        let all = self.tokens.iter().chain(self.targets.iter().flatten());
        for &id in all {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        Ok(())
    }
}

/// Byte-level tokenization: each byte is its own token id.
pub fn tokenize_bytes(text: &[u8]) -> TokenBatch {
    TokenBatch::new(text.iter().map(|&b| u32::from(b)).collect())
}

/// Inverse of [`tokenize_bytes`]. Fails on ids outside the byte range.
pub fn detokenize(batch: &TokenBatch) -> Result<Vec<u8>> {
    batch
        .tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::TokenOutOfRange {
                id: t,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}
