use crate::error::{Error, Result};
use crate::numerics::{Precision, DEFAULT_LAYERNORM_EPS};

/// Shape hyperparameters of a GPT-2 style decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub layernorm_eps: f64,
    /// Dropout probability on attention weights (train mode only).
    pub attn_dropout: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Config with `d_ff = 4·d_model` and default epsilon/dropout.
    pub fn new(
        n_layer: usize,
        n_head: usize,
        d_model: usize,
        vocab_size: usize,
        context_len: usize,
    ) -> Self {
        ModelConfig {
            n_layer,
            n_head,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            context_len,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
            attn_dropout: 0.0,
            precision: Precision::F32,
        }
    }

    /// The acceptance-scale model: 4 layers, 4 heads, width 128, bytes.
    pub fn toy() -> Self {
        Self::new(4, 4, 128, 256, 128)
    }

    /// A one-layer width-8 model for gradient checks.
    pub fn tiny() -> Self {
        Self::new(1, 2, 8, 256, 16)
    }

    pub fn gpt2_small() -> Self {
        Self::new(12, 12, 768, 50257, 1024)
    }

    pub fn gpt2_medium() -> Self {
        Self::new(24, 16, 1024, 50257, 1024)
    }

    pub fn gpt2_large() -> Self {
        Self::new(36, 20, 1280, 50257, 1024)
    }

    pub fn gpt2_xl() -> Self {
        Self::new(48, 25, 1600, 50257, 1024)
    }

    /// Looks up a named preset (`tiny`, `toy`, `toy-deep`, `gpt2-small`, ...).
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "tiny" => Self::tiny(),
            "toy" => Self::toy(),
            "toy-deep" => Self::new(8, 4, 128, 256, 128),
            "gpt2-small" => Self::gpt2_small(),
            "gpt2-medium" => Self::gpt2_medium(),
            "gpt2-large" => Self::gpt2_large(),
            "gpt2-xl" => Self::gpt2_xl(),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 7] = [
        "tiny",
        "toy",
        "toy-deep",
        "gpt2-small",
        "gpt2-medium",
        "gpt2-large",
        "gpt2-xl",
    ];

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_head", self.n_head),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::InvalidArgument(format!(
                "attn_dropout must be in [0, 1), got {}",
                self.attn_dropout
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::InvalidArgument("layernorm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Low-rank adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Dropout on the rank-r bottleneck activations.
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "lora dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ModelConfig::PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("gpt5").is_none());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy();
        c.n_head = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn lora_defaults() {
        let l = LoraConfig::default();
        assert_eq!((l.rank, l.alpha, l.dropout), (16, 32.0, 0.05));
        assert_eq!(l.scale(), 2.0);
    }
}
