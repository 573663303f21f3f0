//! Shared fixtures for the criterion benches.

use obft_core::harness::Corpus;
use obft_core::model::{
    init_lora, init_params, LoraAdapters, LoraConfig, ModelConfig, PlainParams, TokenBatch,
};
use obft_core::numerics::Scalar;

/// Model, fresh adapters and one corpus window for `preset`.
pub struct Fixture<T> {
    pub params: PlainParams<T>,
    pub adapters: LoraAdapters<T>,
    pub batch: TokenBatch,
}

pub fn fixture<T: Scalar>(preset: &str, seq_len: usize, seed: u64) -> Fixture<T> {
    let config = ModelConfig::preset(preset)
        .unwrap_or_else(|| panic!("unknown preset {preset}"))
        .with_precision(T::PRECISION);
    let seq_len = seq_len.min(config.context_len);
    Fixture {
        params: init_params(&config, seed).expect("valid preset"),
        adapters: init_lora(&config, LoraConfig::default(), seed).expect("valid adapters"),
        batch: Corpus::default()
            .window(seed, 0, seq_len)
            .expect("bundled corpus is long enough"),
    }
}
