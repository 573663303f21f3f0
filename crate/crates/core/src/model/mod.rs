//! GPT-2 style decoder with LoRA adapters, run without protection.

mod config;
mod dropout;
pub mod layers;
mod lora;
pub mod network;
mod params;
mod plain;
mod tokenizer;

pub use config::{LoraConfig, ModelConfig};
pub use dropout::{block_masks, BlockMasks, Mode};
pub use lora::{
    init_lora, sgd_step, sgd_step_in_place, BlockLora, LoraAdapters, LoraPair, LoraSet, LoraSite,
};
pub use network::{cross_entropy, BlockExecutor};
pub use params::{
    init_params, AttentionWeights, BlockWeights, LayerNormParams, MlpWeights, PlainParams,
    TrunkBlock, TrunkParams, INIT_STD,
};
pub use plain::{forward_plain, loss_and_grads_plain, loss_plain};
pub use tokenizer::{detokenize, tokenize_bytes, TokenBatch, BYTE_VOCAB};
