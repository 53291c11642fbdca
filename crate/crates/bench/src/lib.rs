//! Shared fixtures for the criterion benches.

use dhumor_core::tcrnet::{init_params, AttentionParams, ModelConfig, StreamSet, Task, TcrNetParams};
use dhumor_core::trainer::{synthetic_corpus, SyntheticSpec};
use dhumor_core::EmbeddingTriple;

/// One synthetic triple of `tokens × dim`.
pub fn triple(tokens: usize, dim: usize, seed: u64) -> EmbeddingTriple {
    let spec = SyntheticSpec { samples: 1, tokens, dim, seed, ..SyntheticSpec::default() };
    synthetic_corpus(&spec).remove(0).1
}

pub fn model(dim: usize, heads: usize, seed: u64) -> TcrNetParams {
    let cfg = ModelConfig {
        dim,
        heads,
        dropout: 0.3,
        streams: StreamSet::ALL,
        tasks: vec![Task::DarkHumor],
    };
    init_params(&cfg, seed).expect("valid bench config")
}

pub fn attention(dim: usize, heads: usize, seed: u64) -> AttentionParams {
    model(dim, heads, seed).flows.remove(0).attn
}
