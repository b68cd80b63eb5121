#![allow(dead_code)]

use typespan::datasets::{synth, DescriptionMode, LabeledDocument};
use typespan::decoder::DecodeConfig;
use typespan::encoder::EncoderConfig;
use typespan::head::HeadConfig;
use typespan::model::{build_vocab, Model, ModelConfig};

pub fn tiny_config(mode: DescriptionMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 16,
            ffn_dim: 32,
            max_positions: 40,
            dropout: 0.0,
        },
        head: HeadConfig {
            d_model: 16,
            d_proj: 8,
            width_dim: 8,
            width_rows: 40,
            init_temperature: 0.07,
            shared_linear: false,
        },
        description_mode: mode,
        max_seq_len: 14,
        stride: 4,
        decode: DecodeConfig {
            max_span_len: 4,
            ..DecodeConfig::default()
        },
    }
}

pub fn tiny_model(mode: DescriptionMode, seed: u64) -> (Model, Vec<LabeledDocument>) {
    tiny_model_with(tiny_config(mode), seed)
}

pub fn tiny_model_with(config: ModelConfig, seed: u64) -> (Model, Vec<LabeledDocument>) {
    let docs = synth::generate(seed, 2);
    let mut types = synth::type_defs();
    types.truncate(2);
    let docs: Vec<LabeledDocument> = docs
        .into_iter()
        .map(|mut d| {
            d.mentions.retain(|m| types.iter().any(|t| t.name == m.type_name));
            d
        })
        .collect();
    let vocab = build_vocab(&docs, &types);
    (Model::init(config, vocab, types, seed).unwrap(), docs)
}

