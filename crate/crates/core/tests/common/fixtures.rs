// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small models trained once per test binary.

#![allow(dead_code)]

use std::sync::OnceLock;

use desksteer::corpus::{gen_pretrain_corpus, ConfoundSpec};
use desksteer::model::{ModelConfig, TinyLm, TrainConfig};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 4,
        n_heads: 2,
        d_ff: 128,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

pub fn train_small(bias_strength: f64) -> TinyLm {
    let spec = ConfoundSpec::with_bias(bias_strength);
    let records = gen_pretrain_corpus(&spec, 1600, 0).unwrap();
    let seqs: Vec<Vec<usize>> = records.iter().map(|r| r.sequence()).collect();
    let mut model = TinyLm::new(small_config()).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    model.train(&seqs, &cfg).unwrap();
    model
}

/// A small model pretrained on the ρ = 0.9 corpus.
pub fn confounded() -> &'static TinyLm {
    static MODEL: OnceLock<TinyLm> = OnceLock::new();
    MODEL.get_or_init(|| train_small(0.9))
}

/// A small model pretrained on the ρ = 0.5 corpus.
pub fn unconfounded() -> &'static TinyLm {
    static MODEL: OnceLock<TinyLm> = OnceLock::new();
    MODEL.get_or_init(|| train_small(0.5))
}
