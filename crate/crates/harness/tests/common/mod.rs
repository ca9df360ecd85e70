// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use desksteer_harness::config::PipelineConfig;

/// A pipeline small enough to run end to end in a few seconds.
pub const TINY: &str = r#"{
  "model": {"d_model": 32, "n_layers": 4, "n_heads": 2, "d_ff": 64, "max_seq_len": 32},
  "corpus": {"n_records": 240},
  "pretrain": {"epochs": 1},
  "audit": {"n_pairs": 16, "n_prompts": 16},
  "select": {"n_pairs": 16},
  "debias": {"n_pairs": 8, "train": {"epochs": 2, "rank": 4, "hidden": 8, "batch_size": 8}},
  "extract": {"n_pairs": 8},
  "eval": {"n_prompts": 8, "classifier_records": 80, "betas": [0.0, 2.0]}
}"#;

pub fn tiny() -> PipelineConfig {
    PipelineConfig::from_json(TINY).unwrap()
}
