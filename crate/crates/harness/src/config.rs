// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative pipeline configuration with one section per stage.

use std::path::Path;

use desksteer::corpus::ConfoundSpec;
use desksteer::debias::DebiasTrainConfig;
use desksteer::model::{ModelConfig, TrainConfig};
use desksteer::probing::ProbeConfig;
use desksteer::steering::{ControlOperator, TokenScope};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub spec: ConfoundSpec,
    pub n_records: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            spec: ConfoundSpec::default(),
            n_records: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    /// Pairs used to fit the semantic probe at each layer.
    pub n_pairs: usize,
    /// Neutral prompts audited.
    pub n_prompts: usize,
    pub probe: ProbeConfig,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            n_prompts: 512,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub n_pairs: usize,
    /// Number of layers; `None` uses a quarter of the depth.
    pub k: Option<usize>,
    /// Take the middle layers instead of the most probe-accurate ones.
    pub middle: bool,
    pub probe: ProbeConfig,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self {
            n_pairs: 128,
            k: None,
            middle: false,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasSection {
    pub n_pairs: usize,
    pub train: DebiasTrainConfig,
}

impl Default for DebiasSection {
    fn default() -> Self {
        Self {
            n_pairs: 128,
            train: DebiasTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub n_pairs: usize,
    pub scope: TokenScope,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            scope: TokenScope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub beta: f32,
    pub operator: ControlOperator,
    /// β values of the sweep reported next to the main rate.
    pub betas: Vec<f32>,
    pub n_prompts: usize,
    pub max_new: usize,
    /// Held-out labelled records used to fit the evaluation classifier.
    pub classifier_records: usize,
    /// Also score a single-pair raw-activation baseline at `beta`.
    pub baseline: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            beta: 2.0,
            operator: ControlOperator::Projection,
            betas: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            n_prompts: 64,
            max_new: 4,
            classifier_records: 800,
            baseline: true,
        }
    }
}

/// Nested `seed` fields are overwritten from the top-level `seed` by
/// [`PipelineConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub pretrain: TrainConfig,
    pub audit: AuditSection,
    pub select: SelectSection,
    pub debias: DebiasSection,
    pub extract: ExtractSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            corpus: CorpusSection::default(),
            pretrain: TrainConfig {
                epochs: 8,
                lr: 3e-3,
                batch_size: 16,
                seed: 0,
            },
            audit: AuditSection::default(),
            select: SelectSection::default(),
            debias: DebiasSection::default(),
            extract: ExtractSection::default(),
            eval: EvalSection::default(),
        }
        .resolved()
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::config(format!("config: {e}")))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the top-level seed into every nested seed.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.model.seed = s;
        self.pretrain.seed = s;
        self.audit.probe.seed = s;
        self.select.probe.seed = s;
        self.debias.train.seed = s;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.spec.validate()?;
        if self.model.vocab_size != desksteer::corpus::VOCAB_SIZE {
            return Err(HarnessError::config(format!(
                "model vocab_size {} must equal the corpus vocabulary {}",
                self.model.vocab_size,
                desksteer::corpus::VOCAB_SIZE
            )));
        }
        let counts = [
            ("corpus.n_records", self.corpus.n_records),
            ("pretrain.epochs", self.pretrain.epochs),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("audit.n_pairs", self.audit.n_pairs),
            ("audit.n_prompts", self.audit.n_prompts),
            ("select.n_pairs", self.select.n_pairs),
            ("debias.n_pairs", self.debias.n_pairs),
            ("extract.n_pairs", self.extract.n_pairs),
            ("eval.n_prompts", self.eval.n_prompts),
            ("eval.max_new", self.eval.max_new),
            ("eval.classifier_records", self.eval.classifier_records),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(HarnessError::config(format!("{name} must be positive")));
        }
        if let Some(k) = self.select.k {
            if k == 0 || k > self.model.n_layers {
                return Err(HarnessError::config(format!(
                    "select.k = {k} outside 1..={}",
                    self.model.n_layers
                )));
            }
        }
        if !self.eval.beta.is_finite() || self.eval.betas.iter().any(|b| !b.is_finite()) {
            return Err(HarnessError::config("eval betas must be finite"));
        }
        self.debias.train.validate(self.model.d_model)?;
        Ok(())
    }
}

/// Hex SHA-256 over the canonical JSON of each part in order. Parsed values
/// are hashed, so formatting of the source file never matters.
pub fn content_hash<T: Serialize + ?Sized>(parts: &[(&str, &T)]) -> String {
    let mut h = Sha256::new();
    for (name, value) in parts {
        let json = serde_json::to_value(value).expect("hashable value");
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(json.to_string().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 5, "eval": {"beta": 1.5}}"#).unwrap();
        assert_eq!(cfg.eval.beta, 1.5);
        assert_eq!(cfg.debias.train.seed, 5);
        assert_eq!(cfg.corpus, CorpusSection::default());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_config_errors() {
        for text in [
            r#"{"sed": 1}"#,
            r#"{"corpus": {"n_records": 0}}"#,
            "{",
            r#"{"select": {"k": 99}}"#,
        ] {
            let e = PipelineConfig::from_json(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn hash_ignores_whitespace_but_not_values() {
        let a = PipelineConfig::from_json(r#"{"eval": {"beta": 2.0}}"#).unwrap();
        let b = PipelineConfig::from_json("{\n  \"eval\" :\n {\"beta\":   2.0 }\n}\n").unwrap();
        let c = PipelineConfig::from_json(r#"{"eval": {"beta": 2.5}}"#).unwrap();
        let h = |c: &PipelineConfig| content_hash(&[("eval", &c.eval)]);
        assert_eq!(h(&a), h(&b));
        assert_ne!(h(&a), h(&c));
    }
}
