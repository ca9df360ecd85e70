// SPDX-License-Identifier: MIT OR Apache-2.0

//! Staged pipeline with on-disk artifacts. Each stage is keyed by a hash of
//! its config sections and its upstream artifacts, and is skipped when the
//! recorded key and artifact hash still match.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use desksteer::corpus::{gen_neutral_prompts, gen_pretrain_corpus, gen_steering_pairs, SegmentedPrompt, SteeringPair};
use desksteer::debias::{train_debias, DebiasBlocks, DomainProbe};
use desksteer::model::TinyLm;
use desksteer::probing::{
    audit_semantic_bias, default_k, fit_semantic_probe, middle_layers, rank_layers, select_top_k, BiasAuditReport,
    LayerSelection, ProbeReport,
};
use desksteer::steering::{baseline_actadd, extract_steering, ControlOperator, SteeringRepresentation};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    debias_from_checkpoint, debias_to_checkpoint, model_from_checkpoint, model_to_checkpoint, steering_from_checkpoint,
    steering_to_checkpoint, write_atomic, Checkpoint,
};
use crate::config::{bytes_hash, content_hash, PipelineConfig};
use crate::error::{HarnessError, Result};
use crate::eval::{beta_sweep, eval_attribute_rate, steered_rate, EvalClassifier, EvalResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    AuditBias,
    SelectLayers,
    TrainDebias,
    Extract,
    Eval,
}

pub const STAGES: [Stage; 6] = [
    Stage::Pretrain,
    Stage::AuditBias,
    Stage::SelectLayers,
    Stage::TrainDebias,
    Stage::Extract,
    Stage::Eval,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::AuditBias => "audit-bias",
            Stage::SelectLayers => "select-layers",
            Stage::TrainDebias => "train-debias",
            Stage::Extract => "extract",
            Stage::Eval => "eval",
        }
    }

    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Pretrain => "model.ckpt",
            Stage::AuditBias => "audit.json",
            Stage::SelectLayers => "layers.json",
            Stage::TrainDebias => "debias.ckpt",
            Stage::Extract => "steering.ckpt",
            Stage::Eval => "eval.json",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Pretrain => &[],
            Stage::AuditBias | Stage::SelectLayers => &[Stage::Pretrain],
            Stage::TrainDebias => &[Stage::Pretrain, Stage::SelectLayers],
            Stage::Extract => &[Stage::Pretrain, Stage::TrainDebias],
            Stage::Eval => &[Stage::Pretrain, Stage::Extract],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        STAGES
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HarnessError::config(format!("unknown stage `{s}`")))
    }
}

/// Per-purpose seeds derived from the top-level seed.
#[derive(Debug, Clone, Copy)]
enum Salt {
    PretrainCorpus = 1,
    AuditPairs = 2,
    AuditPrompts = 3,
    SelectPairs = 4,
    DebiasPairs = 5,
    ExtractPairs = 6,
    EvalPrompts = 7,
    Classifier = 8,
}

fn derive_seed(seed: u64, salt: Salt) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (salt as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    key: String,
    artifact_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: usize,
    pub probe_accuracy: f64,
    /// Fraction of neutral prompts classified toward their topic's planted direction.
    pub agreement: f64,
    pub report: BiasAuditReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditArtifact {
    pub bias_strength: f64,
    pub layers: Vec<LayerAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayersArtifact {
    pub report: ProbeReport,
    pub middle: bool,
    pub selection: LayerSelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier_accuracy: f64,
    pub layers: Vec<usize>,
    pub operator: ControlOperator,
    pub beta: f32,
    pub unsteered: EvalResult,
    /// Debiased steering at `beta`; its curve holds the β sweep.
    pub steered: EvalResult,
    /// Single-pair raw-activation steering at `beta`.
    pub baseline: Option<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub computed: bool,
    pub artifact: PathBuf,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
    pub verbose: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::data(format!("{}: {e}", path.display())))
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| bytes_hash(&b))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir)?;
        Ok(Self {
            cfg,
            out_dir,
            verbose: false,
        })
    }

    pub fn artifact_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(stage.artifact())
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out_dir.join(format!("{}.stamp", stage.name()))
    }

    fn read_stamp(&self, stage: Stage) -> Option<Stamp> {
        read_json(&self.stamp_path(stage)).ok()
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    /// Hash of the artifact a completed upstream stage recorded.
    fn upstream_hash(&self, stage: Stage) -> Result<String> {
        self.read_stamp(stage)
            .map(|s| s.artifact_sha256)
            .ok_or_else(|| HarnessError::data(format!("stage {stage} has not run")))
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let c = &self.cfg;
        let mut parts: Vec<(&str, serde_json::Value)> = vec![
            ("stage", stage.name().into()),
            ("seed", c.seed.into()),
            ("corpus", serde_json::to_value(&c.corpus)?),
        ];
        match stage {
            Stage::Pretrain => {
                parts.push(("model", serde_json::to_value(&c.model)?));
                parts.push(("pretrain", serde_json::to_value(&c.pretrain)?));
            }
            Stage::AuditBias => parts.push(("audit", serde_json::to_value(&c.audit)?)),
            Stage::SelectLayers => parts.push(("select", serde_json::to_value(&c.select)?)),
            Stage::TrainDebias => parts.push(("debias", serde_json::to_value(&c.debias)?)),
            Stage::Extract => parts.push(("extract", serde_json::to_value(&c.extract)?)),
            Stage::Eval => parts.push(("eval", serde_json::to_value(&c.eval)?)),
        }
        let upstream: Vec<(&str, String)> = stage
            .upstream()
            .iter()
            .map(|&u| self.upstream_hash(u).map(|h| (u.name(), h)))
            .collect::<Result<_>>()?;
        for (name, h) in upstream {
            parts.push((name, h.into()));
        }
        let refs: Vec<(&str, &serde_json::Value)> = parts.iter().map(|(n, v)| (*n, v)).collect();
        Ok(content_hash(&refs))
    }

    /// Whether `stage` would be skipped given the current artifacts.
    pub fn is_fresh(&self, stage: Stage) -> bool {
        let Ok(key) = self.stage_key(stage) else {
            return false;
        };
        match (self.read_stamp(stage), file_hash(&self.artifact_path(stage))) {
            (Some(s), Some(h)) => s.key == key && s.artifact_sha256 == h,
            _ => false,
        }
    }

    /// Runs `stage` after its upstream stages, reusing fresh artifacts.
    pub fn ensure(&self, stage: Stage) -> Result<Vec<StageReport>> {
        let mut reports = Vec::new();
        for &u in stage.upstream() {
            for r in self.ensure(u)? {
                if !reports.iter().any(|x: &StageReport| x.stage == r.stage) {
                    reports.push(r);
                }
            }
        }
        let computed = if self.is_fresh(stage) {
            self.note(&format!("{stage}: cached"));
            false
        } else {
            self.note(&format!("{stage}: running"));
            self.compute(stage).map_err(|e| e.in_stage(stage.name()))?;
            let path = self.artifact_path(stage);
            let stamp = Stamp {
                key: self.stage_key(stage)?,
                artifact_sha256: file_hash(&path)
                    .ok_or_else(|| HarnessError::data(format!("stage {stage} left no artifact")))?,
            };
            write_json(&self.stamp_path(stage), &stamp)?;
            true
        };
        reports.push(StageReport {
            stage,
            computed,
            artifact: self.artifact_path(stage),
        });
        Ok(reports)
    }

    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        let mut reports: Vec<StageReport> = Vec::new();
        for stage in STAGES {
            for r in self.ensure(stage)? {
                if !reports.iter().any(|x| x.stage == r.stage) {
                    reports.push(r);
                }
            }
        }
        Ok(reports)
    }

    fn compute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Pretrain => self.pretrain(),
            Stage::AuditBias => self.audit(),
            Stage::SelectLayers => self.select(),
            Stage::TrainDebias => self.debias(),
            Stage::Extract => self.extract(),
            Stage::Eval => self.eval(),
        }
    }

    fn seed(&self, salt: Salt) -> u64 {
        derive_seed(self.cfg.seed, salt)
    }

    fn pretrain(&self) -> Result<()> {
        let c = &self.cfg;
        let records = gen_pretrain_corpus(&c.corpus.spec, c.corpus.n_records, self.seed(Salt::PretrainCorpus))?;
        let seqs: Vec<Vec<usize>> = records.iter().map(|r| r.sequence()).collect();
        let mut model = TinyLm::new(c.model.clone())?;
        let log = model.train(&seqs, &c.pretrain)?;
        if !log.final_loss.is_finite() {
            return Err(HarnessError::numeric("pretraining loss is not finite"));
        }
        self.note(&format!(
            "pretrain: loss {:.4} -> {:.4}",
            log.initial_loss, log.final_loss
        ));
        model_to_checkpoint(&model, Some(&log))?.save(&self.artifact_path(Stage::Pretrain))
    }

    pub fn load_model(&self) -> Result<TinyLm> {
        let ck = Checkpoint::load(&self.artifact_path(Stage::Pretrain))?.expect_kind("model")?;
        Ok(model_from_checkpoint(&ck)?.0)
    }

    fn pairs(&self, n: usize, salt: Salt) -> Result<Vec<SteeringPair>> {
        Ok(gen_steering_pairs(&self.cfg.corpus.spec, n, self.seed(salt))?)
    }

    fn audit(&self) -> Result<()> {
        let c = &self.cfg;
        let model = self.load_model()?;
        let pairs = self.pairs(c.audit.n_pairs, Salt::AuditPairs)?;
        let prompts: Vec<&SegmentedPrompt> = pairs.iter().flat_map(|p| [&p.positive, &p.negative]).collect();
        let neutral = gen_neutral_prompts(&c.corpus.spec, c.audit.n_prompts, self.seed(Salt::AuditPrompts))?;
        let spec = &c.corpus.spec;
        let layers = (1..=c.model.n_layers)
            .map(|l| {
                let (probe, acc) = fit_semantic_probe(&model, &prompts, l, &c.audit.probe, &[])?;
                let report = audit_semantic_bias(&model, &neutral, &probe)?;
                Ok(LayerAudit {
                    layer: l,
                    probe_accuracy: acc,
                    agreement: report.agreement(|t| spec.topic_direction(t)),
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(
            &self.artifact_path(Stage::AuditBias),
            &AuditArtifact {
                bias_strength: spec.bias_strength,
                layers,
            },
        )
    }

    fn select(&self) -> Result<()> {
        let c = &self.cfg;
        let model = self.load_model()?;
        let pairs = self.pairs(c.select.n_pairs, Salt::SelectPairs)?;
        let prompts: Vec<&SegmentedPrompt> = pairs.iter().flat_map(|p| [&p.positive, &p.negative]).collect();
        let report = rank_layers(&model, &prompts, &c.select.probe)?;
        let k = c.select.k.unwrap_or_else(|| default_k(c.model.n_layers));
        let selection = if c.select.middle {
            middle_layers(c.model.n_layers, k)?
        } else {
            select_top_k(&report, k)?
        };
        self.note(&format!("select-layers: {:?}", selection.layers));
        write_json(
            &self.artifact_path(Stage::SelectLayers),
            &LayersArtifact {
                report,
                middle: c.select.middle,
                selection,
            },
        )
    }

    pub fn load_layers(&self) -> Result<LayersArtifact> {
        read_json(&self.artifact_path(Stage::SelectLayers))
    }

    fn debias(&self) -> Result<()> {
        let c = &self.cfg;
        let model = self.load_model()?;
        let layers = self.load_layers()?.selection;
        let pairs = self.pairs(c.debias.n_pairs, Salt::DebiasPairs)?;
        let out = train_debias(&model, &layers, &pairs, &c.debias.train)?;
        let mut lines = String::new();
        for e in &out.log {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
            self.note(&format!(
                "train-debias: epoch {} pre {:.4} debias {:.4} ext {:.3} agree {:.3}",
                e.epoch, e.l_pre, e.l_debias, e.ext_probe_acc, e.teacher_agreement
            ));
        }
        write_atomic(&self.out_dir.join("debias_log.jsonl"), lines.as_bytes())?;
        debias_to_checkpoint(&out.blocks, &out.probe, &out.log)?.save(&self.artifact_path(Stage::TrainDebias))
    }

    pub fn load_debias(&self) -> Result<(DebiasBlocks, DomainProbe)> {
        let ck = Checkpoint::load(&self.artifact_path(Stage::TrainDebias))?.expect_kind("debias")?;
        let (blocks, probe, _) = debias_from_checkpoint(&ck)?;
        Ok((blocks, probe))
    }

    /// Pairs used for extraction; the first one also feeds the raw baseline.
    pub fn extract_pairs(&self) -> Result<Vec<SteeringPair>> {
        self.pairs(self.cfg.extract.n_pairs, Salt::ExtractPairs)
    }

    fn extract(&self) -> Result<()> {
        let model = self.load_model()?;
        let (blocks, _) = self.load_debias()?;
        let pairs = self.extract_pairs()?;
        let rep = extract_steering(
            &model,
            &blocks.hooks(),
            &pairs,
            &blocks.layers(),
            self.cfg.extract.scope,
        )?;
        let model_hash = self.upstream_hash(Stage::Pretrain)?;
        steering_to_checkpoint(&rep, &model_hash)?.save(&self.artifact_path(Stage::Extract))
    }

    pub fn load_steering(&self) -> Result<SteeringRepresentation> {
        let ck = Checkpoint::load(&self.artifact_path(Stage::Extract))?.expect_kind("steering")?;
        Ok(steering_from_checkpoint(&ck)?.0)
    }

    pub fn eval_prompts(&self) -> Result<Vec<SegmentedPrompt>> {
        let c = &self.cfg;
        Ok(
            gen_neutral_prompts(&c.corpus.spec, c.eval.n_prompts, self.seed(Salt::EvalPrompts))?
                .into_iter()
                .map(|(_, p)| p)
                .collect(),
        )
    }

    pub fn classifier(&self, model: &TinyLm) -> Result<EvalClassifier> {
        let c = &self.cfg;
        EvalClassifier::fit(
            model,
            &c.corpus.spec,
            c.eval.classifier_records,
            self.seed(Salt::Classifier),
        )
    }

    fn eval(&self) -> Result<()> {
        let c = &self.cfg;
        let model = self.load_model()?;
        let rep = self.load_steering()?;
        let prompts = self.eval_prompts()?;
        let classifier = self.classifier(&model)?;
        let e = &c.eval;
        let unsteered = eval_attribute_rate(&model, &[], &prompts, &classifier, e.max_new)?;
        let mut steered = steered_rate(&model, &rep, e.operator, e.beta, &prompts, &classifier, e.max_new)?;
        steered.curve = beta_sweep(&model, &rep, e.operator, &e.betas, &prompts, &classifier, e.max_new)?;
        let baseline = if e.baseline {
            let pair = self
                .extract_pairs()?
                .into_iter()
                .next()
                .ok_or_else(|| HarnessError::data("no pair for the baseline"))?;
            let raw = baseline_actadd(&model, &pair, &rep.layers, c.extract.scope)?;
            Some(steered_rate(
                &model,
                &raw,
                e.operator,
                e.beta,
                &prompts,
                &classifier,
                e.max_new,
            )?)
        } else {
            None
        };
        self.note(&format!(
            "eval: unsteered {:.3} steered {:.3}",
            unsteered.attribute_rate, steered.attribute_rate
        ));
        write_json(
            &self.artifact_path(Stage::Eval),
            &EvalReport {
                classifier_accuracy: classifier.val_accuracy,
                layers: rep.layers.clone(),
                operator: e.operator,
                beta: e.beta,
                unsteered,
                steered,
                baseline,
            },
        )
    }

    pub fn load_eval(&self) -> Result<EvalReport> {
        read_json(&self.artifact_path(Stage::Eval))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in STAGES {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("bogus".parse::<Stage>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn upstream_stages_come_earlier() {
        for (i, s) in STAGES.iter().enumerate() {
            for u in s.upstream() {
                assert!(STAGES[..i].contains(u));
            }
        }
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(3, Salt::AuditPairs), derive_seed(3, Salt::SelectPairs));
        assert_ne!(derive_seed(3, Salt::AuditPairs), derive_seed(4, Salt::AuditPairs));
    }
}
