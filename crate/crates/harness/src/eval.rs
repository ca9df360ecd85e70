// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribute-rate evaluation: greedy generations scored by a logistic probe
//! on final-layer states of the generated continuation.

use desksteer::corpus::{gen_pretrain_corpus, ConfoundSpec, Direction, SegmentedPrompt, EOS};
use desksteer::model::{GenerateOptions, LayerHook, TinyLm};
use desksteer::probing::{fit_and_validate, LinearProbe, ProbeConfig};
use desksteer::steering::{as_hooks, make_steering_hooks, ControlConfig, ControlOperator, SteeringRepresentation};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalClassifier {
    pub probe: LinearProbe,
    /// Held-out accuracy measured when the classifier was fitted.
    pub val_accuracy: f64,
}

/// Rows `[start, end)` of `tokens` that hold the continuation proper; a
/// trailing `<eos>` is dropped unless it is the only token.
fn continuation_rows(tokens: &[usize], start: usize) -> (usize, usize) {
    let mut end = tokens.len();
    if end > start + 1 && tokens[end - 1] == EOS {
        end -= 1;
    }
    (start, end)
}

impl EvalClassifier {
    /// Mean final-layer state of the continuation in `prompt ++ continuation`.
    pub fn features(model: &TinyLm, prompt: &[usize], continuation: &[usize]) -> Result<Vec<f32>> {
        if continuation.is_empty() {
            return Err(HarnessError::data("empty continuation"));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(continuation);
        let (_, trace) = model.forward_with_trace(&tokens, &[])?;
        let (start, end) = continuation_rows(&tokens, prompt.len());
        Ok(trace.pooled(model.config().n_layers, start, end))
    }

    /// Fits on unconfounded held-out records so topic cannot stand in for
    /// sentiment.
    pub fn fit(model: &TinyLm, spec: &ConfoundSpec, n_records: usize, seed: u64) -> Result<Self> {
        let balanced = ConfoundSpec {
            bias_strength: 0.5,
            ..spec.clone()
        };
        let records = gen_pretrain_corpus(&balanced, n_records, seed)?;
        let mut xs = Vec::with_capacity(records.len());
        let mut ys = Vec::with_capacity(records.len());
        for r in &records {
            xs.push(Self::features(model, &r.prompt.tokens(), &r.continuation)?);
            ys.push(
                Direction::from_label(r.label)
                    .class()
                    .ok_or_else(|| HarnessError::data("unlabelled classifier record"))?,
            );
        }
        let cfg = ProbeConfig {
            seed,
            ..ProbeConfig::default()
        };
        let (probe, val_accuracy) = fit_and_validate(&xs, &ys, model.config().n_layers, &cfg)?;
        Ok(Self { probe, val_accuracy })
    }

    pub fn is_positive(&self, model: &TinyLm, prompt: &[usize], continuation: &[usize]) -> Result<bool> {
        let x = Self::features(model, prompt, continuation)?;
        Ok(Some(self.probe.predict(&x)) == Direction::Positive.class())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub beta: f32,
    pub attribute_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of generations classified positive.
    pub attribute_rate: f64,
    /// Fraction of generated positions equal to the unhooked greedy output.
    pub teacher_agreement: f64,
    pub n_prompts: usize,
    pub curve: Vec<CurvePoint>,
}

pub fn generation_options(max_new: usize) -> GenerateOptions {
    GenerateOptions {
        max_new,
        temperature: 0.0,
        seed: 0,
        stop_token: Some(EOS),
    }
}

/// Greedy continuation of `prompt` under `hooks`.
pub fn continue_prompt(
    model: &TinyLm,
    prompt: &[usize],
    hooks: &[&dyn LayerHook],
    max_new: usize,
) -> Result<Vec<usize>> {
    let seq = model.generate(prompt, hooks, &generation_options(max_new))?;
    Ok(seq[prompt.len()..].to_vec())
}

pub fn eval_attribute_rate(
    model: &TinyLm,
    hooks: &[&dyn LayerHook],
    prompts: &[SegmentedPrompt],
    classifier: &EvalClassifier,
    max_new: usize,
) -> Result<EvalResult> {
    if prompts.is_empty() {
        return Err(HarnessError::data("no evaluation prompts"));
    }
    let (mut positive, mut agree, mut positions) = (0usize, 0usize, 0usize);
    for p in prompts {
        let tokens = p.tokens();
        let generated = continue_prompt(model, &tokens, hooks, max_new)?;
        let reference = if hooks.is_empty() {
            generated.clone()
        } else {
            continue_prompt(model, &tokens, &[], max_new)?
        };
        positions += reference.len();
        agree += reference.iter().zip(&generated).filter(|(a, b)| a == b).count();
        if !generated.is_empty() && classifier.is_positive(model, &tokens, &generated)? {
            positive += 1;
        }
    }
    Ok(EvalResult {
        attribute_rate: positive as f64 / prompts.len() as f64,
        teacher_agreement: if positions == 0 {
            1.0
        } else {
            agree as f64 / positions as f64
        },
        n_prompts: prompts.len(),
        curve: Vec::new(),
    })
}

/// Attribute rate under `rep` steered with `operator` at `beta`.
pub fn steered_rate(
    model: &TinyLm,
    rep: &SteeringRepresentation,
    operator: ControlOperator,
    beta: f32,
    prompts: &[SegmentedPrompt],
    classifier: &EvalClassifier,
    max_new: usize,
) -> Result<EvalResult> {
    let cfg = ControlConfig {
        beta,
        operator,
        layers: None,
    };
    let hooks = make_steering_hooks(rep, &cfg, model)?;
    eval_attribute_rate(model, &as_hooks(&hooks), prompts, classifier, max_new)
}

pub fn beta_sweep(
    model: &TinyLm,
    rep: &SteeringRepresentation,
    operator: ControlOperator,
    betas: &[f32],
    prompts: &[SegmentedPrompt],
    classifier: &EvalClassifier,
    max_new: usize,
) -> Result<Vec<CurvePoint>> {
    betas
        .iter()
        .map(|&beta| {
            steered_rate(model, rep, operator, beta, prompts, classifier, max_new).map(|r| CurvePoint {
                beta,
                attribute_rate: r.attribute_rate,
            })
        })
        .collect()
}
