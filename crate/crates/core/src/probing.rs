// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes over pooled layer representations: layer ranking, top-K
//! selection and the neutral-prompt bias audit.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Direction, SegmentedPrompt};
use crate::model::{shuffle, LayerHook, ModelError, TinyLm};

/// Two direction classes: negative = 0, positive = 1.
pub const N_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("data error: {0}")]
    Data(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Fraction of examples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression `x ↦ W·z(x) + b`, where `z` standardizes
/// each input feature with statistics frozen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `c×d`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub layer: usize,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f32> {
        let z = self.standardize(x);
        let d = self.dim();
        (0..self.n_classes())
            .map(|c| {
                let w = &self.weights[c * d..(c + 1) * d];
                self.bias[c] + w.iter().zip(&z).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        crate::model::argmax(&self.logits(x))
    }

    pub fn accuracy(&self, xs: &[Vec<f32>], ys: &[usize]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / xs.len() as f64
    }
}

fn check_dataset(xs: &[Vec<f32>], ys: &[usize]) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(ProbeError::Data(format!(
            "{} representations but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let d = xs
        .first()
        .map(Vec::len)
        .ok_or_else(|| ProbeError::Data("no representations".into()))?;
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(ProbeError::Data(format!(
            "representation of dimension {} among dimension {d}",
            bad.len()
        )));
    }
    if let Some(&y) = ys.iter().find(|&&y| y >= N_CLASSES) {
        return Err(ProbeError::Data(format!("label {y} outside {N_CLASSES} classes")));
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(ProbeError::Data("probe needs at least two classes".into()));
    }
    Ok(d)
}

/// Full-batch gradient descent on softmax cross-entropy. Deterministic: the
/// weights start at zero and no sampling is involved.
pub fn fit_probe(xs: &[Vec<f32>], ys: &[usize], layer: usize, epochs: usize, lr: f32) -> Result<LinearProbe> {
    let d = check_dataset(xs, ys)?;
    let n = xs.len() as f64;
    let c = N_CLASSES;
    let mut mean = vec![0.0f64; d];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for x in xs {
        var.iter_mut()
            .zip(x)
            .zip(&mean)
            .for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
    }
    let mut probe = LinearProbe {
        weights: vec![0.0; c * d],
        bias: vec![0.0; c],
        mean: mean.iter().map(|&m| m as f32).collect(),
        inv_std: var
            .iter()
            .map(|&v| {
                let sd = (v / n).sqrt();
                if sd > 1e-6 {
                    (1.0 / sd) as f32
                } else {
                    0.0
                }
            })
            .collect(),
        layer,
    };
    let zs: Vec<Vec<f32>> = xs.iter().map(|x| probe.standardize(x)).collect();
    let mut gw = vec![0.0f32; c * d];
    let mut gb = vec![0.0f32; c];
    let mut logits = vec![0.0f32; c];
    let mut probs = vec![0.0f32; c];
    for _ in 0..epochs {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (z, &y) in zs.iter().zip(ys) {
            for (k, l) in logits.iter_mut().enumerate() {
                let w = &probe.weights[k * d..(k + 1) * d];
                *l = probe.bias[k] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f32>();
            }
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for (p, &l) in probs.iter_mut().zip(&logits) {
                *p = (l - max).exp();
                sum += *p;
            }
            for (k, p) in probs.iter().enumerate() {
                let err = p / sum - if k == y { 1.0 } else { 0.0 };
                gb[k] += err;
                gw[k * d..(k + 1) * d]
                    .iter_mut()
                    .zip(z)
                    .for_each(|(g, &v)| *g += err * v);
            }
        }
        let step = lr / n as f32;
        probe.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }
    Ok(probe)
}

/// Seeded shuffle split into (train, validation) index sets. Both sides are
/// non-empty whenever `n ≥ 2`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Fits on a seeded split and reports held-out accuracy.
pub fn fit_and_validate(xs: &[Vec<f32>], ys: &[usize], layer: usize, cfg: &ProbeConfig) -> Result<(LinearProbe, f64)> {
    check_dataset(xs, ys)?;
    let (train, val) = split_indices(xs.len(), cfg.val_fraction, cfg.seed);
    let pick = |ids: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) { ids.iter().map(|&i| (xs[i].clone(), ys[i])).unzip() };
    let (tx, ty) = pick(&train);
    let (vx, vy) = pick(&val);
    let probe = fit_probe(&tx, &ty, layer, cfg.epochs, cfg.lr)?;
    let acc = probe.accuracy(&vx, &vy);
    Ok((probe, acc))
}

/// Which token positions are averaged into one vector per prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Whole,
    Body,
    /// The final position alone, where the next token is predicted.
    Last,
}

/// Mean-pooled states for every prompt at every layer: `out[layer][prompt]`.
pub fn pooled_states(
    model: &TinyLm,
    prompts: &[&SegmentedPrompt],
    pooling: Pooling,
    hooks: &[&dyn LayerHook],
) -> Result<Vec<Vec<Vec<f32>>>> {
    let n_states = model.config().n_states();
    let mut out = vec![Vec::with_capacity(prompts.len()); n_states];
    for p in prompts {
        let (start, end) = match pooling {
            Pooling::Whole => (0, p.len()),
            Pooling::Body => (p.prefix_len(), p.len()),
            Pooling::Last => (p.len().saturating_sub(1), p.len()),
        };
        if start == end {
            return Err(ProbeError::Data("prompt segment to pool is empty".into()));
        }
        let (_, trace) = model.forward_with_trace(&p.tokens(), hooks)?;
        for (l, layer) in out.iter_mut().enumerate() {
            layer.push(trace.pooled(l, start, end));
        }
    }
    Ok(out)
}

fn direction_labels(prompts: &[&SegmentedPrompt]) -> Result<Vec<usize>> {
    prompts
        .iter()
        .map(|p| {
            p.direction
                .class()
                .ok_or_else(|| ProbeError::Data("probe training prompt has no direction".into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy for layers `0..=D`.
    pub accuracies: Vec<f64>,
}

/// Trains one probe per layer on whole-prompt pooled states and reports the
/// held-out accuracy of each.
pub fn rank_layers(model: &TinyLm, prompts: &[&SegmentedPrompt], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let ys = direction_labels(prompts)?;
    let states = pooled_states(model, prompts, Pooling::Whole, &[])?;
    let accuracies = states
        .iter()
        .enumerate()
        .map(|(l, xs)| fit_and_validate(xs, &ys, l, cfg).map(|(_, acc)| acc))
        .collect::<Result<_>>()?;
    Ok(ProbeReport { accuracies })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Sorted, distinct.
    pub layers: Vec<usize>,
}

impl LayerSelection {
    pub fn new(mut layers: Vec<usize>, n_states: usize) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(ProbeError::Parameter("layer selection is empty".into()));
        }
        if let Some(&l) = layers.iter().find(|&&l| l >= n_states) {
            return Err(ProbeError::Parameter(format!("layer {l} outside 0..{n_states}")));
        }
        Ok(Self { layers })
    }

    pub fn k(&self) -> usize {
        self.layers.len()
    }
}

/// Default number of intervened layers for a `D`-block model: `⌈D/4⌉`.
pub fn default_k(n_layers: usize) -> usize {
    n_layers.div_ceil(4).max(1)
}

/// The `k` most accurate layers; equal accuracies prefer the deeper layer.
pub fn select_top_k(report: &ProbeReport, k: usize) -> Result<LayerSelection> {
    let n = report.accuracies.len();
    if k == 0 || k > n {
        return Err(ProbeError::Parameter(format!("K = {k} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| report.accuracies[b].total_cmp(&report.accuracies[a]).then(b.cmp(&a)));
    order.truncate(k);
    LayerSelection::new(order, n)
}

/// `k` consecutive layers centred in `1..=D`, used when probing is skipped.
pub fn middle_layers(n_layers: usize, k: usize) -> Result<LayerSelection> {
    if k == 0 || k > n_layers {
        return Err(ProbeError::Parameter(format!("K = {k} outside 1..={n_layers}")));
    }
    let start = 1 + (n_layers - k) / 2;
    LayerSelection::new((start..start + k).collect(), n_layers + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicFractions {
    pub n: usize,
    pub positive: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAuditReport {
    pub layer: usize,
    pub n: usize,
    pub positive: f64,
    pub negative: f64,
    pub per_topic: BTreeMap<usize, TopicFractions>,
}

impl BiasAuditReport {
    /// Fraction of prompts whose classification matches `expected(topic)`.
    /// Topics mapping to [`Direction::None`] are skipped.
    pub fn agreement(&self, expected: impl Fn(usize) -> Direction) -> f64 {
        let (mut hit, mut total) = (0.0, 0usize);
        for (&topic, f) in &self.per_topic {
            let share = match expected(topic) {
                Direction::Positive => f.positive,
                Direction::Negative => f.negative,
                Direction::None => continue,
            };
            hit += share * f.n as f64;
            total += f.n;
        }
        if total == 0 {
            0.0
        } else {
            hit / total as f64
        }
    }
}

/// Probe at `layer` on the final body position of steered prompts, labelled
/// with their prefix direction. That row predicts the continuation, so it is
/// where a direction implied by the topic alone would show up.
pub fn fit_semantic_probe(
    model: &TinyLm,
    prompts: &[&SegmentedPrompt],
    layer: usize,
    cfg: &ProbeConfig,
    hooks: &[&dyn LayerHook],
) -> Result<(LinearProbe, f64)> {
    if layer >= model.config().n_states() {
        return Err(ProbeError::Config(format!("layer {layer} outside model")));
    }
    let ys = direction_labels(prompts)?;
    let states = pooled_states(model, prompts, Pooling::Last, hooks)?;
    fit_and_validate(&states[layer], &ys, layer, cfg)
}

/// Classifies the final-position state of each neutral prompt with `probe`.
pub fn audit_semantic_bias(
    model: &TinyLm,
    prompts: &[(usize, SegmentedPrompt)],
    probe: &LinearProbe,
) -> Result<BiasAuditReport> {
    if probe.dim() != model.config().d_model {
        return Err(ProbeError::Config(format!(
            "probe dimension {} but model width {}",
            probe.dim(),
            model.config().d_model
        )));
    }
    if probe.layer >= model.config().n_states() {
        return Err(ProbeError::Config(format!("probe layer {} outside model", probe.layer)));
    }
    if prompts.is_empty() {
        return Err(ProbeError::Data("no prompts to audit".into()));
    }
    if prompts.iter().any(|(_, p)| p.prefix_len() != 0) {
        return Err(ProbeError::Data(
            "audit prompts must not carry a steering prefix".into(),
        ));
    }
    if prompts.iter().any(|(_, p)| p.is_empty()) {
        return Err(ProbeError::Data("empty audit prompt".into()));
    }
    let pooled: Vec<Vec<f32>> = prompts
        .iter()
        .map(|(_, p)| {
            let (_, trace) = model.forward_with_trace(&p.tokens(), &[])?;
            Ok(trace.pooled(probe.layer, p.len() - 1, p.len()))
        })
        .collect::<Result<_>>()?;
    // Neutral prompts sit at different positions than the steered prompts the
    // probe saw, so each population is centred on its own mean.
    let mut shift = probe.mean.clone();
    for x in &pooled {
        for (s, &v) in shift.iter_mut().zip(x) {
            *s -= v / pooled.len() as f32;
        }
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((topic, _), x) in prompts.iter().zip(&pooled) {
        let x: Vec<f32> = x.iter().zip(&shift).map(|(v, s)| v + s).collect();
        let e = counts.entry(*topic).or_default();
        e.0 += 1;
        if probe.predict(&x) == 1 {
            e.1 += 1;
        }
    }
    let n = prompts.len();
    let n_pos: usize = counts.values().map(|c| c.1).sum();
    let positive = n_pos as f64 / n as f64;
    Ok(BiasAuditReport {
        layer: probe.layer,
        n,
        positive,
        negative: (n - n_pos) as f64 / n as f64,
        per_topic: counts
            .into_iter()
            .map(|(t, (total, pos))| {
                (
                    t,
                    TopicFractions {
                        n: total,
                        positive: pos as f64 / total as f64,
                        negative: (total - pos) as f64 / total as f64,
                    },
                )
            })
            .collect(),
    })
}
