// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors: extraction from positive/negative prompt pairs, the two
//! reference extractors, and the output-control operators applied as hooks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SegmentedPrompt, SteeringPair};
use crate::model::{ActivationTrace, LayerHook, ModelError, TinyLm};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("singularity: {0}")]
    Singular(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = SteeringError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// Pair differences taken with the debias blocks hooked in.
    Debiased,
    /// Pair differences of raw activations from a single pair.
    ActAdd,
    /// Target-set mean minus training-set mean.
    MeanCentring,
}

/// Token positions averaged during extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    #[default]
    All,
    Body,
}

/// One `d`-vector per intervened layer, ordered as `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringRepresentation {
    pub layers: Vec<usize>,
    pub vectors: Vec<Vec<f32>>,
    pub n_samples: usize,
    pub method: ExtractionMethod,
}

impl SteeringRepresentation {
    pub fn k(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vector(&self, layer: usize) -> Option<&[f32]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.vectors[i].as_slice())
    }

    /// Every vector multiplied by `c`.
    pub fn scaled(&self, c: f32) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| v.iter().map(|x| x * c).collect()).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.vectors.len() || self.layers.is_empty() {
            return Err(SteeringError::Config(format!(
                "{} layers but {} vectors",
                self.layers.len(),
                self.vectors.len()
            )));
        }
        let d = self.dim();
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(SteeringError::Dimension("vectors differ in length".into()));
        }
        if self.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SteeringError::Config("non-finite steering vector".into()));
        }
        Ok(())
    }
}

fn check_layers(model: &TinyLm, layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(SteeringError::Config("no layers to extract".into()));
    }
    let n = model.config().n_states();
    match layers.iter().find(|&&l| l >= n) {
        Some(l) => Err(SteeringError::Config(format!("layer {l} outside 0..{n}"))),
        None => Ok(()),
    }
}

fn scope_rows(prompt: &SegmentedPrompt, scope: TokenScope) -> std::ops::Range<usize> {
    match scope {
        TokenScope::All => 0..prompt.len(),
        TokenScope::Body => prompt.prefix_len()..prompt.len(),
    }
}

/// Per-layer mean over `rows` of `pos − neg`.
fn pair_difference(
    pos: &ActivationTrace,
    neg: &ActivationTrace,
    layers: &[usize],
    rows: std::ops::Range<usize>,
) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    layers
        .iter()
        .map(|&l| {
            let (p, q) = (pos.layer(l), neg.layer(l));
            let mut acc = vec![0.0f64; p.cols()];
            for i in rows.clone() {
                for ((a, &x), &y) in acc.iter_mut().zip(p.row(i)).zip(q.row(i)) {
                    *a += (x - y) as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        })
        .collect()
}

/// Mean over pairs of the per-token mean difference between the positive and
/// negative prompt's states at each layer, with `hooks` active on both runs.
pub fn extract_with_hooks(
    model: &TinyLm,
    hooks: &[&dyn LayerHook],
    pairs: &[SteeringPair],
    layers: &[usize],
    scope: TokenScope,
    method: ExtractionMethod,
) -> Result<SteeringRepresentation> {
    check_layers(model, layers)?;
    if pairs.is_empty() {
        return Err(SteeringError::Data("no steering pairs".into()));
    }
    let d = model.config().d_model;
    let mut total = vec![vec![0.0f64; d]; layers.len()];
    for (j, pair) in pairs.iter().enumerate() {
        if pair.positive.len() != pair.negative.len() || pair.positive.prefix_len() != pair.negative.prefix_len() {
            return Err(SteeringError::Alignment(format!(
                "pair {j}: {} vs {} tokens",
                pair.positive.len(),
                pair.negative.len()
            )));
        }
        let rows = scope_rows(&pair.positive, scope);
        if rows.is_empty() {
            return Err(SteeringError::Alignment(format!("pair {j} has no tokens in scope")));
        }
        let (_, pos) = model.forward_with_trace(&pair.positive.tokens(), hooks)?;
        let (_, neg) = model.forward_with_trace(&pair.negative.tokens(), hooks)?;
        for (acc, diff) in total.iter_mut().zip(pair_difference(&pos, &neg, layers, rows)) {
            acc.iter_mut().zip(diff).for_each(|(a, x)| *a += x);
        }
    }
    let n = pairs.len() as f64;
    Ok(SteeringRepresentation {
        layers: layers.to_vec(),
        vectors: total
            .into_iter()
            .map(|v| v.into_iter().map(|x| (x / n) as f32).collect())
            .collect(),
        n_samples: pairs.len(),
        method,
    })
}

/// Debiased extraction: the trained debias blocks are passed as `hooks`.
pub fn extract_steering(
    model: &TinyLm,
    hooks: &[&dyn LayerHook],
    pairs: &[SteeringPair],
    layers: &[usize],
    scope: TokenScope,
) -> Result<SteeringRepresentation> {
    extract_with_hooks(model, hooks, pairs, layers, scope, ExtractionMethod::Debiased)
}

/// Raw-activation difference of a single pair.
pub fn baseline_actadd(
    model: &TinyLm,
    pair: &SteeringPair,
    layers: &[usize],
    scope: TokenScope,
) -> Result<SteeringRepresentation> {
    extract_with_hooks(
        model,
        &[],
        std::slice::from_ref(pair),
        layers,
        scope,
        ExtractionMethod::ActAdd,
    )
}

fn set_mean(model: &TinyLm, prompts: &[SegmentedPrompt], layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    if prompts.is_empty() {
        return Err(SteeringError::Data("empty prompt set".into()));
    }
    let d = model.config().d_model;
    let mut acc = vec![vec![0.0f64; d]; layers.len()];
    for p in prompts {
        let (_, trace) = model.forward_with_trace(&p.tokens(), &[])?;
        for (a, &l) in acc.iter_mut().zip(layers) {
            for (x, v) in a.iter_mut().zip(trace.pooled(l, 0, p.len())) {
                *x += v as f64;
            }
        }
    }
    let n = prompts.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(acc)
}

/// Mean prompt activation of `target` minus that of `train`, per layer.
pub fn baseline_mean_centring(
    model: &TinyLm,
    target: &[SegmentedPrompt],
    train: &[SegmentedPrompt],
    layers: &[usize],
) -> Result<SteeringRepresentation> {
    check_layers(model, layers)?;
    let t = set_mean(model, target, layers)?;
    let all = set_mean(model, train, layers)?;
    Ok(SteeringRepresentation {
        layers: layers.to_vec(),
        vectors: t
            .iter()
            .zip(&all)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) as f32).collect())
            .collect(),
        n_samples: target.len(),
        method: ExtractionMethod::MeanCentring,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlOperator {
    /// `r + β·(rᵀΔ/‖Δ‖²)·Δ`
    Projection,
    /// `r + β·Δ`
    Addition,
    /// `β·(r ∘ Δ)`
    Product,
}

impl std::str::FromStr for ControlOperator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "projection" => Ok(Self::Projection),
            "addition" => Ok(Self::Addition),
            "product" => Ok(Self::Product),
            other => Err(format!("unknown operator `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub beta: f32,
    pub operator: ControlOperator,
    /// Subset of the representation's layers; `None` means all of them.
    pub layers: Option<Vec<usize>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            operator: ControlOperator::Projection,
            layers: None,
        }
    }
}

/// Applies one control operator to a single token state.
pub fn apply_control(r: &[f32], delta: &[f32], operator: ControlOperator, beta: f32) -> Result<Vec<f32>> {
    if r.len() != delta.len() {
        return Err(SteeringError::Dimension(format!(
            "state of width {} against vector of width {}",
            r.len(),
            delta.len()
        )));
    }
    match operator {
        ControlOperator::Projection => {
            let norm_sq: f64 = delta.iter().map(|&x| (x as f64) * (x as f64)).sum();
            if norm_sq == 0.0 {
                return Err(SteeringError::Singular("projection onto a zero steering vector".into()));
            }
            let dot: f64 = r.iter().zip(delta).map(|(&a, &b)| a as f64 * b as f64).sum();
            let c = beta as f64 * dot / norm_sq;
            Ok(r.iter()
                .zip(delta)
                .map(|(&a, &b)| (a as f64 + c * b as f64) as f32)
                .collect())
        }
        ControlOperator::Addition => Ok(r.iter().zip(delta).map(|(a, b)| a + beta * b).collect()),
        ControlOperator::Product => Ok(r.iter().zip(delta).map(|(a, b)| beta * (a * b)).collect()),
    }
}

/// Row-wise control at one layer; the sum of several `(Δ, β)` terms is
/// supported for the projection operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringHook {
    pub layer: usize,
    pub operator: ControlOperator,
    pub terms: Vec<(Vec<f32>, f32)>,
}

impl SteeringHook {
    pub fn apply(&self, state: &Tensor) -> Result<Tensor> {
        let (n, d) = (state.rows(), state.cols());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = state.row(i);
            match self.operator {
                ControlOperator::Projection => {
                    let mut row = r.to_vec();
                    for (delta, beta) in &self.terms {
                        let stepped = apply_control(r, delta, ControlOperator::Projection, *beta)?;
                        for ((o, s), x) in row.iter_mut().zip(&stepped).zip(r) {
                            *o += s - x;
                        }
                    }
                    out.extend(row);
                }
                op => {
                    let mut row = r.to_vec();
                    for (delta, beta) in &self.terms {
                        row = apply_control(&row, delta, op, *beta)?;
                    }
                    out.extend(row);
                }
            }
        }
        Tensor::new(vec![n, d], out).map_err(|e| SteeringError::Dimension(e.to_string()))
    }
}

impl LayerHook for SteeringHook {
    fn layer(&self) -> usize {
        self.layer
    }

    fn rewrite(&self, tape: &mut Tape, _prev: Var, state: Var) -> Result<Var, TensorError> {
        let out = self
            .apply(tape.value(state))
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(tape.constant(out))
    }
}

/// One hook per target layer applying `cfg` with that layer's vector.
pub fn make_steering_hooks(
    rep: &SteeringRepresentation,
    cfg: &ControlConfig,
    model: &TinyLm,
) -> Result<Vec<SteeringHook>> {
    rep.validate()?;
    if rep.dim() != model.config().d_model {
        return Err(SteeringError::Config(format!(
            "vector width {} but model width {}",
            rep.dim(),
            model.config().d_model
        )));
    }
    let n_states = model.config().n_states();
    let targets = cfg.layers.clone().unwrap_or_else(|| rep.layers.clone());
    targets
        .iter()
        .map(|&l| {
            if l >= n_states {
                return Err(SteeringError::Config(format!("layer {l} outside model")));
            }
            let v = rep
                .vector(l)
                .ok_or_else(|| SteeringError::Config(format!("layer {l} not in representation")))?;
            if cfg.operator == ControlOperator::Projection && v.iter().all(|&x| x == 0.0) {
                return Err(SteeringError::Singular(format!("zero steering vector at layer {l}")));
            }
            Ok(SteeringHook {
                layer: l,
                operator: cfg.operator,
                terms: vec![(v.to_vec(), cfg.beta)],
            })
        })
        .collect()
}

/// Projection hooks combining several representations, each with its own β;
/// their projection terms add up at every shared layer.
pub fn make_combined_hooks(reps: &[(&SteeringRepresentation, f32)], model: &TinyLm) -> Result<Vec<SteeringHook>> {
    let mut hooks: Vec<SteeringHook> = Vec::new();
    for (rep, beta) in reps {
        let cfg = ControlConfig {
            beta: *beta,
            operator: ControlOperator::Projection,
            layers: None,
        };
        for h in make_steering_hooks(rep, &cfg, model)? {
            match hooks.iter_mut().find(|x| x.layer == h.layer) {
                Some(existing) => existing.terms.extend(h.terms),
                None => hooks.push(h),
            }
        }
    }
    hooks.sort_by_key(|h| h.layer);
    Ok(hooks)
}

pub fn as_hooks(hooks: &[SteeringHook]) -> Vec<&dyn LayerHook> {
    hooks.iter().map(|h| h as &dyn LayerHook).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        let r = [1.0f32, 2.0, -1.0];
        let delta = [0.5f32, 0.0, 0.5];
        assert_eq!(apply_control(&r, &delta, ControlOperator::Projection, 0.0).unwrap(), r);
        assert_eq!(apply_control(&r, &delta, ControlOperator::Addition, 0.0).unwrap(), r);
        // r ⟂ Δ
        assert_eq!(apply_control(&r, &delta, ControlOperator::Projection, 3.0).unwrap(), r);
        let removed = apply_control(&delta, &delta, ControlOperator::Projection, -1.0).unwrap();
        assert!(removed.iter().all(|x| x.abs() < 1e-7));
        assert_eq!(
            apply_control(&r, &delta, ControlOperator::Product, 2.0).unwrap(),
            vec![1.0, 0.0, -1.0]
        );
        assert_eq!(
            apply_control(&r, &delta, ControlOperator::Addition, 2.0).unwrap(),
            vec![2.0, 2.0, 0.0]
        );
    }

    #[test]
    fn zero_vector_projection_is_an_error() {
        let err = apply_control(&[1.0, 2.0], &[0.0, 0.0], ControlOperator::Projection, 1.0).unwrap_err();
        assert!(matches!(err, SteeringError::Singular(_)));
        assert!(matches!(
            apply_control(&[1.0], &[1.0, 2.0], ControlOperator::Addition, 1.0),
            Err(SteeringError::Dimension(_))
        ));
    }

    #[test]
    fn combined_projection_sums_terms() {
        let hook = SteeringHook {
            layer: 1,
            operator: ControlOperator::Projection,
            terms: vec![(vec![1.0, 0.0], 1.0), (vec![0.0, 2.0], -0.5)],
        };
        let out = hook.apply(&Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[6.0, 2.0]);
    }

    #[test]
    fn operator_names_parse() {
        assert_eq!("product".parse::<ControlOperator>().unwrap(), ControlOperator::Product);
        assert!("rotate".parse::<ControlOperator>().is_err());
    }
}
