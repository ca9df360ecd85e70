// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank debias blocks trained against a gradient-reversed domain probe.
//!
//! Each block rewrites the residual state of one intervened layer from the
//! state below it. A shared MLP probe tries to read the steering direction
//! from the semantic-body tokens of the rewritten states; the gradient
//! reversal between states and probe turns its training signal into pressure
//! on the blocks to hide that direction, while a reconstruction loss against
//! the frozen model's own greedy outputs keeps the model's behaviour intact.

use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SegmentedPrompt, SteeringPair, EOS};
use crate::model::{argmax, shuffle, GenerateOptions, LayerHook, ModelError, TinyLm};
use crate::probing::{fit_and_validate, LayerSelection, ProbeConfig, ProbeError};
use crate::tensor::{Adam, GradBuffer, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("segmentation error: {0}")]
    Segmentation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T, E = DebiasError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasMode {
    /// `r̂ = B·A·r^{l-1}`
    Replace,
    /// `r̂ = r^l + B·A·r^{l-1}`
    Residual,
}

impl std::str::FromStr for DebiasMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "replace" => Ok(Self::Replace),
            "residual" => Ok(Self::Residual),
            other => Err(format!("unknown debias mode `{other}`")),
        }
    }
}

/// Rank-`m` map for one layer. States are stored as rows, so the product is
/// applied as `r^{l-1} · A · B` with `A: d×m` and `B: m×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasLoraBlock {
    pub layer: usize,
    pub mode: DebiasMode,
    pub a: Tensor,
    pub b: Tensor,
}

impl DebiasLoraBlock {
    /// `A` is Gaussian with std `1/sqrt(d)`; `B` starts at zero, so a fresh
    /// residual block is the identity.
    pub fn new(layer: usize, d: usize, rank: usize, mode: DebiasMode, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(DebiasError::Config(format!("rank {rank} outside 1..={d}")));
        }
        Ok(Self {
            layer,
            mode,
            a: Tensor::randn(&[d, rank], 1.0 / (d as f32).sqrt(), rng),
            b: Tensor::zeros(&[rank, d]),
        })
    }

    pub fn from_parts(layer: usize, mode: DebiasMode, a: Tensor, b: Tensor) -> Result<Self> {
        let ok = a.shape().len() == 2
            && b.shape().len() == 2
            && a.cols() == b.rows()
            && a.rows() == b.cols()
            && a.cols() <= a.rows();
        if !ok {
            return Err(DebiasError::Config(format!(
                "block factors {:?} and {:?} do not form a d×m, m×d pair",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { layer, mode, a, b })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Debiased state from the layer-below state `prev` and the original
    /// state `state`, both `n×d`.
    pub fn forward(&self, prev: &Tensor, state: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(prev.clone());
        let s = tape.constant(state.clone());
        let out = self.rewrite(&mut tape, p, s).map_err(|e| match e {
            TensorError::Shape { left, right, .. } => DebiasError::Config(format!(
                "state {left:?} does not fit block of width {} ({right:?})",
                self.dim()
            )),
            other => other.into(),
        })?;
        Ok(tape.value(out).clone())
    }

    fn apply(&self, tape: &mut Tape, a: Var, b: Var, prev: Var, state: Var) -> Result<Var, TensorError> {
        let low = tape.matmul(prev, a)?;
        let delta = tape.matmul(low, b)?;
        match self.mode {
            DebiasMode::Replace => Ok(delta),
            DebiasMode::Residual => tape.add(state, delta),
        }
    }
}

impl LayerHook for DebiasLoraBlock {
    fn layer(&self) -> usize {
        self.layer
    }

    fn rewrite(&self, tape: &mut Tape, prev: Var, state: Var) -> Result<Var, TensorError> {
        let a = tape.constant(self.a.clone());
        let b = tape.constant(self.b.clone());
        self.apply(tape, a, b, prev, state)
    }
}

/// A block whose factors are trainable leaves of a particular tape.
pub struct BoundBlock<'a> {
    block: &'a DebiasLoraBlock,
    pub a: Var,
    pub b: Var,
}

impl<'a> BoundBlock<'a> {
    pub fn bind(block: &'a DebiasLoraBlock, tape: &mut Tape, a: Arc<Tensor>, b: Arc<Tensor>) -> Self {
        Self {
            block,
            a: tape.param(a),
            b: tape.param(b),
        }
    }
}

impl LayerHook for BoundBlock<'_> {
    fn layer(&self) -> usize {
        self.block.layer
    }

    fn rewrite(&self, tape: &mut Tape, prev: Var, state: Var) -> Result<Var, TensorError> {
        self.block.apply(tape, self.a, self.b, prev, state)
    }
}

/// Two-layer MLP `d → h → 2` with a GELU in between. Inputs are first
/// standardized per feature with fixed statistics (`(x + shift) ∘ scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProbe {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// `1×d`, not trained.
    pub shift: Tensor,
    /// `1×d`, not trained.
    pub scale: Tensor,
}

/// Tape handles for a bound [`DomainProbe`].
#[derive(Debug, Clone, Copy)]
pub struct BoundProbe {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub shift: Var,
    pub scale: Var,
}

impl DomainProbe {
    pub fn new(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(DebiasError::Config("domain probe needs non-zero sizes".into()));
        }
        Ok(Self {
            w1: Tensor::randn(&[d, hidden], (2.0 / d as f32).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, 2], (1.0 / hidden as f32).sqrt(), rng),
            b2: Tensor::zeros(&[2]),
            shift: Tensor::zeros(&[1, d]),
            scale: Tensor::full(&[1, d], 1.0),
        })
    }

    /// Fixes the input standardization to the per-feature mean and standard
    /// deviation of `xs`.
    pub fn standardize_on(&mut self, xs: &[Vec<f32>]) -> Result<()> {
        let d = self.dim();
        if xs.is_empty() || xs.iter().any(|x| x.len() != d) {
            return Err(DebiasError::Data(format!(
                "standardization needs non-empty {d}-vectors"
            )));
        }
        let n = xs.len() as f64;
        let mut mean = vec![0.0f64; d];
        for x in xs {
            mean.iter_mut().zip(x).for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0f64; d];
        for x in xs {
            var.iter_mut()
                .zip(x)
                .zip(&mean)
                .for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2) / n);
        }
        self.shift = Tensor::new(vec![1, d], mean.iter().map(|m| -m as f32).collect())?;
        self.scale = Tensor::new(
            vec![1, d],
            var.iter().map(|v| (1.0 / (v.sqrt() + 1e-6)) as f32).collect(),
        )?;
        Ok(())
    }

    /// Binds trainable weights from `params` (`w1, b1, w2, b2`) and this
    /// probe's fixed standardization.
    pub fn bind_params(&self, tape: &mut Tape, params: &[Arc<Tensor>]) -> BoundProbe {
        BoundProbe {
            w1: tape.param(Arc::clone(&params[0])),
            b1: tape.param(Arc::clone(&params[1])),
            w2: tape.param(Arc::clone(&params[2])),
            b2: tape.param(Arc::clone(&params[3])),
            shift: tape.constant(self.shift.clone()),
            scale: tape.constant(self.scale.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> BoundProbe {
        BoundProbe {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
            shift: tape.constant(self.shift.clone()),
            scale: tape.constant(self.scale.clone()),
        }
    }

    /// Class logits for one pooled vector.
    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let p = self.bind_constant(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
        let out = p.forward(&mut tape, x)?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl BoundProbe {
    /// `1×d → 1×2` logits.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let x = tape.add(x, self.shift)?;
        let x = tape.mul(x, self.scale)?;
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, self.w2)?;
        tape.add_row(h, self.b2)
    }
}

/// Adversarial loss on rows `rows` of `state`: mean-pool, reverse the
/// gradient with gain `eta`, classify with the probe and score against
/// `label` with 2-class cross-entropy.
pub fn domain_loss_rows(
    tape: &mut Tape,
    probe: &BoundProbe,
    state: Var,
    rows: Range<usize>,
    label: usize,
    eta: f32,
) -> Result<Var> {
    let n = tape.value(state).rows();
    if rows.is_empty() || rows.end > n {
        return Err(DebiasError::Segmentation(format!(
            "semantic rows {rows:?} outside a {n}-token state"
        )));
    }
    let seg = tape.slice_rows(state, rows.start, rows.end)?;
    let pooled = tape.mean_rows(seg)?;
    let reversed = tape.grad_reverse(pooled, eta)?;
    let logits = probe.forward(tape, reversed)?;
    Ok(tape.softmax_cross_entropy(logits, &[label])?)
}

/// [`domain_loss_rows`] over the last `l_c` tokens of `state`.
pub fn domain_loss(tape: &mut Tape, probe: &BoundProbe, state: Var, l_c: usize, label: usize, eta: f32) -> Result<Var> {
    let n = tape.value(state).rows();
    if l_c == 0 || l_c > n {
        return Err(DebiasError::Segmentation(format!(
            "L_c = {l_c} does not fit a {n}-token state"
        )));
    }
    domain_loss_rows(tape, probe, state, n - l_c..n, label, eta)
}

/// Outputs of the frozen model on one input, used as the student's target.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTarget {
    pub tokens: Vec<usize>,
    /// Teacher argmax at every position of `tokens`.
    pub greedy: Vec<usize>,
    /// Teacher next-token distributions, kept only for soft targets.
    pub soft: Option<Tensor>,
}

impl ReconstructionTarget {
    /// Runs `model` with no hooks on `tokens`.
    pub fn from_teacher(model: &TinyLm, tokens: Vec<usize>, keep_soft: bool) -> Result<Self> {
        let logits = model.logits(&tokens, &[])?;
        let greedy = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        let soft = if keep_soft {
            let mut probs = Vec::with_capacity(logits.len());
            for i in 0..logits.rows() {
                let row = logits.row(i);
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let e: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
                let s: f32 = e.iter().sum();
                probs.extend(e.into_iter().map(|v| v / s));
            }
            Some(Tensor::new(logits.shape().to_vec(), probs)?)
        } else {
            None
        };
        Ok(Self { tokens, greedy, soft })
    }
}

/// Cross-entropy of student logits (`n×V`) against the teacher's greedy
/// tokens, or against its distributions when `soft` is set.
pub fn reconstruction_loss(tape: &mut Tape, logits: Var, target: &ReconstructionTarget, soft: bool) -> Result<Var> {
    let n = tape.value(logits).rows();
    if n != target.greedy.len() {
        return Err(DebiasError::Tensor(TensorError::Contract(format!(
            "student produced {n} positions, teacher {}",
            target.greedy.len()
        ))));
    }
    match (soft, &target.soft) {
        (true, Some(p)) => Ok(tape.soft_cross_entropy(logits, p)?),
        (true, None) => Err(DebiasError::Config("soft targets were not recorded".into())),
        (false, _) => Ok(tape.softmax_cross_entropy(logits, &target.greedy)?),
    }
}

/// `L_pre + α·L_debias` on the tape.
pub fn total_loss(tape: &mut Tape, pre: Var, debias: Var, alpha: f32) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(DebiasError::Config(format!("α must be non-negative, got {alpha}")));
    }
    let weighted = tape.scale(debias, alpha)?;
    Ok(tape.add(pre, weighted)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasTrainConfig {
    pub alpha: f32,
    pub eta: f32,
    pub lr: f32,
    /// Learning rate of the domain probe; it must keep pace with the blocks
    /// for the adversarial game to stay informative.
    pub probe_lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub rank: usize,
    pub hidden: usize,
    pub mode: DebiasMode,
    pub seed: u64,
    /// Weight on the reconstruction term; `0` drops it entirely.
    pub pre_weight: f32,
    /// Distil the teacher's distributions instead of its greedy tokens.
    pub soft_targets: bool,
    /// Greedy tokens the teacher appends to each prompt before targets are taken.
    pub teacher_tokens: usize,
}

impl Default for DebiasTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eta: 1.0,
            lr: 1e-3,
            probe_lr: 1e-2,
            epochs: 30,
            batch_size: 32,
            rank: 16,
            hidden: 32,
            mode: DebiasMode::Residual,
            seed: 0,
            pre_weight: 1.0,
            soft_targets: false,
            teacher_tokens: 4,
        }
    }
}

impl DebiasTrainConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(DebiasError::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(DebiasError::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lr >= 0.0) || !(self.probe_lr >= 0.0) || !(self.pre_weight >= 0.0) {
            return Err(DebiasError::Config("lr and pre_weight must be ≥ 0".into()));
        }
        if self.rank == 0 || self.rank > d {
            return Err(DebiasError::Config(format!("rank {} outside 1..={d}", self.rank)));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(DebiasError::Config("hidden and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Trained blocks, one per intervened layer, ascending by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasBlocks {
    pub blocks: Vec<DebiasLoraBlock>,
}

impl DebiasBlocks {
    pub fn fresh(layers: &LayerSelection, d: usize, rank: usize, mode: DebiasMode, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = layers
            .layers
            .iter()
            .map(|&l| DebiasLoraBlock::new(l, d, rank, mode, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn layers(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.layer).collect()
    }

    pub fn hooks(&self) -> Vec<&dyn LayerHook> {
        self.blocks.iter().map(|b| b as &dyn LayerHook).collect()
    }
}

/// One labelled training example: prompt plus the teacher's outputs on it.
#[derive(Debug, Clone)]
pub struct DebiasExample {
    pub target: ReconstructionTarget,
    /// Token rows of the semantic body within `target.tokens`.
    pub body: Range<usize>,
    /// Rows whose next-token prediction is one of the teacher's generated
    /// tokens (last prompt row onward, excluding the final row).
    pub output: Range<usize>,
    pub label: usize,
}

impl DebiasExample {
    pub fn new(model: &TinyLm, prompt: &SegmentedPrompt, teacher_tokens: usize, keep_soft: bool) -> Result<Self> {
        let label = prompt
            .direction
            .class()
            .ok_or_else(|| DebiasError::Data("debias prompt has no steering direction".into()))?;
        if prompt.body_len() == 0 {
            return Err(DebiasError::Segmentation("empty semantic body".into()));
        }
        let opts = GenerateOptions {
            max_new: teacher_tokens,
            stop_token: Some(EOS),
            ..GenerateOptions::default()
        };
        let tokens = model.generate(&prompt.tokens(), &[], &opts)?;
        let output = prompt.len() - 1..tokens.len() - 1;
        Ok(Self {
            target: ReconstructionTarget::from_teacher(model, tokens, keep_soft)?,
            body: prompt.prefix_len()..prompt.len(),
            output,
            label,
        })
    }
}

/// Flattens pairs into positive and negative examples with teacher targets.
pub fn build_examples(model: &TinyLm, pairs: &[SteeringPair], cfg: &DebiasTrainConfig) -> Result<Vec<DebiasExample>> {
    if pairs.is_empty() {
        return Err(DebiasError::Data("empty pair corpus".into()));
    }
    pairs
        .iter()
        .flat_map(|p| [&p.positive, &p.negative])
        .map(|prompt| DebiasExample::new(model, prompt, cfg.teacher_tokens, cfg.soft_targets))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// `0` is the state before any update.
    pub epoch: usize,
    pub l_pre: f64,
    pub l_debias: f64,
    /// Best held-out accuracy of a fresh linear probe over the intervened
    /// layers' semantic-body states.
    pub ext_probe_acc: f64,
    pub ext_probe_per_layer: Vec<f64>,
    /// Fraction of the teacher's generated tokens that the student's argmax
    /// reproduces, position by position.
    pub teacher_agreement: f64,
}

#[derive(Debug, Clone)]
pub struct DebiasOutcome {
    pub blocks: DebiasBlocks,
    pub probe: DomainProbe,
    pub log: Vec<EpochLog>,
}

/// Measures reconstruction, adversarial loss, external probe accuracy and
/// teacher agreement with `blocks` hooked in.
pub fn evaluate(
    model: &TinyLm,
    blocks: &DebiasBlocks,
    probe: &DomainProbe,
    examples: &[DebiasExample],
    cfg: &DebiasTrainConfig,
    epoch: usize,
) -> Result<EpochLog> {
    let hooks = blocks.hooks();
    let layers = blocks.layers();
    let mut pooled: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(examples.len()); layers.len()];
    let mut labels = Vec::with_capacity(examples.len());
    let (mut pre_sum, mut deb_sum) = (0.0f64, 0.0f64);
    let (mut agree, mut positions, mut pre_positions) = (0usize, 0usize, 0usize);
    for ex in examples {
        let (logits, trace) = model.forward_with_trace(&ex.target.tokens, &hooks)?;
        let n = logits.rows();
        for i in 0..n {
            let row = logits.row(i);
            pre_sum += log_sum_exp(row) - row[ex.target.greedy[i]] as f64;
        }
        pre_positions += n;
        for i in ex.output.clone() {
            if argmax(logits.row(i)) == ex.target.greedy[i] {
                agree += 1;
            }
        }
        positions += ex.output.len();
        for (k, &l) in layers.iter().enumerate() {
            let x = trace.pooled(l, ex.body.start, ex.body.end);
            let z = probe.logits(&x)?;
            deb_sum += log_sum_exp(&z) - z[ex.label] as f64;
            pooled[k].push(x);
        }
        labels.push(ex.label);
    }
    let probe_cfg = ProbeConfig {
        seed: cfg.seed,
        ..ProbeConfig::default()
    };
    let per_layer = pooled
        .iter()
        .zip(&layers)
        .map(|(xs, &l)| fit_and_validate(xs, &labels, l, &probe_cfg).map(|(_, acc)| acc))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(EpochLog {
        epoch,
        l_pre: pre_sum / pre_positions as f64,
        l_debias: deb_sum / (examples.len() * layers.len()) as f64,
        ext_probe_acc: per_layer.iter().copied().fold(0.0, f64::max),
        ext_probe_per_layer: per_layer,
        teacher_agreement: agree as f64 / positions.max(1) as f64,
    })
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

/// Per-batch gradients for blocks followed by probe parameters,
/// laid out as in `pack_params`.
fn batch_step(
    model: &TinyLm,
    blocks: &DebiasBlocks,
    domain: &DomainProbe,
    params: &[Arc<Tensor>],
    batch: &[&DebiasExample],
    cfg: &DebiasTrainConfig,
) -> Result<GradBuffer> {
    let mut tape = Tape::new();
    let frozen = model.bind(&mut tape, false);
    let bound: Vec<BoundBlock> = blocks
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| BoundBlock::bind(b, &mut tape, Arc::clone(&params[2 * i]), Arc::clone(&params[2 * i + 1])))
        .collect();
    let nb = 2 * bound.len();
    let probe = domain.bind_params(&mut tape, &params[nb..]);
    let mut vars: Vec<Var> = bound.iter().flat_map(|b| [b.a, b.b]).collect();
    vars.extend([probe.w1, probe.b1, probe.w2, probe.b2]);
    let hooks: Vec<&dyn LayerHook> = bound.iter().map(|b| b as &dyn LayerHook).collect();

    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.target.tokens.as_slice()).collect();
    let fwd = model.forward_packed_tape(&mut tape, &frozen, &seqs, &hooks)?;
    let pre = if cfg.soft_targets {
        let v = model.config().vocab_size;
        let mut probs = Vec::new();
        for e in batch {
            let p = e
                .target
                .soft
                .as_ref()
                .ok_or_else(|| DebiasError::Config("soft targets were not recorded".into()))?;
            probs.extend_from_slice(p.data());
        }
        let t = Tensor::new(vec![probs.len() / v, v], probs)?;
        tape.soft_cross_entropy(fwd.logits, &t)?
    } else {
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.target.greedy.iter().copied()).collect();
        tape.softmax_cross_entropy(fwd.logits, &targets)?
    };

    let mut deb: Option<Var> = None;
    let mut offset = 0;
    for e in batch {
        for b in &blocks.blocks {
            let rows = offset + e.body.start..offset + e.body.end;
            let l = domain_loss_rows(&mut tape, &probe, fwd.states[b.layer], rows, e.label, cfg.eta)?;
            deb = Some(match deb {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        offset += e.target.tokens.len();
    }
    let deb = deb.ok_or_else(|| DebiasError::Data("empty batch".into()))?;
    let deb = tape.scale(deb, 1.0 / (batch.len() * blocks.blocks.len()) as f32)?;
    let pre_w = tape.scale(pre, cfg.pre_weight)?;
    let total = total_loss(&mut tape, pre_w, deb, cfg.alpha)?;
    if !tape.value(total).item().is_finite() {
        return Err(DebiasError::Numeric("non-finite debias loss".into()));
    }
    tape.backward(total)?;
    let mut grads = GradBuffer::for_params(params);
    grads.accumulate(&tape, &vars);
    Ok(grads)
}

fn pack_params(blocks: &DebiasBlocks, probe: &DomainProbe) -> Vec<Arc<Tensor>> {
    let mut params: Vec<Arc<Tensor>> = blocks
        .blocks
        .iter()
        .flat_map(|b| [Arc::new(b.a.clone()), Arc::new(b.b.clone())])
        .collect();
    params.extend(
        [&probe.w1, &probe.b1, &probe.w2, &probe.b2]
            .into_iter()
            .map(|t| Arc::new(t.clone())),
    );
    params
}

fn unpack_params(params: &[Arc<Tensor>], blocks: &mut DebiasBlocks, probe: &mut DomainProbe) {
    for (i, b) in blocks.blocks.iter_mut().enumerate() {
        b.a = (*params[2 * i]).clone();
        b.b = (*params[2 * i + 1]).clone();
    }
    let nb = 2 * blocks.blocks.len();
    probe.w1 = (*params[nb]).clone();
    probe.b1 = (*params[nb + 1]).clone();
    probe.w2 = (*params[nb + 2]).clone();
    probe.b2 = (*params[nb + 3]).clone();
}

/// Joint Adam training of blocks and domain probe with the base model frozen.
/// The log holds an evaluation before training (epoch 0) and after every epoch.
pub fn train_debias(
    model: &TinyLm,
    layers: &LayerSelection,
    pairs: &[SteeringPair],
    cfg: &DebiasTrainConfig,
) -> Result<DebiasOutcome> {
    let d = model.config().d_model;
    cfg.validate(d)?;
    if let Some(&l) = layers.layers.iter().find(|&&l| l >= model.config().n_states()) {
        return Err(DebiasError::Config(format!("layer {l} outside model")));
    }
    let examples = build_examples(model, pairs, cfg)?;
    let mut blocks = DebiasBlocks::fresh(layers, d, cfg.rank, cfg.mode, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut probe = DomainProbe::new(d, cfg.hidden, &mut rng)?;
    let initial: Vec<Vec<f32>> = examples
        .iter()
        .map(|e| {
            let (_, trace) = model.forward_with_trace(&e.target.tokens, &[])?;
            Ok(layers
                .layers
                .iter()
                .map(|&l| trace.pooled(l, e.body.start, e.body.end))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    probe.standardize_on(&initial)?;
    let mut log = vec![evaluate(model, &blocks, &probe, &examples, cfg, 0)?];
    let mut params = pack_params(&blocks, &probe);
    let nb = 2 * blocks.blocks.len();
    let mut block_opt = Adam::new(cfg.lr, &params[..nb]);
    let mut probe_opt = Adam::new(cfg.probe_lr, &params[nb..]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DebiasExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let grads = batch_step(model, &blocks, &probe, &params, &batch, cfg)?;
            let (block_grads, probe_grads) = grads.split_at(nb);
            block_opt.step(&mut params[..nb], &block_grads);
            probe_opt.step(&mut params[nb..], &probe_grads);
        }
        unpack_params(&params, &mut blocks, &mut probe);
        log.push(evaluate(model, &blocks, &probe, &examples, cfg, epoch)?);
    }
    Ok(DebiasOutcome { blocks, probe, log })
}
