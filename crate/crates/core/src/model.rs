// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale decoder-only transformer with residual-stream taps and
//! per-layer rewrite hooks.
//!
//! Layer `0` is the token + learned position embedding; layer `l` in `1..=D`
//! is the residual stream after block `l` (both sublayer residual adds). A
//! hook registered for layer `l` rewrites that state before block `l + 1`
//! reads it, and the trace records the rewritten state.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Adam, GradBuffer, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenId { id: usize, vocab: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("hook at layer {layer} changed state shape from {before:?} to {after:?}")]
    HookShape {
        layer: usize,
        before: Vec<usize>,
        after: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.n_layers < 4 {
            return Err(ModelError::Config(format!(
                "n_layers must be at least 4, got {}",
                self.n_layers
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of residual states in a trace (`D + 1`).
    pub fn n_states(&self) -> usize {
        self.n_layers + 1
    }
}

// Parameter layout: embeddings, then a fixed-size group per block, then the head.
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const EVAL_BATCH: usize = 64;
const BLOCK_BASE: usize = 2;
const PER_BLOCK: usize = 13;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_Q: usize = 2;
const W_K: usize = 3;
const W_V: usize = 4;
const W_O: usize = 5;
const B_O: usize = 6;
const LN2_G: usize = 7;
const LN2_B: usize = 8;
const W_FC1: usize = 9;
const B_FC1: usize = 10;
const W_FC2: usize = 11;
const B_FC2: usize = 12;

/// Residual states recorded during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: Vec<usize>,
    /// `states[l]` is `n×d`; `states.len() == D + 1`.
    pub states: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.states[l]
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Mean of rows `start..end` of layer `l`.
    pub fn pooled(&self, l: usize, start: usize, end: usize) -> Vec<f32> {
        mean_rows(&self.states[l], start, end)
    }
}

pub(crate) fn mean_rows(t: &Tensor, start: usize, end: usize) -> Vec<f32> {
    let d = t.cols();
    let mut acc = vec![0.0f64; d];
    for i in start..end {
        for (a, &v) in acc.iter_mut().zip(t.row(i)) {
            *a += v as f64;
        }
    }
    let n = (end - start).max(1) as f64;
    acc.into_iter().map(|v| (v / n) as f32).collect()
}

/// Rewrites the residual state of one layer inside a forward pass.
///
/// `prev` is the (already rewritten) state of the layer below, or the state
/// itself at layer 0. Implementations may build differentiable ops on the tape.
pub trait LayerHook {
    fn layer(&self) -> usize;
    fn rewrite(&self, tape: &mut Tape, prev: Var, state: Var) -> Result<Var, TensorError>;
}

/// Non-differentiable hook backed by a closure over plain tensors.
pub struct FnHook<F> {
    layer: usize,
    f: F,
}

impl<F> FnHook<F>
where
    F: Fn(usize, &Tensor) -> Tensor,
{
    pub fn new(layer: usize, f: F) -> Self {
        Self { layer, f }
    }
}

impl<F> LayerHook for FnHook<F>
where
    F: Fn(usize, &Tensor) -> Tensor,
{
    fn layer(&self) -> usize {
        self.layer
    }

    fn rewrite(&self, tape: &mut Tape, _prev: Var, state: Var) -> Result<Var, TensorError> {
        let out = (self.f)(self.layer, tape.value(state));
        Ok(tape.constant(out))
    }
}

/// Parameter leaves of one model bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Tape handles produced by [`TinyLm::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub states: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
}

impl TinyLm {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            params.push(Arc::new(t));
        };
        push("tok_emb".into(), Tensor::randn(&[v, d], std, &mut rng));
        push("pos_emb".into(), Tensor::randn(&[config.max_seq_len, d], std, &mut rng));
        for b in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{b}.{s}");
            push(p("ln1.g"), Tensor::full(&[d], 1.0));
            push(p("ln1.b"), Tensor::zeros(&[d]));
            push(p("attn.w_q"), Tensor::randn(&[d, d], std, &mut rng));
            push(p("attn.w_k"), Tensor::randn(&[d, d], std, &mut rng));
            push(p("attn.w_v"), Tensor::randn(&[d, d], std, &mut rng));
            push(p("attn.w_o"), Tensor::randn(&[d, d], resid_std, &mut rng));
            push(p("attn.b_o"), Tensor::zeros(&[d]));
            push(p("ln2.g"), Tensor::full(&[d], 1.0));
            push(p("ln2.b"), Tensor::zeros(&[d]));
            push(p("mlp.w_fc1"), Tensor::randn(&[d, f], std, &mut rng));
            push(p("mlp.b_fc1"), Tensor::zeros(&[f]));
            push(p("mlp.w_fc2"), Tensor::randn(&[f, d], resid_std, &mut rng));
            push(p("mlp.b_fc2"), Tensor::zeros(&[d]));
        }
        push("ln_f.g".into(), Tensor::full(&[d], 1.0));
        push("ln_f.b".into(), Tensor::zeros(&[d]));
        push("head.w".into(), Tensor::randn(&[d, v], std, &mut rng));
        push("head.b".into(), Tensor::zeros(&[v]));
        Ok(Self { config, names, params })
    }

    /// Rebuilds a model from named parameter tensors, checking every shape.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(ModelConfig {
            seed: config.seed,
            ..config.clone()
        })?;
        if named.len() != template.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want)) in named.into_iter().zip(template.names.iter().zip(&template.params)) {
            if &name != want_name || t.shape() != want.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            params.push(Arc::new(t));
        }
        Ok(Self {
            config,
            names: template.names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(Arc::clone(p), trainable))
                .collect(),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenId {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn apply_hooks(
        &self,
        tape: &mut Tape,
        layer: usize,
        prev: Var,
        mut state: Var,
        hooks: &[&dyn LayerHook],
    ) -> Result<Var> {
        for hook in hooks.iter().filter(|h| h.layer() == layer) {
            let before = tape.value(state).shape().to_vec();
            let next = hook.rewrite(tape, prev, state)?;
            let after = tape.value(next).shape();
            if after != before.as_slice() {
                return Err(ModelError::HookShape {
                    layer,
                    before,
                    after: after.to_vec(),
                });
            }
            state = next;
        }
        Ok(state)
    }

    fn block(&self, tape: &mut Tape, p: &BoundParams, b: usize, x: Var, row_start: &[usize]) -> Result<Var> {
        let base = BLOCK_BASE + b * PER_BLOCK;
        let w = |i: usize| p.vars[base + i];
        let h = tape.layer_norm(x, w(LN1_G), w(LN1_B))?;
        let q = tape.matmul(h, w(W_Q))?;
        let k = tape.matmul(h, w(W_K))?;
        let v = tape.matmul(h, w(W_V))?;
        let a = tape.segmented_causal_attention(q, k, v, self.config.n_heads, row_start)?;
        let a = tape.matmul(a, w(W_O))?;
        let a = tape.add_row(a, w(B_O))?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, w(LN2_G), w(LN2_B))?;
        let h = tape.matmul(h, w(W_FC1))?;
        let h = tape.add_row(h, w(B_FC1))?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w(W_FC2))?;
        let h = tape.add_row(h, w(B_FC2))?;
        Ok(tape.add(x, h)?)
    }

    fn head(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let base = BLOCK_BASE + self.config.n_layers * PER_BLOCK;
        let h = tape.layer_norm(x, p.vars[base], p.vars[base + 1])?;
        let h = tape.matmul(h, p.vars[base + 2])?;
        Ok(tape.add_row(h, p.vars[base + 3])?)
    }

    /// Full forward pass on `tape`, returning logits and the `D + 1` states.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        tokens: &[usize],
        hooks: &[&dyn LayerHook],
    ) -> Result<TapeForward> {
        self.forward_packed_tape(tape, p, &[tokens], hooks)
    }

    /// Forward pass over several independent sequences stacked row-wise.
    /// Attention never crosses a sequence boundary and positions restart at
    /// zero for each sequence, so every row matches its unpacked value.
    pub fn forward_packed_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        seqs: &[&[usize]],
        hooks: &[&dyn LayerHook],
    ) -> Result<TapeForward> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut row_start = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            let start = tokens.len();
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
            row_start.extend(std::iter::repeat_n(start, s.len()));
        }
        let tok = tape.embedding(p.vars[TOK_EMB], &tokens)?;
        let pos = tape.embedding(p.vars[POS_EMB], &positions)?;
        let x0 = tape.add(tok, pos)?;
        let x0 = self.apply_hooks(tape, 0, x0, x0, hooks)?;
        let mut states = vec![x0];
        let mut x = x0;
        for b in 0..self.config.n_layers {
            let y = self.block(tape, p, b, x, &row_start)?;
            x = self.apply_hooks(tape, b + 1, x, y, hooks)?;
            states.push(x);
        }
        let logits = self.head(tape, p, x)?;
        Ok(TapeForward { logits, states })
    }

    /// Runs blocks `layer + 1..=D` and the head from a given layer-`layer` state.
    pub fn forward_from_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        layer: usize,
        state: Var,
        hooks: &[&dyn LayerHook],
    ) -> Result<Var> {
        if layer > self.config.n_layers {
            return Err(ModelError::Config(format!(
                "layer {layer} beyond {} layers",
                self.config.n_layers
            )));
        }
        let row_start = vec![0; tape.value(state).rows()];
        let mut x = state;
        for b in layer..self.config.n_layers {
            let y = self.block(tape, p, b, x, &row_start)?;
            x = self.apply_hooks(tape, b + 1, x, y, hooks)?;
        }
        self.head(tape, p, x)
    }

    pub fn forward_with_trace(&self, tokens: &[usize], hooks: &[&dyn LayerHook]) -> Result<(Tensor, ActivationTrace)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fwd = self.forward_tape(&mut tape, &p, tokens, hooks)?;
        let states = fwd.states.iter().map(|&s| tape.value(s).clone()).collect();
        Ok((
            tape.value(fwd.logits).clone(),
            ActivationTrace {
                tokens: tokens.to_vec(),
                states,
            },
        ))
    }

    pub fn logits(&self, tokens: &[usize], hooks: &[&dyn LayerHook]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fwd = self.forward_tape(&mut tape, &p, tokens, hooks)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Logits recomputed from a recorded state at `layer`.
    pub fn logits_from(&self, layer: usize, state: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let s = tape.constant(state.clone());
        let logits = self.forward_from_tape(&mut tape, &p, layer, s, &[])?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token cross-entropy of one sequence.
    pub fn sequence_loss(&self, tokens: &[usize]) -> Result<f32> {
        if tokens.len() < 2 {
            return Err(ModelError::Empty("sequence needs at least two tokens"));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fwd = self.forward_tape(&mut tape, &p, &tokens[..tokens.len() - 1], &[])?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &tokens[1..])?;
        Ok(tape.value(loss).item())
    }

    pub fn generate(&self, prompt: &[usize], hooks: &[&dyn LayerHook], opts: &GenerateOptions) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        if !(opts.temperature >= 0.0) {
            return Err(ModelError::Config(format!(
                "temperature must be non-negative, got {}",
                opts.temperature
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut seq = prompt.to_vec();
        for _ in 0..opts.max_new {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.logits(&seq, hooks)?;
            let last = logits.row(seq.len() - 1);
            let next = if opts.temperature == 0.0 {
                argmax(last)
            } else {
                sample(last, opts.temperature, &mut rng)
            };
            seq.push(next);
            if opts.stop_token == Some(next) {
                break;
            }
        }
        Ok(seq)
    }

    /// Next-token cross-entropy averaged over every predicted token of a
    /// packed batch of sequences.
    pub fn packed_loss(&self, tape: &mut Tape, p: &BoundParams, seqs: &[&[usize]]) -> Result<Var> {
        if seqs.iter().any(|s| s.len() < 2) {
            return Err(ModelError::Empty("sequence needs at least two tokens"));
        }
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let fwd = self.forward_packed_tape(tape, p, &inputs, &[])?;
        Ok(tape.softmax_cross_entropy(fwd.logits, &targets)?)
    }

    /// Next-token training with Adam over mini-batches of sequences.
    pub fn train(&mut self, sequences: &[Vec<usize>], cfg: &TrainConfig) -> Result<TrainLog> {
        let usable: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
        if usable.is_empty() {
            return Err(ModelError::Empty("training corpus"));
        }
        let mean_loss = |model: &Self| -> Result<f32> {
            let mut total = 0.0f64;
            for chunk in usable.chunks(EVAL_BATCH) {
                let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, false);
                let loss = model.packed_loss(&mut tape, &p, &seqs)?;
                total += tape.value(loss).item() as f64 * chunk.len() as f64;
            }
            Ok((total / usable.len() as f64) as f32)
        };
        let initial_loss = mean_loss(self)?;
        let mut opt = Adam::new(cfg.lr, &self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let batch = cfg.batch_size.max(1);
        for _ in 0..cfg.epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_total = 0.0f64;
            for chunk in order.chunks(batch) {
                let batch_seqs: Vec<&[usize]> = chunk.iter().map(|&i| usable[i].as_slice()).collect();
                let mut tape = Tape::new();
                let p = self.bind(&mut tape, true);
                let loss = self.packed_loss(&mut tape, &p, &batch_seqs)?;
                epoch_total += tape.value(loss).item() as f64 * chunk.len() as f64;
                tape.backward(loss)?;
                let mut grads = GradBuffer::for_params(&self.params);
                grads.accumulate(&tape, &p.vars);
                opt.step(&mut self.params, &grads);
            }
            epoch_losses.push((epoch_total / usable.len() as f64) as f32);
        }
        let final_loss = mean_loss(self)?;
        Ok(TrainLog {
            initial_loss,
            epoch_losses,
            final_loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// `0.0` means greedy decoding.
    pub temperature: f32,
    pub seed: u64,
    pub stop_token: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 8,
            temperature: 0.0,
            seed: 0,
            stop_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss over the corpus before any update.
    pub initial_loss: f32,
    /// Mean per-sequence loss seen while training each epoch.
    pub epoch_losses: Vec<f32>,
    /// Mean loss over the corpus after the last update.
    pub final_loss: f32,
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<R: Rng>(logits: &[f32], temperature: f32, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (((l - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Fisher-Yates with an explicit RNG so the order is stable across platforms.
pub(crate) fn shuffle<T, R: Rng>(xs: &mut [T], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.n_layers = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        let mut c = small();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn trace_shape_contract() {
        let m = TinyLm::new(small()).unwrap();
        let (logits, trace) = m.forward_with_trace(&[1, 2, 3], &[]).unwrap();
        assert_eq!(logits.shape(), &[3, 16]);
        assert_eq!(trace.n_states(), 5);
        for s in &trace.states {
            assert_eq!(s.shape(), &[3, 8]);
        }
    }

    #[test]
    fn input_errors() {
        let m = TinyLm::new(small()).unwrap();
        assert!(matches!(
            m.forward_with_trace(&[0; 13], &[]),
            Err(ModelError::Length { len: 13, max: 12 })
        ));
        assert!(matches!(
            m.forward_with_trace(&[16], &[]),
            Err(ModelError::TokenId { id: 16, .. })
        ));
        assert!(matches!(m.forward_with_trace(&[], &[]), Err(ModelError::Empty(_))));
    }

    #[test]
    fn hook_that_changes_shape_is_rejected() {
        let m = TinyLm::new(small()).unwrap();
        let bad = FnHook::new(2, |_, _: &Tensor| Tensor::zeros(&[1, 8]));
        let err = m.forward_with_trace(&[1, 2], &[&bad]).unwrap_err();
        assert!(matches!(err, ModelError::HookShape { layer: 2, .. }));
    }

    #[test]
    fn from_params_round_trip() {
        let m = TinyLm::new(small()).unwrap();
        let named = m
            .param_names()
            .iter()
            .cloned()
            .zip(m.params().iter().map(|p| (**p).clone()))
            .collect();
        let back = TinyLm::from_params(small(), named).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn zero_max_new_leaves_prompt() {
        let m = TinyLm::new(small()).unwrap();
        let opts = GenerateOptions {
            max_new: 0,
            ..Default::default()
        };
        assert_eq!(m.generate(&[4, 5], &[], &opts).unwrap(), vec![4, 5]);
    }

    #[test]
    fn packed_rows_match_separate_passes() {
        let m = TinyLm::new(small()).unwrap();
        let seqs: Vec<Vec<usize>> = vec![vec![1, 5, 9, 3], vec![2, 7], vec![4, 4, 8, 1, 6]];
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let fwd = m.forward_packed_tape(&mut tape, &p, &refs, &[]).unwrap();
        let packed = tape.value(fwd.logits).clone();
        let mut row = 0;
        for s in &seqs {
            let single = m.logits(s, &[]).unwrap();
            for i in 0..s.len() {
                for (a, b) in single.row(i).iter().zip(packed.row(row + i)) {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
            row += s.len();
        }
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
