// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::fixtures::{confounded, small_config};
use desksteer::corpus::{gen_neutral_prompts, gen_pretrain_corpus, ConfoundSpec, EOS};
use desksteer::model::{FnHook, GenerateOptions, LayerHook, TinyLm, TrainConfig};
use desksteer::tensor::Tensor;

#[test]
fn identity_hooks_leave_logits_bit_identical() {
    let model = TinyLm::new(small_config()).unwrap();
    let tokens = [9, 20, 31, 42, 3];
    let plain = model.logits(&tokens, &[]).unwrap();
    let hooks: Vec<FnHook<_>> = (0..model.config().n_states())
        .map(|l| FnHook::new(l, |_, s: &Tensor| s.clone()))
        .collect();
    let refs: Vec<&dyn LayerHook> = hooks.iter().map(|h| h as &dyn LayerHook).collect();
    assert_eq!(model.logits(&tokens, &refs).unwrap(), plain);
}

#[test]
fn zeroing_the_middle_layer_changes_logits() {
    let model = TinyLm::new(small_config()).unwrap();
    let tokens = [9, 20, 31, 42, 3];
    let mid = model.config().n_layers.div_ceil(2);
    let hook = FnHook::new(mid, |_, s: &Tensor| Tensor::zeros(s.shape()));
    let plain = model.logits(&tokens, &[]).unwrap();
    let zeroed = model.logits(&tokens, &[&hook]).unwrap();
    assert_ne!(plain, zeroed);
}

#[test]
fn trace_has_one_state_per_layer_plus_embedding() {
    let model = TinyLm::new(small_config()).unwrap();
    let (_, trace) = model.forward_with_trace(&[9, 20, 31], &[]).unwrap();
    assert_eq!(trace.n_states(), model.config().n_layers + 1);
    for l in 0..trace.n_states() {
        assert_eq!(trace.layer(l).shape(), &[3, model.config().d_model]);
    }
}

#[test]
fn repeating_two_token_corpus_is_memorised() {
    let seqs: Vec<Vec<usize>> = (0..64).map(|_| [10usize, 11].repeat(8)).collect();
    let mut model = TinyLm::new(small_config()).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        lr: 3e-3,
        batch_size: 8,
        seed: 0,
    };
    let log = model.train(&seqs, &cfg).unwrap();
    assert!(log.final_loss < 0.1, "final loss {}", log.final_loss);
}

#[test]
fn zero_learning_rate_leaves_loss_unchanged() {
    let records = gen_pretrain_corpus(&ConfoundSpec::default(), 64, 1).unwrap();
    let seqs: Vec<Vec<usize>> = records.iter().map(|r| r.sequence()).collect();
    let mut model = TinyLm::new(small_config()).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 2,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let log = model.train(&seqs, &cfg).unwrap();
    assert_eq!(log.initial_loss, log.final_loss);
    assert_eq!(model, before);
}

#[test]
fn default_corpus_moving_average_loss_is_monotone() {
    let records = gen_pretrain_corpus(&ConfoundSpec::default(), 400, 2).unwrap();
    let seqs: Vec<Vec<usize>> = records.iter().map(|r| r.sequence()).collect();
    let mut model = TinyLm::new(small_config()).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let log = model.train(&seqs, &cfg).unwrap();
    let avg: Vec<f32> = log
        .epoch_losses
        .windows(5)
        .map(|w| w.iter().sum::<f32>() / 5.0)
        .collect();
    assert!(
        avg.windows(2).all(|w| w[1] <= w[0]),
        "moving average not monotone: {avg:?}"
    );
    assert!(log.final_loss < log.initial_loss);
}

#[test]
fn greedy_generation_is_reproducible() {
    let model = confounded();
    let (_, prompt) = gen_neutral_prompts(&ConfoundSpec::default(), 1, 3).unwrap().remove(0);
    let opts = GenerateOptions {
        max_new: 6,
        stop_token: Some(EOS),
        ..GenerateOptions::default()
    };
    let a = model.generate(&prompt.tokens(), &[], &opts).unwrap();
    let b = model.generate(&prompt.tokens(), &[], &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.len() > prompt.len());
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let model = confounded();
    let opts = GenerateOptions {
        max_new: 6,
        temperature: 1.0,
        seed: 5,
        stop_token: None,
    };
    let prompt = [9, 20, 31];
    assert_eq!(
        model.generate(&prompt, &[], &opts).unwrap(),
        model.generate(&prompt, &[], &opts).unwrap()
    );
}

#[test]
fn generation_stops_at_the_context_limit() {
    let model = TinyLm::new(small_config()).unwrap();
    let max = model.config().max_seq_len;
    let opts = GenerateOptions {
        max_new: 4 * max,
        ..GenerateOptions::default()
    };
    assert_eq!(model.generate(&[9, 20], &[], &opts).unwrap().len(), max);
}
