// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::fixtures::small_config;
use common::oracles::{lowest_oracle, random_score_lists};
use desksteer::explain::{alignment, explain, mean_direction, rank_lowest, token_similarity};
use desksteer::model::TinyLm;
use desksteer::steering::{ExtractionMethod, SteeringRepresentation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rep(rng: &mut ChaCha8Rng, layers: Vec<usize>, d: usize) -> SteeringRepresentation {
    SteeringRepresentation {
        vectors: layers
            .iter()
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect(),
        layers,
        n_samples: 1,
        method: ExtractionMethod::Debiased,
    }
}

fn word(t: usize) -> String {
    format!("w{t}")
}

#[test]
fn similarity_is_linear_in_the_steering_vector() {
    let model = TinyLm::new(small_config()).unwrap();
    let d = model.config().d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, trace) = model.forward_with_trace(&[9, 20, 31, 42, 3], &[]).unwrap();
    for _ in 0..20 {
        let a = random_rep(&mut rng, vec![1, 3], d);
        let b = random_rep(&mut rng, vec![1, 3], d);
        let (x, y) = (rng.random_range(-2.0f32..2.0), rng.random_range(-2.0f32..2.0));
        let mut mix = a.clone();
        for (m, (u, v)) in mix.vectors.iter_mut().zip(a.vectors.iter().zip(&b.vectors)) {
            *m = u.iter().zip(v).map(|(p, q)| x * p + y * q).collect();
        }
        for i in 0..5 {
            let lhs = token_similarity(&mix, &trace, i).unwrap();
            let rhs = x as f64 * token_similarity(&a, &trace, i).unwrap()
                + y as f64 * token_similarity(&b, &trace, i).unwrap();
            assert!((lhs - rhs).abs() <= 1e-4 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn mean_direction_averages_layers() {
    let rep = SteeringRepresentation {
        layers: vec![0, 1],
        vectors: vec![vec![1.0, 2.0], vec![3.0, -2.0]],
        n_samples: 1,
        method: ExtractionMethod::ActAdd,
    };
    assert_eq!(mean_direction(&rep).unwrap(), vec![2.0, 0.0]);
}

#[test]
fn alignment_of_a_concatenation_is_the_length_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.random_range(1..30))
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let b: Vec<f64> = (0..rng.random_range(1..30))
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
        let weighted = (a.len() as f64 * alignment(&a).unwrap() + b.len() as f64 * alignment(&b).unwrap())
            / (a.len() + b.len()) as f64;
        assert!((alignment(&joined).unwrap() - weighted).abs() < 1e-9);
    }
    assert!(alignment(&[]).is_err());
}

#[test]
fn report_alignment_is_the_mean_of_its_scores() {
    let model = TinyLm::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rep = random_rep(&mut rng, vec![2, 4], model.config().d_model);
    let seq = [9usize, 20, 31, 42, 3, 50, 61, 72];
    let r = explain(&model, &rep, &[], &seq, 3, 2, word).unwrap();
    assert_eq!(r.offset, 3);
    assert_eq!(r.tokens, seq[3..].to_vec());
    assert_eq!(r.words[0], "w42");
    let mean = r.scores.iter().sum::<f64>() / r.scores.len() as f64;
    assert_eq!(r.alignment, mean);
    assert_eq!(r.lowest, rank_lowest(&r.scores, 2).unwrap());
    assert!(r.cosine.iter().all(|c| c.abs() <= 1.0 + 1e-9));
    assert!(explain(&model, &rep, &[], &seq, seq.len(), 1, word).is_err());
}

#[test]
fn rank_lowest_matches_a_minimum_scan() {
    for (scores, k) in random_score_lists(1000, 3) {
        assert_eq!(
            rank_lowest(&scores, k).unwrap(),
            lowest_oracle(&scores, k),
            "{scores:?} k={k}"
        );
    }
    assert!(rank_lowest(&[1.0], 0).is_err());
    assert!(rank_lowest(&[1.0], 2).is_err());
}
