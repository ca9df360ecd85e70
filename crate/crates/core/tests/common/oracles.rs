// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force references shared by the integration tests and the acceptance
//! run.

#![allow(dead_code)]

use desksteer::corpus::{steering_prefix, Direction, SegmentedPrompt, SteeringPair, SEP};
use desksteer::model::{LayerHook, TinyLm};
use desksteer::steering::{apply_control, ControlOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn pair_with_body(body: Vec<usize>, topic: usize) -> SteeringPair {
    SteeringPair {
        positive: SegmentedPrompt {
            steering_prefix: steering_prefix(Direction::Positive),
            semantic_body: body.clone(),
            direction: Direction::Positive,
        },
        negative: SegmentedPrompt {
            steering_prefix: steering_prefix(Direction::Negative),
            semantic_body: body,
            direction: Direction::Negative,
        },
        topic,
    }
}

/// Eight pairs of twelve tokens each: a three-token prefix and nine body tokens.
pub fn desk_pairs() -> Vec<SteeringPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..8)
        .map(|t| {
            let mut body: Vec<usize> = (0..8).map(|_| rng.random_range(8..256)).collect();
            body.push(SEP);
            pair_with_body(body, t)
        })
        .collect()
}

/// Sum over every pair and every token of `pos − neg`, divided by the count.
pub fn double_loop_oracle(
    model: &TinyLm,
    hooks: &[&dyn LayerHook],
    pairs: &[SteeringPair],
    layers: &[usize],
) -> Vec<Vec<f64>> {
    let d = model.config().d_model;
    let mut sums = vec![vec![0.0f64; d]; layers.len()];
    let mut count = 0usize;
    for p in pairs {
        let (_, pos) = model.forward_with_trace(&p.positive.tokens(), hooks).unwrap();
        let (_, neg) = model.forward_with_trace(&p.negative.tokens(), hooks).unwrap();
        for t in 0..p.positive.len() {
            for (k, &l) in layers.iter().enumerate() {
                let (a, b) = (pos.layer(l).row(t), neg.layer(l).row(t));
                for j in 0..d {
                    sums[k][j] += a[j] as f64 - b[j] as f64;
                }
            }
            count += 1;
        }
    }
    sums.iter()
        .map(|v| v.iter().map(|x| x / count as f64).collect())
        .collect()
}

/// Largest absolute gap between an extracted representation and the oracle.
pub fn max_gap(vectors: &[Vec<f32>], oracle: &[Vec<f64>]) -> f64 {
    vectors
        .iter()
        .zip(oracle)
        .flat_map(|(v, o)| v.iter().zip(o).map(|(a, b)| (*a as f64 - b).abs()))
        .fold(0.0, f64::max)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Projection invariants on `n` random `(r, Δ, β, c)` draws: scale invariance
/// in Δ, β = 0 identity, orthogonal no-op, full removal of Δ at β = −1, and a
/// change parallel to Δ.
pub fn check_projection_invariants(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 16;
    let op = ControlOperator::Projection;
    let ctl = |r: &[f32], delta: &[f32], beta: f32| apply_control(r, delta, op, beta).map_err(|e| e.to_string());
    for i in 0..n {
        let r = gaussian(&mut rng, d);
        let delta = gaussian(&mut rng, d);
        let beta: f32 = rng.random_range(-3.0..3.0);
        let c: f32 = rng.random_range(0.1..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let scaled: Vec<f32> = delta.iter().map(|x| x * c).collect();

        let out = ctl(&r, &delta, beta)?;
        let out_scaled = ctl(&r, &scaled, beta)?;
        let diff: Vec<f32> = out.iter().zip(&out_scaled).map(|(a, b)| a - b).collect();
        if norm(&diff) > 1e-6 * norm(&out).max(1.0) {
            return Err(format!("draw {i}: scale invariance off by {}", norm(&diff)));
        }
        if ctl(&r, &delta, 0.0)? != r {
            return Err(format!("draw {i}: β = 0 changed the state"));
        }

        let dd: f64 = delta.iter().map(|&x| (x as f64).powi(2)).sum();
        let rd: f64 = r.iter().zip(&delta).map(|(&a, &b)| a as f64 * b as f64).sum();
        let ortho: Vec<f32> = r
            .iter()
            .zip(&delta)
            .map(|(&a, &b)| (a as f64 - rd / dd * b as f64) as f32)
            .collect();
        let kept = ctl(&ortho, &delta, beta)?;
        let moved: Vec<f32> = kept.iter().zip(&ortho).map(|(a, b)| a - b).collect();
        if norm(&moved) > 1e-6 * norm(&ortho).max(1.0) {
            return Err(format!("draw {i}: orthogonal state moved by {}", norm(&moved)));
        }

        let removed = ctl(&delta, &delta, -1.0)?;
        if norm(&removed) > 1e-6 * norm(&delta) {
            return Err(format!("draw {i}: β = −1 left {} of Δ", norm(&removed)));
        }

        let change: Vec<f64> = out.iter().zip(&r).map(|(&a, &b)| a as f64 - b as f64).collect();
        let cd: f64 = change.iter().zip(&delta).map(|(a, &b)| a * b as f64).sum();
        let residual = change
            .iter()
            .zip(&delta)
            .map(|(a, &b)| (a - cd / dd * b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual > 1e-6 * norm(&r).max(1.0) {
            return Err(format!("draw {i}: change not parallel to Δ ({residual})"));
        }
    }
    Ok(())
}

/// Repeated minimum scan: a different algorithm from a sort.
pub fn lowest_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &s) in scores.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| s < scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k within bounds");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Random score lists with coarse values, so ties are common, and a `k`.
pub fn random_score_lists(n: usize, seed: u64) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..40);
            let scores: Vec<f64> = (0..len).map(|_| rng.random_range(-4i32..4) as f64 * 0.5).collect();
            let k = rng.random_range(1..=len);
            (scores, k)
        })
        .collect()
}
