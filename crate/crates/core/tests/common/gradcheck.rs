// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference gradient checks shared by the tensor tests and the
//! acceptance run.

#![allow(dead_code)]

use desksteer::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;

/// Builds an op's output from its input leaves.
pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;
pub type MakeInputs = dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct OpCase {
    pub name: &'static str,
    pub make_inputs: Box<MakeInputs>,
    pub build: Box<Build>,
}

fn case(
    name: &'static str,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> OpCase {
    OpCase {
        name,
        make_inputs: Box::new(make_inputs),
        build: Box::new(build),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Every differentiable tape op with small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            |r| vec![randn(r, &[5, 7]), randn(r, &[7, 3])],
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case(
            "add",
            |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
            |t, v| t.add(v[0], v[1]).unwrap(),
        ),
        case(
            "add_row",
            |r| vec![randn(r, &[3, 4]), randn(r, &[4])],
            |t, v| t.add_row(v[0], v[1]).unwrap(),
        ),
        case(
            "mul",
            |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])],
            |t, v| t.mul(v[0], v[1]).unwrap(),
        ),
        case(
            "scale",
            |r| vec![randn(r, &[2, 5])],
            |t, v| t.scale(v[0], -0.7).unwrap(),
        ),
        case("gelu", |r| vec![randn(r, &[4, 6])], |t, v| t.gelu(v[0]).unwrap()),
        case(
            "layer_norm",
            |r| {
                vec![
                    randn(r, &[3, 8]),
                    Tensor::randn(&[8], 0.5, r),
                    Tensor::randn(&[8], 0.5, r),
                ]
            },
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
        ),
        case(
            "embedding",
            |r| vec![randn(r, &[6, 4])],
            |t, v| t.embedding(v[0], &[1, 4, 1, 0, 5]).unwrap(),
        ),
        case("sum", |r| vec![randn(r, &[3, 4])], |t, v| t.sum(v[0]).unwrap()),
        case("mean", |r| vec![randn(r, &[3, 4])], |t, v| t.mean(v[0]).unwrap()),
        case(
            "mean_rows",
            |r| vec![randn(r, &[5, 3])],
            |t, v| t.mean_rows(v[0]).unwrap(),
        ),
        case(
            "slice_rows",
            |r| vec![randn(r, &[6, 3])],
            |t, v| t.slice_rows(v[0], 2, 5).unwrap(),
        ),
        case(
            "causal_attention",
            |r| vec![randn(r, &[5, 8]), randn(r, &[5, 8]), randn(r, &[5, 8])],
            |t, v| t.causal_attention(v[0], v[1], v[2], 2).unwrap(),
        ),
        case(
            "softmax_cross_entropy",
            |r| vec![randn(r, &[3, 5])],
            |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2]).unwrap(),
        ),
        case(
            "soft_cross_entropy",
            |r| vec![randn(r, &[2, 4])],
            |t, v| {
                let target = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0]).unwrap();
                t.soft_cross_entropy(v[0], &target).unwrap()
            },
        ),
    ]
}

pub fn find_case(name: &str) -> OpCase {
    op_cases()
        .into_iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no gradcheck case `{name}`"))
}

/// Central finite differences of `sum(w ∘ f(inputs))`, accumulated in f64.
/// Only the op's forward values are used, never its backward.
pub fn finite_difference(inputs: &[Tensor], weights: &[f64], build: &Build) -> Vec<Vec<f64>> {
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data()
            .iter()
            .zip(weights)
            .map(|(&y, &w)| y as f64 * w)
            .sum()
    };
    let mut grads = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        let mut g = vec![0.0f64; t.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = t.data()[i];
            plus[which].data_mut()[i] = x + STEP;
            minus[which].data_mut()[i] = x - STEP;
            let h = (x + STEP) as f64 - (x - STEP) as f64;
            *gi = (eval(&plus) - eval(&minus)) / h;
        }
        grads.push(g);
    }
    grads
}

pub fn analytic(inputs: &[Tensor], weights: &[f64], build: &Build) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::new(shape, weights.iter().map(|&w| w as f32).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.data().iter().map(|&x| x as f64).collect(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect()
}

/// Infinity-norm relative error between two gradient tensors.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Worst relative error of `case` over `seeds`, or the first failure.
pub fn check_case(case: &OpCase, seeds: u64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (case.make_inputs)(&mut rng);
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out = (case.build)(&mut probe, &vars);
        let n_out = probe.value(out).len();
        let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fd = finite_difference(&inputs, &weights, &*case.build);
        let an = analytic(&inputs, &weights, &*case.build);
        for (k, (a, b)) in an.iter().zip(&fd).enumerate() {
            let err = rel_error(a, b);
            worst = worst.max(err);
            if err > REL_TOL {
                return Err(format!("{}: input {k} seed {seed} relative error {err:.2e}", case.name));
            }
        }
    }
    Ok(worst)
}

/// f64 re-implementation of a two-layer GELU MLP with a mean cross-entropy head.
fn mlp_loss_f64(p: &[Vec<f64>], targets: &[usize]) -> f64 {
    let (n, i, h, o) = (4, 5, 6, 3);
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
    let mut loss = 0.0;
    for r in 0..n {
        let hidden: Vec<f64> = (0..h)
            .map(|j| gelu((0..i).map(|k| p[0][r * i + k] * p[1][k * h + j]).sum::<f64>() + p[2][j]))
            .collect();
        let logits: Vec<f64> = (0..o)
            .map(|j| (0..h).map(|k| hidden[k] * p[3][k * o + j]).sum::<f64>() + p[4][j])
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        loss += z.ln() - logits[targets[r]];
    }
    loss / n as f64
}

/// Tape gradients of a composed MLP loss against finite differences of an
/// independent f64 implementation.
pub fn check_composite_mlp(seeds: u64) -> Result<f64, String> {
    let targets = [0, 2, 1, 1];
    let shapes: [&[usize]; 5] = [&[4, 5], &[5, 6], &[6], &[6, 3], &[3]];
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();

        let mut tape = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let h = tape.matmul(v[0], v[1]).unwrap();
        let h = tape.add_row(h, v[2]).unwrap();
        let h = tape.gelu(h).unwrap();
        let o = tape.matmul(h, v[3]).unwrap();
        let o = tape.add_row(o, v[4]).unwrap();
        let loss = tape.softmax_cross_entropy(o, &targets).unwrap();
        tape.backward(loss).unwrap();

        let params: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.data().iter().map(|&x| x as f64).collect())
            .collect();
        for (k, var) in v.iter().enumerate() {
            let analytic: Vec<f64> = tape.grad(*var).unwrap().data().iter().map(|&x| x as f64).collect();
            let fd: Vec<f64> = (0..params[k].len())
                .map(|j| {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    plus[k][j] += STEP as f64;
                    minus[k][j] -= STEP as f64;
                    (mlp_loss_f64(&plus, &targets) - mlp_loss_f64(&minus, &targets)) / (2.0 * STEP as f64)
                })
                .collect();
            let err = rel_error(&analytic, &fd);
            worst = worst.max(err);
            if err > REL_TOL {
                return Err(format!("mlp: param {k} seed {seed} relative error {err:.2e}"));
            }
        }
    }
    Ok(worst)
}

/// Forward output and input gradient of `grad_reverse(x, η)` under the
/// upstream gradient `upstream`.
pub fn grl_backward(x: &[f32], upstream: &[f32], eta: f32) -> (Vec<f32>, Vec<f32>) {
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::vector(x.to_vec()).reshape(vec![1, x.len()]).unwrap());
    let y = tape.grad_reverse(xv, eta).unwrap();
    let w = tape.constant(Tensor::vector(upstream.to_vec()).reshape(vec![1, x.len()]).unwrap());
    let prod = tape.mul(y, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    (tape.value(y).data().to_vec(), tape.grad(xv).unwrap().into_data())
}
