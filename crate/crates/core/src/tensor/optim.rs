// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use super::{Tape, Tensor, Var};

/// Gradients summed over several tapes (one per sequence in a batch).
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Vec<f32>>,
    count: usize,
}

impl GradBuffer {
    pub fn for_params(params: &[Arc<Tensor>]) -> Self {
        Self {
            grads: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            count: 0,
        }
    }

    /// Adds the gradients that `tape` holds for the bound parameter leaves.
    pub fn accumulate(&mut self, tape: &Tape, bound: &[Var]) {
        for (dst, &var) in self.grads.iter_mut().zip(bound) {
            if let Some(g) = tape.grad_data(var) {
                dst.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn grads(&self) -> &[Vec<f32>] {
        &self.grads
    }

    /// Divides every gradient by the number of accumulated tapes.
    pub fn average(&mut self) {
        if self.count > 1 {
            let inv = 1.0 / self.count as f32;
            for g in &mut self.grads {
                g.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }

    /// Splits into the buffers for parameters `..at` and `at..`.
    pub fn split_at(&self, at: usize) -> (GradBuffer, GradBuffer) {
        let (a, b) = self.grads.split_at(at);
        (
            GradBuffer {
                grads: a.to_vec(),
                count: self.count,
            },
            GradBuffer {
                grads: b.to_vec(),
                count: self.count,
            },
        )
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.count = 0;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32, params: &[Arc<Tensor>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &GradBuffer) {
        self.t += 1;
        if self.lr == 0.0 {
            return;
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, param) in params.iter_mut().enumerate() {
            let g = &grads.grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = Arc::make_mut(param).data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = vec![Arc::new(Tensor::vector(vec![3.0, -2.0]))];
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = tape.param(Arc::clone(&params[0]));
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap();
            let mut buf = GradBuffer::for_params(&params);
            buf.accumulate(&tape, &[x]);
            drop(tape);
            opt.step(&mut params, &buf);
        }
        assert!(params[0].data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        let mut params = vec![Arc::new(Tensor::vector(vec![1.0, 2.0]))];
        let before = params[0].data().to_vec();
        let mut opt = Adam::new(0.0, &params);
        let mut buf = GradBuffer::for_params(&params);
        buf.grads[0] = vec![5.0, -5.0];
        opt.step(&mut params, &buf);
        assert_eq!(params[0].data(), &before[..]);
    }
}
