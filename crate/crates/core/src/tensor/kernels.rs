// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric kernels. Matrix products go through `matrixmultiply`'s sgemm with
//! explicit strides, so transposed operands are never materialized.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    // SAFETY: the slice lengths above bound every access made with these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub(crate) fn gemm_tn_acc(a: &[f32], c: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    assert!(a.len() == m * k && c.len() == m * n && out.len() == k * n);
    // SAFETY: as above; aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            c.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m×k] += c[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt_acc(c: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    assert!(c.len() == m * n && b.len() == k * n && out.len() == m * k);
    // SAFETY: as above; bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            n,
            k,
            1.0,
            c.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

fn fast_tanh(u: f32) -> f32 {
    // exp saturates cleanly at both ends, so no clamping is needed
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

/// GELU value and the tanh term its derivative reuses.
pub(crate) fn gelu_with_tanh(x: f32) -> (f32, f32) {
    let t = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
    (0.5 * x * (1.0 + t), t)
}

#[cfg(test)]
pub(crate) fn gelu(x: f32) -> f32 {
    gelu_with_tanh(x).0
}

pub(crate) fn gelu_grad_from_tanh(x: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `log(sum(exp(x)))` for one row, accumulated in f64.
pub(crate) fn log_sum_exp(x: &[f32]) -> f64 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = x.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.25 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut out = vec![0.0; m * n];
        gemm_acc(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-5);
            }
        }
        // aᵀ·(a·b) through gemm_tn versus explicit transpose
        let mut tn = vec![0.0; k * n];
        gemm_tn_acc(&a, &out, m, k, n, &mut tn);
        let at = transpose(&a, m, k);
        let mut want = vec![0.0; k * n];
        gemm_acc(&at, &out, k, m, n, &mut want);
        for (x, y) in tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
        let mut nt = vec![0.0; m * k];
        gemm_nt_acc(&out, &b, m, k, n, &mut nt);
        for i in 0..m {
            for p in 0..k {
                let want: f32 = (0..n).map(|j| out[i * n + j] * b[p * n + j]).sum();
                assert!((nt[i * k + p] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }
}
