//! Small neural-net primitives with hand-derived backward passes.
//!
//! Everything is f64 and row-oriented: a sequence is an `L x D` matrix whose
//! rows are token states, and a weight `W` applied "per row" computes
//! `y = W x` for each row `x`, i.e. `Y = X W^T`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Gaussian Error Linear Unit, tanh form.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu`] at `x`.
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Y = X W^T`: applies `W` to every row of `X`.
pub fn linear_rows(x: &ArrayView2<f64>, w: &Array2<f64>) -> Array2<f64> {
    x.dot(&w.t())
}

/// Backward of [`linear_rows`]: accumulates `dW += dY^T X` and returns `dX`.
pub fn linear_rows_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &ArrayView2<f64>,
    dw: &mut Array2<f64>,
) -> Array2<f64> {
    *dw += &dy.t().dot(x);
    dy.dot(w)
}

/// Per-row layer norm cache: the normalized rows and inverse stddevs.
pub struct LayerNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row layer normalization with affine parameters.
pub fn layernorm_rows(
    x: &ArrayView2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let (rows, cols) = x.dim();
    let mut x_hat = Array2::zeros((rows, cols));
    let mut inv_std = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let xh = (x[[r, c]] - mean) * inv;
            x_hat[[r, c]] = xh;
            y[[r, c]] = gamma[c] * xh + beta[c];
        }
    }
    (y, LayerNormCache { x_hat, inv_std })
}

/// Backward of [`layernorm_rows`]; accumulates into `dgamma`/`dbeta` and
/// returns `dX`.
pub fn layernorm_rows_backward(
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    dy: &ArrayView2<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, cols) = dy.dim();
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for c in 0..cols {
            let g = dy[[r, c]] * gamma[c];
            g_mean += g;
            gx_mean += g * cache.x_hat[[r, c]];
            dgamma[c] += dy[[r, c]] * cache.x_hat[[r, c]];
            dbeta[c] += dy[[r, c]];
        }
        g_mean /= cols as f64;
        gx_mean /= cols as f64;
        let inv = cache.inv_std[r];
        for c in 0..cols {
            let g = dy[[r, c]] * gamma[c];
            dx[[r, c]] = inv * (g - g_mean - cache.x_hat[[r, c]] * gx_mean);
        }
    }
    dx
}

/// In-place softmax over a slice, computed with max subtraction.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Backward of softmax: given probabilities `p` and upstream `dp`, returns
/// the logit gradient `p .* (dp - sum(p .* dp))` written into `dp`.
pub fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let s: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (d, &q) in dp.iter_mut().zip(p.iter()) {
        *d = q * (*d - s);
    }
}

pub fn l2_norm(v: &ArrayView1<f64>) -> f64 {
    v.dot(v).sqrt()
}

pub fn cosine(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.dot(b) / (l2_norm(a) * l2_norm(b))
}

/// Gradient of `cos(a, b)` with respect to `a`.
pub fn cosine_grad_wrt_a(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    let cos = a.dot(b) / (na * nb);
    let mut g = b.to_owned() / (na * nb);
    g.scaled_add(-cos / (na * na), &a.to_owned());
    g
}

pub fn all_finite_mat(m: &ArrayView2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &ArrayView1<f64>) -> bool {
    v.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_prime_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let x = array![[5.0, 5.0, 5.0, 5.0]];
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = layernorm_rows(&x.view(), &gamma, &beta);
        for v in y.iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_standardizes_two_point_row() {
        // mean 2, biased std 1 -> [-1, 1] up to the eps in the denominator
        let x = array![[1.0, 3.0]];
        let gamma = Array1::ones(2);
        let beta = Array1::zeros(2);
        let (y, _) = layernorm_rows(&x.view(), &gamma, &beta);
        assert!((y[[0, 0]] + 1.0).abs() < 1e-4);
        assert!((y[[0, 1]] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut a = vec![1.0, 2.0, 3.0];
        let mut b = vec![101.0, 102.0, 103.0];
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_grad_matches_finite_difference() {
        let a = array![0.3, -1.2, 0.8];
        let b = array![1.0, 0.4, -0.2];
        let g = cosine_grad_wrt_a(&a.view(), &b.view());
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (cosine(&ap.view(), &b.view()) - cosine(&am.view(), &b.view())) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
