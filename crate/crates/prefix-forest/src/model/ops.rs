//! Elementwise and normalization ops with hand-written backward passes.

use ndarray::{Array1, Array2};

use super::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-6;

/// y = g * x / rms(x) per row; returns (y, 1/rms per row).
pub fn rmsnorm_forward<T: Scalar>(x: &Array2<T>, gain: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let (n, d) = x.dim();
    let eps = T::from_f64_lossy(RMS_EPS);
    let dim = T::from_f64_lossy(d as f64);
    let mut y = Array2::zeros((n, d));
    let mut inv_rms = Array1::zeros(n);
    for t in 0..n {
        let mut ms = T::zero();
        for j in 0..d {
            ms += x[(t, j)] * x[(t, j)];
        }
        let r = (ms / dim + eps).sqrt().recip();
        inv_rms[t] = r;
        for j in 0..d {
            y[(t, j)] = gain[j] * x[(t, j)] * r;
        }
    }
    (y, inv_rms)
}

/// dx_k = r*dy_k*g_k - x_k * r^3 * sum_j(dy_j*g_j*x_j) / d
pub fn rmsnorm_backward<T: Scalar>(
    x: &Array2<T>,
    gain: &Array1<T>,
    inv_rms: &Array1<T>,
    dy: &Array2<T>,
) -> (Array2<T>, Array1<T>) {
    let (n, d) = x.dim();
    let dim = T::from_f64_lossy(d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dgain = Array1::zeros(d);
    for t in 0..n {
        let r = inv_rms[t];
        let mut h = T::zero();
        for j in 0..d {
            h += dy[(t, j)] * gain[j] * x[(t, j)];
            dgain[j] += dy[(t, j)] * x[(t, j)] * r;
        }
        let coef = r * r * r * h / dim;
        for j in 0..d {
            dx[(t, j)] = r * dy[(t, j)] * gain[j] - x[(t, j)] * coef;
        }
    }
    (dx, dgain)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

/// Sigmoid-weighted linear unit: x * sigmoid(x).
pub fn silu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = sigmoid(v);
        *g = *g * s * (T::one() + v * (T::one() - s));
    });
    dx
}

/// Weighted cross-entropy over supervised tokens. Returns (loss, row softmax
/// of the logits) with max-subtracted, numerically plain evaluation.
pub fn weighted_ce<T: Scalar>(
    logits: &Array2<T>,
    labels: &[Option<usize>],
    supervised: &[bool],
    scales: &[T],
) -> (T, Array2<T>) {
    let (n, v) = logits.dim();
    let mut probs = Array2::zeros((n, v));
    let mut loss = T::zero();
    for t in 0..n {
        let mut m = logits[(t, 0)];
        for j in 1..v {
            if logits[(t, j)] > m {
                m = logits[(t, j)];
            }
        }
        let mut denom = T::zero();
        for j in 0..v {
            let e = (logits[(t, j)] - m).exp();
            probs[(t, j)] = e;
            denom += e;
        }
        for j in 0..v {
            probs[(t, j)] = probs[(t, j)] / denom;
        }
        if supervised[t] {
            let y = labels[t].expect("supervised token carries a label");
            let lse = m + denom.ln();
            loss += scales[t] * (lse - logits[(t, y)]);
        }
    }
    (loss, probs)
}
