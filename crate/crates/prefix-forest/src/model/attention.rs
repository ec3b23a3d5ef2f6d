//! Masked attention and rotary embeddings, forward and backward.
//!
//! Scores, softmax and the output accumulate only over mask-allowed pairs,
//! in ascending key order. A prefix row therefore runs through exactly the
//! arithmetic of its baseline copy, which is what makes the shared-prefix
//! forward identity hold to the last bit instead of merely approximately.

use ndarray::Array2;

use super::scalar::Scalar;

/// Per-token cos/sin tables, one column per rotation pair.
pub struct RopeTables<T> {
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

/// Angles follow the usual inverse-frequency schedule base^(-2i/d) scaled by
/// the token's restored original position.
pub fn rope_tables<T: Scalar>(position_ids: &[u64], head_dim: usize, base: f64) -> RopeTables<T> {
    assert!(head_dim % 2 == 0, "rotation pairs need an even head dim");
    let half = head_dim / 2;
    let n = position_ids.len();
    let mut cos = Array2::zeros((n, half));
    let mut sin = Array2::zeros((n, half));
    for (t, &pos) in position_ids.iter().enumerate() {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos[(t, i)] = T::from_f64_lossy(angle.cos());
            sin[(t, i)] = T::from_f64_lossy(angle.sin());
        }
    }
    RopeTables { cos, sin }
}

/// Rotate half-split pairs (x_i, x_{i+d/2}) by the per-position angles.
pub fn rope_apply<T: Scalar>(x: &Array2<T>, rope: &RopeTables<T>) -> Array2<T> {
    rotate(x, rope, false)
}

/// Gradient of [`rope_apply`]: rotation by the negated angles.
pub fn rope_backward<T: Scalar>(dy: &Array2<T>, rope: &RopeTables<T>) -> Array2<T> {
    rotate(dy, rope, true)
}

fn rotate<T: Scalar>(x: &Array2<T>, rope: &RopeTables<T>, inverse: bool) -> Array2<T> {
    let (n, d) = x.dim();
    let half = d / 2;
    let mut out = Array2::zeros((n, d));
    for t in 0..n {
        for i in 0..half {
            let (c, s) = (rope.cos[(t, i)], rope.sin[(t, i)]);
            let s = if inverse { -s } else { s };
            let (a, b) = (x[(t, i)], x[(t, i + half)]);
            out[(t, i)] = a * c - b * s;
            out[(t, i + half)] = a * s + b * c;
        }
    }
    out
}

/// S = Q K^T / sqrt(d) on allowed pairs, row softmax with max subtraction,
/// O = P V. Returns (O, P); P is zero at masked entries.
pub fn attention_forward<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    mask: &Array2<bool>,
) -> (Array2<T>, Array2<T>) {
    let (n, d) = q.dim();
    let inv_sqrt = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut p = Array2::zeros((n, n));
    let mut o = Array2::zeros((n, d));
    for i in 0..n {
        let mut row_max = T::neg_infinity();
        for j in 0..n {
            if mask[(i, j)] {
                let mut s = T::zero();
                for c in 0..d {
                    s += q[(i, c)] * k[(j, c)];
                }
                let s = s * inv_sqrt;
                p[(i, j)] = s;
                if s > row_max {
                    row_max = s;
                }
            }
        }
        let mut denom = T::zero();
        for j in 0..n {
            if mask[(i, j)] {
                let e = (p[(i, j)] - row_max).exp();
                p[(i, j)] = e;
                denom += e;
            }
        }
        for j in 0..n {
            if mask[(i, j)] {
                let w = p[(i, j)] / denom;
                p[(i, j)] = w;
                for c in 0..d {
                    o[(i, c)] += w * v[(j, c)];
                }
            }
        }
    }
    (o, p)
}

/// dV = P^T dO; dP = dO V^T; dS = P o (dP - rowsum(dP o P)); masked entries
/// stay zero; dQ = dS K / sqrt(d); dK = dS^T Q / sqrt(d).
pub fn attention_backward<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    p: &Array2<T>,
    d_out: &Array2<T>,
    mask: &Array2<bool>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (n, d) = q.dim();
    let inv_sqrt = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    let mut dp_row = vec![T::zero(); n];
    for i in 0..n {
        let mut row_dot = T::zero();
        for j in 0..n {
            if mask[(i, j)] {
                let mut g = T::zero();
                for c in 0..d {
                    g += d_out[(i, c)] * v[(j, c)];
                }
                dp_row[j] = g;
                row_dot += g * p[(i, j)];
            }
        }
        for j in 0..n {
            if mask[(i, j)] {
                let ds = p[(i, j)] * (dp_row[j] - row_dot) * inv_sqrt;
                for c in 0..d {
                    dq[(i, c)] += ds * k[(j, c)];
                    dk[(j, c)] += ds * q[(i, c)];
                    dv[(j, c)] += p[(i, j)] * d_out[(i, c)];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn causal(n: usize) -> Array2<bool> {
        Array2::from_shape_fn((n, n), |(i, j)| j <= i)
    }

    #[test]
    fn single_token_attention_is_identity_on_v() {
        let q = array![[0.3, -0.2]];
        let k = array![[1.0, 0.5]];
        let v = array![[2.0, -1.0]];
        let (o, p) = attention_forward(&q, &k, &v, &causal(1));
        assert_eq!(p, array![[1.0]]);
        assert_eq!(o, v);
        let d_out = array![[0.5, 0.25]];
        let (_, _, dv) = attention_backward(&q, &k, &v, &p, &d_out, &causal(1));
        assert_eq!(dv, d_out);
    }

    #[test]
    fn identical_tokens_split_attention_evenly() {
        let q: Array2<f64> = array![[0.4, 0.1], [0.4, 0.1]];
        let k = q.clone();
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let (_, p) = attention_forward(&q, &k, &v, &causal(2));
        assert!((p[(1, 0)] - 0.5).abs() < 1e-15);
        assert!((p[(1, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_output_gradient_means_zero_input_gradients() {
        let mut rng = StdRng::seed_from_u64(41);
        let n = 4;
        let gen = |rng: &mut StdRng| Array2::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
        let q = gen(&mut rng);
        let k = gen(&mut rng);
        let v = gen(&mut rng);
        let (_, p) = attention_forward(&q, &k, &v, &causal(n));
        let zeros = Array2::zeros((n, 3));
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &p, &zeros, &causal(n));
        assert_eq!(dq, zeros);
        assert_eq!(dk, zeros);
        assert_eq!(dv, zeros);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let (n, d) = (5, 4);
        let gen = |rng: &mut StdRng| Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let q = gen(&mut rng);
        let k = gen(&mut rng);
        let v = gen(&mut rng);
        let weights = gen(&mut rng); // fixed projection to a scalar loss
        let mask = causal(n);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| -> f64 {
            let (o, _) = attention_forward(q, k, v, &mask);
            (&o * &weights).sum()
        };
        let (_, p) = attention_forward(&q, &k, &v, &mask);
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &p, &weights, &mask);
        let eps = 1e-6;
        for (name, x, dx) in [("q", &q, &dq), ("k", &k, &dk), ("v", &v, &dv)] {
            for t in 0..n {
                for c in 0..d {
                    let mut hi = x.clone();
                    hi[(t, c)] += eps;
                    let mut lo = x.clone();
                    lo[(t, c)] -= eps;
                    let (fhi, flo) = match name {
                        "q" => (loss(&hi, &k, &v), loss(&lo, &k, &v)),
                        "k" => (loss(&q, &hi, &v), loss(&q, &lo, &v)),
                        _ => (loss(&q, &k, &hi), loss(&q, &k, &lo)),
                    };
                    let fd = (fhi - flo) / (2.0 * eps);
                    let rel = (fd - dx[(t, c)]).abs() / fd.abs().max(dx[(t, c)].abs()).max(1e-8);
                    assert!(rel < 1e-6, "{name}[{t},{c}]: fd {fd} vs {}", dx[(t, c)]);
                }
            }
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = array![[0.3, -0.4, 0.9, 0.2]];
        let rope = rope_tables::<f64>(&[0], 4, 10_000.0);
        assert_eq!(rope_apply(&x, &rope), x);
    }

    #[test]
    fn rope_round_trip_restores_input() {
        let mut rng = StdRng::seed_from_u64(43);
        let x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.0..1.0));
        let rope = rope_tables::<f64>(&[0, 3, 17, 99, 100, 2048], 8, 10_000.0);
        let back = rope_backward(&rope_apply(&x, &rope), &rope);
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn equal_positions_rotate_identically() {
        let x = array![[1.0, 2.0, 3.0, 4.0]];
        let a = rope_tables::<f64>(&[7], 4, 10_000.0);
        let b = rope_tables::<f64>(&[7], 4, 10_000.0);
        assert_eq!(rope_apply(&x, &a), rope_apply(&x, &b));
    }
}
