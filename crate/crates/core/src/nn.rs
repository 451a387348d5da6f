//! Minimal dense linear algebra and a two-layer feed-forward network with
//! manual backpropagation and Adam.
//!
//! Everything is f64 and the summation order is fixed, so results are
//! bit-reproducible across runs; large matrix products parallelize over
//! output rows without changing any per-element summation order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self (n x k) * other^T (k x m)` where `other` is `m x k`: each output
    /// row is a dot of a self row with an other row. This is the layout used
    /// by layer forward passes (weights stored output-major).
    pub fn mul_transposed(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let n = self.rows;
        let m = other.rows;
        let k = self.cols;
        let mut out = Matrix::zeros(n, m);
        let work = n * m * k;
        let body = |(r, out_row): (usize, &mut [f64])| {
            let a = self.row(r);
            for (c, o) in out_row.iter_mut().enumerate() {
                let b = other.row(c);
                let mut acc = 0.0;
                for i in 0..k {
                    acc += a[i] * b[i];
                }
                *o = acc;
            }
        };
        if work > 1 << 16 {
            out.data.par_chunks_mut(m).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(body);
        }
        out
    }

    /// `self^T (k x n) * other (n x m)` where `self` is `n x k`. Used for
    /// weight gradients: dW = upstream^T * input laid out as (m x k) via
    /// calling `other.transposed_mul(self)`; here we directly produce the
    /// (k x m) result.
    pub fn transposed_mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let n = self.rows;
        let k = self.cols;
        let m = other.cols;
        let mut out = Matrix::zeros(k, m);
        let work = n * m * k;
        let body = |(r, out_row): (usize, &mut [f64])| {
            for i in 0..n {
                let a = self.get(i, r);
                if a == 0.0 {
                    continue;
                }
                let b = other.row(i);
                for (c, o) in out_row.iter_mut().enumerate() {
                    *o += a * b[c];
                }
            }
        };
        if work > 1 << 16 {
            out.data.par_chunks_mut(m).enumerate().for_each(body);
        } else {
            out.data.chunks_mut(m).enumerate().for_each(body);
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// Adam optimizer state for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One Adam step over `params` given `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Sparse step: only the listed indices received gradient. Adam moments
    /// for untouched indices are left as-is (lazy update, standard for
    /// embedding tables).
    pub fn step_sparse(&mut self, params: &mut [f64], grads: &[f64], touched: &[usize], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for &i in touched {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Grow state to cover a resized parameter tensor (new entries zeroed).
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }
}

/// Two-layer feed-forward network `in -> hidden (tanh) -> out` with manual
/// backprop. Weights are stored output-major (`w1: hidden x in`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Gradients matching [`Mlp`] layout, plus the gradient w.r.t. the input
/// batch (needed to backprop into embedding tables).
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub input: Matrix,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Mlp {
            w1: Matrix::uniform(hidden, input, s1, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::uniform(output, hidden, s2, rng),
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    /// Batched forward pass; returns the tanh hidden activations and logits.
    pub fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let mut h = x.mul_transposed(&self.w1);
        for r in 0..h.rows {
            let row = h.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + self.b1[j]).tanh();
            }
        }
        let mut logits = h.mul_transposed(&self.w2);
        for r in 0..logits.rows {
            let row = logits.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b2[j];
            }
        }
        (h, logits)
    }

    /// Single-input forward pass (logits only), allocation-light.
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let hdim = self.hidden_dim();
        let mut h = vec![0.0; hdim];
        for j in 0..hdim {
            let w = self.w1.row(j);
            let mut acc = self.b1[j];
            for i in 0..x.len() {
                acc += w[i] * x[i];
            }
            h[j] = acc.tanh();
        }
        let odim = self.output_dim();
        let mut logits = vec![0.0; odim];
        for (o, l) in logits.iter_mut().enumerate() {
            let w = self.w2.row(o);
            let mut acc = self.b2[o];
            for j in 0..hdim {
                acc += w[j] * h[j];
            }
            *l = acc;
        }
        logits
    }

    /// Backward pass from logit-space gradients. `x` and `h` are the batch
    /// input and the hidden activations from [`Mlp::forward`].
    pub fn backward(&self, x: &Matrix, h: &Matrix, d_logits: &Matrix) -> MlpGrads {
        // dW2 = d_logits^T * h
        let w2_grad = d_logits.transposed_mul(h);
        let mut b2_grad = vec![0.0; self.output_dim()];
        for r in 0..d_logits.rows {
            for (j, g) in b2_grad.iter_mut().enumerate() {
                *g += d_logits.get(r, j);
            }
        }
        // dH = d_logits * W2, through tanh.
        let mut dh = d_logits.mul_transposed(&transpose(&self.w2));
        for r in 0..dh.rows {
            for j in 0..dh.cols {
                let a = h.get(r, j);
                let v = dh.get(r, j) * (1.0 - a * a);
                dh.set(r, j, v);
            }
        }
        let w1_grad = dh.transposed_mul(x);
        let mut b1_grad = vec![0.0; self.hidden_dim()];
        for r in 0..dh.rows {
            for (j, g) in b1_grad.iter_mut().enumerate() {
                *g += dh.get(r, j);
            }
        }
        let input_grad = dh.mul_transposed(&transpose(&self.w1));
        MlpGrads { w1: w1_grad, b1: b1_grad, w2: w2_grad, b2: b2_grad, input: input_grad }
    }
}

fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols, m.rows);
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.set(c, r, m.get(r, c));
        }
    }
    out
}

/// Numerically stable log-softmax over `logits` restricted to `mask` (true =
/// allowed). Disallowed entries come back as `f64::NEG_INFINITY`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (l, &m) in logits.iter().zip(mask) {
        if m {
            z += (l - max).exp();
        }
    }
    let logz = max + z.ln();
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - logz } else { f64::NEG_INFINITY })
        .collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    masked_log_softmax(logits, &vec![true; logits.len()])
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Mean cross-entropy over a batch and the logit gradients, with optional
/// per-row legality masks. Rows pair `logits` with the gold class index.
pub fn cross_entropy_batch(
    logits: &Matrix,
    gold: &[usize],
    masks: Option<&[Vec<bool>]>,
) -> (f64, Matrix) {
    let n = logits.rows;
    assert_eq!(gold.len(), n);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, logits.cols);
    let full = vec![true; logits.cols];
    for r in 0..n {
        let mask = masks.map_or(&full[..], |m| &m[r][..]);
        let lsm = masked_log_softmax(logits.row(r), mask);
        loss -= lsm[gold[r]];
        for c in 0..logits.cols {
            if mask[c] {
                let p = lsm[c].exp();
                let y = if c == gold[r] { 1.0 } else { 0.0 };
                grad.set(r, c, (p - y) / n as f64);
            }
        }
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn matmul_shapes_and_values() {
        let a = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        // a * b^T
        let c = a.mul_transposed(&b);
        assert_eq!(c.data, vec![17.0, 23.0, 39.0, 53.0]);
        // a^T * b
        let d = a.transposed_mul(&b);
        assert_eq!(d.data, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[0.1, -2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_ignores_disallowed() {
        let lsm = masked_log_softmax(&[1.0, 100.0, 2.0], &[true, false, true]);
        assert_eq!(lsm[1], f64::NEG_INFINITY);
        let total = lsm[0].exp() + lsm[2].exp();
        assert!((total - 1.0).abs() < 1e-12);
    }

    /// Analytic MLP gradients against central finite differences.
    #[test]
    fn mlp_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::new(6, 5, 4, &mut rng);
        let x = Matrix::uniform(3, 6, 1.0, &mut rng);
        let gold = vec![1usize, 3, 0];

        let (h, logits) = mlp.forward(&x);
        let (_, dlogits) = cross_entropy_batch(&logits, &gold, None);
        let grads = mlp.backward(&x, &h, &dlogits);

        let loss_fn = |m: &Mlp| {
            let (_, logits) = m.forward(&x);
            cross_entropy_batch(&logits, &gold, None).0
        };

        let h_step = 1e-5;
        let mut worst: f64 = 0.0;
        let mut check = |get: &dyn Fn(&Mlp) -> f64, set: &dyn Fn(&mut Mlp, f64), analytic: f64| {
            let mut m = mlp.clone();
            let base = get(&m);
            set(&mut m, base + h_step);
            let up = loss_fn(&m);
            set(&mut m, base - h_step);
            let down = loss_fn(&m);
            let numeric = (up - down) / (2.0 * h_step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        };
        for idx in [0usize, 7, 11, 29] {
            check(
                &|m| m.w1.data[idx],
                &|m, v| m.w1.data[idx] = v,
                grads.w1.data[idx],
            );
        }
        for idx in [0usize, 5, 19] {
            check(
                &|m| m.w2.data[idx],
                &|m, v| m.w2.data[idx] = v,
                grads.w2.data[idx],
            );
        }
        check(&|m| m.b1[2], &|m, v| m.b1[2] = v, grads.b1[2]);
        check(&|m| m.b2[3], &|m, v| m.b2[3] = v, grads.b2[3]);
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn adam_zero_lr_keeps_weights() {
        let mut params = vec![1.0, -2.0, 3.0];
        let before = params.clone();
        let mut adam = Adam::new(3);
        adam.step(&mut params, &[0.5, 0.1, -0.2], 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(4, 3, 2, &mut rng);
        let x = Matrix::uniform(2, 4, 1.0, &mut rng);
        let gold = vec![0usize, 1];
        let (h, logits) = mlp.forward(&x);
        let (_, dlogits) = cross_entropy_batch(&logits, &gold, None);
        let grads = mlp.backward(&x, &h, &dlogits);

        let h_step = 1e-6;
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += h_step;
            let (_, l1) = mlp.forward(&xp);
            let up = cross_entropy_batch(&l1, &gold, None).0;
            xp.data[idx] -= 2.0 * h_step;
            let (_, l2) = mlp.forward(&xp);
            let down = cross_entropy_batch(&l2, &gold, None).0;
            let numeric = (up - down) / (2.0 * h_step);
            assert!((grads.input.data[idx] - numeric).abs() < 1e-6);
        }
    }
}
