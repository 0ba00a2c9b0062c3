//! Slice-level kernels shared by the plain tensor functions and the tape.
//!
//! Every kernel that produces one output row reads only the matching input
//! row and accumulates in a fixed order, so a row computed inside a block is
//! bit-identical to the same row computed alone. Incremental decoding relies
//! on this.

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Four-lane dot product with a fixed reduction order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * n..(p + 1) * n], out_row);
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, g_row, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Normalizes one row, returning `(mean, 1/std)` for the backward pass.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Which keys a query row may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=offset + i`.
    Causal { offset: usize },
    /// Query `i` sees only key `i`.
    SelfOnly,
}

impl AttnMask {
    #[inline]
    pub fn visible(&self, query: usize, n_keys: usize) -> std::ops::Range<usize> {
        match *self {
            AttnMask::Full => 0..n_keys,
            AttnMask::Causal { offset } => 0..(offset + query + 1).min(n_keys),
            AttnMask::SelfOnly => query..query + 1,
        }
    }
}

/// Multi-head scaled dot-product attention on pre-projected rows.
///
/// `q` is `n×d`, `k` and `v` are `m×d`, heads split `d` evenly. Returns the
/// `n×d` output and the attention probabilities laid out as
/// `[head][query][key]` (zero outside the mask).
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    mask: AttnMask,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * m];
    let mut kt = vec![0.0; dh * m];
    let mut vt = vec![0.0; dh * m];
    for h in 0..heads {
        let off = h * dh;
        head_transpose(k, m, d, off, dh, &mut kt);
        head_transpose(v, m, d, off, dh, &mut vt);
        for i in 0..n {
            let range = mask.visible(i, m);
            let row = (h * n + i) * m;
            let s = &mut probs[row + range.start..row + range.end];
            for c in 0..dh {
                axpy(
                    q[i * d + off + c],
                    &kt[c * m + range.start..c * m + range.end],
                    s,
                );
            }
            s.iter_mut().for_each(|x| *x *= scale);
            softmax_in_place(s);
            for c in 0..dh {
                out[i * d + off + c] = dot(s, &vt[c * m + range.start..c * m + range.end]);
            }
        }
    }
    (out, probs)
}

/// Columns `off..off + dh` of the `rows × d` matrix `x`, transposed into
/// `out[dh × rows]`.
pub fn head_transpose(x: &[f64], rows: usize, d: usize, off: usize, dh: usize, out: &mut [f64]) {
    for j in 0..rows {
        for c in 0..dh {
            out[c * rows + j] = x[j * d + off + c];
        }
    }
}

/// Gradients of [`attention`] with respect to `q`, `k` and `v`, given the
/// probabilities it returned and the output gradient `g`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    let mut kt = vec![0.0; dh * m];
    let mut vt = vec![0.0; dh * m];
    let mut dkt = vec![0.0; dh * m];
    let mut dvt = vec![0.0; dh * m];
    let mut ds = vec![0.0; m];
    for h in 0..heads {
        let off = h * dh;
        head_transpose(k, m, d, off, dh, &mut kt);
        head_transpose(v, m, d, off, dh, &mut vt);
        dkt.fill(0.0);
        dvt.fill(0.0);
        for i in 0..n {
            let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let lo = p.iter().position(|&x| x != 0.0).unwrap_or(m);
            let hi = p.iter().rposition(|&x| x != 0.0).map_or(lo, |x| x + 1);
            if lo == hi {
                continue;
            }
            let p = &p[lo..hi];
            let ds = &mut ds[lo..hi];
            ds.fill(0.0);
            for c in 0..dh {
                let gic = g[i * d + off + c];
                axpy(gic, &vt[c * m + lo..c * m + hi], ds);
                axpy(gic, p, &mut dvt[c * m + lo..c * m + hi]);
            }
            let weighted = dot(p, ds);
            for (x, &pj) in ds.iter_mut().zip(p) {
                *x = pj * (*x - weighted) * scale;
            }
            for c in 0..dh {
                dq[i * d + off + c] = dot(ds, &kt[c * m + lo..c * m + hi]);
                axpy(q[i * d + off + c], ds, &mut dkt[c * m + lo..c * m + hi]);
            }
        }
        for j in 0..m {
            for c in 0..dh {
                dk[j * d + off + c] = dkt[c * m + j];
                dv[j * d + off + c] = dvt[c * m + j];
            }
        }
    }
    (dq, dk, dv)
}
