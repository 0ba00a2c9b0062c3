//! Independent scalar recomputation of the training losses.

use medusa::model::{MedusaVariant, Model, ModelConfig};
use medusa::numerics::Tensor;
use medusa::training::Example;

use super::features;

pub fn v4(variant: MedusaVariant, k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 4,
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_attn_heads: 2,
        d_ff: 12,
        d_feat: 3,
        max_src_frames: 30,
        max_tgt_tokens: 8,
        k,
        variant,
        frames_per_token: 2,
        seed: 3,
    }
}

pub fn example(tokens: &[usize], d_feat: usize, fpt: usize, seed: u64) -> Example {
    Example {
        features: features(tokens.len() * fpt, d_feat, seed),
        tokens: tokens.to_vec(),
    }
}

pub fn logits_of(m: &Model, prefix: &str, h: &[f64]) -> Vec<f64> {
    let w = m.params().get(&format!("{prefix}.weight")).unwrap();
    let b = m.params().get(&format!("{prefix}.bias")).unwrap();
    let (din, dout) = (w.rows(), w.cols());
    (0..dout)
        .map(|j| b.data()[j] + (0..din).map(|i| h[i] * w.data()[i * dout + j]).sum::<f64>())
        .collect()
}

pub fn head_logits(m: &Model, k: usize, h: &[f64]) -> Vec<f64> {
    let r = logits_of(m, &format!("medusa.heads.{k}"), h);
    let x: Vec<f64> = h.iter().zip(&r).map(|(a, b)| a + b).collect();
    logits_of(m, "medusa.proj", &x)
}

pub fn ce(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn hidden_rows(m: &Model, ex: &Example) -> Vec<Vec<f64>> {
    let z = m.encode(&ex.features).unwrap();
    let (input, _) = ex.decoder_io();
    let h = m.decoder_hidden(&input, &z, None).unwrap();
    (0..h.rows()).map(|r| h.row(r).to_vec()).collect()
}

/// Linear objective for one example.
pub fn linear_reference(m: &Model, ex: &Example, teacher: &Tensor, kl_weight: f64) -> f64 {
    let k_heads = m.config().k;
    let (_, target) = ex.decoder_io();
    let rows = hidden_rows(m, ex);
    let n = rows.len();
    let base: f64 = (0..n)
        .map(|i| ce(&logits_of(m, "base_proj", &rows[i]), target[i]))
        .sum::<f64>()
        / n as f64;
    let mut total = base;
    for k in 1..=k_heads {
        if n > k {
            total += (0..n - k)
                .map(|i| ce(&head_logits(m, k, &rows[i]), target[i + k]))
                .sum::<f64>()
                / (n - k) as f64;
        }
    }
    let kl: f64 = (0..n)
        .map(|i| {
            let q = softmax(&logits_of(m, "base_proj", &rows[i]));
            teacher
                .row(i)
                .iter()
                .zip(&q)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, q)| t * (t.ln() - q.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    total / (k_heads + 1) as f64 + kl_weight * kl
}

pub fn block_reference(m: &Model, ex: &Example, weights: &[f64]) -> f64 {
    let (_, target) = ex.decoder_io();
    let z = m.encode(&ex.features).unwrap();
    let rows = hidden_rows(m, ex);
    let n = rows.len();
    let mut total = 0.0;
    for (k, w) in (1..=m.config().k).zip(weights) {
        if n > k {
            let mut sum = 0.0;
            for i in 0..n - k {
                let d = m.medusa_forward(&rows[i], &z).unwrap();
                sum += ce(d.row(k), target[i + k]);
            }
            total += w * sum / (n - k) as f64;
        }
    }
    total
}

pub fn uniform_teacher(rows: usize, v: usize) -> Tensor {
    Tensor::matrix(rows, v, vec![1.0 / v as f64; rows * v]).unwrap()
}
