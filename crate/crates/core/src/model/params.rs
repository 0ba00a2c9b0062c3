use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{MedusaVariant, ModelConfig};
use crate::numerics::Tensor;

/// Named parameters in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter trainable flags, aligned with [`Params`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all(n: usize) -> Self {
        FreezeMask {
            trainable: vec![true; n],
        }
    }

    pub fn for_variant(params: &Params, config: &ModelConfig) -> Self {
        let last = format!("decoder.layers.{}.", config.n_dec_layers - 1);
        let trainable = params
            .iter()
            .map(|(name, _)| match config.variant {
                MedusaVariant::None => true,
                MedusaVariant::MedusaLinear => {
                    name.starts_with(&last)
                        || name.starts_with("decoder.ln_final.")
                        || name.starts_with("medusa.")
                }
                MedusaVariant::MedusaBlock => name.starts_with("medusa."),
            })
            .collect();
        FreezeMask { trainable }
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn count(&self) -> usize {
        self.trainable.iter().filter(|t| **t).count()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: Vec<usize>, bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }

    fn linear(&mut self, p: &mut Params, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        p.insert(
            format!("{prefix}.weight"),
            self.uniform(vec![fan_in, fan_out], bound),
        );
        p.insert(format!("{prefix}.bias"), self.uniform(vec![fan_out], bound));
    }

    fn attention(&mut self, p: &mut Params, prefix: &str, d: usize) {
        let bound = (6.0 / (4 * d) as f64).sqrt();
        for part in ["q", "k", "v"] {
            p.insert(
                format!("{prefix}.{part}.weight"),
                self.uniform(vec![d, d], bound),
            );
            p.insert(format!("{prefix}.{part}.bias"), Tensor::zeros(vec![d]));
        }
        let out = 1.0 / (d as f64).sqrt();
        p.insert(format!("{prefix}.o.weight"), self.uniform(vec![d, d], out));
        p.insert(format!("{prefix}.o.bias"), Tensor::zeros(vec![d]));
    }

    fn layer_norm(p: &mut Params, prefix: &str, d: usize) {
        p.insert(
            format!("{prefix}.gain"),
            Tensor::vector(vec![1.0; d]).expect("gain"),
        );
        p.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d]));
    }

    fn feed_forward(&mut self, p: &mut Params, prefix: &str, d: usize, f: usize) {
        self.linear(p, &format!("{prefix}.in"), d, f);
        self.linear(p, &format!("{prefix}.out"), f, d);
    }

    fn decoder_block(&mut self, p: &mut Params, prefix: &str, d: usize, f: usize) {
        Init::layer_norm(p, &format!("{prefix}.ln1"), d);
        self.attention(p, &format!("{prefix}.self_attn"), d);
        Init::layer_norm(p, &format!("{prefix}.ln2"), d);
        self.attention(p, &format!("{prefix}.cross_attn"), d);
        Init::layer_norm(p, &format!("{prefix}.ln3"), d);
        self.feed_forward(p, &format!("{prefix}.ff"), d, f);
    }
}

/// Sinusoidal table whose row `p` encodes phase `p * stride`.
pub fn sinusoid(rows: usize, d: usize, stride: f64) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for p in 0..rows {
        let pos = p as f64 * stride;
        for i in 0..d / 2 {
            let freq = (-(10000f64.ln()) * (2 * i) as f64 / d as f64).exp();
            data[p * d + 2 * i] = (pos * freq).sin();
            data[p * d + 2 * i + 1] = (pos * freq).cos();
        }
    }
    Tensor::matrix(rows, d, data).expect("sinusoid shape")
}

pub(super) fn init_base(config: &ModelConfig) -> Params {
    let mut p = Params::new();
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let (d, f) = (config.d_model, config.d_ff);

    init.linear(&mut p, "encoder.input", config.d_feat, d);
    p.insert("encoder.pos", sinusoid(config.max_src_frames, d, 1.0));
    for i in 0..config.n_enc_layers {
        let prefix = format!("encoder.layers.{i}");
        Init::layer_norm(&mut p, &format!("{prefix}.ln1"), d);
        init.attention(&mut p, &format!("{prefix}.self_attn"), d);
        Init::layer_norm(&mut p, &format!("{prefix}.ln2"), d);
        init.feed_forward(&mut p, &format!("{prefix}.ff"), d, f);
    }
    Init::layer_norm(&mut p, "encoder.ln_final", d);

    p.insert(
        "decoder.token_embedding",
        init.normal(vec![config.vocab_size, d]),
    );
    p.insert(
        "decoder.pos",
        sinusoid(config.max_tgt_tokens + 1, d, config.frames_per_token as f64),
    );
    for i in 0..config.n_dec_layers {
        init.decoder_block(&mut p, &format!("decoder.layers.{i}"), d, f);
    }
    Init::layer_norm(&mut p, "decoder.ln_final", d);
    init.linear(&mut p, "base_proj", d, config.vocab_size);
    p
}

/// Adds the Medusa parameters for `config.variant` to an existing base.
pub(super) fn init_medusa(p: &mut Params, config: &ModelConfig) {
    if config.variant == MedusaVariant::None {
        return;
    }
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d65_6475_7361),
    };
    let d = config.d_model;
    if config.variant == MedusaVariant::MedusaBlock {
        init.decoder_block(p, "medusa.block", d, config.d_ff);
    }
    for k in 1..=config.k {
        p.insert(
            format!("medusa.heads.{k}.weight"),
            Tensor::zeros(vec![d, d]),
        );
        p.insert(format!("medusa.heads.{k}.bias"), Tensor::zeros(vec![d]));
    }
    let w = p.get("base_proj.weight").expect("base projection").clone();
    let b = p.get("base_proj.bias").expect("base projection").clone();
    p.insert("medusa.proj.weight", w);
    p.insert("medusa.proj.bias", b);
}
