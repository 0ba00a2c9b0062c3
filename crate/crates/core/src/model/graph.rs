//! Forward passes recorded on a [`Tape`], shared by training and inference.

use super::{FreezeMask, KvCache, Model, ModelError, Result};
use crate::numerics::{AttnMask, Tape, Tensor, Var};

/// Where a cross-attention layer gets its keys and values.
#[derive(Clone, Copy)]
pub enum Cross<'c> {
    /// Project the encoder output on the tape.
    Encoder(Var),
    /// Reuse projections stored in a decoding cache.
    Cached(&'c KvCache),
}

/// A tape bound to one model. Each parameter becomes a leaf on first use.
pub struct Graph<'m> {
    pub tape: Tape<'m>,
    model: &'m Model,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'m> Graph<'m> {
    /// Records gradients for the parameters that `mask` marks trainable.
    pub fn training(model: &'m Model, mask: &FreezeMask) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            trainable: mask.flags().to_vec(),
        }
    }

    pub fn inference(model: &'m Model) -> Self {
        Graph {
            tape: Tape::no_grad(),
            model,
            bound: vec![None; model.params.len()],
            trainable: vec![false; model.params.len()],
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Var {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let t = self.model.params.tensor(i);
        let v = self.tape.borrowed(t.shape(), t.data(), self.trainable[i]);
        self.bound[i] = Some(v);
        v
    }

    /// Parameters used so far, as `(param index, var)`.
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        self.tape.leaf_owned(t.clone().with_requires_grad(false))
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"));
        let b = self.param(&format!("{prefix}.bias"));
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    fn feed_forward(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.in"), x)?;
        let h = self.tape.gelu(h);
        self.linear(&format!("{prefix}.out"), h)
    }

    fn heads(&self) -> usize {
        self.model.config.n_attn_heads
    }

    fn self_attention(&mut self, prefix: &str, x: Var, mask: AttnMask) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let k = self.linear(&format!("{prefix}.k"), x)?;
        let v = self.linear(&format!("{prefix}.v"), x)?;
        let a = self.tape.attention(q, k, v, self.heads(), mask)?;
        self.linear(&format!("{prefix}.o"), a)
    }

    /// Self-attention whose keys and values extend the cached rows.
    fn cached_self_attention(
        &mut self,
        prefix: &str,
        x: Var,
        cache: &mut KvCache,
        layer: usize,
    ) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let k = self.linear(&format!("{prefix}.k"), x)?;
        let v = self.linear(&format!("{prefix}.v"), x)?;
        let offset = cache.len();
        let (k_all, v_all) = if offset == 0 {
            (k, v)
        } else {
            let d = self.model.config.d_model;
            let (ck, cv) = cache.self_rows(layer);
            let ck = self.tape.constant(vec![offset, d], ck.to_vec())?;
            let cv = self.tape.constant(vec![offset, d], cv.to_vec())?;
            (
                self.tape.concat_rows(&[ck, k])?,
                self.tape.concat_rows(&[cv, v])?,
            )
        };
        cache.push_self(layer, self.tape.value(k), self.tape.value(v));
        let a = self
            .tape
            .attention(q, k_all, v_all, self.heads(), AttnMask::Causal { offset })?;
        self.linear(&format!("{prefix}.o"), a)
    }

    /// Cross-attention projections of the encoder output for one layer.
    pub(super) fn cross_kv(&mut self, prefix: &str, z: Var) -> Result<(Var, Var)> {
        let k = self.linear(&format!("{prefix}.k"), z)?;
        let v = self.linear(&format!("{prefix}.v"), z)?;
        Ok((k, v))
    }

    fn cross_attention(&mut self, prefix: &str, x: Var, kv: (Var, Var)) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let a = self
            .tape
            .attention(q, kv.0, kv.1, self.heads(), AttnMask::Full)?;
        self.linear(&format!("{prefix}.o"), a)
    }

    fn cached_kv(&mut self, cache: &KvCache, slot: CrossSlot) -> Result<(Var, Var)> {
        let (k, v) = match slot {
            CrossSlot::Layer(i) => cache.cross_rows(i),
            CrossSlot::Medusa => cache.medusa_cross_rows().ok_or_else(|| {
                ModelError::Contract("cache has no Medusa block projections".into())
            })?,
        };
        let shape = vec![cache.src_rows(), self.model.config.d_model];
        Ok((
            self.tape.constant(shape.clone(), k.to_vec())?,
            self.tape.constant(shape, v.to_vec())?,
        ))
    }

    fn cross_source(&mut self, prefix: &str, cross: Cross, slot: CrossSlot) -> Result<(Var, Var)> {
        match cross {
            Cross::Encoder(z) => self.cross_kv(prefix, z),
            Cross::Cached(cache) => self.cached_kv(cache, slot),
        }
    }

    /// Encoder output `z` for a `frames × d_feat` feature matrix.
    pub fn encode(&mut self, features: &Tensor) -> Result<Var> {
        let cfg = &self.model.config;
        let frames = features.rows();
        if features.shape().len() != 2 || features.cols() != cfg.d_feat {
            return Err(ModelError::Shape(format!(
                "features must be frames x {}, got {:?}",
                cfg.d_feat,
                features.shape()
            )));
        }
        if frames > cfg.max_src_frames {
            return Err(ModelError::Length {
                what: "source frames",
                got: frames,
                max: cfg.max_src_frames,
            });
        }
        let n_layers = cfg.n_enc_layers;
        let x = self.input(features);
        let x = self.linear("encoder.input", x)?;
        let pos = self.param("encoder.pos");
        let pos = self.tape.slice_rows(pos, 0, frames)?;
        let mut x = self.tape.add(x, pos)?;
        for i in 0..n_layers {
            let prefix = format!("encoder.layers.{i}");
            let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
            let a = self.self_attention(&format!("{prefix}.self_attn"), h, AttnMask::Full)?;
            x = self.tape.add(x, a)?;
            let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
            let f = self.feed_forward(&format!("{prefix}.ff"), h)?;
            x = self.tape.add(x, f)?;
        }
        self.layer_norm("encoder.ln_final", x)
    }

    /// Final-layer decoder hidden states for `tokens`, placed after any
    /// rows already held by `cache`. Cross-attention reads the cache's
    /// projections when a cache is given and projects `z` otherwise.
    pub fn decode(
        &mut self,
        tokens: &[usize],
        z: Option<Var>,
        mut cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let offset = cache.as_ref().map_or(0, |c| c.len());
        let mut x = self.embed_tokens(tokens, offset)?;
        for i in 0..self.model.config.n_dec_layers {
            x = self.decoder_layer(i, x, z, cache.as_deref_mut())?;
        }
        if let Some(c) = cache {
            c.commit(tokens.len());
        }
        self.layer_norm("decoder.ln_final", x)
    }

    /// Decoder residual stream entering layer `upto`, without a cache.
    pub fn decode_prefix(&mut self, tokens: &[usize], z: Var, upto: usize) -> Result<Var> {
        let mut x = self.embed_tokens(tokens, 0)?;
        for i in 0..upto.min(self.model.config.n_dec_layers) {
            x = self.decoder_layer(i, x, Some(z), None)?;
        }
        Ok(x)
    }

    /// Final hidden states from the residual stream `x` entering layer `from`.
    pub fn decode_from(&mut self, x: Var, from: usize, z: Var) -> Result<Var> {
        let mut x = x;
        for i in from..self.model.config.n_dec_layers {
            x = self.decoder_layer(i, x, Some(z), None)?;
        }
        self.layer_norm("decoder.ln_final", x)
    }

    fn embed_tokens(&mut self, tokens: &[usize], offset: usize) -> Result<Var> {
        let capacity = self.model.config.max_tgt_tokens + 1;
        if tokens.is_empty() {
            return Err(ModelError::Contract(
                "decoder needs at least one token".into(),
            ));
        }
        if offset + tokens.len() > capacity {
            return Err(ModelError::Length {
                what: "decoder positions",
                got: offset + tokens.len(),
                max: capacity,
            });
        }
        let emb = self.param("decoder.token_embedding");
        let x = self.tape.embedding(emb, tokens)?;
        let pos = self.param("decoder.pos");
        let pos = self.tape.slice_rows(pos, offset, tokens.len())?;
        Ok(self.tape.add(x, pos)?)
    }

    fn decoder_layer(
        &mut self,
        i: usize,
        x: Var,
        z: Option<Var>,
        cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let prefix = format!("decoder.layers.{i}");
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let (a, kv) = match (cache, z) {
            (Some(c), _) => {
                let a = self.cached_self_attention(&format!("{prefix}.self_attn"), h, c, i)?;
                (a, self.cached_kv(c, CrossSlot::Layer(i))?)
            }
            (None, Some(z)) => {
                let a = self.self_attention(
                    &format!("{prefix}.self_attn"),
                    h,
                    AttnMask::Causal { offset: 0 },
                )?;
                (a, self.cross_kv(&format!("{prefix}.cross_attn"), z)?)
            }
            (None, None) => {
                return Err(ModelError::Contract(
                    "decoder needs an encoder output or a cache".into(),
                ))
            }
        };
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let a = self.cross_attention(&format!("{prefix}.cross_attn"), h, kv)?;
        let x = self.tape.add(x, a)?;
        let h = self.layer_norm(&format!("{prefix}.ln3"), x)?;
        let f = self.feed_forward(&format!("{prefix}.ff"), h)?;
        Ok(self.tape.add(x, f)?)
    }

    pub fn base_logits(&mut self, hidden: Var) -> Result<Var> {
        self.linear("base_proj", hidden)
    }

    /// Input to the per-head linears: the hidden state itself for the linear
    /// variant, or the shared block's output for the block variant. Every
    /// row is processed independently.
    pub fn medusa_hidden(&mut self, hidden: Var, cross: Cross) -> Result<Var> {
        use super::MedusaVariant::*;
        match self.model.config.variant {
            None => Err(ModelError::Contract("model has no Medusa heads".into())),
            MedusaLinear => Ok(hidden),
            MedusaBlock => {
                let prefix = "medusa.block";
                let h = self.layer_norm(&format!("{prefix}.ln1"), hidden)?;
                let a =
                    self.self_attention(&format!("{prefix}.self_attn"), h, AttnMask::SelfOnly)?;
                let x = self.tape.add(hidden, a)?;
                let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
                let kv =
                    self.cross_source(&format!("{prefix}.cross_attn"), cross, CrossSlot::Medusa)?;
                let a = self.cross_attention(&format!("{prefix}.cross_attn"), h, kv)?;
                let x = self.tape.add(x, a)?;
                let h = self.layer_norm(&format!("{prefix}.ln3"), x)?;
                let f = self.feed_forward(&format!("{prefix}.ff"), h)?;
                Ok(self.tape.add(x, f)?)
            }
        }
    }

    /// Logits of Medusa head `k` (1-based) for every row of `medusa_hidden`.
    pub fn head_logits(&mut self, medusa_hidden: Var, k: usize) -> Result<Var> {
        let cfg = &self.model.config;
        if k == 0 || k > cfg.k {
            return Err(ModelError::Contract(format!(
                "head {k} out of range 1..={}",
                cfg.k
            )));
        }
        let r = self.linear(&format!("medusa.heads.{k}"), medusa_hidden)?;
        let h = self.tape.add(medusa_hidden, r)?;
        self.linear("medusa.proj", h)
    }
}

#[derive(Clone, Copy)]
enum CrossSlot {
    Layer(usize),
    Medusa,
}
