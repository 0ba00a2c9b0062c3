//! Toy encoder-decoder transformer with optional Medusa heads.
//!
//! Pre-LN blocks, GELU feed-forward layers and learned absolute positions.
//! Positional tables start as sinusoids; the decoder table advances
//! `frames_per_token` encoder phases per token so that decoder position `p`
//! initially lines up with encoder frame `p * frames_per_token`.

mod cache;
pub mod checkpoint;
mod config;
mod graph;
mod params;

use thiserror::Error;

use crate::numerics::{kernels, NumericsError, Tensor};

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{MedusaVariant, ModelConfig};
pub use graph::{Cross, Graph};
pub use params::{sinusoid, FreezeMask, Params};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Smallest id of an ordinary (non-special) token.
pub const FIRST_TOKEN: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{what} {got} exceeds limit {max}")]
    Length {
        what: &'static str,
        got: usize,
        max: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Encoder embeddings `z`, `frames × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z: Tensor,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.z.rows()
    }
}

/// Logits of the base head (row 0) and Medusa heads 1..=K.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDistributions {
    pub logits: Tensor,
}

impl HeadDistributions {
    pub fn rows(&self) -> usize {
        self.logits.rows()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.logits.row(k)
    }

    pub fn probs(&self, k: usize) -> Vec<f64> {
        kernels::softmax(self.row(k))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

impl Model {
    /// Deterministic initialization from `config.seed`. Medusa head linears
    /// start at zero and the Medusa projection as a copy of the base one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = params::init_base(&config);
        params::init_medusa(&mut params, &config);
        Ok(Model { config, params })
    }

    /// Builds a model from existing parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let mut expected = params::init_base(&config);
        params::init_medusa(&mut expected, &config);
        if expected.len() != params.len() {
            return Err(ModelError::Integrity(format!(
                "config implies {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Integrity(format!(
                        "{name}: shape {:?}, config implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Integrity(format!("missing parameter {name}"))),
            }
        }
        Ok(Model { config, params })
    }

    /// Copy of this base model with freshly initialized Medusa parameters.
    pub fn attach_medusa(&self, variant: MedusaVariant, k: usize) -> Result<Self> {
        if self.config.variant != MedusaVariant::None {
            return Err(ModelError::Contract(
                "model already has Medusa heads".into(),
            ));
        }
        let config = ModelConfig {
            variant,
            k,
            ..self.config.clone()
        };
        config.validate()?;
        let mut params = self.params.clone();
        params::init_medusa(&mut params, &config);
        Ok(Model { config, params })
    }

    /// The base model alone, with Medusa parameters removed.
    pub fn base(&self) -> Model {
        let config = self.config.base();
        let mut params = Params::new();
        for (name, t) in self.params.iter() {
            if !name.starts_with("medusa.") {
                params.insert(name, t.clone());
            }
        }
        Model { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask::for_variant(&self.params, &self.config)
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncoderOutput> {
        if features.is_empty() {
            return Err(ModelError::Length {
                what: "source frames",
                got: 0,
                max: self.config.max_src_frames,
            });
        }
        let mut g = Graph::inference(self);
        let z = g.encode(features)?;
        Ok(EncoderOutput {
            z: g.tape.to_tensor(z),
        })
    }

    /// Cache holding the cross-attention projections of `z`.
    pub fn new_cache(&self, z: &EncoderOutput) -> Result<KvCache> {
        let mut g = Graph::inference(self);
        let zv = g.input(&z.z);
        let mut cross = Vec::with_capacity(self.config.n_dec_layers);
        for i in 0..self.config.n_dec_layers {
            let (k, v) = g.cross_kv(&format!("decoder.layers.{i}.cross_attn"), zv)?;
            cross.push((g.tape.value(k).to_vec(), g.tape.value(v).to_vec()));
        }
        let medusa = if self.config.variant == MedusaVariant::MedusaBlock {
            let (k, v) = g.cross_kv("medusa.block.cross_attn", zv)?;
            Some((g.tape.value(k).to_vec(), g.tape.value(v).to_vec()))
        } else {
            None
        };
        Ok(KvCache::new(self.config.d_model, z.frames(), cross, medusa))
    }

    /// Final hidden states for `tokens`. With a cache, only the new suffix is
    /// processed and its keys and values are appended.
    pub fn decoder_hidden(
        &self,
        tokens: &[usize],
        z: &EncoderOutput,
        cache: Option<&mut KvCache>,
    ) -> Result<Tensor> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(NumericsError::Index {
                op: "decoder_hidden",
                index: bad,
                extent: self.config.vocab_size,
            }
            .into());
        }
        let mut g = Graph::inference(self);
        let h = match cache {
            Some(c) => {
                if c.src_rows() != z.frames() {
                    return Err(ModelError::Contract(
                        "cache was built for a different encoder output".into(),
                    ));
                }
                g.decode(tokens, None, Some(c))?
            }
            None => {
                let zv = g.input(&z.z);
                g.decode(tokens, Some(zv), None)?
            }
        };
        Ok(g.tape.to_tensor(h))
    }

    /// Base-head logits for every row of `hidden`.
    pub fn base_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(self);
        let h = g.input(hidden);
        let l = g.base_logits(h)?;
        Ok(g.tape.to_tensor(l))
    }

    /// All K+1 head distributions for one final hidden state.
    pub fn medusa_forward(
        &self,
        hidden_last: &[f64],
        z: &EncoderOutput,
    ) -> Result<HeadDistributions> {
        let mut g = Graph::inference(self);
        let zv = g.input(&z.z);
        self.heads_on(&mut g, hidden_last, Cross::Encoder(zv))
    }

    /// Like [`Model::medusa_forward`], reusing the cross-attention
    /// projections stored in `cache`.
    pub fn medusa_forward_cached(
        &self,
        hidden_last: &[f64],
        cache: &KvCache,
    ) -> Result<HeadDistributions> {
        let mut g = Graph::inference(self);
        self.heads_on(&mut g, hidden_last, Cross::Cached(cache))
    }

    fn heads_on<'m>(
        &'m self,
        g: &mut Graph<'m>,
        hidden_last: &[f64],
        cross: Cross,
    ) -> Result<HeadDistributions> {
        let d = self.config.d_model;
        if hidden_last.len() != d {
            return Err(ModelError::Shape(format!(
                "hidden state has {} values, expected {d}",
                hidden_last.len()
            )));
        }
        let h = g.input(&Tensor::matrix(1, d, hidden_last.to_vec())?);
        let mut rows = vec![g.base_logits(h)?];
        if self.config.k > 0 {
            let mh = g.medusa_hidden(h, cross)?;
            for k in 1..=self.config.k {
                rows.push(g.head_logits(mh, k)?);
            }
        }
        let all = g.tape.concat_rows(&rows)?;
        Ok(HeadDistributions {
            logits: g.tape.to_tensor(all),
        })
    }
}
