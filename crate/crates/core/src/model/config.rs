use serde::{Deserialize, Serialize};

use super::{ModelError, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MedusaVariant {
    #[default]
    None,
    MedusaLinear,
    MedusaBlock,
}

impl std::str::FromStr for MedusaVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(MedusaVariant::None),
            "linear" | "medusa_linear" => Ok(MedusaVariant::MedusaLinear),
            "block" | "medusa_block" => Ok(MedusaVariant::MedusaBlock),
            other => Err(format!(
                "unknown variant {other:?} (expected none, linear or block)"
            )),
        }
    }
}

/// Architecture hyperparameters. Defaults are the toy configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_attn_heads: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub max_src_frames: usize,
    pub max_tgt_tokens: usize,
    /// Number of extra Medusa heads.
    pub k: usize,
    pub variant: MedusaVariant,
    /// Stride between encoder and decoder positional phases.
    pub frames_per_token: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_attn_heads: 4,
            d_ff: 128,
            d_feat: 16,
            max_src_frames: 384,
            max_tgt_tokens: 128,
            k: 4,
            variant: MedusaVariant::MedusaLinear,
            frames_per_token: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Base model without Medusa heads.
    pub fn base(&self) -> ModelConfig {
        ModelConfig {
            k: 0,
            variant: MedusaVariant::None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut errs = Vec::new();
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_attn_heads", self.n_attn_heads),
            ("d_ff", self.d_ff),
            ("d_feat", self.d_feat),
            ("max_src_frames", self.max_src_frames),
            ("max_tgt_tokens", self.max_tgt_tokens),
            ("frames_per_token", self.frames_per_token),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.n_attn_heads > 0 && self.d_model % self.n_attn_heads != 0 {
            errs.push(format!(
                "n_attn_heads ({}) must divide d_model ({})",
                self.n_attn_heads, self.d_model
            ));
        }
        if self.d_model % 2 != 0 {
            errs.push("d_model must be even".into());
        }
        if self.vocab_size <= PAD.max(BOS).max(EOS) + 1 {
            errs.push(format!(
                "vocab_size ({}) must exceed the special ids and leave room for ordinary tokens",
                self.vocab_size
            ));
        }
        match (self.variant, self.k) {
            (MedusaVariant::None, 0) => {}
            (MedusaVariant::None, k) => errs.push(format!("k is {k} but variant is none")),
            (_, 0) => errs.push(format!("variant {:?} needs k >= 1", self.variant)),
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(errs))
        }
    }
}
