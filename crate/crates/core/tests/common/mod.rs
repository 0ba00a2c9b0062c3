#![allow(dead_code)]

pub mod oracles;

use medusa::model::{MedusaVariant, Model, ModelConfig};
use medusa::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small(variant: MedusaVariant, k: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_attn_heads: 4,
        d_ff: 24,
        d_feat: 6,
        max_src_frames: 90,
        max_tgt_tokens: 30,
        k,
        variant,
        frames_per_token: 3,
        seed,
    }
}

pub fn features(frames: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        frames,
        d,
        (0..frames * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Replaces every Medusa parameter with uniform noise of the given scale,
/// so that heads propose something other than the base argmax.
pub fn scramble_medusa(model: &mut Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("medusa."))
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let t = model.params_mut().get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Model with Medusa heads that carry random (non-zero) weights.
pub fn random_medusa(variant: MedusaVariant, k: usize, seed: u64) -> Model {
    let mut m = Model::new(small(variant, k, seed)).unwrap();
    scramble_medusa(&mut m, 0.5, seed ^ 0xabc);
    m
}
