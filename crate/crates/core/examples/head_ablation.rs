//! Trains one base model, fine-tunes heads for several K and tabulates
//! accuracy and speedup.
//!
//! `cargo run --release --example head_ablation -- [k,k,...]`

use medusa::data::{generate_corpus, CorpusConfig};
use medusa::decoding::{LengthPenalty, VerificationPolicy};
use medusa::evalbench::{ablate_heads, ablation_text, BenchOptions};
use medusa::model::ModelConfig;
use medusa::training::{CropSchedule, SpliceConfig, TrainConfig, TwoStage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ks: Vec<usize> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "1,2,4".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;

    let corpus = generate_corpus(&CorpusConfig {
        vocab_size: 24,
        min_tokens: 8,
        max_tokens: 24,
        ..CorpusConfig::default()
    })?;
    let config = ModelConfig {
        vocab_size: 24,
        d_model: 32,
        d_ff: 64,
        max_tgt_tokens: 32,
        max_src_frames: 96,
        ..ModelConfig::default()
    };
    let stage = |lr, steps, seed| TrainConfig {
        learning_rate: lr,
        max_steps: steps,
        eval_every: 0,
        crop: Some(CropSchedule::default()),
        splice: Some(SpliceConfig::default()),
        seed,
        ..TrainConfig::default()
    };
    let recipe = TwoStage {
        base: TrainConfig {
            aux_heads: 4,
            ..stage(2e-3, 1200, 0)
        },
        medusa: stage(1e-2, 800, 1),
    };
    let rows = ablate_heads(
        &config,
        &ks,
        &corpus,
        &recipe,
        &VerificationPolicy::default(),
        &LengthPenalty::disabled(),
        &BenchOptions {
            repeats: 1,
            parallel: false,
        },
    )?;
    print!("{}", ablation_text(&rows));
    Ok(())
}
