//! Two-stage training: base pretraining, then Medusa heads against a frozen
//! copy of the base. Saves the checkpoint and the corpus it was trained on.
//!
//! `cargo run --release --example train_medusa -- [linear|block] [out.ckpt] [corpus_dir]`

use medusa::data::{generate_corpus, write_corpus, CorpusConfig};
use medusa::model::{save_checkpoint, MedusaVariant, ModelConfig};
use medusa::training::{train_two_stage, CropSchedule, SpliceConfig, TrainConfig, TwoStage};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let variant = match args.next().as_deref() {
        None | Some("linear") => MedusaVariant::MedusaLinear,
        Some("block") => MedusaVariant::MedusaBlock,
        Some(other) => return Err(format!("unknown variant {other}").into()),
    };
    let out = args.next().unwrap_or_else(|| "medusa.ckpt".into());
    let corpus_dir = args.next().unwrap_or_else(|| "small_corpus".into());

    let corpus = generate_corpus(&CorpusConfig {
        vocab_size: 32,
        min_tokens: 8,
        max_tokens: 24,
        ..CorpusConfig::default()
    })?;
    std::fs::create_dir_all(&corpus_dir)?;
    write_corpus(corpus_dir.as_ref(), &corpus)?;
    let config = ModelConfig {
        vocab_size: 32,
        d_model: 32,
        d_ff: 64,
        max_tgt_tokens: 32,
        max_src_frames: 96,
        k: 3,
        variant,
        ..ModelConfig::default()
    };
    let stage = |lr, steps, seed| TrainConfig {
        learning_rate: lr,
        max_steps: steps,
        eval_every: 200,
        crop: Some(CropSchedule::default()),
        splice: Some(SpliceConfig::default()),
        seed,
        ..TrainConfig::default()
    };
    let recipe = TwoStage {
        base: TrainConfig {
            aux_heads: 3,
            ..stage(2e-3, 1500, 0)
        },
        medusa: stage(1e-2, 1500, 1),
    };

    let (model, base, heads) = train_two_stage(
        &config,
        &corpus.train,
        &corpus.valid,
        &recipe,
        |stage, r| {
            if let Some(v) = r.valid_loss {
                println!(
                    "{stage:>6} step {:>4}  train {:.4}  valid {v:.4}",
                    r.step, r.train_loss
                );
            }
        },
    )?;
    println!(
        "base {:.1}s ({} steps), heads {:.1}s ({} steps)",
        base.seconds, base.steps, heads.seconds, heads.steps
    );
    save_checkpoint(&model, out.as_ref())?;
    println!("saved {out}, corpus in {corpus_dir}/");
    Ok(())
}
