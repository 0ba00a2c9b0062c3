//! Transcribes utterances with a trained base model, drops the 5% whose
//! length disagrees most with the audio, and fine-tunes heads on the rest.
//!
//! `cargo run --release --example pseudo_label`

use medusa::data::{generate_corpus, CorpusConfig};
use medusa::evalbench::score_tokens;
use medusa::model::{MedusaVariant, ModelConfig};
use medusa::training::{
    finetune_medusa, pretrain_base, pseudo_label, CropSchedule, SpliceConfig, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = generate_corpus(&CorpusConfig {
        n_utterances: 120,
        vocab_size: 24,
        min_tokens: 6,
        max_tokens: 16,
        train_ratio: 0.25,
        valid_ratio: 0.1,
        test_ratio: 0.65,
        ..CorpusConfig::default()
    })?;
    let config = ModelConfig {
        vocab_size: 24,
        d_model: 32,
        d_ff: 64,
        max_tgt_tokens: 24,
        max_src_frames: 64,
        ..ModelConfig::default()
    };
    let stage = |lr, steps| TrainConfig {
        learning_rate: lr,
        max_steps: steps,
        eval_every: 0,
        crop: Some(CropSchedule::default()),
        splice: Some(SpliceConfig::default()),
        ..TrainConfig::default()
    };
    let (base, _) = pretrain_base(
        &config,
        &corpus.train,
        &corpus.valid,
        &stage(2e-3, 800),
        |_| {},
    )?;

    // Treat the test split as unlabeled audio.
    let set = pseudo_label(&base, &corpus.test, config.max_tgt_tokens)?;
    println!("kept {} of {}", set.kept().count(), set.items.len());
    for p in set.dropped() {
        println!(
            "  dropped {} (expected {:.1} tokens, got {})",
            p.id,
            p.expected_len,
            p.tokens.len()
        );
    }
    let hyps: Vec<Vec<usize>> = set.items.iter().map(|p| p.tokens.clone()).collect();
    println!(
        "pseudo-label WER against hidden references: {:.4}",
        score_tokens(&corpus.test, &hyps)?.wer
    );

    let labelled = set.to_utterances(&corpus.test);
    let (model, report) = finetune_medusa(
        &base,
        MedusaVariant::MedusaLinear,
        3,
        &labelled,
        &[],
        &stage(1e-2, 400),
        |_| {},
    )?;
    println!(
        "fine-tuned {} heads on {} pseudo-labelled utterances in {:.1}s",
        model.config().k,
        labelled.len(),
        report.seconds
    );
    Ok(())
}
