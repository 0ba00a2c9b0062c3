//! Greedy, Medusa (exact-match and typical acceptance) and assisted decoding
//! of the same utterances, with forward-pass accounting.
//!
//! `cargo run --release --example decode_modes -- medusa.ckpt corpus/test.jsonl`
//! (checkpoint from `train_medusa`, utterances from `synthetic_corpus` with a
//! matching vocabulary). Without arguments a small model is trained first.

use medusa::data::{generate_corpus, read_utterances, CorpusConfig, Utterance};
use medusa::decoding::{
    assisted_decode, greedy_decode, medusa_decode, LengthPenalty, VerificationPolicy,
};
use medusa::evalbench::render;
use medusa::model::{load_checkpoint, Model, ModelConfig};
use medusa::training::{train_two_stage, CropSchedule, SpliceConfig, TrainConfig, TwoStage};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn quick_model() -> Res<(Model, Vec<Utterance>)> {
    let corpus = generate_corpus(&CorpusConfig {
        vocab_size: 24,
        min_tokens: 6,
        max_tokens: 16,
        ..CorpusConfig::default()
    })?;
    let config = ModelConfig {
        vocab_size: 24,
        d_model: 32,
        d_ff: 64,
        max_tgt_tokens: 24,
        max_src_frames: 64,
        k: 3,
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
    let recipe = TwoStage {
        base: TrainConfig {
            aux_heads: 3,
            ..stage(2e-3, 1200)
        },
        medusa: stage(1e-2, 800),
    };
    let (m, _, _) = train_two_stage(&config, &corpus.train, &corpus.valid, &recipe, |_, _| {})?;
    Ok((m, corpus.test))
}

fn main() -> Res<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, utts) = match args.as_slice() {
        [ckpt, input] => (
            load_checkpoint(ckpt.as_ref())?,
            read_utterances(input.as_ref(), None)?,
        ),
        [] => quick_model()?,
        _ => return Err("usage: decode_modes [checkpoint utterances.jsonl]".into()),
    };
    let max_len = model.config().max_tgt_tokens;
    let none = LengthPenalty::disabled();
    let assistant = model.base();

    for u in utts.iter().take(4) {
        let greedy = greedy_decode(&model, &u.features, max_len, &none)?;
        let exact = medusa_decode(
            &model,
            &u.features,
            max_len,
            &VerificationPolicy::exact_match(),
            &none,
        )?;
        let typical = medusa_decode(
            &model,
            &u.features,
            max_len,
            &VerificationPolicy::default(),
            &none,
        )?;
        let assisted = assisted_decode(&model, &assistant, &u.features, max_len, 4)?;
        assert_eq!(greedy.tokens, exact.tokens);
        assert_eq!(greedy.tokens, assisted.tokens);

        println!("{} ({} reference tokens)", u.id, u.tokens.len());
        println!("  reference  {}", render(&u.tokens));
        for (name, r) in [
            ("greedy", &greedy),
            ("exact", &exact),
            ("typical", &typical),
            ("assisted", &assisted),
        ] {
            println!(
                "  {name:<9}  passes {:>3}  iterations {:>3}  {}",
                r.n_decoder_forward_passes,
                r.n_iterations,
                render(r.transcript())
            );
        }
        println!(
            "  accepted per iteration (typical): {:?}",
            typical.accepted_per_iteration
        );
    }
    Ok(())
}
