//! Benchmarks greedy against Medusa decoding on a checkpoint and prints the
//! report plus per-length buckets as CSV.
//!
//! `cargo run --release --example speedup_bench -- medusa.ckpt corpus/test.jsonl [repeats]`

use medusa::data::read_utterances;
use medusa::decoding::{LengthPenalty, VerificationPolicy};
use medusa::evalbench::{bench, BenchOptions};
use medusa::model::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 2 {
        return Err("usage: speedup_bench checkpoint utterances.jsonl [repeats]".into());
    }
    let model = load_checkpoint(args[0].as_ref())?;
    let utts = read_utterances(args[1].as_ref(), Some(model.config().frames_per_token))?;
    let repeats = args.get(2).map(|r| r.parse()).transpose()?.unwrap_or(3);

    let options = BenchOptions {
        repeats,
        parallel: false,
    };
    let report = bench(
        &model,
        &utts,
        &VerificationPolicy::default(),
        &LengthPenalty::disabled(),
        &options,
    )?;
    print!("{}", report.to_text());
    println!();
    print!("{}", report.buckets_csv());
    Ok(())
}
