//! Generates a synthetic corpus and writes it as JSON lines.
//!
//! `cargo run --release --example synthetic_corpus -- [out_dir]`

use medusa::data::{generate_corpus, read_corpus, write_corpus, CorpusConfig};
use medusa::evalbench::render;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "corpus".into());
    let config = CorpusConfig {
        min_tokens: 56,
        max_tokens: 96,
        eval_min_tokens: Some(8),
        eval_max_tokens: Some(80),
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config)?;
    std::fs::create_dir_all(&out)?;
    write_corpus(out.as_ref(), &corpus)?;
    assert_eq!(read_corpus(out.as_ref(), config.frames_per_token)?, corpus);

    for (name, split) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let lens: Vec<usize> = split.iter().map(|u| u.tokens.len()).collect();
        println!(
            "{name:>5}: {:>3} utterances, {}..={} tokens",
            split.len(),
            lens.iter().min().unwrap(),
            lens.iter().max().unwrap()
        );
    }
    let u = &corpus.test[0];
    let words = render(&u.tokens);
    println!(
        "{}: {} frames x {} features",
        u.id,
        u.features.rows(),
        u.features.cols()
    );
    println!("  {}", &words[..words.len().min(72)]);
    println!("written to {out}/");
    Ok(())
}
