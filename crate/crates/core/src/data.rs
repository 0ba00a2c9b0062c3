//! Synthetic speech-like corpus: each token has a fixed prototype feature
//! vector, repeated `frames_per_token` times with Gaussian noise.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FIRST_TOKEN;
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: record {record}: {msg}")]
    Parse {
        path: PathBuf,
        record: usize,
        msg: String,
    },
    #[error("{path}: record {record}: {msg}")]
    Integrity {
        path: PathBuf,
        record: usize,
        msg: String,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Length range for the valid and test splits; the train range when absent.
    pub eval_min_tokens: Option<usize>,
    pub eval_max_tokens: Option<usize>,
    pub frames_per_token: usize,
    pub d_feat: usize,
    pub vocab_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_utterances: 64,
            min_tokens: 8,
            max_tokens: 96,
            eval_min_tokens: None,
            eval_max_tokens: None,
            frames_per_token: 3,
            d_feat: 16,
            vocab_size: 64,
            noise_std: 0.1,
            seed: 0,
            train_ratio: 0.5,
            valid_ratio: 0.125,
            test_ratio: 0.375,
        }
    }
}

impl CorpusConfig {
    pub fn eval_range(&self) -> (usize, usize) {
        (
            self.eval_min_tokens.unwrap_or(self.min_tokens),
            self.eval_max_tokens.unwrap_or(self.max_tokens),
        )
    }

    /// `(train, valid, test)` sizes. Valid and test are rounded; train gets
    /// the remainder.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_utterances as f64;
        let valid = (n * self.valid_ratio).round() as usize;
        let test = ((n * self.test_ratio).round() as usize).min(self.n_utterances - valid);
        (self.n_utterances - valid - test, valid, test)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.min_tokens == 0 {
            errs.push("min_tokens must be positive".to_string());
        }
        if self.min_tokens > self.max_tokens {
            errs.push(format!(
                "min_tokens ({}) exceeds max_tokens ({})",
                self.min_tokens, self.max_tokens
            ));
        }
        let (lo, hi) = self.eval_range();
        if lo == 0 || lo > hi {
            errs.push(format!("invalid eval token range {lo}..={hi}"));
        }
        if self.frames_per_token == 0 {
            errs.push("frames_per_token must be positive".into());
        }
        if self.d_feat == 0 {
            errs.push("d_feat must be positive".into());
        }
        if self.vocab_size <= FIRST_TOKEN {
            errs.push(format!(
                "vocab_size ({}) leaves no ordinary tokens",
                self.vocab_size
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            errs.push(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            ));
        }
        let ratios = [self.train_ratio, self.valid_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(*r >= 0.0)) {
            errs.push("split ratios must be non-negative".into());
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            errs.push(format!("split ratios sum to {sum}, not 1"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(DataError::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Reference tokens, without BOS or EOS.
    pub tokens: Vec<usize>,
    /// `frames × d_feat`.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Per-token prototype vectors, `vocab_size × d_feat`.
pub fn prototypes(config: &CorpusConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.vocab_size)
        .map(|_| {
            (0..config.d_feat)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect()
}

/// Features for `tokens`, rounded to `f32` precision so that stored
/// corpora round-trip exactly.
pub fn synthesize(
    tokens: &[usize],
    protos: &[Vec<f64>],
    frames_per_token: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let d = protos[0].len();
    let noise = Normal::new(0.0, noise_std).expect("noise_std validated");
    let mut data = Vec::with_capacity(tokens.len() * frames_per_token * d);
    for &t in tokens {
        for _ in 0..frames_per_token {
            for &p in &protos[t] {
                let n: f64 = if noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push((p + n) as f32 as f64);
            }
        }
    }
    Tensor::matrix(tokens.len() * frames_per_token, d, data).expect("non-empty utterance")
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let protos = prototypes(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (n_train, n_valid, n_test) = config.split_sizes();
    let mut make = |split: &str, count: usize, (lo, hi): (usize, usize)| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let len = rng.random_range(lo..=hi);
                let tokens: Vec<usize> = (0..len)
                    .map(|_| rng.random_range(FIRST_TOKEN..config.vocab_size))
                    .collect();
                let features = synthesize(
                    &tokens,
                    &protos,
                    config.frames_per_token,
                    config.noise_std,
                    &mut rng,
                );
                Utterance {
                    id: format!("{split}-{i:04}"),
                    tokens,
                    features,
                }
            })
            .collect()
    };
    let train = make("train", n_train, (config.min_tokens, config.max_tokens));
    let valid = make("valid", n_valid, config.eval_range());
    let test = make("test", n_test, config.eval_range());
    Ok(Corpus { train, valid, test })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default)]
    tokens: Vec<usize>,
    features: Vec<Vec<f32>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for u in utts {
        let rec = Record {
            id: u.id.clone(),
            tokens: u.tokens.clone(),
            features: (0..u.features.rows())
                .map(|r| u.features.row(r).iter().map(|&v| v as f32).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a JSON-lines file. With `frames_per_token`, every record must have
/// exactly that many frames per reference token.
pub fn read_utterances(path: &Path, frames_per_token: Option<usize>) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            record: i,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let frames = rec.features.len();
        let d = rec.features.first().map_or(0, Vec::len);
        if frames == 0 || d == 0 || rec.features.iter().any(|r| r.len() != d) {
            return Err(parse(
                "features must be a non-empty rectangular matrix".into(),
            ));
        }
        if let Some(fpt) = frames_per_token {
            if frames != fpt * rec.tokens.len() {
                return Err(DataError::Integrity {
                    path: path.to_path_buf(),
                    record: i,
                    msg: format!(
                        "{frames} frames for {} tokens at {fpt} frames per token",
                        rec.tokens.len()
                    ),
                });
            }
        }
        let data = rec.features.iter().flatten().map(|&v| v as f64).collect();
        out.push(Utterance {
            id: rec.id,
            tokens: rec.tokens,
            features: Tensor::matrix(frames, d, data).map_err(|e| parse(e.to_string()))?,
        });
    }
    Ok(out)
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in SPLITS {
        write_utterances(
            &dir.join(format!("{name}.jsonl")),
            corpus.split(name).unwrap(),
        )?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path, frames_per_token: usize) -> Result<Corpus> {
    let read =
        |name: &str| read_utterances(&dir.join(format!("{name}.jsonl")), Some(frames_per_token));
    Ok(Corpus {
        train: read("train")?,
        valid: read("valid")?,
        test: read("test")?,
    })
}
