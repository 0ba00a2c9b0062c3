//! Error rates, speedup measurement and the head-count ablation.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Corpus, Utterance};
use crate::decoding::{self, DecodeError, DecodeResult, LengthPenalty, VerificationPolicy};
use crate::model::{MedusaVariant, Model, ModelConfig, BOS, EOS, FIRST_TOKEN, PAD};
use crate::training::{self, TrainError, TwoStage};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: EditOps) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`. Among optimal
/// alignments the backtrace prefers substitution (or match), then insertion,
/// then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    ops.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            ops.deletions += 1;
            i -= 1;
        }
    }
    ops
}

/// Display word for a token id: ordinary tokens become lowercase words in
/// bijective base 26 (`a`..`z`, `aa`, ...), special tokens bracketed names.
pub fn token_word(t: usize) -> String {
    match t {
        PAD => "<pad>".into(),
        BOS => "<s>".into(),
        EOS => "</s>".into(),
        _ => {
            let mut n = t - FIRST_TOKEN + 1;
            let mut letters = Vec::new();
            while n > 0 {
                n -= 1;
                letters.push(b'a' + (n % 26) as u8);
                n /= 26;
            }
            letters.reverse();
            String::from_utf8(letters).expect("ascii")
        }
    }
}

pub fn render(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| token_word(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A reference transcript with the id used in error messages.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub id: &'a str,
    pub text: &'a str,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub ops: EditOps,
    pub reference_units: usize,
}

fn corpus_rate<U: PartialEq>(
    refs: &[Reference],
    hyps: &[&str],
    units: impl Fn(&str) -> Vec<U>,
) -> Result<ErrorRate> {
    if refs.len() != hyps.len() {
        return Err(EvalError::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut ops = EditOps::default();
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let ru = units(r.text);
        if ru.is_empty() {
            return Err(EvalError::Contract(format!(
                "empty reference for utterance {}",
                r.id
            )));
        }
        total += ru.len();
        ops.add(edit_distance(&ru, &units(h)));
    }
    Ok(ErrorRate {
        rate: if total == 0 {
            0.0
        } else {
            ops.total() as f64 / total as f64
        },
        ops,
        reference_units: total,
    })
}

/// Corpus word error rate over whitespace-separated words.
pub fn wer(refs: &[Reference], hyps: &[&str]) -> Result<ErrorRate> {
    corpus_rate(refs, hyps, |s| {
        s.split_whitespace().map(str::to_owned).collect()
    })
}

/// Corpus character error rate; spaces count as characters.
pub fn cer(refs: &[Reference], hyps: &[&str]) -> Result<ErrorRate> {
    corpus_rate(refs, hyps, |s| s.chars().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wer: f64,
    pub cer: f64,
    pub n_utterances: usize,
    /// Word-level edit operations.
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

pub fn metric_report(refs: &[Reference], hyps: &[&str]) -> Result<MetricReport> {
    let w = wer(refs, hyps)?;
    let c = cer(refs, hyps)?;
    Ok(MetricReport {
        wer: w.rate,
        cer: c.rate,
        n_utterances: refs.len(),
        substitutions: w.ops.substitutions,
        insertions: w.ops.insertions,
        deletions: w.ops.deletions,
    })
}

/// Scores token transcripts against utterance references.
pub fn score_tokens(utts: &[Utterance], hyps: &[Vec<usize>]) -> Result<MetricReport> {
    let ref_text: Vec<String> = utts.iter().map(|u| render(&u.tokens)).collect();
    let hyp_text: Vec<String> = hyps.iter().map(|h| render(h)).collect();
    let refs: Vec<Reference> = utts
        .iter()
        .zip(&ref_text)
        .map(|(u, t)| Reference { id: &u.id, text: t })
        .collect();
    let hyps: Vec<&str> = hyp_text.iter().map(String::as_str).collect();
    metric_report(&refs, &hyps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub min_len: usize,
    pub max_len: usize,
    pub mean_speedup: f64,
    pub n: usize,
}

/// `[1-16], [17-32], [33-64], [65-128], [129-max]`, clipped to `max_len`.
pub fn bucket_ranges(max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut lo = 1;
    for hi in [16, 32, 64, 128, usize::MAX] {
        if lo > max_len {
            break;
        }
        out.push((lo, hi.min(max_len)));
        lo = hi.saturating_add(1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceBench {
    pub id: String,
    pub reference_len: usize,
    pub greedy_passes: usize,
    pub medusa_passes: usize,
    pub greedy_wall: f64,
    pub medusa_wall: f64,
    pub pass_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline_wall: f64,
    pub medusa_wall: f64,
    pub wall_speedup: f64,
    pub pass_speedup: f64,
    pub buckets: Vec<Bucket>,
    pub greedy_metrics: MetricReport,
    pub medusa_metrics: MetricReport,
    pub utterances: Vec<UtteranceBench>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    /// Timed runs per utterance after one untimed warm-up.
    pub repeats: usize,
    /// Spread utterances over threads. Wall times are then not meaningful.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repeats: 5,
            parallel: false,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn timed(
    repeats: usize,
    mut run: impl FnMut() -> Result<DecodeResult>,
) -> Result<(DecodeResult, f64)> {
    let first = run()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let wall = if times.is_empty() {
        first.wall_time
    } else {
        median(times)
    };
    Ok((first, wall))
}

struct Pair {
    greedy: DecodeResult,
    medusa: DecodeResult,
    greedy_wall: f64,
    medusa_wall: f64,
}

fn bench_one(
    model: &Model,
    u: &Utterance,
    policy: &VerificationPolicy,
    penalty: &LengthPenalty,
    repeats: usize,
) -> Result<Pair> {
    let max_len = model.config().max_tgt_tokens;
    let (greedy, greedy_wall) = timed(repeats, || {
        Ok(decoding::greedy_decode(
            model,
            &u.features,
            max_len,
            penalty,
        )?)
    })?;
    let (medusa, medusa_wall) = timed(repeats, || {
        Ok(decoding::medusa_decode(
            model,
            &u.features,
            max_len,
            policy,
            penalty,
        )?)
    })?;
    Ok(Pair {
        greedy,
        medusa,
        greedy_wall,
        medusa_wall,
    })
}

/// Greedy and Medusa decoding over the same utterances.
pub fn bench(
    model: &Model,
    utts: &[Utterance],
    policy: &VerificationPolicy,
    penalty: &LengthPenalty,
    options: &BenchOptions,
) -> Result<SpeedupReport> {
    if utts.is_empty() {
        return Err(EvalError::Contract(
            "bench needs at least one utterance".into(),
        ));
    }
    let pairs: Vec<Pair> = if options.parallel {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let chunk = utts.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = utts
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|u| bench_one(model, u, policy, penalty, options.repeats))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("bench worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    } else {
        utts.iter()
            .map(|u| bench_one(model, u, policy, penalty, options.repeats))
            .collect::<Result<_>>()?
    };

    let mut per_utt = Vec::with_capacity(utts.len());
    for (u, p) in utts.iter().zip(&pairs) {
        per_utt.push(UtteranceBench {
            id: u.id.clone(),
            reference_len: u.tokens.len(),
            greedy_passes: p.greedy.n_decoder_forward_passes,
            medusa_passes: p.medusa.n_decoder_forward_passes,
            greedy_wall: p.greedy_wall,
            medusa_wall: p.medusa_wall,
            pass_speedup: p.greedy.n_decoder_forward_passes as f64
                / p.medusa.n_decoder_forward_passes as f64,
        });
    }
    let gp: usize = per_utt.iter().map(|b| b.greedy_passes).sum();
    let mp: usize = per_utt.iter().map(|b| b.medusa_passes).sum();
    let gw: f64 = per_utt.iter().map(|b| b.greedy_wall).sum();
    let mw: f64 = per_utt.iter().map(|b| b.medusa_wall).sum();

    let ranges = bucket_ranges(model.config().max_tgt_tokens);
    let mut buckets: Vec<Bucket> = ranges
        .iter()
        .map(|&(min_len, max_len)| Bucket {
            min_len,
            max_len,
            mean_speedup: 0.0,
            n: 0,
        })
        .collect();
    for b in &per_utt {
        let i = ranges
            .iter()
            .position(|&(lo, hi)| (lo..=hi).contains(&b.reference_len))
            .unwrap_or(ranges.len() - 1);
        buckets[i].mean_speedup += b.pass_speedup;
        buckets[i].n += 1;
    }
    for b in &mut buckets {
        if b.n > 0 {
            b.mean_speedup /= b.n as f64;
        }
    }

    let greedy_hyps: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| p.greedy.transcript().to_vec())
        .collect();
    let medusa_hyps: Vec<Vec<usize>> = pairs
        .iter()
        .map(|p| p.medusa.transcript().to_vec())
        .collect();
    Ok(SpeedupReport {
        baseline_wall: gw,
        medusa_wall: mw,
        wall_speedup: gw / mw,
        pass_speedup: gp as f64 / mp as f64,
        buckets,
        greedy_metrics: score_tokens(utts, &greedy_hyps)?,
        medusa_metrics: score_tokens(utts, &medusa_hyps)?,
        utterances: per_utt,
    })
}

impl SpeedupReport {
    /// Non-empty buckets, shortest first.
    pub fn filled_buckets(&self) -> Vec<&Bucket> {
        self.buckets.iter().filter(|b| b.n > 0).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pass speedup   {:.3}", self.pass_speedup);
        let _ = writeln!(
            s,
            "wall speedup   {:.3}  (greedy {:.3}s, medusa {:.3}s)",
            self.wall_speedup, self.baseline_wall, self.medusa_wall
        );
        let _ = writeln!(
            s,
            "greedy WER {:.4} CER {:.4} | medusa WER {:.4} CER {:.4}",
            self.greedy_metrics.wer,
            self.greedy_metrics.cer,
            self.medusa_metrics.wer,
            self.medusa_metrics.cer
        );
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>12} {:>5}",
            "min_len", "max_len", "mean_speedup", "n"
        );
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "{:>8} {:>8} {:>12.3} {:>5}",
                b.min_len, b.max_len, b.mean_speedup, b.n
            );
        }
        s
    }

    pub fn buckets_csv(&self) -> String {
        let mut s = String::from("min_len,max_len,mean_speedup,n\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{}", b.min_len, b.max_len, b.mean_speedup, b.n);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub wer: f64,
    pub cer: f64,
    pub pass_speedup: f64,
    pub wall_speedup: f64,
}

/// Trains one `MedusaLinear` model per head count from a shared pretrained
/// base, each with the same fine-tuning budget and seed, and benchmarks it
/// on the test split. Rows are sorted by K.
pub fn ablate_heads(
    base_config: &ModelConfig,
    ks: &[usize],
    corpus: &Corpus,
    recipe: &TwoStage,
    policy: &VerificationPolicy,
    penalty: &LengthPenalty,
    options: &BenchOptions,
) -> Result<Vec<AblationRow>> {
    if let Some(&bad) = ks.iter().find(|&&k| k == 0) {
        return Err(EvalError::Contract(format!(
            "head counts must be at least 1, got {bad}"
        )));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    let (base, _) = training::pretrain_base(
        base_config,
        &corpus.train,
        &corpus.valid,
        &recipe.base,
        |_| {},
    )?;
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let (model, _) = training::finetune_medusa(
            &base,
            MedusaVariant::MedusaLinear,
            k,
            &corpus.train,
            &corpus.valid,
            &recipe.medusa,
            |_| {},
        )?;
        let r = bench(&model, &corpus.test, policy, penalty, options)?;
        rows.push(AblationRow {
            k,
            wer: r.medusa_metrics.wer,
            cer: r.medusa_metrics.cer,
            pass_speedup: r.pass_speedup,
            wall_speedup: r.wall_speedup,
        });
    }
    Ok(rows)
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:>3} {:>8} {:>8} {:>13} {:>13}\n",
        "K", "WER", "CER", "pass_speedup", "wall_speedup"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>3} {:>8.4} {:>8.4} {:>13.3} {:>13.3}",
            r.k, r.wer, r.cer, r.pass_speedup, r.wall_speedup
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,wer,cer,pass_speedup,wall_speedup\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.k, r.wer, r.cer, r.pass_speedup, r.wall_speedup
        );
    }
    s
}
