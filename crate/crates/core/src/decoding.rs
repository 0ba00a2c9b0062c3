//! Greedy, Medusa and assisted decoding with forward-pass accounting.
//!
//! A [`Session`] holds the encoder output, the KV cache and the tokens
//! emitted so far. Between iterations the cache covers every committed
//! position except the last one (the pending token), which the next
//! forward pass feeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderOutput, KvCache, Model, ModelError, BOS, EOS};
use crate::numerics::{self, kernels, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = DecodeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptMode {
    #[default]
    Typical,
    ExactMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationPolicy {
    pub epsilon: f64,
    pub alpha: f64,
    pub mode: AcceptMode,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        VerificationPolicy {
            epsilon: 0.09,
            alpha: 0.3,
            mode: AcceptMode::Typical,
        }
    }
}

impl VerificationPolicy {
    pub fn exact_match() -> Self {
        VerificationPolicy {
            mode: AcceptMode::ExactMatch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(DecodeError::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(DecodeError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthPenalty {
    pub enabled: bool,
    pub start_index: usize,
    pub factor: f64,
}

impl Default for LengthPenalty {
    fn default() -> Self {
        LengthPenalty {
            enabled: false,
            start_index: 140,
            factor: 1.01,
        }
    }
}

impl LengthPenalty {
    pub fn new(start_index: usize, factor: f64) -> Result<Self> {
        let p = LengthPenalty {
            enabled: true,
            start_index,
            factor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.factor > 1.0) {
            return Err(DecodeError::Config(format!(
                "length penalty factor must exceed 1, got {}",
                self.factor
            )));
        }
        Ok(())
    }
}

/// Raises the EOS logit by `(position - start + 1) * ln(factor)` once
/// `position` reaches the start index.
pub fn apply_length_penalty(logits: &mut [f64], position: usize, penalty: &LengthPenalty) {
    if penalty.enabled && position >= penalty.start_index && EOS < logits.len() {
        logits[EOS] += (position - penalty.start_index + 1) as f64 * penalty.factor.ln();
    }
}

/// `exp(-H(p0))`, in `(0, 1]`.
pub fn entropy_exponent(p0: &[f64]) -> Result<f64> {
    Ok((-numerics::entropy(p0)?).exp())
}

/// `min(epsilon, alpha * exp(-H(p0)))`.
pub fn acceptance_threshold(p0: &[f64], policy: &VerificationPolicy) -> Result<f64> {
    Ok(policy.epsilon.min(policy.alpha * entropy_exponent(p0)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Emitted tokens, BOS excluded, EOS included when produced.
    pub tokens: Vec<usize>,
    pub n_iterations: usize,
    pub n_decoder_forward_passes: usize,
    /// Draft-model passes; zero except for assisted decoding.
    pub n_assistant_forward_passes: usize,
    pub accepted_per_iteration: Vec<usize>,
    /// Seconds.
    pub wall_time: f64,
}

impl DecodeResult {
    /// Tokens with a trailing EOS removed.
    pub fn transcript(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Decoding state for one utterance.
pub struct Session<'m> {
    model: &'m Model,
    z: EncoderOutput,
    cache: KvCache,
    tokens: Vec<usize>,
    passes: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, features: &Tensor) -> Result<Self> {
        let z = model.encode(features)?;
        let cache = model.new_cache(&z)?;
        Ok(Session {
            model,
            z,
            cache,
            tokens: Vec::new(),
            passes: 0,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn encoder_output(&self) -> &EncoderOutput {
        &self.z
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Decoder forward passes run so far.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    fn committed(&self) -> Vec<usize> {
        let mut all = Vec::with_capacity(self.tokens.len() + 1);
        all.push(BOS);
        all.extend_from_slice(&self.tokens);
        all
    }

    /// Feeds every committed token the cache has not seen yet and returns
    /// the hidden state of the last one.
    fn feed_pending(&mut self) -> Result<Vec<f64>> {
        let committed = self.committed();
        let h = self.forward(&committed[self.cache.len()..])?;
        Ok(h.row(h.rows() - 1).to_vec())
    }

    fn forward(&mut self, tokens: &[usize]) -> Result<Tensor> {
        self.passes += 1;
        Ok(self
            .model
            .decoder_hidden(tokens, &self.z, Some(&mut self.cache))?)
    }

    fn rewind_to_pending(&mut self) {
        self.cache.truncate(self.tokens.len());
    }
}

fn penalized_argmax(row: &[f64], position: usize, penalty: &LengthPenalty) -> usize {
    let mut logits = row.to_vec();
    apply_length_penalty(&mut logits, position, penalty);
    kernels::argmax(&logits)
}

fn check_max_len(model: &Model, max_len: usize) -> Result<()> {
    let limit = model.config().max_tgt_tokens;
    if max_len == 0 || max_len > limit {
        return Err(ModelError::Length {
            what: "max_len",
            got: max_len,
            max: limit,
        }
        .into());
    }
    Ok(())
}

/// One greedy step: a single decoder pass producing one token.
pub fn greedy_step(session: &mut Session, penalty: &LengthPenalty) -> Result<usize> {
    let h = session.feed_pending()?;
    let hidden = Tensor::matrix(1, h.len(), h)?;
    let logits = session.model.base_logits(&hidden)?;
    let y = penalized_argmax(logits.row(0), session.tokens.len(), penalty);
    session.tokens.push(y);
    Ok(y)
}

pub fn greedy_decode(
    model: &Model,
    features: &Tensor,
    max_len: usize,
    penalty: &LengthPenalty,
) -> Result<DecodeResult> {
    check_max_len(model, max_len)?;
    penalty.validate()?;
    let start = Instant::now();
    let mut s = Session::new(model, features)?;
    while s.tokens.len() < max_len && !s.finished() {
        greedy_step(&mut s, penalty)?;
    }
    let n = s.tokens.len();
    Ok(DecodeResult {
        n_iterations: n,
        n_decoder_forward_passes: s.passes,
        n_assistant_forward_passes: 0,
        accepted_per_iteration: vec![1; n],
        tokens: s.tokens,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Proposal phase: one decoder pass on the pending token, then the argmax
/// of every head row (row `k` penalized at emitted index `n + k`).
pub fn medusa_propose(session: &mut Session, penalty: &LengthPenalty) -> Result<Vec<usize>> {
    let h = session.feed_pending()?;
    let dists = session.model.medusa_forward_cached(&h, &session.cache)?;
    let n = session.tokens.len();
    Ok((0..dists.rows())
        .map(|k| penalized_argmax(dists.row(k), n + k, penalty))
        .collect())
}

/// Verification phase: one decoder pass over `candidates`. Offset 0 is
/// always accepted; offset `k` is accepted while every earlier offset was,
/// no earlier candidate is EOS, and the base head at that position passes
/// the policy test. Accepted tokens are committed and the cache is cut back
/// to the new pending token. Returns the number accepted.
pub fn medusa_verify(
    session: &mut Session,
    candidates: &[usize],
    policy: &VerificationPolicy,
    penalty: &LengthPenalty,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(DecodeError::Config("no candidates to verify".into()));
    }
    let n = session.tokens.len();
    if session.cache.len() != n + 1 {
        return Err(DecodeError::Contract(
            "verification must follow a proposal for the same position".into(),
        ));
    }
    let h = session.forward(candidates)?;
    let logits = session.model.base_logits(&h)?;
    let mut accepted = 1;
    for k in 1..candidates.len() {
        if candidates[k - 1] == EOS {
            break;
        }
        let mut row = logits.row(k - 1).to_vec();
        apply_length_penalty(&mut row, n + k, penalty);
        let ok = match policy.mode {
            AcceptMode::ExactMatch => kernels::argmax(&row) == candidates[k],
            AcceptMode::Typical => {
                let q = kernels::softmax(&row);
                q[candidates[k]] > acceptance_threshold(&q, policy)?
            }
        };
        if !ok {
            break;
        }
        accepted += 1;
    }
    session.tokens.extend_from_slice(&candidates[..accepted]);
    session.rewind_to_pending();
    Ok(accepted)
}

pub fn medusa_decode(
    model: &Model,
    features: &Tensor,
    max_len: usize,
    policy: &VerificationPolicy,
    penalty: &LengthPenalty,
) -> Result<DecodeResult> {
    check_max_len(model, max_len)?;
    policy.validate()?;
    penalty.validate()?;
    let start = Instant::now();
    let mut s = Session::new(model, features)?;
    let mut accepted = Vec::new();
    while s.tokens.len() < max_len && !s.finished() {
        let candidates = medusa_propose(&mut s, penalty)?;
        let room = (max_len - s.tokens.len()).min(candidates.len());
        accepted.push(medusa_verify(&mut s, &candidates[..room], policy, penalty)?);
    }
    Ok(DecodeResult {
        tokens: s.tokens,
        n_iterations: accepted.len(),
        n_decoder_forward_passes: s.passes,
        n_assistant_forward_passes: 0,
        accepted_per_iteration: accepted,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Speculative decoding with a separate draft model. Each round the
/// assistant drafts up to `draft_len` tokens greedily and the main model
/// scores them in one pass; the matching prefix is kept plus the main
/// model's own token at the first disagreement.
pub fn assisted_decode(
    main: &Model,
    assistant: &Model,
    features: &Tensor,
    max_len: usize,
    draft_len: usize,
) -> Result<DecodeResult> {
    check_max_len(main, max_len)?;
    if main.config().vocab_size != assistant.config().vocab_size {
        return Err(DecodeError::Config(format!(
            "vocabulary mismatch: main has {}, assistant has {}",
            main.config().vocab_size,
            assistant.config().vocab_size
        )));
    }
    let start = Instant::now();
    let none = LengthPenalty::disabled();
    let mut m = Session::new(main, features)?;
    let mut a = Session::new(assistant, features)?;
    let mut accepted = Vec::new();
    while m.tokens.len() < max_len && !m.finished() {
        let n = m.tokens.len();
        let budget = draft_len.min(max_len - n - 1);
        a.tokens.clone_from(&m.tokens);
        a.cache.truncate(n);
        let mut draft = Vec::with_capacity(budget);
        while draft.len() < budget && !a.finished() {
            draft.push(greedy_step(&mut a, &none)?);
        }

        let mut block = vec![*m.committed().last().expect("BOS present")];
        block.extend_from_slice(&draft);
        let h = m.forward(&block)?;
        let logits = main.base_logits(&h)?;
        let mut emitted = Vec::with_capacity(draft.len() + 1);
        for (j, row) in (0..logits.rows()).map(|j| (j, logits.row(j))) {
            let y = kernels::argmax(row);
            emitted.push(y);
            if y == EOS || j >= draft.len() || draft[j] != y {
                break;
            }
        }
        accepted.push(emitted.len());
        m.tokens.extend_from_slice(&emitted);
        m.rewind_to_pending();
    }
    Ok(DecodeResult {
        tokens: m.tokens,
        n_iterations: accepted.len(),
        n_decoder_forward_passes: m.passes,
        n_assistant_forward_passes: a.passes,
        accepted_per_iteration: accepted,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
