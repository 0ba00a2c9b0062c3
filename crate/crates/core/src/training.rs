//! Objectives, optimizer and training loop.
//!
//! The objective follows the model variant: plain cross-entropy for a base
//! model, the averaged per-head loss plus a KL anchor to a frozen teacher
//! for `MedusaLinear`, and weighted per-head cross-entropy for
//! `MedusaBlock`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Utterance;
use crate::decoding::{self, DecodeError, LengthPenalty};
use crate::model::{
    Cross, FreezeMask, Graph, MedusaVariant, Model, ModelConfig, ModelError, Params, BOS, EOS,
};
use crate::numerics::{kernels, NumericsError, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {what} at step {step} (loss {loss})")]
    NonFinite {
        step: usize,
        what: &'static str,
        loss: f64,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Random-window augmentation. The maximum window grows linearly from
/// `min_len` to the full utterance over the first `ramp_fraction` of the
/// run; afterwards a full utterance is used with probability `full_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSchedule {
    pub min_len: usize,
    pub ramp_fraction: f64,
    pub full_prob: f64,
}

impl Default for CropSchedule {
    fn default() -> Self {
        CropSchedule {
            min_len: 8,
            ramp_fraction: 0.3,
            full_prob: 0.75,
        }
    }
}

/// Builds training sequences by concatenating token-aligned segments drawn
/// from random training utterances. The sequence length follows the crop
/// schedule (or a random utterance's length without one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpliceConfig {
    /// Probability that a batch item is spliced rather than taken whole.
    pub prob: f64,
    pub min_segment: usize,
    pub max_segment: usize,
}

impl Default for SpliceConfig {
    fn default() -> Self {
        SpliceConfig {
            prob: 1.0,
            min_segment: 1,
            max_segment: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub kl_weight: f64,
    /// One weight per Medusa head for the block objective; uniform if absent.
    pub head_loss_weights: Option<Vec<f64>>,
    /// Evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Steps between validation passes; 0 disables validation.
    pub eval_every: usize,
    pub crop: Option<CropSchedule>,
    pub splice: Option<SpliceConfig>,
    /// Temporary future-token heads trained with the whole network during
    /// base pretraining and discarded afterwards; 0 disables.
    pub aux_heads: usize,
    /// Weight of the mean auxiliary head loss relative to the base loss.
    pub aux_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_steps: 1000,
            kl_weight: 0.01,
            head_loss_weights: None,
            early_stop_patience: 0,
            eval_every: 100,
            crop: None,
            splice: None,
            aux_heads: 0,
            aux_weight: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0) {
            errs.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if !(self.kl_weight >= 0.0) {
            errs.push("kl_weight must be non-negative".into());
        }
        if let Some(w) = &self.head_loss_weights {
            if w.len() != k {
                errs.push(format!(
                    "head_loss_weights has {} entries for {k} heads",
                    w.len()
                ));
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                errs.push(format!(
                    "head_loss_weights must be non-negative and sum to 1, got {w:?}"
                ));
            }
        }
        if let Some(c) = &self.crop {
            if c.min_len == 0
                || !(0.0..=1.0).contains(&c.ramp_fraction)
                || !(0.0..=1.0).contains(&c.full_prob)
            {
                errs.push(format!("invalid crop schedule {c:?}"));
            }
        }
        if !(self.aux_weight >= 0.0) {
            errs.push("aux_weight must be non-negative".into());
        }
        if let Some(sp) = &self.splice {
            if !(0.0..=1.0).contains(&sp.prob)
                || sp.min_segment == 0
                || sp.min_segment > sp.max_segment
            {
                errs.push(format!("invalid splice config {sp:?}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(errs.join("; ")))
        }
    }

    pub fn head_weights(&self, k: usize) -> Vec<f64> {
        self.head_loss_weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / k as f64; k])
    }
}

/// One training sequence: features and reference tokens without BOS/EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

impl Example {
    pub fn from_utterance(u: &Utterance) -> Self {
        Example {
            features: u.features.clone(),
            tokens: u.tokens.clone(),
        }
    }

    /// Tokens `start..start + len` with their frames.
    pub fn window(u: &Utterance, start: usize, len: usize, frames_per_token: usize) -> Self {
        let d = u.features.cols();
        let f0 = start * frames_per_token * d;
        let f1 = (start + len) * frames_per_token * d;
        Example {
            features: Tensor::matrix(
                len * frames_per_token,
                d,
                u.features.data()[f0..f1].to_vec(),
            )
            .expect("window inside utterance"),
            tokens: u.tokens[start..start + len].to_vec(),
        }
    }

    /// Decoder inputs `[BOS, y...]` and targets `[y..., EOS]`.
    pub fn decoder_io(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.tokens.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&self.tokens);
        let mut target = self.tokens.clone();
        target.push(EOS);
        (input, target)
    }
}

/// Base-head distributions of `teacher` at every target position.
pub fn teacher_probs(teacher: &Model, ex: &Example) -> Result<Tensor> {
    let z = teacher.encode(&ex.features)?;
    let (input, _) = ex.decoder_io();
    let h = teacher.decoder_hidden(&input, &z, None)?;
    let logits = teacher.base_logits(&h)?;
    let v = logits.cols();
    let data = (0..logits.rows())
        .flat_map(|r| kernels::softmax(logits.row(r)))
        .collect();
    Ok(Tensor::matrix(logits.rows(), v, data)?)
}

/// Cross-entropy of head `k` over the rows that have a target `k` ahead,
/// or `None` when the sequence is too short.
fn head_ce(g: &mut Graph, mh: Var, target: &[usize], k: usize) -> Result<Option<Var>> {
    let n = target.len();
    if n <= k {
        return Ok(None);
    }
    let rows = g.tape.slice_rows(mh, 0, n - k)?;
    let logits = g.head_logits(rows, k)?;
    Ok(Some(g.tape.cross_entropy(logits, &target[k..])?))
}

fn batch_mean(g: &mut Graph, losses: Vec<Var>) -> Result<Var> {
    let n = losses.len() as f64;
    let all = g.tape.concat_rows(&losses)?;
    let s = g.tape.sum(all);
    Ok(g.tape.scale(s, 1.0 / n))
}

/// Activations of the frozen part of the network for one example: the
/// encoder output and the decoder residual stream entering `from_layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPrefix {
    pub z: Tensor,
    pub x: Tensor,
    pub from_layer: usize,
}

/// First decoder layer with trainable parameters, provided the encoder and
/// the decoder embeddings are frozen.
pub fn frozen_depth(model: &Model) -> Option<usize> {
    frozen_depth_under(model, &model.freeze_mask())
}

fn frozen_depth_under(model: &Model, mask: &FreezeMask) -> Option<usize> {
    let n_layers = model.config().n_dec_layers;
    let mut from = n_layers;
    for (i, (name, _)) in model.params().iter().enumerate() {
        if !mask.is_trainable(i) {
            continue;
        }
        if name.starts_with("encoder.")
            || name.starts_with("decoder.token_embedding")
            || name == "decoder.pos"
        {
            return None;
        }
        if let Some(rest) = name.strip_prefix("decoder.layers.") {
            let layer: usize = rest.split('.').next().and_then(|l| l.parse().ok())?;
            from = from.min(layer);
        }
    }
    Some(from)
}

/// True when `teacher` would compute the same prefix as `model` up to
/// decoder layer `from_layer`.
fn shares_prefix(model: &Model, teacher: &Model, from_layer: usize) -> bool {
    let (a, b) = (model.config(), teacher.config());
    if (a.d_model, a.n_dec_layers, a.n_attn_heads) != (b.d_model, b.n_dec_layers, b.n_attn_heads) {
        return false;
    }
    teacher.params().iter().all(|(name, t)| {
        let upper = match name.strip_prefix("decoder.layers.") {
            Some(rest) => rest
                .split('.')
                .next()
                .and_then(|l| l.parse::<usize>().ok())
                .is_none_or(|l| l >= from_layer),
            None => {
                !(name.starts_with("encoder.")
                    || name.starts_with("decoder.token_embedding")
                    || name == "decoder.pos")
            }
        };
        upper
            || model
                .params()
                .get(name)
                .is_some_and(|m| m.data() == t.data())
    })
}

fn teacher_probs_from(teacher: &Model, prefix: &FrozenPrefix) -> Result<Tensor> {
    let mut g = Graph::inference(teacher);
    let z = g.input(&prefix.z);
    let x = g.input(&prefix.x);
    let h = g.decode_from(x, prefix.from_layer, z)?;
    let logits = g.base_logits(h)?;
    let logits = g.tape.to_tensor(logits);
    let data = (0..logits.rows())
        .flat_map(|r| kernels::softmax(logits.row(r)))
        .collect();
    Ok(Tensor::matrix(logits.rows(), logits.cols(), data)?)
}

pub fn frozen_prefix(model: &Model, ex: &Example, from_layer: usize) -> Result<FrozenPrefix> {
    let mut g = Graph::inference(model);
    let z = g.encode(&ex.features)?;
    let (input, _) = ex.decoder_io();
    let x = g.decode_prefix(&input, z, from_layer)?;
    Ok(FrozenPrefix {
        z: g.tape.to_tensor(z),
        x: g.tape.to_tensor(x),
        from_layer,
    })
}

/// Encoder output and final decoder hidden states, resuming from `prefix`
/// when given.
fn forward(g: &mut Graph, ex: &Example, prefix: Option<&FrozenPrefix>) -> Result<(Var, Var)> {
    let (input, _) = ex.decoder_io();
    match prefix {
        Some(p) => {
            let z = g.input(&p.z);
            let x = g.input(&p.x);
            Ok((z, g.decode_from(x, p.from_layer, z)?))
        }
        None => {
            let z = g.encode(&ex.features)?;
            Ok((z, g.decode(&input, Some(z), None)?))
        }
    }
}

fn base_example(g: &mut Graph, ex: &Example, prefix: Option<&FrozenPrefix>) -> Result<Var> {
    let (_, target) = ex.decoder_io();
    let (_, h) = forward(g, ex, prefix)?;
    let logits = g.base_logits(h)?;
    Ok(g.tape.cross_entropy(logits, &target)?)
}

fn linear_example(
    g: &mut Graph,
    ex: &Example,
    prefix: Option<&FrozenPrefix>,
    teacher: &Tensor,
    kl_weight: f64,
) -> Result<Var> {
    let k_heads = g.model().config().k;
    let (_, target) = ex.decoder_io();
    if teacher.rows() != target.len() || teacher.cols() != g.model().config().vocab_size {
        return Err(TrainError::Contract(format!(
            "teacher distribution shape {:?} does not match {} positions",
            teacher.shape(),
            target.len()
        )));
    }
    let (z, h) = forward(g, ex, prefix)?;
    let base = g.base_logits(h)?;
    let mut terms = vec![g.tape.cross_entropy(base, &target)?];
    let mh = g.medusa_hidden(h, Cross::Encoder(z))?;
    for k in 1..=k_heads {
        if let Some(ce) = head_ce(g, mh, &target, k)? {
            terms.push(ce);
        }
    }
    let ce_all = g.tape.concat_rows(&terms)?;
    let ce_sum = g.tape.sum(ce_all);
    let ce = g.tape.scale(ce_sum, 1.0 / (k_heads + 1) as f64);
    let tv = g.tape.leaf_owned(teacher.clone());
    let kl = g.tape.kl_divergence(base, tv)?;
    let kl = g.tape.scale(kl, kl_weight);
    Ok(g.tape.add(ce, kl)?)
}

/// Base cross-entropy plus `weight` times the mean head cross-entropy.
fn aux_example(g: &mut Graph, ex: &Example, weight: f64) -> Result<Var> {
    let (_, target) = ex.decoder_io();
    let (z, h) = forward(g, ex, None)?;
    let base = g.base_logits(h)?;
    let ce = g.tape.cross_entropy(base, &target)?;
    let mh = g.medusa_hidden(h, Cross::Encoder(z))?;
    let mut terms = Vec::new();
    for k in 1..=g.model().config().k {
        if let Some(t) = head_ce(g, mh, &target, k)? {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        return Ok(ce);
    }
    let scale = weight / terms.len() as f64;
    let all = g.tape.concat_rows(&terms)?;
    let sum = g.tape.sum(all);
    let heads = g.tape.scale(sum, scale);
    Ok(g.tape.add(ce, heads)?)
}

fn block_example(
    g: &mut Graph,
    ex: &Example,
    prefix: Option<&FrozenPrefix>,
    weights: &[f64],
) -> Result<Var> {
    let k_heads = g.model().config().k;
    if weights.len() != k_heads {
        return Err(NumericsError::Shape {
            op: "medusa_block_loss",
            lhs: vec![weights.len()],
            rhs: vec![k_heads],
        }
        .into());
    }
    let (_, target) = ex.decoder_io();
    let (z, h) = forward(g, ex, prefix)?;
    let mh = g.medusa_hidden(h, Cross::Encoder(z))?;
    let mut terms = Vec::new();
    for (k, &w) in (1..=k_heads).zip(weights) {
        if let Some(ce) = head_ce(g, mh, &target, k)? {
            terms.push(g.tape.scale(ce, w));
        }
    }
    if terms.is_empty() {
        terms.push(g.tape.constant(vec![1], vec![0.0])?);
    }
    let all = g.tape.concat_rows(&terms)?;
    Ok(g.tape.sum(all))
}

/// Mean over the batch of the next-token cross-entropy.
pub fn base_loss(g: &mut Graph, batch: &[Example]) -> Result<Var> {
    let losses = batch
        .iter()
        .map(|ex| base_example(g, ex, None))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, losses)
}

/// `(1/(K+1)) Σ_k CE_k + kl_weight · KL(teacher ‖ base)`, averaged over the
/// batch. Head `k` is scored only where a target `k` positions ahead exists.
pub fn medusa_linear_loss(
    g: &mut Graph,
    batch: &[Example],
    teacher: &[Tensor],
    kl_weight: f64,
) -> Result<Var> {
    if teacher.len() != batch.len() {
        return Err(TrainError::Contract(format!(
            "{} teacher distributions for {} examples",
            teacher.len(),
            batch.len()
        )));
    }
    let losses = batch
        .iter()
        .zip(teacher)
        .map(|(ex, tp)| linear_example(g, ex, None, tp, kl_weight))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, losses)
}

/// `Σ_{k=1..K} w_k · CE_k`, averaged over the batch.
pub fn medusa_block_loss(g: &mut Graph, batch: &[Example], weights: &[f64]) -> Result<Var> {
    let losses = batch
        .iter()
        .map(|ex| block_example(g, ex, None, weights))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(g, losses)
}

/// An example with optional precomputed frozen activations and teacher
/// distributions.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub example: Example,
    pub prefix: Option<FrozenPrefix>,
    pub teacher: Option<Tensor>,
}

impl Prepared {
    /// Computes whatever the model's objective can reuse across steps.
    pub fn new(
        model: &Model,
        teacher: Option<&Model>,
        example: Example,
        cache_prefix: bool,
    ) -> Result<Self> {
        let prefix = match frozen_depth(model) {
            Some(depth) if cache_prefix => Some(frozen_prefix(model, &example, depth)?),
            _ => None,
        };
        let teacher = match (model.config().variant, teacher, &prefix) {
            (MedusaVariant::MedusaLinear, Some(t), Some(p))
                if shares_prefix(model, t, p.from_layer) =>
            {
                Some(teacher_probs_from(t, p)?)
            }
            (MedusaVariant::MedusaLinear, Some(t), _) => Some(teacher_probs(t, &example)?),
            _ => None,
        };
        Ok(Prepared {
            example,
            prefix,
            teacher,
        })
    }
}

/// Adam with bias correction. Moments exist only for trainable parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64, params: &Params, mask: &FreezeMask) -> Self {
        let moments = (0..params.len())
            .map(|i| {
                mask.is_trainable(i).then(|| {
                    let n = params.tensor(i).len();
                    (vec![0.0; n], vec![0.0; n])
                })
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of parameters with moment accumulators.
    pub fn tracked(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    /// Applies one update from `(param index, gradient)` pairs. Gradients
    /// for untracked parameters are rejected.
    pub fn update(&mut self, params: &mut Params, grads: &[(usize, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads {
            let Some((m, v)) = self.moments[*i].as_mut() else {
                return Err(TrainError::Contract(format!(
                    "gradient for frozen parameter {}",
                    params.name(*i)
                )));
            };
            let w = params.tensor_mut(*i).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn objective(g: &mut Graph, items: &[&Prepared], config: &TrainConfig) -> Result<Var> {
    let cfg = g.model().config().clone();
    let weights = config.head_weights(cfg.k);
    let mut losses = Vec::with_capacity(items.len());
    for p in items {
        let (ex, pre) = (&p.example, p.prefix.as_ref());
        losses.push(match cfg.variant {
            MedusaVariant::None => base_example(g, ex, pre)?,
            MedusaVariant::MedusaLinear if config.aux_heads > 0 => {
                aux_example(g, ex, config.aux_weight)?
            }
            MedusaVariant::MedusaLinear => {
                let t = p.teacher.as_ref().ok_or_else(|| {
                    TrainError::Contract("MedusaLinear training needs teacher distributions".into())
                })?;
                linear_example(g, ex, pre, t, config.kl_weight)?
            }
            MedusaVariant::MedusaBlock => block_example(g, ex, pre, &weights)?,
        });
    }
    batch_mean(g, losses)
}

fn prepare_all(model: &Model, batch: &[Example], teacher: Option<&Model>) -> Result<Vec<Prepared>> {
    batch
        .iter()
        .map(|ex| Prepared::new(model, teacher, ex.clone(), false))
        .collect()
}

fn grads_prepared(
    model: &Model,
    mask: &FreezeMask,
    items: &[&Prepared],
    config: &TrainConfig,
) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
    let mut g = Graph::training(model, mask);
    let loss = objective(&mut g, items, config)?;
    let value = g.tape.value(loss)[0];
    let grads = g.tape.backward(loss)?;
    let out = g
        .bound_params()
        .filter(|(i, _)| mask.is_trainable(*i))
        .filter_map(|(i, v)| grads.get(v).map(|d| (i, d.to_vec())))
        .collect();
    Ok((value, out))
}

fn eval_prepared(model: &Model, items: &[&Prepared], config: &TrainConfig) -> Result<f64> {
    let mut g = Graph::inference(model);
    let loss = objective(&mut g, items, config)?;
    Ok(g.tape.value(loss)[0])
}

/// Loss and gradients of the trainable parameters, without updating.
pub fn loss_and_grads(
    model: &Model,
    batch: &[Example],
    config: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
    let items = prepare_all(model, batch, teacher)?;
    grads_prepared(
        model,
        &model.freeze_mask(),
        &items.iter().collect::<Vec<_>>(),
        config,
    )
}

/// Objective value without gradients.
pub fn eval_loss(
    model: &Model,
    batch: &[Example],
    config: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<f64> {
    let items = prepare_all(model, batch, teacher)?;
    eval_prepared(model, &items.iter().collect::<Vec<_>>(), config)
}

fn step_prepared(
    model: &mut Model,
    mask: &FreezeMask,
    opt: &mut Adam,
    items: &[&Prepared],
    config: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = grads_prepared(model, mask, items, config)?;
    let step = opt.steps() as usize;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: "loss",
            loss,
        });
    }
    if grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFinite {
            step,
            what: "gradient",
            loss,
        });
    }
    opt.update(model.params_mut(), &grads)?;
    Ok(loss)
}

/// One optimizer update. Frozen parameters are never touched.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[Example],
    config: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<f64> {
    let items = prepare_all(model, batch, teacher)?;
    let mask = model.freeze_mask();
    step_prepared(model, &mask, opt, &items.iter().collect::<Vec<_>>(), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// Index of the lowest value (first on ties).
    pub best: usize,
}

/// Stops once `patience` evaluations have passed without improving on the
/// best value. A patience of 0 never stops.
pub fn early_stop(history: &[f64], patience: usize) -> EarlyStop {
    assert!(!history.is_empty(), "early_stop needs a non-empty history");
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v < history[best] {
            best = i;
        }
    }
    EarlyStop {
        stop: patience > 0 && history.len() - 1 - best >= patience,
        best,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: Option<usize>,
    pub stopped_early: bool,
    pub log: Vec<LogRecord>,
    pub seconds: f64,
}

/// Window `(start, len)` to train on, or `None` for the whole utterance.
fn sample_window(
    n: usize,
    step: usize,
    total: usize,
    crop: Option<&CropSchedule>,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    let c = crop?;
    let ramp_end = c.ramp_fraction * total as f64;
    let progress = if ramp_end > 0.0 {
        (step as f64 / ramp_end).min(1.0)
    } else {
        1.0
    };
    let max_len = (c.min_len as f64 + n.saturating_sub(c.min_len) as f64 * progress) as usize;
    let lo = n.min(2);
    let hi = max_len.clamp(lo, n);
    let len = rng.random_range(lo..=hi);
    if progress >= 1.0 && rng.random::<f64>() < c.full_prob {
        return None;
    }
    let start = rng.random_range(0..=n - len);
    (len < n).then_some((start, len))
}

fn splice(
    train: &[Utterance],
    len: usize,
    cfg: &SpliceConfig,
    fpt: usize,
    rng: &mut ChaCha8Rng,
) -> Example {
    let d = train[0].features.cols();
    let mut tokens = Vec::with_capacity(len);
    let mut data = Vec::with_capacity(len * fpt * d);
    while tokens.len() < len {
        let u = &train[rng.random_range(0..train.len())];
        let seg = rng
            .random_range(cfg.min_segment..=cfg.max_segment)
            .min(len - tokens.len())
            .min(u.tokens.len());
        let start = rng.random_range(0..=u.tokens.len() - seg);
        tokens.extend_from_slice(&u.tokens[start..start + seg]);
        data.extend_from_slice(&u.features.data()[start * fpt * d..(start + seg) * fpt * d]);
    }
    Example {
        features: Tensor::matrix(len * fpt, d, data).expect("non-empty splice"),
        tokens,
    }
}

/// Runs `config.max_steps` updates on batches drawn with replacement from
/// `train`, evaluating on `valid` every `eval_every` steps. With early
/// stopping, the best evaluated parameters are restored at the end.
pub fn train(
    model: &mut Model,
    train: &[Utterance],
    valid: &[Utterance],
    config: &TrainConfig,
    teacher: Option<&Model>,
    on_log: impl FnMut(&LogRecord),
) -> Result<TrainReport> {
    if config.aux_heads > 0 {
        return Err(TrainError::Config(
            "aux_heads applies to base pretraining only".into(),
        ));
    }
    let mask = model.freeze_mask();
    train_under(model, &mask, train, valid, config, teacher, on_log)
}

fn train_under(
    model: &mut Model,
    mask: &FreezeMask,
    train: &[Utterance],
    valid: &[Utterance],
    config: &TrainConfig,
    teacher: Option<&Model>,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainReport> {
    config.validate(model.config().k)?;
    if train.is_empty() {
        return Err(TrainError::Contract("empty training set".into()));
    }
    let started = Instant::now();
    let fpt = model.config().frames_per_token;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate, model.params(), mask);
    let frozen = frozen_depth_under(model, mask).is_some();
    let valid_items = valid
        .iter()
        .map(|u| Prepared::new(model, teacher, Example::from_utterance(u), frozen))
        .collect::<Result<Vec<_>>>()?;
    let valid_refs: Vec<&Prepared> = valid_items.iter().collect();
    let mut full: Vec<Option<Prepared>> = vec![None; train.len()];
    let mut history = Vec::new();
    let mut best: Option<(usize, Params)> = None;
    let mut log = Vec::new();
    let mut recent = Vec::new();
    let mut stopped_early = false;
    let mut steps = 0;

    for step in 0..config.max_steps {
        let mut crops = Vec::new();
        let mut picks = Vec::new();
        for _ in 0..config.batch_size {
            let i = rng.random_range(0..train.len());
            let u = &train[i];
            let window = sample_window(
                u.tokens.len(),
                step,
                config.max_steps,
                config.crop.as_ref(),
                &mut rng,
            );
            if let Some(sp) = config
                .splice
                .as_ref()
                .filter(|sp| rng.random::<f64>() < sp.prob)
            {
                let len = window.map_or(u.tokens.len(), |(_, len)| len);
                let ex = splice(train, len, sp, fpt, &mut rng);
                crops.push(Prepared::new(model, teacher, ex, frozen)?);
                continue;
            }
            match window {
                Some((start, len)) => {
                    let ex = Example::window(u, start, len, fpt);
                    crops.push(Prepared::new(model, teacher, ex, frozen)?);
                }
                None => {
                    if full[i].is_none() || !frozen {
                        full[i] = Some(Prepared::new(
                            model,
                            teacher,
                            Example::from_utterance(u),
                            frozen,
                        )?);
                    }
                    picks.push(i);
                }
            }
        }
        let items: Vec<&Prepared> = picks
            .iter()
            .map(|&i| full[i].as_ref().expect("prepared above"))
            .chain(crops.iter())
            .collect();
        recent.push(step_prepared(model, mask, &mut opt, &items, config)?);
        steps = step + 1;

        let last = steps == config.max_steps;
        if config.eval_every > 0 && (steps % config.eval_every == 0 || last) {
            let valid_loss = if valid_refs.is_empty() {
                None
            } else {
                Some(eval_prepared(model, &valid_refs, config)?)
            };
            let rec = LogRecord {
                step: steps,
                train_loss: recent.iter().sum::<f64>() / recent.len() as f64,
                valid_loss,
                lr: config.learning_rate,
            };
            recent.clear();
            on_log(&rec);
            log.push(rec);
            if let Some(v) = valid_loss {
                history.push(v);
                let es = early_stop(&history, config.early_stop_patience);
                if es.best == history.len() - 1 {
                    best = Some((steps, model.params().clone()));
                }
                if es.stop {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_step = if config.early_stop_patience > 0 {
        best.map(|(s, params)| {
            *model.params_mut() = params;
            s
        })
    } else {
        None
    };
    Ok(TrainReport {
        steps,
        best_step,
        stopped_early,
        log,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Base pretraining followed by Medusa fine-tuning against a frozen copy of
/// the pretrained base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStage {
    pub base: TrainConfig,
    pub medusa: TrainConfig,
}

impl Default for TwoStage {
    fn default() -> Self {
        TwoStage {
            base: TrainConfig {
                learning_rate: 1e-3,
                max_steps: 1500,
                eval_every: 100,
                crop: Some(CropSchedule::default()),
                splice: Some(SpliceConfig::default()),
                aux_heads: 4,
                ..TrainConfig::default()
            },
            medusa: TrainConfig {
                learning_rate: 1e-2,
                max_steps: 3500,
                eval_every: 500,
                crop: Some(CropSchedule {
                    ramp_fraction: 0.0,
                    ..CropSchedule::default()
                }),
                splice: Some(SpliceConfig::default()),
                seed: 1,
                ..TrainConfig::default()
            },
        }
    }
}

impl TwoStage {
    pub fn total_steps(&self) -> usize {
        self.base.max_steps + self.medusa.max_steps
    }
}

pub fn pretrain_base(
    config: &ModelConfig,
    train_set: &[Utterance],
    valid: &[Utterance],
    train_config: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<(Model, TrainReport)> {
    if train_config.aux_heads == 0 {
        let mut model = Model::new(config.base())?;
        let report = train(&mut model, train_set, valid, train_config, None, on_log)?;
        return Ok((model, report));
    }
    let mut model = Model::new(ModelConfig {
        variant: MedusaVariant::MedusaLinear,
        k: train_config.aux_heads,
        ..config.clone()
    })?;
    let mask = FreezeMask::all(model.params().len());
    let report = train_under(
        &mut model,
        &mask,
        train_set,
        valid,
        train_config,
        None,
        on_log,
    )?;
    Ok((model.base(), report))
}

/// Attaches heads to a pretrained base and fine-tunes them.
pub fn finetune_medusa(
    base: &Model,
    variant: MedusaVariant,
    k: usize,
    train_set: &[Utterance],
    valid: &[Utterance],
    train_config: &TrainConfig,
    on_log: impl FnMut(&LogRecord),
) -> Result<(Model, TrainReport)> {
    let mut model = base.attach_medusa(variant, k)?;
    let teacher = base.base();
    let report = train(
        &mut model,
        train_set,
        valid,
        train_config,
        Some(&teacher),
        on_log,
    )?;
    Ok((model, report))
}

pub fn train_two_stage(
    config: &ModelConfig,
    train_set: &[Utterance],
    valid: &[Utterance],
    recipe: &TwoStage,
    mut on_log: impl FnMut(&str, &LogRecord),
) -> Result<(Model, TrainReport, TrainReport)> {
    let (base, r1) = pretrain_base(config, train_set, valid, &recipe.base, |r| {
        on_log("base", r)
    })?;
    if config.variant == MedusaVariant::None {
        return Ok((
            base,
            r1,
            TrainReport {
                steps: 0,
                best_step: None,
                stopped_early: false,
                log: Vec::new(),
                seconds: 0.0,
            },
        ));
    }
    let (model, r2) = finetune_medusa(
        &base,
        config.variant,
        config.k,
        train_set,
        valid,
        &recipe.medusa,
        |r| on_log("medusa", r),
    )?;
    Ok((model, r1, r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    pub tokens: Vec<usize>,
    pub expected_len: f64,
    pub discrepancy: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub items: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn kept(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.items.iter().filter(|p| p.kept)
    }

    pub fn dropped(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.items.iter().filter(|p| !p.kept)
    }

    /// Kept items as training utterances, paired with their features.
    pub fn to_utterances(&self, source: &[Utterance]) -> Vec<Utterance> {
        self.items
            .iter()
            .zip(source)
            .filter(|(p, _)| p.kept)
            .map(|(p, u)| Utterance {
                id: u.id.clone(),
                tokens: p.tokens.clone(),
                features: u.features.clone(),
            })
            .collect()
    }
}

/// Indices of the `ceil(fraction · n)` largest scores; among equal scores
/// the later index is dropped first.
pub fn worst_indices(scores: &[f64], fraction: f64) -> Vec<usize> {
    let n_drop = (scores.len() as f64 * fraction).ceil() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order.truncate(n_drop);
    order.sort_unstable();
    order
}

/// Greedy transcripts for unlabeled utterances, with the worst 5% by
/// `|len - frames/frames_per_token| / (frames/frames_per_token)` dropped.
pub fn pseudo_label(
    model: &Model,
    unlabeled: &[Utterance],
    max_len: usize,
) -> Result<PseudoLabelSet> {
    if unlabeled.is_empty() {
        return Err(TrainError::Contract("no utterances to pseudo-label".into()));
    }
    let fpt = model.config().frames_per_token as f64;
    let mut items = Vec::with_capacity(unlabeled.len());
    for u in unlabeled {
        let r = decoding::greedy_decode(model, &u.features, max_len, &LengthPenalty::disabled())?;
        let tokens = r.transcript().to_vec();
        let expected_len = u.features.rows() as f64 / fpt;
        let discrepancy = (tokens.len() as f64 - expected_len).abs() / expected_len;
        items.push(PseudoLabel {
            id: u.id.clone(),
            tokens,
            expected_len,
            discrepancy,
            kept: true,
        });
    }
    let scores: Vec<f64> = items.iter().map(|p| p.discrepancy).collect();
    for i in worst_indices(&scores, 0.05) {
        items[i].kept = false;
    }
    Ok(PseudoLabelSet { items })
}
