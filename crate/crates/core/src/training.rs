//! Training: word-level and sequence-level objectives, the optimizer,
//! gradient clipping, checkpointing, and the epoch loop.
//!
//! Word-level objectives share one teacher-forced-ish decode loop that
//! differs only in what each step feeds the decoder: the ground-truth
//! token, a coin flip between truth and the model's own pick, or a
//! differentiable fusion of the top-k predicted embeddings. Sequence
//! level training samples a full rollout and reinforces it in proportion
//! to its reward relative to a baseline; the self-critical variant uses
//! the model's own greedy rollout as that baseline. Everything is
//! deterministic given a seed: each epoch derives its own RNG from
//! `(seed, epoch)`, so a run resumed from a checkpoint at an epoch
//! boundary reproduces the original loss curve bit for bit.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{greedy_decode, ModelStepper};
use crate::encdec::{
    decoder_step, decoder_step_emb, encode, BoundParams, DecoderState, EncoderOutput, ModelConfig,
    NamedParam, ParamStore, StepOutput,
};
use crate::error::{Error, Result};
use crate::pointer::{extended_distribution, generation_probability, LOG_FLOOR};
use crate::rouge::{evaluate_corpus, RougeVariant};
use crate::tensor::{Tape, Var};
use crate::textdata::{ExtendedExample, EOS, PAD, SOS};

/// Which training objective drives each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Teacher forcing with token-level negative log-likelihood.
    #[serde(rename = "xent")]
    CrossEntropy,
    /// Teacher forcing that feeds the model's own previous pick instead
    /// of the truth with decaying probability.
    #[serde(rename = "dad")]
    ScheduledSampling,
    /// Feeds a differentiable fusion of the top-k predicted embeddings,
    /// so gradients flow through the input path as well.
    #[serde(rename = "e2e")]
    FusedEmbedding,
    /// Policy gradient on sampled rollouts against a fixed or moving
    /// baseline.
    #[serde(rename = "reinforce")]
    Reinforce,
    /// Curriculum: a shrinking prefix keeps the token-level loss while
    /// the growing suffix is trained by policy gradient.
    #[serde(rename = "mixer")]
    Mixer,
    /// Policy gradient whose baseline is the model's own greedy rollout,
    /// blended with a token-level term.
    #[serde(rename = "scst")]
    SelfCritical,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::CrossEntropy,
        Strategy::ScheduledSampling,
        Strategy::FusedEmbedding,
        Strategy::Reinforce,
        Strategy::Mixer,
        Strategy::SelfCritical,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::CrossEntropy => "xent",
            Strategy::ScheduledSampling => "dad",
            Strategy::FusedEmbedding => "e2e",
            Strategy::Reinforce => "reinforce",
            Strategy::Mixer => "mixer",
            Strategy::SelfCritical => "scst",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.token() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected one of xent, dad, e2e, reinforce, mixer, scst"
                ))
            })
    }
}

/// How the probability of feeding the ground-truth token decays with the
/// training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecaySchedule {
    /// `1 − alpha·k`, clamped to `[0, 1]`.
    Linear { alpha: f64 },
    /// `alpha^k` with `alpha` in `(0, 1]`.
    Exponential { alpha: f64 },
    /// `alpha / (alpha + exp(k / alpha))` with `alpha > 0`.
    InverseSigmoid { alpha: f64 },
    /// A fixed probability in `[0, 1]`.
    Constant { p: f64 },
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecaySchedule::Linear { alpha } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::Config("linear decay needs alpha >= 0".into()));
                }
            }
            DecaySchedule::Exponential { alpha } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::Config("exponential decay needs alpha in (0, 1]".into()));
                }
            }
            DecaySchedule::InverseSigmoid { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::Config("inverse-sigmoid decay needs alpha > 0".into()));
                }
            }
            DecaySchedule::Constant { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config("constant schedule needs p in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Probability of feeding the ground-truth token at step `k`.
    pub fn probability(&self, k: u64) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            DecaySchedule::Linear { alpha } => (1.0 - alpha * k as f64).clamp(0.0, 1.0),
            DecaySchedule::Exponential { alpha } => alpha.powi(k.min(i32::MAX as u64) as i32),
            DecaySchedule::InverseSigmoid { alpha } => {
                let e = (k as f64 / alpha).exp();
                if e.is_infinite() {
                    0.0
                } else {
                    alpha / (alpha + e)
                }
            }
            DecaySchedule::Constant { p } => p,
        })
    }
}

/// Pick the decoder input for one step: the ground-truth token with
/// probability `p_truth`, otherwise the model's own previous pick.
pub fn scheduled_input<R: Rng>(
    y_true_prev: usize,
    y_model_prev: usize,
    p_truth: f64,
    rng: &mut R,
) -> usize {
    if rng.gen_bool(p_truth.clamp(0.0, 1.0)) {
        y_true_prev
    } else {
        y_model_prev
    }
}

/// Differentiable decoder input: renormalize the top-k probabilities of
/// `p_vocab` (ties toward smaller ids) and mix the corresponding
/// embedding rows. Gradients flow into both the probabilities and the
/// embeddings.
pub fn e2e_fused_input(tape: &mut Tape, p_vocab: Var, k: usize, embedding: Var) -> Result<Var> {
    let vocab = tape.data(p_vocab).len();
    if k == 0 || k > vocab {
        return Err(Error::Contract(format!(
            "fused input needs 1 <= k <= |V|; got k={k} with |V|={vocab}"
        )));
    }
    let mut ranked: Vec<(usize, f64)> = tape.data(p_vocab).iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("probabilities are never NaN").then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    if ranked.iter().map(|&(_, p)| p).sum::<f64>() <= 0.0 {
        return Err(Error::Numeric("top-k probabilities sum to zero".into()));
    }
    let picks: Vec<Var> =
        ranked.iter().map(|&(id, _)| tape.select(p_vocab, id)).collect::<Result<_>>()?;
    let mut total = picks[0];
    for &p in &picks[1..] {
        total = tape.add(total, p)?;
    }
    let mut fused: Option<Var> = None;
    for (&(id, _), &p) in ranked.iter().zip(&picks) {
        let weight = tape.div(p, total)?;
        let row = tape.embed_row(embedding, id)?;
        let term = tape.mul_scalar(row, weight)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(fused.expect("k >= 1 guarantees at least one term"))
}

/// What each decode step feeds back as the next input.
#[derive(Debug, Clone, Copy)]
pub enum InputFeed {
    /// Always the ground-truth previous token.
    Truth,
    /// Ground truth with probability `p_truth`, else the model's argmax.
    Scheduled { p_truth: f64 },
    /// Fused top-k embedding of the model's previous distribution.
    Fused { top_k: usize },
}

/// Accumulated pieces of one example's token-level loss.
pub struct SequenceLoss {
    /// Sum over target positions of `log P(y_t)` (each clamped at
    /// [`LOG_FLOOR`] before the log).
    pub log_prob_sum: Var,
    /// Sum of per-step coverage losses, when coverage is on.
    pub coverage_sum: Option<Var>,
    /// Number of target positions contributing to the sums.
    pub tokens: usize,
}

enum Feed {
    Id(usize),
    Emb(Var),
}

fn predictive_distribution(
    tape: &mut Tape,
    bound: &BoundParams,
    out: &StepOutput,
    source_ext_ids: &[usize],
    max_oov: usize,
) -> Result<Var> {
    match &bound.switch {
        Some(switch) => {
            let p_gen =
                generation_probability(tape, switch, out.context, out.hidden, out.prev_emb)?;
            extended_distribution(
                tape,
                out.p_vocab,
                out.attn_weights,
                p_gen,
                source_ext_ids,
                max_oov,
            )
        }
        None => Ok(out.p_vocab),
    }
}

fn argmax(data: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in data.iter().enumerate() {
        if x > data[best] {
            best = i;
        }
    }
    best
}

/// Token-level log-likelihood pieces for one example under `feed`.
pub fn sequence_nll<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    example: &ExtendedExample,
    max_oov: usize,
    feed: InputFeed,
    rng: &mut R,
) -> Result<SequenceLoss> {
    let pointer = bound.switch.is_some();
    let vocab = bound.config.vocab_size;
    let targets: &[usize] =
        if pointer { &example.target_ext_ids } else { &example.target_ids };
    if targets.len() < 2 {
        return Err(Error::Contract("target must hold at least start and end markers".into()));
    }
    let reachable = if pointer { vocab + example.oov_count() } else { vocab };
    let enc = encode(tape, bound, &example.source_ids)?;
    let mut state = DecoderState::initial(tape, bound, &enc);
    let mut input = Feed::Id(targets[0]);
    let mut log_sum: Option<Var> = None;
    let mut cov_sum: Option<Var> = None;
    for t in 0..targets.len() - 1 {
        let out = match input {
            Feed::Id(id) => decoder_step(tape, bound, &enc, &state, id)?,
            Feed::Emb(emb) => decoder_step_emb(tape, bound, &enc, &state, emb)?,
        };
        let dist =
            predictive_distribution(tape, bound, &out, &example.source_ext_ids, max_oov)?;
        let target = targets[t + 1];
        if target >= reachable {
            return Err(Error::Data(format!(
                "target id {target} is unreachable: this example can produce only {reachable} ids"
            )));
        }
        let p = tape.select(dist, target)?;
        let p = tape.clamp_min(p, LOG_FLOOR);
        let lp = tape.log(p);
        log_sum = Some(match log_sum {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
        if let Some(cl) = out.covloss {
            cov_sum = Some(match cov_sum {
                Some(acc) => tape.add(acc, cl)?,
                None => cl,
            });
        }
        input = match feed {
            InputFeed::Truth => Feed::Id(target),
            InputFeed::Scheduled { p_truth } => {
                let model_pick = argmax(tape.data(dist));
                Feed::Id(scheduled_input(target, model_pick, p_truth, rng))
            }
            InputFeed::Fused { top_k } => {
                Feed::Emb(e2e_fused_input(tape, out.p_vocab, top_k, bound.embedding)?)
            }
        };
        state = out.state;
    }
    Ok(SequenceLoss {
        log_prob_sum: log_sum.expect("at least one target position"),
        coverage_sum: cov_sum,
        tokens: targets.len() - 1,
    })
}

/// Mean per-token negative log-likelihood over a batch of examples, plus
/// `coverage_weight` times the mean per-token coverage loss when
/// coverage is on. Per-token averaging keeps the loss scale independent
/// of batch composition.
pub fn batch_nll<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    examples: &[&ExtendedExample],
    feed: InputFeed,
    coverage_weight: f64,
    rng: &mut R,
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot compute a loss over zero examples".into()));
    }
    let max_oov = examples.iter().map(|e| e.oov_count()).max().unwrap_or(0);
    let mut log_total: Option<Var> = None;
    let mut cov_total: Option<Var> = None;
    let mut tokens = 0usize;
    for ex in examples {
        let piece = sequence_nll(tape, bound, ex, max_oov, feed, rng)?;
        tokens += piece.tokens;
        log_total = Some(match log_total {
            Some(acc) => tape.add(acc, piece.log_prob_sum)?,
            None => piece.log_prob_sum,
        });
        if let Some(c) = piece.coverage_sum {
            cov_total = Some(match cov_total {
                Some(acc) => tape.add(acc, c)?,
                None => c,
            });
        }
    }
    let mut loss = tape.scale(log_total.expect("nonempty batch"), -1.0 / tokens as f64);
    if let Some(cov) = cov_total {
        let weighted = tape.scale(cov, coverage_weight / tokens as f64);
        loss = tape.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Whether a rollout samples from or maximizes the model's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Sample,
    Greedy,
}

/// One self-fed decode: the emitted ids and the (gradient-tracked)
/// log-probabilities of each emitted token.
pub struct Rollout {
    pub ids: Vec<usize>,
    pub log_probs: Vec<Var>,
    pub finished: bool,
}

/// Run the decoder on its own outputs, sampling or taking the argmax,
/// until the end marker or `max_steps`.
pub fn rollout<R: Rng>(
    tape: &mut Tape,
    bound: &BoundParams,
    enc: &EncoderOutput,
    source_ext_ids: &[usize],
    max_oov: usize,
    mode: RolloutMode,
    max_steps: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if max_steps == 0 {
        return Err(Error::Contract("rollout needs max_steps >= 1".into()));
    }
    let mut state = DecoderState::initial(tape, bound, enc);
    let mut prev = SOS;
    let mut out = Rollout { ids: Vec::new(), log_probs: Vec::new(), finished: false };
    for _ in 0..max_steps {
        let step = decoder_step(tape, bound, enc, &state, prev)?;
        let dist = predictive_distribution(tape, bound, &step, source_ext_ids, max_oov)?;
        let probs = tape.data(dist);
        let id = match mode {
            RolloutMode::Greedy => {
                let mut best: Option<(usize, f64)> = None;
                for (i, &p) in probs.iter().enumerate() {
                    if p > 0.0 && best.map_or(true, |(_, bp)| p > bp) {
                        best = Some((i, p));
                    }
                }
                best.ok_or_else(|| {
                    Error::Numeric("every next-token probability is zero".into())
                })?
                .0
            }
            RolloutMode::Sample => {
                let total: f64 = probs.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Numeric("every next-token probability is zero".into()));
                }
                let target = rng.gen_range(0.0..1.0) * total;
                let mut cum = 0.0;
                let mut picked = None;
                for (i, &p) in probs.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    cum += p;
                    if cum > target {
                        picked = Some(i);
                        break;
                    }
                }
                // Floating-point shortfall at the very end of the walk:
                // fall back to the last token with mass.
                picked.unwrap_or_else(|| {
                    probs.iter().rposition(|&p| p > 0.0).expect("total > 0")
                })
            }
        };
        let p = tape.select(dist, id)?;
        let p = tape.clamp_min(p, LOG_FLOOR);
        out.log_probs.push(tape.log(p));
        out.ids.push(id);
        state = step.state;
        prev = id;
        if id == EOS {
            out.finished = true;
            break;
        }
    }
    Ok(out)
}

/// Strip sequence markers, keeping only content tokens.
pub fn content_ids(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&id| id != PAD && id != SOS && id != EOS).collect()
}

/// Reward for a rollout: the chosen ROUGE variant's F1 between the
/// candidate and reference token ids, markers excluded.
pub fn rouge_reward(candidate: &[usize], reference: &[usize], variant: RougeVariant) -> f64 {
    variant.score(&content_ids(candidate), &content_ids(reference)).f1
}

/// Policy-gradient loss `−(R − b) · Σ_t log P(y_t)`. When the reward
/// equals the baseline the loss (and every gradient) is exactly zero.
pub fn policy_gradient_loss(
    tape: &mut Tape,
    log_probs: &[Var],
    reward: f64,
    baseline: f64,
) -> Result<Var> {
    if log_probs.is_empty() {
        return Err(Error::Contract("policy gradient needs at least one step".into()));
    }
    let mut total = log_probs[0];
    for &lp in &log_probs[1..] {
        total = tape.add(total, lp)?;
    }
    Ok(tape.scale(total, baseline - reward))
}

/// Blend of sequence-level and token-level losses:
/// `gamma · rl + (1 − gamma) · xent`.
pub fn mixed_loss(tape: &mut Tape, rl: Var, xent: Var, gamma: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("mixed-loss gamma must be in [0, 1], got {gamma}")));
    }
    let a = tape.scale(rl, gamma);
    let b = tape.scale(xent, 1.0 - gamma);
    tape.add(a, b)
}

/// Split point for the curriculum: positions before `t*` keep the
/// token-level loss, positions from `t*` on are trained by policy
/// gradient. After `warm` epochs the split advances by `delta` every
/// `every` epochs until the whole sequence is policy-trained.
pub fn mixer_plan(
    seq_len: usize,
    delta: usize,
    every: usize,
    warm: usize,
    epoch: u64,
) -> Result<usize> {
    if delta == 0 {
        return Err(Error::Config("curriculum delta must be at least 1".into()));
    }
    if every == 0 {
        return Err(Error::Config("curriculum epoch period must be at least 1".into()));
    }
    if (epoch as usize) < warm {
        return Ok(seq_len);
    }
    let advances = 1 + (epoch as usize - warm) / every;
    Ok(seq_len.saturating_sub(delta * advances))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when already within the budget).
/// The comparison allows a few rounding ulps so that clipping an
/// already-clipped set of gradients changes nothing.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|&x| x * x).sum();
    let norm = sq.sqrt();
    if norm <= max_norm * (1.0 + 1e-12) || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    scale
}

/// Pull each parameter's gradient off the tape, in store order;
/// parameters the loss never touched get zeros.
pub fn extract_gradients(tape: &Tape, bound: &BoundParams, store: &ParamStore) -> Vec<Vec<f64>> {
    bound
        .vars
        .iter()
        .zip(store.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.data.len()], |g| g.to_vec()))
        .collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must be in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are kept in [`ParamStore`]
/// order so checkpoints can restore them by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Adam> {
        config.validate()?;
        let m = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = store.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Ok(Adam { config, m, v, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update: `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
    /// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected `m̂`, `v̂`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters but got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..grads.len() {
            if grads[i].len() != self.m[i].len() {
                return Err(Error::Contract(format!(
                    "gradient {i} has {} values but the parameter has {}",
                    grads[i].len(),
                    self.m[i].len()
                )));
            }
            let data = store.data_mut(i);
            for j in 0..grads[i].len() {
                let g = grads[i][j];
                self.m[i][j] = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * g;
                self.v[i][j] = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NATSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    epoch: u64,
    step: u64,
    optimizer_steps: u64,
    has_optimizer: bool,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub store: ParamStore,
    /// `(first moments, second moments, step count)` when the checkpoint
    /// carried optimizer state.
    pub optimizer: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, u64)>,
    pub epoch: u64,
    pub step: u64,
}

fn write_record<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8], first: bool) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 && first {
                return Ok(false);
            }
            return Err(Error::Format("checkpoint ends mid-record".into()));
        }
        filled += n;
    }
    Ok(true)
}

fn read_record<R: Read>(r: &mut R) -> Result<Option<NamedParam>> {
    let mut len4 = [0u8; 4];
    if !read_exact_or_eof(r, &mut len4, true)? {
        return Ok(None);
    }
    let name_len = u32::from_le_bytes(len4) as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("implausible record name length {name_len}")));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact_or_eof(r, &mut name_bytes, false)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
    let mut rank4 = [0u8; 4];
    read_exact_or_eof(r, &mut rank4, false)?;
    let rank = u32::from_le_bytes(rank4) as usize;
    if rank > 2 {
        return Err(Error::Format(format!("record {name:?} has rank {rank}; expected 0..=2")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d8 = [0u8; 8];
        read_exact_or_eof(r, &mut d8, false)?;
        shape.push(u64::from_le_bytes(d8) as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x8 = [0u8; 8];
        read_exact_or_eof(r, &mut x8, false)?;
        data.push(f64::from_le_bytes(x8));
    }
    Ok(Some(NamedParam { name, shape, data }))
}

/// Write model parameters (and optimizer state when given) to `path`.
/// The format round-trips every value bit for bit.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    epoch: u64,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        config: store.config.clone(),
        epoch,
        step,
        optimizer_steps: adam.map_or(0, |a| a.t),
        has_optimizer: adam.is_some(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Format(format!("cannot encode checkpoint header: {e}")))?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in store.params() {
        write_record(&mut w, &p.name, &p.shape, &p.data)?;
    }
    if let Some(adam) = adam {
        for (p, m) in store.params().iter().zip(&adam.m) {
            write_record(&mut w, &format!("adam.m.{}", p.name), &p.shape, m)?;
        }
        for (p, v) in store.params().iter().zip(&adam.v) {
            write_record(&mut w, &format!("adam.v.{}", p.name), &p.shape, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], validating the
/// magic, version, and that every parameter matches the stored config.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file is too short to be a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic; not a checkpoint file".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|_| Error::Format("checkpoint ends before version".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|_| Error::Format("checkpoint ends before header".into()))?;
    let json_len = u32::from_le_bytes(len4) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|_| Error::Format("checkpoint header is truncated".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("cannot parse checkpoint header: {e}")))?;
    let mut model_params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    while let Some(rec) = read_record(&mut r)? {
        if let Some(rest) = rec.name.strip_prefix("adam.m.") {
            adam_m.push(NamedParam { name: rest.to_string(), ..rec });
        } else if let Some(rest) = rec.name.strip_prefix("adam.v.") {
            adam_v.push(NamedParam { name: rest.to_string(), ..rec });
        } else {
            model_params.push(rec);
        }
    }
    let mut store = ParamStore::init(meta.config.clone(), 0)?;
    store.set_all(&model_params)?;
    let optimizer = if meta.has_optimizer {
        if adam_m.len() != model_params.len() || adam_v.len() != model_params.len() {
            return Err(Error::Format(format!(
                "optimizer state is incomplete: {} parameters but {} first / {} second moments",
                model_params.len(),
                adam_m.len(),
                adam_v.len()
            )));
        }
        for (mom, p) in adam_m.iter().chain(&adam_v).zip(model_params.iter().cycle()) {
            if mom.name != p.name || mom.shape != p.shape {
                return Err(Error::Format(format!(
                    "optimizer moment {:?} does not line up with parameter {:?}",
                    mom.name, p.name
                )));
            }
        }
        Some((
            adam_m.into_iter().map(|p| p.data).collect(),
            adam_v.into_iter().map(|p| p.data).collect(),
            meta.optimizer_steps,
        ))
    } else {
        None
    };
    Ok(LoadedCheckpoint { store, optimizer, epoch: meta.epoch, step: meta.step })
}

/// Baseline for plain policy-gradient training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineMode {
    /// A constant subtracted from every reward.
    Fixed { value: f64 },
    /// Exponential moving average of observed rewards.
    MovingAverage { decay: f64 },
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::Fixed { value: 0.0 }
    }
}

/// Everything the training loop needs beyond the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling.
    pub max_grad_norm: f64,
    /// Truth-feeding schedule for scheduled sampling; also the blend
    /// schedule for the token-level part of self-critical training.
    pub dad: DecaySchedule,
    /// k for the fused-embedding input.
    pub fused_top_k: usize,
    /// Curriculum: split advance size, epoch period, and warm-up epochs.
    pub mixer_delta: usize,
    pub mixer_every: usize,
    pub mixer_warm: usize,
    /// Weight of the sequence-level part in the blended loss.
    pub rl_weight: f64,
    pub reward: RougeVariant,
    pub baseline: BaselineMode,
    /// Weight on the coverage loss term.
    pub coverage_weight: f64,
    /// Step budget for rollouts and evaluation decoding.
    pub rollout_max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::CrossEntropy,
            epochs: 35,
            batch_size: 16,
            seed: 1,
            adam: AdamConfig::default(),
            max_grad_norm: 2.0,
            dad: DecaySchedule::Constant { p: 0.75 },
            fused_top_k: 5,
            mixer_delta: 2,
            mixer_every: 1,
            mixer_warm: 1,
            rl_weight: 0.99,
            reward: RougeVariant::RougeL,
            baseline: BaselineMode::default(),
            coverage_weight: 1.0,
            rollout_max_steps: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam.validate()?;
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be positive".into()));
        }
        self.dad.validate()?;
        if self.fused_top_k == 0 {
            return Err(Error::Config("fused_top_k must be at least 1".into()));
        }
        if self.mixer_delta == 0 || self.mixer_every == 0 {
            return Err(Error::Config("mixer delta and epoch period must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rl_weight) {
            return Err(Error::Config("rl_weight must be in [0, 1]".into()));
        }
        if !(self.coverage_weight >= 0.0) {
            return Err(Error::Config("coverage_weight must be non-negative".into()));
        }
        if self.rollout_max_steps == 0 {
            return Err(Error::Config("rollout_max_steps must be at least 1".into()));
        }
        if let BaselineMode::MovingAverage { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config("baseline decay must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// One metrics-log row: per-epoch training loss and evaluation ROUGE F1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub strategy: Strategy,
    pub loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,strategy,loss,rouge1,rouge2,rougeL";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.strategy, self.loss, self.rouge1, self.rouge2, self.rouge_l
        )
    }
}

/// Per-rollout diagnostics from sequence-level steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutDiag {
    /// Sampled rollout matched the greedy rollout token for token.
    pub matched: bool,
    /// Value of this rollout's policy-gradient loss term.
    pub rl_loss: f64,
}

/// One optimizer step's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// One entry per example on sequence-level strategies; empty
    /// otherwise (self-critical fills `matched`).
    pub rollouts: Vec<RolloutDiag>,
}

/// One epoch's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub mean_loss: f64,
    pub steps: Vec<StepReport>,
}

/// Per-epoch RNG: derived from the seed and epoch index only, so a
/// resumed run consumes exactly the same stream.
fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D))
}

/// Owns the model, optimizer, and counters across epochs.
pub struct Trainer {
    pub store: ParamStore,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    baseline_ema: Option<f64>,
}

impl Trainer {
    pub fn new(store: ParamStore, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let adam = Adam::new(config.adam, &store)?;
        Ok(Trainer { store, adam, config, epoch: 0, step: 0, baseline_ema: None })
    }

    /// Continue from a checkpoint: restores parameters, optimizer
    /// moments, and the epoch/step counters.
    pub fn resume(loaded: LoadedCheckpoint, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut adam = Adam::new(config.adam, &loaded.store)?;
        if let Some((m, v, t)) = loaded.optimizer {
            adam.m = m;
            adam.v = v;
            adam.t = t;
        }
        Ok(Trainer {
            store: loaded.store,
            adam,
            config,
            epoch: loaded.epoch,
            step: loaded.step,
            baseline_ema: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, Some(&self.adam), self.epoch, self.step)
    }

    fn current_baseline(&self) -> f64 {
        match self.config.baseline {
            BaselineMode::Fixed { value } => value,
            BaselineMode::MovingAverage { .. } => self.baseline_ema.unwrap_or(0.0),
        }
    }

    fn observe_reward(&mut self, reward: f64) {
        if let BaselineMode::MovingAverage { decay } = self.config.baseline {
            let prev = self.baseline_ema.unwrap_or(0.0);
            self.baseline_ema = Some(decay * prev + (1.0 - decay) * reward);
        }
    }

    fn word_level_feed(&self) -> Result<Option<InputFeed>> {
        Ok(match self.config.strategy {
            Strategy::CrossEntropy => Some(InputFeed::Truth),
            Strategy::ScheduledSampling => {
                Some(InputFeed::Scheduled { p_truth: self.config.dad.probability(self.step)? })
            }
            Strategy::FusedEmbedding => {
                Some(InputFeed::Fused { top_k: self.config.fused_top_k })
            }
            _ => None,
        })
    }

    fn train_step(
        &mut self,
        examples: &[&ExtendedExample],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape)?;
        let cov_w = self.config.coverage_weight;
        let mut rollouts = Vec::new();
        let loss = if let Some(feed) = self.word_level_feed()? {
            batch_nll(&mut tape, &bound, examples, feed, cov_w, rng)?
        } else {
            match self.config.strategy {
                Strategy::Reinforce => {
                    let mut terms = Vec::with_capacity(examples.len());
                    for ex in examples {
                        let max_oov = ex.oov_count();
                        let enc = encode(&mut tape, &bound, &ex.source_ids)?;
                        let sampled = rollout(
                            &mut tape,
                            &bound,
                            &enc,
                            &ex.source_ext_ids,
                            max_oov,
                            RolloutMode::Sample,
                            self.config.rollout_max_steps,
                            rng,
                        )?;
                        let reward =
                            rouge_reward(&sampled.ids, &ex.target_ext_ids, self.config.reward);
                        let baseline = self.current_baseline();
                        self.observe_reward(reward);
                        let term =
                            policy_gradient_loss(&mut tape, &sampled.log_probs, reward, baseline)?;
                        rollouts.push(RolloutDiag { matched: false, rl_loss: tape.value(term) });
                        terms.push(term);
                    }
                    mean_of(&mut tape, &terms)?
                }
                Strategy::SelfCritical => {
                    let mut terms = Vec::with_capacity(examples.len());
                    for ex in examples {
                        let max_oov = ex.oov_count();
                        let enc = encode(&mut tape, &bound, &ex.source_ids)?;
                        let sampled = rollout(
                            &mut tape,
                            &bound,
                            &enc,
                            &ex.source_ext_ids,
                            max_oov,
                            RolloutMode::Sample,
                            self.config.rollout_max_steps,
                            rng,
                        )?;
                        // The baseline rollout is a constant: no gradient
                        // flows through it, so skip the bookkeeping.
                        tape.set_grad_enabled(false);
                        let greedy = rollout(
                            &mut tape,
                            &bound,
                            &enc,
                            &ex.source_ext_ids,
                            max_oov,
                            RolloutMode::Greedy,
                            self.config.rollout_max_steps,
                            rng,
                        )?;
                        tape.set_grad_enabled(true);
                        let reward =
                            rouge_reward(&sampled.ids, &ex.target_ext_ids, self.config.reward);
                        let baseline =
                            rouge_reward(&greedy.ids, &ex.target_ext_ids, self.config.reward);
                        let term =
                            policy_gradient_loss(&mut tape, &sampled.log_probs, reward, baseline)?;
                        rollouts.push(RolloutDiag {
                            matched: sampled.ids == greedy.ids,
                            rl_loss: tape.value(term),
                        });
                        terms.push(term);
                    }
                    let rl = mean_of(&mut tape, &terms)?;
                    let p_truth = self.config.dad.probability(self.step)?;
                    let xent = batch_nll(
                        &mut tape,
                        &bound,
                        examples,
                        InputFeed::Scheduled { p_truth },
                        cov_w,
                        rng,
                    )?;
                    mixed_loss(&mut tape, rl, xent, self.config.rl_weight)?
                }
                Strategy::Mixer => {
                    self.mixer_step(&mut tape, &bound, examples, &mut rollouts, rng)?
                }
                _ => unreachable!("word-level strategies handled above"),
            }
        };
        tape.backward(loss)?;
        let mut grads = extract_gradients(&tape, &bound, &self.store);
        clip_gradients(&mut grads, self.config.max_grad_norm);
        self.adam.step(&mut self.store, &grads)?;
        self.step += 1;
        Ok(StepReport { loss: tape.value(loss), rollouts })
    }

    /// Curriculum step: teacher-force a shrinking prefix under the
    /// token-level loss, sample the rest, and reinforce the sampled
    /// suffix by the reward of the full hybrid sequence.
    fn mixer_step(
        &mut self,
        tape: &mut Tape,
        bound: &BoundParams,
        examples: &[&ExtendedExample],
        rollouts: &mut Vec<RolloutDiag>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let pointer = bound.switch.is_some();
        let cfg = self.config.clone();
        let mut prefix_logs: Vec<Var> = Vec::new();
        let mut prefix_tokens = 0usize;
        let mut cov_terms: Vec<Var> = Vec::new();
        let mut rl_terms: Vec<Var> = Vec::new();
        for ex in examples {
            let max_oov = ex.oov_count();
            let targets: &[usize] = if pointer { &ex.target_ext_ids } else { &ex.target_ids };
            let seq_len = targets.len() - 1;
            let split =
                mixer_plan(seq_len, cfg.mixer_delta, cfg.mixer_every, cfg.mixer_warm, self.epoch)?;
            let reachable =
                if pointer { bound.config.vocab_size + max_oov } else { bound.config.vocab_size };
            let enc = encode(tape, bound, &ex.source_ids)?;
            let mut state = DecoderState::initial(tape, bound, &enc);
            let mut prev = targets[0];
            let mut hybrid: Vec<usize> = Vec::new();
            let mut suffix_logs: Vec<Var> = Vec::new();
            let mut t = 0usize;
            loop {
                if t < split {
                    // Teacher-forced prefix under the token-level loss.
                    let out = decoder_step(tape, bound, &enc, &state, prev)?;
                    let dist =
                        predictive_distribution(tape, bound, &out, &ex.source_ext_ids, max_oov)?;
                    let target = targets[t + 1];
                    if target >= reachable {
                        return Err(Error::Data(format!(
                            "target id {target} is unreachable: this example can produce only {reachable} ids"
                        )));
                    }
                    let p = tape.select(dist, target)?;
                    let p = tape.clamp_min(p, LOG_FLOOR);
                    prefix_logs.push(tape.log(p));
                    prefix_tokens += 1;
                    if let Some(cl) = out.covloss {
                        cov_terms.push(cl);
                    }
                    hybrid.push(target);
                    state = out.state;
                    prev = target;
                    t += 1;
                    if t >= seq_len {
                        break;
                    }
                } else {
                    // Sampled suffix, reinforced below.
                    let out = decoder_step(tape, bound, &enc, &state, prev)?;
                    let dist =
                        predictive_distribution(tape, bound, &out, &ex.source_ext_ids, max_oov)?;
                    let probs = tape.data(dist);
                    let total: f64 = probs.iter().sum();
                    if total <= 0.0 {
                        return Err(Error::Numeric(
                            "every next-token probability is zero".into(),
                        ));
                    }
                    let target = rng.gen_range(0.0..1.0) * total;
                    let mut cum = 0.0;
                    let mut picked = None;
                    for (i, &p) in probs.iter().enumerate() {
                        if p <= 0.0 {
                            continue;
                        }
                        cum += p;
                        if cum > target {
                            picked = Some(i);
                            break;
                        }
                    }
                    let id = picked.unwrap_or_else(|| {
                        probs.iter().rposition(|&p| p > 0.0).expect("total > 0")
                    });
                    let p = tape.select(dist, id)?;
                    let p = tape.clamp_min(p, LOG_FLOOR);
                    suffix_logs.push(tape.log(p));
                    hybrid.push(id);
                    state = out.state;
                    prev = id;
                    t += 1;
                    if id == EOS || t >= cfg.rollout_max_steps.max(seq_len) {
                        break;
                    }
                }
            }
            if !suffix_logs.is_empty() {
                let reward = rouge_reward(&hybrid, &ex.target_ext_ids, cfg.reward);
                let baseline = self.current_baseline();
                self.observe_reward(reward);
                let term = policy_gradient_loss(tape, &suffix_logs, reward, baseline)?;
                rollouts.push(RolloutDiag { matched: false, rl_loss: tape.value(term) });
                rl_terms.push(term);
            }
        }
        let mut parts: Vec<Var> = Vec::new();
        if !prefix_logs.is_empty() {
            let mut sum = prefix_logs[0];
            for &lp in &prefix_logs[1..] {
                sum = tape.add(sum, lp)?;
            }
            let mut xent = tape.scale(sum, -1.0 / prefix_tokens as f64);
            if !cov_terms.is_empty() {
                let mut cov = cov_terms[0];
                for &c in &cov_terms[1..] {
                    cov = tape.add(cov, c)?;
                }
                let weighted = tape.scale(cov, cfg.coverage_weight / prefix_tokens as f64);
                xent = tape.add(xent, weighted)?;
            }
            parts.push(xent);
        }
        if !rl_terms.is_empty() {
            parts.push(mean_of(tape, &rl_terms)?);
        }
        let mut total = *parts
            .first()
            .ok_or_else(|| Error::Contract("curriculum step produced no loss terms".into()))?;
        for &p in &parts[1..] {
            total = tape.add(total, p)?;
        }
        Ok(total)
    }

    /// One pass over `examples` (shuffled with this epoch's RNG) in
    /// batches, one optimizer step per batch.
    pub fn train_epoch(&mut self, examples: &[ExtendedExample]) -> Result<EpochReport> {
        if examples.is_empty() {
            return Err(Error::Contract("cannot train on an empty corpus".into()));
        }
        let mut rng = epoch_rng(self.config.seed, self.epoch);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut steps = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&ExtendedExample> = chunk.iter().map(|&i| &examples[i]).collect();
            steps.push(self.train_step(&batch, &mut rng)?);
        }
        self.epoch += 1;
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        Ok(EpochReport { mean_loss, steps })
    }

    /// Greedy-decode every example and score the corpus; returns the
    /// three ROUGE F1 means (1, 2, L).
    pub fn evaluate(&self, examples: &[ExtendedExample]) -> Result<(f64, f64, f64)> {
        let mut pairs = Vec::with_capacity(examples.len());
        for ex in examples {
            let mut tape = Tape::new();
            tape.set_grad_enabled(false);
            let mut stepper = ModelStepper::new(
                &mut tape,
                &self.store,
                &ex.source_ids,
                &ex.source_ext_ids,
                ex.oov_count(),
            )?;
            let hyp = greedy_decode(&mut stepper, self.config.rollout_max_steps)?;
            pairs.push((content_ids(&hyp.ids), content_ids(&ex.target_ext_ids)));
        }
        let scores = evaluate_corpus(&pairs)?;
        Ok((scores[0].1.f1, scores[1].1.f1, scores[2].1.f1))
    }

    /// Train until `until_epoch` completed epochs, evaluating after each
    /// epoch and handing every metrics row to `on_row` as it is made.
    pub fn run<F>(
        &mut self,
        train: &[ExtendedExample],
        eval: &[ExtendedExample],
        until_epoch: usize,
        mut on_row: F,
    ) -> Result<Vec<MetricsRow>>
    where
        F: FnMut(&MetricsRow, &EpochReport),
    {
        let mut rows = Vec::new();
        while (self.epoch as usize) < until_epoch {
            let report = self.train_epoch(train)?;
            let (r1, r2, rl) = self.evaluate(eval)?;
            let row = MetricsRow {
                epoch: self.epoch,
                step: self.step,
                strategy: self.config.strategy,
                loss: report.mean_loss,
                rouge1: r1,
                rouge2: r2,
                rouge_l: rl,
            };
            on_row(&row, &report);
            rows.push(row);
        }
        Ok(rows)
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Contract("cannot average zero loss terms".into()));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}
