//! Inference-time decoding: greedy, beam search, diverse variants, and
//! reranking.
//!
//! Everything here works against the [`StepModel`] trait — one call per
//! decoding step, returning the next-token distribution over the
//! extended vocabulary — so the algorithms can be exercised with small
//! hand-built models and cross-checked against exhaustive enumeration.
//! [`ModelStepper`] adapts the real encoder-decoder to the trait.

use std::collections::HashSet;

use crate::encdec::{encode, decoder_step, BoundParams, DecoderState, EncoderOutput, ParamStore};
use crate::error::{Error, Result};
use crate::pointer::{extended_distribution, generation_probability};
use crate::tensor::Tape;
use crate::textdata::{EOS, SOS};

/// One decoding step's output: the distribution over the next token, the
/// attention record for unknown-token replacement, and the carried state.
pub struct ModelStep<S> {
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub state: S,
}

/// A conditional sequence model stepped one token at a time.
///
/// The first call receives the state from [`StepModel::start`] and the
/// start-of-sequence id; each later call receives the state returned by
/// the previous step and the token the search emitted.
pub trait StepModel {
    type State: Clone;

    fn start(&mut self) -> Result<Self::State>;

    /// Size of the distribution returned by every step.
    fn ext_vocab_size(&self) -> usize;

    fn step(&mut self, state: &Self::State, prev_id: usize) -> Result<ModelStep<Self::State>>;
}

/// The trained encoder-decoder exposed as a [`StepModel`] for one source
/// article. Gradient tracking should be off on the tape; decoding only
/// reads values.
pub struct ModelStepper<'t> {
    tape: &'t mut Tape,
    bound: BoundParams,
    enc: EncoderOutput,
    source_ext_ids: Vec<usize>,
    max_oov: usize,
}

impl<'t> ModelStepper<'t> {
    /// Bind `store` onto `tape`, encode the source, and fix the copy
    /// targets. `max_oov` widens the extended vocabulary beyond this
    /// example's own out-of-vocabulary count when decoding alongside a
    /// batch; pass the example's own count when decoding alone.
    pub fn new(
        tape: &'t mut Tape,
        store: &ParamStore,
        source_ids: &[usize],
        source_ext_ids: &[usize],
        max_oov: usize,
    ) -> Result<Self> {
        if source_ids.len() != source_ext_ids.len() {
            return Err(Error::DimMismatch {
                op: "ModelStepper::new",
                lhs: vec![source_ids.len()],
                rhs: vec![source_ext_ids.len()],
            });
        }
        let bound = store.bind(tape)?;
        let enc = encode(tape, &bound, source_ids)?;
        Ok(ModelStepper { tape, bound, enc, source_ext_ids: source_ext_ids.to_vec(), max_oov })
    }
}

impl StepModel for ModelStepper<'_> {
    type State = DecoderState;

    fn start(&mut self) -> Result<DecoderState> {
        Ok(DecoderState::initial(self.tape, &self.bound, &self.enc))
    }

    fn ext_vocab_size(&self) -> usize {
        if self.bound.switch.is_some() {
            self.bound.config.vocab_size + self.max_oov
        } else {
            self.bound.config.vocab_size
        }
    }

    fn step(&mut self, state: &DecoderState, prev_id: usize) -> Result<ModelStep<DecoderState>> {
        let out = decoder_step(self.tape, &self.bound, &self.enc, state, prev_id)?;
        let dist = match &self.bound.switch {
            Some(switch) => {
                let p_gen = generation_probability(
                    self.tape,
                    switch,
                    out.context,
                    out.hidden,
                    out.prev_emb,
                )?;
                extended_distribution(
                    self.tape,
                    out.p_vocab,
                    out.attn_weights,
                    p_gen,
                    &self.source_ext_ids,
                    self.max_oov,
                )?
            }
            None => out.p_vocab,
        };
        Ok(ModelStep {
            probs: self.tape.data(dist).to_vec(),
            attention: self.tape.data(out.attn_weights).to_vec(),
            state: out.state,
        })
    }
}

/// A decoded candidate summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted extended-vocabulary ids, including the end marker when
    /// one was produced.
    pub ids: Vec<usize>,
    /// Sum of the log-probabilities of the emitted ids.
    pub log_prob: f64,
    /// Attention weights recorded as each id was emitted.
    pub attention: Vec<Vec<f64>>,
    /// Whether the hypothesis ended with the end marker.
    pub finished: bool,
    /// Which diversity group produced it (0 outside diverse search).
    pub group: usize,
}

impl Hypothesis {
    /// Ranking score `log_prob / len^p`; `p = 0` ranks by raw score.
    pub fn normalized_score(&self, length_power: f64) -> f64 {
        if self.ids.is_empty() {
            return self.log_prob;
        }
        self.log_prob / (self.ids.len() as f64).powf(length_power)
    }

    fn empty(group: usize) -> Hypothesis {
        Hypothesis { ids: Vec::new(), log_prob: 0.0, attention: Vec::new(), finished: false, group }
    }
}

/// Beam search settings.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    /// Total number of hypotheses kept live (`B`).
    pub beam_width: usize,
    /// Maximum emitted tokens per hypothesis.
    pub max_steps: usize,
    /// Length-normalization exponent for final ranking (0 = none).
    pub length_power: f64,
    /// Penalty subtracted per sibling rank within one parent (0 = off).
    pub sibling_penalty: f64,
    /// Number of diversity groups (1 = plain beam search).
    pub num_groups: usize,
    /// Penalty per step on which a candidate repeats an earlier group's
    /// token at the same position (0 = off).
    pub diversity_strength: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 4,
            max_steps: 100,
            length_power: 0.0,
            sibling_penalty: 0.0,
            num_groups: 1,
            diversity_strength: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.num_groups == 0 {
            return Err(Error::Config("num_groups must be at least 1".into()));
        }
        if self.beam_width % self.num_groups != 0 {
            return Err(Error::Config(format!(
                "beam_width {} is not divisible by num_groups {}",
                self.beam_width, self.num_groups
            )));
        }
        if self.sibling_penalty < 0.0 {
            return Err(Error::Config("sibling_penalty must be non-negative".into()));
        }
        if self.diversity_strength < 0.0 {
            return Err(Error::Config("diversity_strength must be non-negative".into()));
        }
        if !(self.length_power >= 0.0 && self.length_power.is_finite()) {
            return Err(Error::Config("length_power must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Greedy decoding: emit the most probable token each step, smallest id
/// on ties, until the end marker or `max_steps`.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_steps: usize) -> Result<Hypothesis> {
    let mut state = model.start()?;
    let mut hyp = Hypothesis::empty(0);
    let mut prev = SOS;
    for _ in 0..max_steps {
        let out = model.step(&state, prev)?;
        let mut best: Option<(usize, f64)> = None;
        for (id, &p) in out.probs.iter().enumerate() {
            if p > 0.0 && best.map_or(true, |(_, bp)| p > bp) {
                best = Some((id, p));
            }
        }
        let (id, p) = best.ok_or_else(|| {
            Error::Numeric("every next-token probability is zero".into())
        })?;
        hyp.ids.push(id);
        hyp.log_prob += p.ln();
        hyp.attention.push(out.attention);
        state = out.state;
        prev = id;
        if id == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Replay a fixed id sequence through the model and return its total
/// log-probability (negative infinity if any step assigns it zero mass).
pub fn score_sequence<M: StepModel>(model: &mut M, ids: &[usize]) -> Result<f64> {
    let mut state = model.start()?;
    let mut prev = SOS;
    let mut total = 0.0;
    for &id in ids {
        let out = model.step(&state, prev)?;
        if id >= out.probs.len() {
            return Err(Error::Index { what: "sequence token id", index: id, bound: out.probs.len() });
        }
        total += out.probs[id].ln();
        state = out.state;
        prev = id;
    }
    Ok(total)
}

struct Beam<S> {
    hyp: Hypothesis,
    state: S,
}

struct Candidate {
    selection: f64,
    parent: usize,
    id: usize,
    log_p: f64,
}

fn rank_hypotheses(pool: &mut [Hypothesis], length_power: f64) {
    pool.sort_by(|a, b| {
        let an = a.normalized_score(length_power);
        let bn = b.normalized_score(length_power);
        bn.partial_cmp(&an)
            .expect("hypothesis scores are never NaN")
            .then(b.log_prob.partial_cmp(&a.log_prob).expect("hypothesis scores are never NaN"))
            .then(a.ids.cmp(&b.ids))
    });
}

/// Advance one group's beam a single step. Returns the token ids chosen
/// this step (for cross-group diversity bookkeeping).
fn advance_group<M: StepModel>(
    model: &mut M,
    live: &mut Vec<Beam<M::State>>,
    finished: &mut Vec<Hypothesis>,
    width: usize,
    cfg: &BeamConfig,
    penalty: &dyn Fn(&[usize]) -> f64,
) -> Result<Vec<usize>> {
    let cap = width.min(model.ext_vocab_size());
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut expansions: Vec<ModelStep<M::State>> = Vec::with_capacity(live.len());
    for (pi, beam) in live.iter().enumerate() {
        let prev = beam.hyp.ids.last().copied().unwrap_or(SOS);
        let out = model.step(&beam.state, prev)?;
        // Sibling rank is by raw probability; the per-parent shortlist
        // is cut on the adjusted selection score so penalties can steer
        // the beam toward tokens the raw ranking would have dropped.
        let mut ranked: Vec<(usize, f64)> =
            out.probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).expect("probabilities are never NaN").then(a.0.cmp(&b.0))
        });
        let mut proposals: Vec<Candidate> = Vec::with_capacity(ranked.len());
        for (rank, &(id, p)) in ranked.iter().enumerate() {
            let log_p = p.ln();
            let mut selection = beam.hyp.log_prob + log_p;
            if cfg.sibling_penalty > 0.0 {
                selection -= cfg.sibling_penalty * (rank + 1) as f64;
            }
            if cfg.num_groups > 1 && cfg.diversity_strength > 0.0 {
                let mut extended = beam.hyp.ids.clone();
                extended.push(id);
                selection += penalty(&extended);
            }
            proposals.push(Candidate { selection, parent: pi, id, log_p });
        }
        proposals.sort_by(|a, b| {
            b.selection
                .partial_cmp(&a.selection)
                .expect("selection scores are never NaN")
                .then(a.id.cmp(&b.id))
        });
        proposals.truncate(cap);
        candidates.extend(proposals);
        expansions.push(out);
    }
    candidates.sort_by(|a, b| {
        b.selection
            .partial_cmp(&a.selection)
            .expect("selection scores are never NaN")
            .then(a.parent.cmp(&b.parent))
            .then(a.id.cmp(&b.id))
    });
    let mut next_live: Vec<Beam<M::State>> = Vec::with_capacity(width);
    let mut chosen = Vec::new();
    for c in candidates {
        if next_live.len() >= width || finished.len() >= width {
            break;
        }
        let parent = &live[c.parent];
        let expansion = &expansions[c.parent];
        let mut hyp = parent.hyp.clone();
        hyp.ids.push(c.id);
        hyp.log_prob += c.log_p;
        hyp.attention.push(expansion.attention.clone());
        chosen.push(c.id);
        if c.id == EOS {
            hyp.finished = true;
            finished.push(hyp);
        } else {
            next_live.push(Beam { hyp, state: expansion.state.clone() });
        }
    }
    *live = next_live;
    Ok(chosen)
}

/// Beam search over the extended vocabulary.
///
/// Each step, every live hypothesis proposes its `min(B, |V|)` most
/// probable continuations (zero-probability tokens are never proposed);
/// the pooled candidates are taken in selection-score order, hypotheses
/// reaching the end marker move to a finished pool without consuming a
/// live slot, and the rest refill the beam. The search stops once the
/// finished pool holds `B` hypotheses or `max_steps` is reached; if
/// fewer than `B` finished, the best live hypotheses pad the pool.
///
/// With `num_groups > 1` the beam splits into groups of `B / G`, stepped
/// in a fixed order; a candidate's selection score is docked
/// `diversity_strength` for every step at which it repeats a token some
/// earlier group chose at that same step. With `sibling_penalty > 0`, a
/// candidate's selection score is docked the penalty times its rank
/// among its own parent's continuations. Selection scores only steer the
/// search: `log_prob` on every returned hypothesis is the plain sum of
/// emitted log-probabilities, and the returned list is sorted by
/// `log_prob / len^length_power`.
pub fn beam_search<M: StepModel>(model: &mut M, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let groups = cfg.num_groups;
    let width = cfg.beam_width / groups;
    let mut lives: Vec<Vec<Beam<M::State>>> = Vec::with_capacity(groups);
    for g in 0..groups {
        lives.push(vec![Beam { hyp: Hypothesis::empty(g), state: model.start()? }]);
    }
    let mut finisheds: Vec<Vec<Hypothesis>> = vec![Vec::new(); groups];
    // emitted[g][t]: tokens group g committed to at step t.
    let mut emitted: Vec<Vec<HashSet<usize>>> = vec![Vec::new(); groups];
    for _ in 0..cfg.max_steps {
        let done =
            (0..groups).all(|g| finisheds[g].len() >= width || lives[g].is_empty());
        if done {
            break;
        }
        for g in 0..groups {
            if finisheds[g].len() >= width || lives[g].is_empty() {
                emitted[g].push(HashSet::new());
                continue;
            }
            let earlier = &emitted[..g];
            let lambda = cfg.diversity_strength;
            let penalty = move |ids: &[usize]| -> f64 {
                let mut clashes = 0usize;
                for (t, id) in ids.iter().enumerate() {
                    if earlier.iter().any(|group| group.get(t).is_some_and(|s| s.contains(id))) {
                        clashes += 1;
                    }
                }
                -lambda * clashes as f64
            };
            let chosen =
                advance_group(model, &mut lives[g], &mut finisheds[g], width, cfg, &penalty)?;
            emitted[g].push(chosen.into_iter().collect());
        }
    }
    let mut all = Vec::with_capacity(cfg.beam_width);
    for g in 0..groups {
        let mut pool = std::mem::take(&mut finisheds[g]);
        if pool.len() < width {
            let mut live_hyps: Vec<Hypothesis> =
                lives[g].drain(..).map(|b| b.hyp).collect();
            rank_hypotheses(&mut live_hyps, cfg.length_power);
            for hyp in live_hyps {
                if pool.len() >= width {
                    break;
                }
                pool.push(hyp);
            }
        }
        all.extend(pool);
    }
    if all.is_empty() {
        return Err(Error::Numeric("beam search produced no hypotheses".into()));
    }
    rank_hypotheses(&mut all, cfg.length_power);
    Ok(all)
}

/// Rerank an N-best list by `log_prob + lm_weight * scorer(ids) +
/// length_bonus * len`, best first. `scorer` is typically a language or
/// reverse-direction model scoring the candidate on its own.
pub fn mmi_rerank<F>(hyps: &mut [Hypothesis], lm_weight: f64, length_bonus: f64, scorer: F)
where
    F: Fn(&[usize]) -> f64,
{
    let mut keyed: Vec<(f64, Hypothesis)> = hyps
        .iter()
        .map(|h| {
            (h.log_prob + lm_weight * scorer(&h.ids) + length_bonus * h.ids.len() as f64, h.clone())
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("rerank scores are never NaN"));
    for (slot, (_, hyp)) in hyps.iter_mut().zip(keyed) {
        *slot = hyp;
    }
}
