//! Encoder-decoder model: configuration, parameters, and forward steps.
//!
//! The encoder is a bi-directional LSTM over embedded source tokens; each
//! source position exposes the concatenation of its forward and backward
//! hidden states. The decoder is a single LSTM whose width equals that
//! concatenation (twice the per-direction hidden size), so the encoder's
//! final cell states carry straight over while the hidden states pass
//! through a tanh bridge.
//!
//! Decoding uses input feeding: each step consumes the previous token's
//! embedding concatenated with the previous step's attention hidden state
//! (a zero vector on the first step). Attention supports three alignment
//! scores — dot, general (bilinear), and concat (additive) — and the
//! concat form optionally reads a coverage column.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repetition;
use crate::tensor::{Tape, Var};
use crate::textdata::UNK;

/// Attention alignment score family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Dot,
    General,
    Concat,
}

impl Alignment {
    pub fn letter(self) -> char {
        match self {
            Alignment::Dot => 'D',
            Alignment::General => 'G',
            Alignment::Concat => 'C',
        }
    }
}

/// Feature toggles, one per optional model component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelFlags {
    /// Pointer-generator copy mechanism over source tokens.
    pub pointer: bool,
    /// Temporal attention (scores discounted by their own history).
    pub temporal: bool,
    /// Intra-decoder attention over previous decoder states.
    pub intra_decoder: bool,
    /// Share output projection weights with the embedding table.
    pub weight_sharing: bool,
    /// Coverage vector with a coverage-aware alignment and coverage loss.
    pub coverage: bool,
}

/// Model shape and feature configuration.
///
/// `d_hidden` is the per-direction encoder width; the decoder and every
/// attention-facing vector run at `2 * d_hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub alignment: Alignment,
    pub flags: ModelFlags,
    /// Escape hatch: run temporal attention and coverage together even
    /// though they fight over the same failure mode.
    #[serde(default)]
    pub allow_temporal_with_coverage: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_emb: 128,
            d_hidden: 256,
            vocab_size,
            alignment: Alignment::General,
            flags: ModelFlags::default(),
            allow_temporal_with_coverage: false,
        }
    }

    /// Width of one encoder state and of the decoder hidden/cell state.
    pub fn state_dim(&self) -> usize {
        2 * self.d_hidden
    }

    /// Width of the additive alignment's intermediate vector.
    pub fn align_dim(&self) -> usize {
        2 * self.d_hidden
    }

    /// Check every config invariant; the message names the failed one.
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_hidden == 0 {
            return Err(Error::Config("d_emb and d_hidden must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(
                "vocab_size must exceed the 4 reserved ids".into(),
            ));
        }
        if self.flags.coverage && self.alignment != Alignment::Concat {
            return Err(Error::Config(
                "coverage requires alignment=concat (the coverage column extends the concat score)".into(),
            ));
        }
        if self.flags.temporal && self.flags.coverage && !self.allow_temporal_with_coverage {
            return Err(Error::Config(
                "temporal attention and coverage both fight repetition; enable allow_temporal_with_coverage to combine them".into(),
            ));
        }
        Ok(())
    }

    /// Parse a compact component code: an alignment letter followed by
    /// five 0/1 digits for pointer, temporal, intra-decoder, weight
    /// sharing, and coverage — e.g. `C10101` or `G00000`.
    pub fn parse_code(code: &str) -> Result<(Alignment, ModelFlags)> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 6 {
            return Err(Error::Config(format!(
                "model code {code:?} must be an alignment letter plus five 0/1 digits"
            )));
        }
        let alignment = match chars[0] {
            'D' => Alignment::Dot,
            'G' => Alignment::General,
            'C' => Alignment::Concat,
            other => {
                return Err(Error::Config(format!(
                    "model code {code:?}: unknown alignment letter {other:?}"
                )))
            }
        };
        let mut bits = [false; 5];
        for (i, slot) in bits.iter_mut().enumerate() {
            *slot = match chars[i + 1] {
                '0' => false,
                '1' => true,
                other => {
                    return Err(Error::Config(format!(
                        "model code {code:?}: digit {other:?} is not 0 or 1"
                    )))
                }
            };
        }
        Ok((
            alignment,
            ModelFlags {
                pointer: bits[0],
                temporal: bits[1],
                intra_decoder: bits[2],
                weight_sharing: bits[3],
                coverage: bits[4],
            },
        ))
    }

    pub fn code(&self) -> String {
        let f = &self.flags;
        format!(
            "{}{}{}{}{}{}",
            self.alignment.letter(),
            f.pointer as u8,
            f.temporal as u8,
            f.intra_decoder as u8,
            f.weight_sharing as u8,
            f.coverage as u8
        )
    }
}

/// One named parameter: master copy of the data lives here, off-tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Master store of all trainable parameters for one model.
///
/// Each training step binds the store onto a fresh tape ([`ParamStore::bind`]),
/// runs forward/backward there, and applies updates back to the master
/// data. Parameter order is fixed at construction, so gradient vectors,
/// optimizer slots, and checkpoints all align by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    params: Vec<NamedParam>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Initialize parameters: weights uniform in ±0.1, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore { config, params: Vec::new(), index: HashMap::new() };
        let cfg = store.config.clone();
        let (v, de, dh) = (cfg.vocab_size, cfg.d_emb, cfg.d_hidden);
        let ds = cfg.state_dim();
        let da = cfg.align_dim();

        let weight = |store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
            store.insert(name, shape, data);
        };
        let bias = |store: &mut ParamStore, name: &str, len: usize| {
            store.insert(name, &[len], vec![0.0; len]);
        };

        weight(&mut store, "embedding", &[v, de], &mut rng);
        for (cell, input, hidden) in [
            ("enc_fwd", de, dh),
            ("enc_bwd", de, dh),
            ("dec", de + ds, ds),
        ] {
            for gate in ["i", "f", "g", "o"] {
                weight(&mut store, &format!("{cell}.wx_{gate}"), &[hidden, input], &mut rng);
                weight(&mut store, &format!("{cell}.wh_{gate}"), &[hidden, hidden], &mut rng);
                bias(&mut store, &format!("{cell}.b_{gate}"), hidden);
            }
        }
        weight(&mut store, "bridge.w", &[ds, ds], &mut rng);
        bias(&mut store, "bridge.b", ds);

        let align_params = |store: &mut ParamStore, prefix: &str, with_cov: bool, rng: &mut ChaCha8Rng| {
            match cfg.alignment {
                Alignment::Dot => {}
                Alignment::General => {
                    weight(store, &format!("{prefix}.w"), &[ds, ds], rng);
                }
                Alignment::Concat => {
                    weight(store, &format!("{prefix}.w_key"), &[da, ds], rng);
                    weight(store, &format!("{prefix}.w_query"), &[da, ds], rng);
                    bias(store, &format!("{prefix}.b"), da);
                    weight(store, &format!("{prefix}.v"), &[da], rng);
                    if with_cov {
                        weight(store, &format!("{prefix}.w_cov"), &[da], rng);
                    }
                }
            }
        };
        align_params(&mut store, "attn", cfg.flags.coverage, &mut rng);
        if cfg.flags.intra_decoder {
            align_params(&mut store, "intra", false, &mut rng);
        }

        let fuse_in = if cfg.flags.intra_decoder { 3 * ds } else { 2 * ds };
        weight(&mut store, "attn_out.w", &[ds, fuse_in], &mut rng);
        bias(&mut store, "attn_out.b", ds);

        if cfg.flags.weight_sharing {
            weight(&mut store, "out.proj", &[de, ds], &mut rng);
        } else {
            weight(&mut store, "out.w", &[v, ds], &mut rng);
        }
        bias(&mut store, "out.b", v);

        if cfg.flags.pointer {
            weight(&mut store, "switch.w_ctx", &[1, ds], &mut rng);
            weight(&mut store, "switch.w_hid", &[1, ds], &mut rng);
            weight(&mut store, "switch.w_emb", &[1, de], &mut rng);
            bias(&mut store, "switch.b", 1);
        }
        Ok(store)
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_owned(), self.params.len());
        self.params.push(NamedParam { name: name.to_owned(), shape: shape.to_vec(), data });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&NamedParam> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn data_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.params[i].data
    }

    /// Replace all parameter data (used by checkpoint loading). Names and
    /// shapes must match the store exactly.
    pub fn set_all(&mut self, incoming: &[NamedParam]) -> Result<()> {
        if incoming.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                incoming.len()
            )));
        }
        for p in incoming {
            let i = *self.index.get(&p.name).ok_or_else(|| {
                Error::Format(format!("unexpected parameter {:?}", p.name))
            })?;
            if self.params[i].shape != p.shape {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    p.name, p.shape, self.params[i].shape
                )));
            }
            self.params[i].data = p.data.clone();
        }
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Create tracked leaves for every parameter on `tape` and assemble
    /// the role structure used by the forward functions.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(tape.leaf(p.data.clone(), &p.shape, true)?);
        }
        self.assemble(tape, vars)
    }

    /// Assemble roles from pre-created leaves (`vars` must follow store
    /// order). Gradient checking uses this to own the leaves itself.
    pub fn assemble(&self, tape: &mut Tape, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        let get = |name: &str| -> Result<Var> {
            self.index
                .get(name)
                .map(|&i| vars[i])
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
        };
        let lstm = |cell: &str| -> Result<LstmVars> {
            Ok(LstmVars {
                wx_i: get(&format!("{cell}.wx_i"))?,
                wx_f: get(&format!("{cell}.wx_f"))?,
                wx_g: get(&format!("{cell}.wx_g"))?,
                wx_o: get(&format!("{cell}.wx_o"))?,
                wh_i: get(&format!("{cell}.wh_i"))?,
                wh_f: get(&format!("{cell}.wh_f"))?,
                wh_g: get(&format!("{cell}.wh_g"))?,
                wh_o: get(&format!("{cell}.wh_o"))?,
                b_i: get(&format!("{cell}.b_i"))?,
                b_f: get(&format!("{cell}.b_f"))?,
                b_g: get(&format!("{cell}.b_g"))?,
                b_o: get(&format!("{cell}.b_o"))?,
            })
        };
        let align = |prefix: &str, with_cov: bool| -> Result<AlignVars> {
            Ok(match self.config.alignment {
                Alignment::Dot => AlignVars::Dot,
                Alignment::General => AlignVars::General { w: get(&format!("{prefix}.w"))? },
                Alignment::Concat => AlignVars::Concat {
                    w_key: get(&format!("{prefix}.w_key"))?,
                    w_query: get(&format!("{prefix}.w_query"))?,
                    b: get(&format!("{prefix}.b"))?,
                    v: get(&format!("{prefix}.v"))?,
                    w_cov: if with_cov { Some(get(&format!("{prefix}.w_cov"))?) } else { None },
                },
            })
        };

        let embedding = get("embedding")?;
        let out_w = if self.config.flags.weight_sharing {
            // Shared output projection: rows derived from the embedding
            // table, built once per tape and reused by every step.
            let proj = get("out.proj")?;
            let prod = tape.matmul(embedding, proj)?;
            tape.tanh(prod)
        } else {
            get("out.w")?
        };

        Ok(BoundParams {
            config: self.config.clone(),
            embedding,
            enc_fwd: lstm("enc_fwd")?,
            enc_bwd: lstm("enc_bwd")?,
            dec: lstm("dec")?,
            bridge_w: get("bridge.w")?,
            bridge_b: get("bridge.b")?,
            attn: align("attn", self.config.flags.coverage)?,
            intra: if self.config.flags.intra_decoder {
                Some(align("intra", false)?)
            } else {
                None
            },
            attn_out_w: get("attn_out.w")?,
            attn_out_b: get("attn_out.b")?,
            out_w,
            out_b: get("out.b")?,
            switch: if self.config.flags.pointer {
                Some(SwitchVars {
                    w_ctx: get("switch.w_ctx")?,
                    w_hid: get("switch.w_hid")?,
                    w_emb: get("switch.w_emb")?,
                    b: get("switch.b")?,
                })
            } else {
                None
            },
            vars,
        })
    }
}

/// Per-gate LSTM weights bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wx_i: Var,
    pub wx_f: Var,
    pub wx_g: Var,
    pub wx_o: Var,
    pub wh_i: Var,
    pub wh_f: Var,
    pub wh_g: Var,
    pub wh_o: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_g: Var,
    pub b_o: Var,
}

/// Alignment parameters bound to one tape.
#[derive(Debug, Clone, Copy)]
pub enum AlignVars {
    Dot,
    General { w: Var },
    Concat { w_key: Var, w_query: Var, b: Var, v: Var, w_cov: Option<Var> },
}

/// Pointer-generator switch parameters bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct SwitchVars {
    pub w_ctx: Var,
    pub w_hid: Var,
    pub w_emb: Var,
    pub b: Var,
}

/// All model parameters bound to one tape, organized by role.
pub struct BoundParams {
    pub config: ModelConfig,
    /// Leaves in [`ParamStore`] order (for gradient extraction).
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub enc_fwd: LstmVars,
    pub enc_bwd: LstmVars,
    pub dec: LstmVars,
    pub bridge_w: Var,
    pub bridge_b: Var,
    pub attn: AlignVars,
    pub intra: Option<AlignVars>,
    pub attn_out_w: Var,
    pub attn_out_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub switch: Option<SwitchVars>,
}

/// One LSTM transition.
pub fn lstm_step(
    tape: &mut Tape,
    cell: &LstmVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let gate = |tape: &mut Tape, wx: Var, wh: Var, b: Var| -> Result<Var> {
        let xs = tape.matvec(wx, x)?;
        let hs = tape.matvec(wh, h_prev)?;
        let s = tape.add(xs, hs)?;
        tape.add(s, b)
    };
    let i_pre = gate(tape, cell.wx_i, cell.wh_i, cell.b_i)?;
    let f_pre = gate(tape, cell.wx_f, cell.wh_f, cell.b_f)?;
    let g_pre = gate(tape, cell.wx_g, cell.wh_g, cell.b_g)?;
    let o_pre = gate(tape, cell.wx_o, cell.wh_o, cell.b_o)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok((h, c))
}

/// Encoder output: one state per source position plus the decoder's
/// initial hidden and cell state.
pub struct EncoderOutput {
    pub states: Vec<Var>,
    pub h0: Var,
    pub c0: Var,
}

impl EncoderOutput {
    pub fn source_len(&self) -> usize {
        self.states.len()
    }
}

/// Run the bi-directional encoder over in-vocabulary source ids.
pub fn encode(tape: &mut Tape, bound: &BoundParams, source_ids: &[usize]) -> Result<EncoderOutput> {
    if source_ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty source".into()));
    }
    let dh = bound.config.d_hidden;
    let j_len = source_ids.len();
    let mut embs = Vec::with_capacity(j_len);
    for &id in source_ids {
        embs.push(tape.embed_row(bound.embedding, id)?);
    }

    let mut fwd_h = Vec::with_capacity(j_len);
    let mut fwd_c = Vec::with_capacity(j_len);
    let mut h = tape.zeros(dh);
    let mut c = tape.zeros(dh);
    for &e in &embs {
        let (nh, nc) = lstm_step(tape, &bound.enc_fwd, e, h, c)?;
        h = nh;
        c = nc;
        fwd_h.push(nh);
        fwd_c.push(nc);
    }

    let mut bwd_h = Vec::with_capacity(j_len);
    let mut bwd_c = Vec::with_capacity(j_len);
    let mut h = tape.zeros(dh);
    let mut c = tape.zeros(dh);
    for j in (0..j_len).rev() {
        let (nh, nc) = lstm_step(tape, &bound.enc_bwd, embs[j], h, c)?;
        h = nh;
        c = nc;
        bwd_h.push(nh);
        bwd_c.push(nc);
    }
    bwd_h.reverse();
    bwd_c.reverse();

    let mut states = Vec::with_capacity(j_len);
    for j in 0..j_len {
        states.push(tape.concat(&[fwd_h[j], bwd_h[j]])?);
    }

    // Hidden state bridged through tanh; cell state carried across as-is.
    let bridge_in = tape.concat(&[fwd_h[j_len - 1], bwd_h[0]])?;
    let pre = tape.matvec(bound.bridge_w, bridge_in)?;
    let pre_b = tape.add(pre, bound.bridge_b)?;
    let h0 = tape.tanh(pre_b);
    let c0 = tape.concat(&[fwd_c[j_len - 1], bwd_c[0]])?;
    Ok(EncoderOutput { states, h0, c0 })
}

/// Raw (pre-softmax) alignment scores of `query` against each key.
pub fn alignment_scores(
    tape: &mut Tape,
    align: &AlignVars,
    keys: &[Var],
    query: Var,
    coverage: Option<Var>,
) -> Result<Var> {
    if keys.is_empty() {
        return Err(Error::Contract("alignment over zero keys".into()));
    }
    let mut scores = Vec::with_capacity(keys.len());
    match align {
        AlignVars::Dot => {
            let kd = tape.shape(keys[0])[0];
            let qd = tape.shape(query)[0];
            if kd != qd {
                return Err(Error::Config(format!(
                    "alignment=dot requires matching dimensions, got state {kd} vs query {qd}"
                )));
            }
            for &k in keys {
                scores.push(tape.dot(k, query)?);
            }
        }
        AlignVars::General { w } => {
            let wq = tape.matvec(*w, query)?;
            for &k in keys {
                scores.push(tape.dot(k, wq)?);
            }
        }
        AlignVars::Concat { w_key, w_query, b, v, w_cov } => {
            let q_part = tape.matvec(*w_query, query)?;
            let q_part = tape.add(q_part, *b)?;
            match (w_cov, coverage) {
                (Some(w_cov), Some(cov)) => {
                    for (j, &k) in keys.iter().enumerate() {
                        let k_part = tape.matvec(*w_key, k)?;
                        let pre = tape.add(k_part, q_part)?;
                        let c_j = tape.select(cov, j)?;
                        let c_term = tape.mul_scalar(*w_cov, c_j)?;
                        let pre = tape.add(pre, c_term)?;
                        let act = tape.tanh(pre);
                        scores.push(tape.dot(*v, act)?);
                    }
                }
                (None, _) | (_, None) => {
                    for &k in keys {
                        let k_part = tape.matvec(*w_key, k)?;
                        let pre = tape.add(k_part, q_part)?;
                        let act = tape.tanh(pre);
                        scores.push(tape.dot(*v, act)?);
                    }
                }
            }
        }
    }
    tape.concat(&scores)
}

/// Attention weights and weighted context over `keys`.
pub struct Attention {
    pub scores: Var,
    pub weights: Var,
    pub context: Var,
}

/// Weighted sum of key vectors under attention `weights`.
pub fn attention_context(tape: &mut Tape, keys: &[Var], weights: Var) -> Result<Var> {
    if keys.len() != tape.data(weights).len() {
        return Err(Error::DimMismatch {
            op: "attention_context",
            lhs: vec![keys.len()],
            rhs: tape.shape(weights).to_vec(),
        });
    }
    let mut acc: Option<Var> = None;
    for (j, &k) in keys.iter().enumerate() {
        let w_j = tape.select(weights, j)?;
        let term = tape.mul_scalar(k, w_j)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Score, normalize, and contract in one call (plain softmax attention).
pub fn attend(
    tape: &mut Tape,
    align: &AlignVars,
    keys: &[Var],
    query: Var,
    coverage: Option<Var>,
) -> Result<Attention> {
    let scores = alignment_scores(tape, align, keys, query, coverage)?;
    let weights = tape.softmax(scores, 0)?;
    let context = attention_context(tape, keys, weights)?;
    Ok(Attention { scores, weights, context })
}

/// Fuse encoder context (and intra-decoder context, when present) with
/// the decoder hidden state into the attention hidden vector.
pub fn attention_hidden(
    tape: &mut Tape,
    bound: &BoundParams,
    enc_context: Var,
    dec_context: Option<Var>,
    hidden: Var,
) -> Result<Var> {
    let joined = match dec_context {
        Some(zd) => tape.concat(&[enc_context, zd, hidden])?,
        None => tape.concat(&[enc_context, hidden])?,
    };
    let pre = tape.matvec(bound.attn_out_w, joined)?;
    tape.add(pre, bound.attn_out_b)
}

/// Distribution over the fixed vocabulary from an attention hidden state.
pub fn vocab_distribution(tape: &mut Tape, bound: &BoundParams, attn_hidden: Var) -> Result<Var> {
    let logits = tape.matvec(bound.out_w, attn_hidden)?;
    let logits = tape.add(logits, bound.out_b)?;
    tape.softmax(logits, 0)
}

/// Everything one decoding hypothesis carries between steps.
///
/// All fields are immutable tape values, so cloning a state for a new
/// beam hypothesis is cheap and siblings can never alias each other's
/// history, coverage, or recurrent state.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    /// Previous step's attention hidden vector (input feeding); `None`
    /// before the first step, which feeds zeros.
    pub fed: Option<Var>,
    /// Decoder hidden states from previous steps (intra-decoder keys).
    pub past_hiddens: Vec<Var>,
    /// Log-space running sum of exp(score) per source position.
    pub temporal_history: Option<Var>,
    /// Accumulated attention mass per source position.
    pub coverage: Option<Var>,
}

impl DecoderState {
    pub fn initial(tape: &mut Tape, bound: &BoundParams, enc: &EncoderOutput) -> Self {
        DecoderState {
            h: enc.h0,
            c: enc.c0,
            fed: None,
            past_hiddens: Vec::new(),
            temporal_history: None,
            coverage: if bound.config.flags.coverage {
                Some(tape.zeros(enc.source_len()))
            } else {
                None
            },
        }
    }
}

/// Output of one decoder step.
pub struct StepOutput {
    pub state: DecoderState,
    /// Distribution over the fixed vocabulary.
    pub p_vocab: Var,
    /// Attention weights over source positions (temporal when enabled).
    pub attn_weights: Var,
    /// Encoder context vector.
    pub context: Var,
    /// Decoder hidden state after this step.
    pub hidden: Var,
    /// Embedding vector that was fed as the previous token.
    pub prev_emb: Var,
    /// Coverage loss contribution of this step, when coverage is on.
    pub covloss: Option<Var>,
}

/// One decoder step from an already-embedded previous token.
pub fn decoder_step_emb(
    tape: &mut Tape,
    bound: &BoundParams,
    enc: &EncoderOutput,
    state: &DecoderState,
    prev_emb: Var,
) -> Result<StepOutput> {
    let flags = bound.config.flags;
    let fed = match state.fed {
        Some(v) => v,
        None => tape.zeros(bound.config.state_dim()),
    };
    let x = tape.concat(&[prev_emb, fed])?;
    let (h, c) = lstm_step(tape, &bound.dec, x, state.h, state.c)?;

    let scores = alignment_scores(tape, &bound.attn, &enc.states, h, state.coverage)?;
    let (weights, new_history) = if flags.temporal {
        let (w, hist) = repetition::temporal_attention(tape, scores, state.temporal_history)?;
        (w, Some(hist))
    } else {
        (tape.softmax(scores, 0)?, None)
    };

    // Coverage loss reads the pre-update coverage, then absorbs this step.
    let (covloss, new_coverage) = match state.coverage {
        Some(cov) => {
            let (loss, updated) = repetition::coverage_step(tape, cov, weights)?;
            (Some(loss), Some(updated))
        }
        None => (None, None),
    };

    let context = attention_context(tape, &enc.states, weights)?;
    let dec_context = match &bound.intra {
        Some(align) => {
            let (_, z_d) = repetition::intra_decoder_attention(tape, align, &state.past_hiddens, h)?;
            Some(z_d)
        }
        None => None,
    };
    let fused = attention_hidden(tape, bound, context, dec_context, h)?;
    let p_vocab = vocab_distribution(tape, bound, fused)?;

    let mut past = state.past_hiddens.clone();
    past.push(h);
    Ok(StepOutput {
        state: DecoderState {
            h,
            c,
            fed: Some(fused),
            past_hiddens: past,
            temporal_history: new_history,
            coverage: new_coverage,
        },
        p_vocab,
        attn_weights: weights,
        context,
        hidden: h,
        prev_emb,
        covloss,
    })
}

/// One decoder step from a previous token id. Ids at or past the
/// vocabulary size (copied source OOVs) feed the unknown embedding.
pub fn decoder_step(
    tape: &mut Tape,
    bound: &BoundParams,
    enc: &EncoderOutput,
    state: &DecoderState,
    y_prev: usize,
) -> Result<StepOutput> {
    let id = if y_prev >= bound.config.vocab_size { UNK } else { y_prev };
    let emb = tape.embed_row(bound.embedding, id)?;
    decoder_step_emb(tape, bound, enc, state, emb)
}
