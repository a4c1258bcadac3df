//! Pointer-generator: mixing generation with copying from the source.
//!
//! A sigmoid switch decides, per step, how much probability mass goes to
//! the fixed-vocabulary distribution versus to copying source tokens
//! under the current attention weights. The two are blended over an
//! extended vocabulary that appends one temporary id per source-side OOV
//! token, so names the vocabulary has never seen remain producible.

use crate::encdec::SwitchVars;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::textdata::UNK_TOKEN;

/// Probability floor applied before taking logs of mixed distributions;
/// extended-vocabulary slots can be exactly zero by construction.
pub const LOG_FLOOR: f64 = 1e-12;

/// The switch: probability of *generating* (vs copying) this step,
/// `sigmoid(W_ctx z + W_hid h + W_emb e_prev + b)`, shape `[1]`.
pub fn generation_probability(
    tape: &mut Tape,
    switch: &SwitchVars,
    context: Var,
    hidden: Var,
    prev_emb: Var,
) -> Result<Var> {
    let c = tape.matvec(switch.w_ctx, context)?;
    let h = tape.matvec(switch.w_hid, hidden)?;
    let e = tape.matvec(switch.w_emb, prev_emb)?;
    let s = tape.add(c, h)?;
    let s = tape.add(s, e)?;
    let s = tape.add(s, switch.b)?;
    Ok(tape.sigmoid(s))
}

/// Blend generation and copy distributions over the extended vocabulary.
///
/// `p_vocab` is the `[|V|]` generation distribution, `attn_weights` the
/// `[J]` attention over source positions, and `source_ext_ids[j]` the
/// extended id of source position `j`. The result has length
/// `|V| + max_oov`; a token appearing at several source positions
/// accumulates all their attention mass, and OOV slots past this
/// example's own OOV count stay exactly zero.
pub fn extended_distribution(
    tape: &mut Tape,
    p_vocab: Var,
    attn_weights: Var,
    p_gen: Var,
    source_ext_ids: &[usize],
    max_oov: usize,
) -> Result<Var> {
    let vocab_size = tape.data(p_vocab).len();
    let j_len = tape.data(attn_weights).len();
    if source_ext_ids.len() != j_len {
        return Err(Error::DimMismatch {
            op: "extended_distribution",
            lhs: vec![source_ext_ids.len()],
            rhs: vec![j_len],
        });
    }
    let ext_size = vocab_size + max_oov;
    for &id in source_ext_ids {
        if id >= ext_size {
            return Err(Error::Index { what: "source extended id", index: id, bound: ext_size });
        }
    }
    let padded = tape.pad_zeros(p_vocab, ext_size)?;
    let generate = tape.mul_scalar(padded, p_gen)?;

    let one = tape.scalar(1.0);
    let copy_share = tape.sub(one, p_gen)?;
    let copy_weights = tape.mul_scalar(attn_weights, copy_share)?;
    tape.scatter_add(generate, source_ext_ids, copy_weights)
}

/// Replace unknown tokens in a decoded summary with the source token that
/// held the most attention when each was emitted. `attn_per_step[t]`
/// must be the attention weights recorded when `tokens[t]` was produced;
/// score ties resolve to the smallest source position.
pub fn replace_unknown(
    tokens: &[String],
    attn_per_step: &[Vec<f64>],
    source_tokens: &[String],
) -> Result<Vec<String>> {
    if tokens.len() > attn_per_step.len() {
        return Err(Error::Contract(format!(
            "{} summary tokens but only {} attention records",
            tokens.len(),
            attn_per_step.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (t, tok) in tokens.iter().enumerate() {
        if tok != UNK_TOKEN {
            out.push(tok.clone());
            continue;
        }
        let attn = &attn_per_step[t];
        if attn.len() != source_tokens.len() {
            return Err(Error::DimMismatch {
                op: "replace_unknown",
                lhs: vec![attn.len()],
                rhs: vec![source_tokens.len()],
            });
        }
        let mut best = 0;
        for (j, &w) in attn.iter().enumerate() {
            if w > attn[best] {
                best = j;
            }
        }
        out.push(source_tokens[best].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encdec::{ModelConfig, ModelFlags, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pointer_store() -> ParamStore {
        let cfg = ModelConfig {
            d_emb: 3,
            d_hidden: 2,
            vocab_size: 6,
            alignment: crate::encdec::Alignment::General,
            flags: ModelFlags { pointer: true, ..Default::default() },
            allow_temporal_with_coverage: false,
        };
        ParamStore::init(cfg, 23).unwrap()
    }

    #[test]
    fn zero_switch_weights_sit_on_the_fence() {
        let mut store = pointer_store();
        for i in 0..store.len() {
            if store.params()[i].name.starts_with("switch.") {
                store.data_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let ctx = tape.constant(vec![0.4, -0.1, 0.6, 0.2]);
        let hid = tape.constant(vec![0.3, 0.3, -0.2, 0.5]);
        let emb = tape.constant(vec![0.1, 0.9, -0.7]);
        let p = generation_probability(&mut tape, bound.switch.as_ref().unwrap(), ctx, hid, emb)
            .unwrap();
        assert_eq!(tape.value(p), 0.5);
    }

    #[test]
    fn raising_the_switch_bias_raises_generation_probability() {
        let store = pointer_store();
        let grab = |bias: f64| {
            let mut s = store.clone();
            for i in 0..s.len() {
                if s.params()[i].name == "switch.b" {
                    s.data_mut(i)[0] = bias;
                }
            }
            let mut tape = Tape::new();
            let bound = s.bind(&mut tape).unwrap();
            let ctx = tape.constant(vec![0.4, -0.1, 0.6, 0.2]);
            let hid = tape.constant(vec![0.3, 0.3, -0.2, 0.5]);
            let emb = tape.constant(vec![0.1, 0.9, -0.7]);
            let p = generation_probability(
                &mut tape,
                bound.switch.as_ref().unwrap(),
                ctx,
                hid,
                emb,
            )
            .unwrap();
            tape.value(p)
        };
        let (lo, mid, hi) = (grab(-2.0), grab(0.0), grab(2.0));
        assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn switch_gradient_matches_the_sigmoid_derivative() {
        // d sigma(b)/db = p (1 - p) when everything else is zero.
        let mut store = pointer_store();
        for i in 0..store.len() {
            if store.params()[i].name.starts_with("switch.w_") {
                store.data_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
            if store.params()[i].name == "switch.b" {
                store.data_mut(i)[0] = 0.7;
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let ctx = tape.constant(vec![0.0; 4]);
        let hid = tape.constant(vec![0.0; 4]);
        let emb = tape.constant(vec![0.0; 3]);
        let p = generation_probability(&mut tape, bound.switch.as_ref().unwrap(), ctx, hid, emb)
            .unwrap();
        let value = tape.value(p);
        tape.backward(p).unwrap();
        let b_var = bound.switch.as_ref().unwrap().b;
        let g = tape.grad(b_var).unwrap()[0];
        assert!((g - value * (1.0 - value)).abs() < 1e-12);
    }

    #[test]
    fn pure_generation_pads_the_vocabulary_distribution() {
        let mut tape = Tape::new();
        let p_vocab = tape.constant(vec![0.1, 0.2, 0.3, 0.4]);
        let attn = tape.constant(vec![0.5, 0.5]);
        let p_gen = tape.scalar(1.0);
        let ext = extended_distribution(&mut tape, p_vocab, attn, p_gen, &[0, 4], 2).unwrap();
        assert_eq!(tape.data(ext), &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);
    }

    #[test]
    fn pure_copying_accumulates_duplicate_source_tokens() {
        let mut tape = Tape::new();
        let p_vocab = tape.constant(vec![0.25; 4]);
        let attn = tape.constant(vec![0.3, 0.7]);
        let p_gen = tape.scalar(0.0);
        // The same word sits at both source positions.
        let ext = extended_distribution(&mut tape, p_vocab, attn, p_gen, &[1, 1], 1).unwrap();
        let d = tape.data(ext);
        assert!((d[1] - 1.0).abs() < 1e-12, "{d:?}");
        assert_eq!(d[4], 0.0);
    }

    #[test]
    fn unused_oov_slots_are_exact_zeros() {
        let mut tape = Tape::new();
        let p_vocab = tape.constant(vec![0.25; 4]);
        let attn = tape.constant(vec![0.6, 0.4]);
        let p_gen = tape.scalar(0.3);
        // max_oov = 3 but this example only uses OOV slot 0 (ext id 4).
        let ext = extended_distribution(&mut tape, p_vocab, attn, p_gen, &[4, 2], 3).unwrap();
        let d = tape.data(ext);
        assert_eq!(d[5], 0.0);
        assert_eq!(d[6], 0.0);
        assert!(d[4] > 0.0);
    }

    #[test]
    fn blended_distribution_still_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..300 {
            let v = rng.gen_range(4..9);
            let j = rng.gen_range(1..6);
            let max_oov = rng.gen_range(0..3usize);
            let mut tape = Tape::new();
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let p_vocab = tape.constant(raw.iter().map(|x| x / total).collect());
            let raw: Vec<f64> = (0..j).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let attn = tape.constant(raw.iter().map(|x| x / total).collect());
            let p_gen = tape.scalar(rng.gen_range(0.0..1.0));
            let ids: Vec<usize> = (0..j)
                .map(|_| {
                    if max_oov > 0 && rng.gen_bool(0.3) {
                        v + rng.gen_range(0..max_oov)
                    } else {
                        rng.gen_range(0..v)
                    }
                })
                .collect();
            let ext = extended_distribution(&mut tape, p_vocab, attn, p_gen, &ids, max_oov).unwrap();
            let sum: f64 = tape.data(ext).iter().sum();
            assert!((sum - 1.0).abs() < 1e-8, "sum {sum}");
            assert!(tape.data(ext).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn out_of_range_source_ids_are_rejected() {
        let mut tape = Tape::new();
        let p_vocab = tape.constant(vec![0.25; 4]);
        let attn = tape.constant(vec![1.0]);
        let p_gen = tape.scalar(0.5);
        match extended_distribution(&mut tape, p_vocab, attn, p_gen, &[6], 2) {
            Err(Error::Index { index, bound, .. }) => {
                assert_eq!(index, 6);
                assert_eq!(bound, 6);
            }
            other => panic!("expected Index error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_flow_through_both_blend_branches() {
        let inits = vec![
            (vec![0.2, -0.1, 0.4, 0.05], vec![4]), // vocab logits
            (vec![0.3, -0.2, 0.6], vec![3]),       // attention scores
            (vec![0.1], vec![1]),                  // switch logit
        ];
        let err = crate::tensor::grad_check(
            |tape, v| {
                let p_vocab = tape.softmax(v[0], 0)?;
                let attn = tape.softmax(v[1], 0)?;
                let p_gen = tape.sigmoid(v[2]);
                let ext = extended_distribution(tape, p_vocab, attn, p_gen, &[1, 4, 2], 2)?;
                let picked = tape.select(ext, 4)?;
                let cl = tape.clamp_min(picked, LOG_FLOOR);
                let lp = tape.log(cl);
                Ok(tape.scale(lp, -1.0))
            },
            &inits,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn unknown_tokens_take_the_argmax_attention_source_token() {
        let src: Vec<String> = ["pact", "signed", "by", "colby"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let toks: Vec<String> = vec!["pact".into(), UNK_TOKEN.into()];
        let attn = vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.05, 0.05, 0.2, 0.7],
        ];
        let out = replace_unknown(&toks, &attn, &src).unwrap();
        assert_eq!(out, vec!["pact".to_string(), "colby".to_string()]);
    }

    #[test]
    fn attention_ties_resolve_to_the_earliest_position() {
        let src: Vec<String> = ["alpha", "beta"].iter().map(|s| s.to_string()).collect();
        let toks: Vec<String> = vec![UNK_TOKEN.into()];
        let out = replace_unknown(&toks, &[vec![0.5, 0.5]], &src).unwrap();
        assert_eq!(out, vec!["alpha".to_string()]);
    }

    #[test]
    fn known_tokens_pass_through_untouched() {
        let src: Vec<String> = ["x"].iter().map(|s| s.to_string()).collect();
        let toks: Vec<String> = vec!["hello".into(), "world".into()];
        let out = replace_unknown(&toks, &[vec![1.0], vec![1.0]], &src).unwrap();
        assert_eq!(out, vec!["hello".to_string(), "world".to_string()]);
    }

    #[test]
    fn missing_attention_records_are_a_contract_error() {
        let src: Vec<String> = vec!["x".into()];
        let toks: Vec<String> = vec![UNK_TOKEN.into(), UNK_TOKEN.into()];
        assert!(matches!(
            replace_unknown(&toks, &[vec![1.0]], &src),
            Err(Error::Contract(_))
        ));
    }
}
