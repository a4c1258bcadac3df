//! Repetition control: temporal attention, intra-decoder attention, and
//! coverage.
//!
//! All three fight the same failure mode — the decoder re-reading (and
//! re-emitting) the same source content. Temporal attention divides each
//! raw attention score by the sum of its own exponentiated history, so
//! positions that were attended before are discounted. Intra-decoder
//! attention gives the decoder a view of its *own* past states. Coverage
//! accumulates attention mass per source position, feeds it back into the
//! alignment score, and charges a loss wherever new attention overlaps
//! mass already spent.

use crate::encdec::{alignment_scores, attention_context, AlignVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Temporally normalized attention.
///
/// `history` is the log-space running sum of `exp(score)` per source
/// position over all previous steps (`None` on the first step). Returns
/// the attention weights for this step and the updated history.
///
/// On the first step the weights are a plain softmax of the scores; on
/// later steps each score is discounted by its history before
/// normalizing, all in log space so nothing overflows.
pub fn temporal_attention(
    tape: &mut Tape,
    scores: Var,
    history: Option<Var>,
) -> Result<(Var, Var)> {
    match history {
        None => {
            let weights = tape.softmax(scores, 0)?;
            Ok((weights, scores))
        }
        Some(hist) => {
            let discounted = tape.sub(scores, hist)?;
            let weights = tape.softmax(discounted, 0)?;
            let updated = tape.logaddexp(hist, scores)?;
            Ok((weights, updated))
        }
    }
}

/// Attention of the current decoder state over all previous decoder
/// states. Before any history exists (the first step) the context is a
/// zero vector and there are no weights.
pub fn intra_decoder_attention(
    tape: &mut Tape,
    align: &AlignVars,
    past_hiddens: &[Var],
    query: Var,
) -> Result<(Option<Var>, Var)> {
    if past_hiddens.is_empty() {
        let dim = tape.shape(query)[0];
        return Ok((None, tape.zeros(dim)));
    }
    let scores = alignment_scores(tape, align, past_hiddens, query, None)?;
    let weights = tape.softmax(scores, 0)?;
    let context = attention_context(tape, past_hiddens, weights)?;
    Ok((Some(weights), context))
}

/// One coverage update.
///
/// `coverage` holds the attention mass already spent per source position
/// (all zeros before the first step). The loss for this step is
/// `sum_j min(weights_j, coverage_j)`, charged *before* folding the new
/// weights in, so the first step is always free. With both arguments on
/// the probability simplex (weights exactly, coverage as a sum of
/// simplex vectors) the loss lies in `[0, 1]`.
pub fn coverage_step(tape: &mut Tape, coverage: Var, weights: Var) -> Result<(Var, Var)> {
    if tape.shape(coverage) != tape.shape(weights) {
        return Err(Error::DimMismatch {
            op: "coverage_step",
            lhs: tape.shape(coverage).to_vec(),
            rhs: tape.shape(weights).to_vec(),
        });
    }
    if tape.data(coverage).iter().any(|&x| x < 0.0) {
        return Err(Error::Contract(
            "coverage vector must be non-negative (it accumulates attention mass)".into(),
        ));
    }
    let overlap = tape.min_elem(weights, coverage)?;
    let loss = tape.sum(overlap);
    let updated = tape.add(coverage, weights)?;
    Ok((loss, updated))
}
