//! `gist decode`: turn articles into summaries with a trained model.
//!
//! Writes two files: `nbest.jsonl`, one record per article with the kept
//! hypotheses verbatim (unknown markers included), and `summaries.txt`,
//! the top hypothesis per article with each unknown marker replaced by
//! the source token that held the most attention when it was emitted.

use std::fs::File;
use std::io::{BufWriter, Write};

use serde::Serialize;

use gist_core::decoding::{beam_search, greedy_decode, Hypothesis, ModelStepper};
use gist_core::pointer::replace_unknown;
use gist_core::tensor::Tape;
use gist_core::textdata::{decode_ids, encode_example, read_jsonl, Vocabulary, EOS, PAD, SOS};
use gist_core::training::load_checkpoint;

use crate::config::{require_file, RunConfig};
use crate::CliError;

#[derive(Serialize)]
struct Candidate {
    tokens: Vec<String>,
    score: f64,
    norm_score: f64,
}

#[derive(Serialize)]
struct NBestLine<'a> {
    id: usize,
    candidates: &'a [Candidate],
}

/// Tokens of the emitted sequence paired with the attention rows that
/// produced them: stops at the end marker and drops padding/start ids
/// together with their rows, so positions stay aligned for replacement.
fn aligned_tokens(
    hyp: &Hypothesis,
    vocab: &Vocabulary,
    oov_tokens: &[String],
) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut tokens = Vec::new();
    let mut attention = Vec::new();
    for (&id, row) in hyp.ids.iter().zip(&hyp.attention) {
        if id == EOS {
            break;
        }
        if id == PAD || id == SOS {
            continue;
        }
        let mut decoded = decode_ids(&[id], vocab, oov_tokens)?;
        match decoded.pop() {
            Some(token) => tokens.push(token),
            None => {
                return Err(CliError::Other(format!("id {id} decoded to no token")));
            }
        }
        attention.push(row.clone());
    }
    Ok((tokens, attention))
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let input_path = cfg.require_path("input")?.to_path_buf();
    let vocab_path = cfg.require_path("vocab")?.to_path_buf();
    let ckpt_path = cfg.require_path("checkpoint")?.to_path_buf();
    require_file(&input_path)?;
    require_file(&vocab_path)?;
    require_file(&ckpt_path)?;

    let vocab = Vocabulary::load(&vocab_path)?;
    let store = load_checkpoint(&ckpt_path)?.store;
    let model = store.config.clone();
    if cfg.was_set("model") && cfg.model != model.code() {
        return Err(CliError::Config(format!(
            "configured model {} does not match checkpoint model {}",
            cfg.model,
            model.code()
        )));
    }
    if cfg.was_set("d_emb") && cfg.d_emb != model.d_emb {
        return Err(CliError::Config(format!(
            "configured d_emb {} does not match checkpoint d_emb {}",
            cfg.d_emb, model.d_emb
        )));
    }
    if cfg.was_set("d_hidden") && cfg.d_hidden != model.d_hidden {
        return Err(CliError::Config(format!(
            "configured d_hidden {} does not match checkpoint d_hidden {}",
            cfg.d_hidden, model.d_hidden
        )));
    }
    if vocab.size() != model.vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary holds {} entries but the checkpoint was trained with {}",
            vocab.size(),
            model.vocab_size
        )));
    }
    let beam_cfg = cfg.resolve_beam()?;

    let records = read_jsonl(&input_path)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let manifest_path = cfg.out_dir.join("resolved.config");
    std::fs::write(&manifest_path, cfg.render("decode"))
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", manifest_path.display())))?;

    let nbest_path = cfg.out_dir.join("nbest.jsonl");
    let summaries_path = cfg.out_dir.join("summaries.txt");
    let mut nbest = BufWriter::new(File::create(&nbest_path).map_err(|e| {
        CliError::Other(format!("cannot create {}: {e}", nbest_path.display()))
    })?);
    let mut summaries = BufWriter::new(File::create(&summaries_path).map_err(|e| {
        CliError::Other(format!("cannot create {}: {e}", summaries_path.display()))
    })?);

    for (id, record) in records.iter().enumerate() {
        let ex = encode_example(&record.article, &record.summary, &vocab, cfg.src_max, cfg.tgt_max)?;
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let mut stepper =
            ModelStepper::new(&mut tape, &store, &ex.source_ids, &ex.source_ext_ids, ex.oov_count())?;
        let hypotheses = if cfg.greedy {
            vec![greedy_decode(&mut stepper, cfg.decode_max_steps)?]
        } else {
            beam_search(&mut stepper, &beam_cfg)?
        };

        let mut candidates = Vec::new();
        for hyp in hypotheses.iter().take(cfg.n_best) {
            candidates.push(Candidate {
                tokens: decode_ids(&hyp.ids, &vocab, &ex.oov_tokens)?,
                score: hyp.log_prob,
                norm_score: hyp.normalized_score(cfg.length_power),
            });
        }
        let line = serde_json::to_string(&NBestLine { id, candidates: &candidates })
            .map_err(|e| CliError::Other(format!("cannot serialize hypotheses: {e}")))?;
        writeln!(nbest, "{line}")
            .map_err(|e| CliError::Other(format!("cannot write {}: {e}", nbest_path.display())))?;

        let top = &hypotheses[0];
        let (tokens, attention) = aligned_tokens(top, &vocab, &ex.oov_tokens)?;
        let source = &record.article[..record.article.len().min(cfg.src_max)];
        let replaced = replace_unknown(&tokens, &attention, source)?;
        writeln!(summaries, "{}", replaced.join(" ")).map_err(|e| {
            CliError::Other(format!("cannot write {}: {e}", summaries_path.display()))
        })?;
    }
    nbest
        .flush()
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", nbest_path.display())))?;
    summaries
        .flush()
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", summaries_path.display())))?;

    println!(
        "decoded {} articles; wrote {} and {}",
        records.len(),
        nbest_path.display(),
        summaries_path.display()
    );
    Ok(())
}
