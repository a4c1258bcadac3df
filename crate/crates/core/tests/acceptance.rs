//! End-to-end acceptance checks for the engine's core guarantees: exact
//! gradients, valid probability distributions, optimal beam search on
//! enumerable problems, oracle-verified ROUGE, copy-through-attention on
//! a tiny corpus, ablation direction, stable RL fine-tuning, bitwise
//! determinism with checkpoint persistence, and decode diversity.
//!
//! Each numbered check prints one PASS/FAIL line; the test fails if any
//! check fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gist_core::decoding::{
    beam_search, greedy_decode, BeamConfig, ModelStep, ModelStepper, StepModel,
};
use gist_core::encdec::{
    decoder_step, encode, Alignment, DecoderState, ModelConfig, ModelFlags, ParamStore,
};
use gist_core::pointer::{extended_distribution, generation_probability};
use gist_core::rouge::{rouge_l, rouge_n, RougeScore};
use gist_core::tensor::grad_check;
use gist_core::tensor::Tape;
use gist_core::textdata::{encode_example, CorpusRecord, ExtendedExample, Vocabulary, EOS, UNK};
use gist_core::training::{
    batch_nll, load_checkpoint, InputFeed, RolloutDiag, Strategy, TrainConfig, Trainer,
};
use gist_core::Result;

struct Check {
    label: &'static str,
    passed: bool,
    detail: String,
}

fn report(checks: &[Check]) {
    for (i, c) in checks.iter().enumerate() {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("criterion {}: {status} — {} ({})", i + 1, c.label, c.detail);
    }
}

// ---------------------------------------------------------------------
// 1. Gradient correctness across feature combinations
// ---------------------------------------------------------------------

fn check_gradients() -> Check {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_code = String::new();
    let mut combos = 0;
    for pointer in [false, true] {
        for use_coverage in [false, true] {
            for intra in [false, true] {
                for sharing in [false, true] {
                    let flags = ModelFlags {
                        pointer,
                        temporal: !use_coverage,
                        intra_decoder: intra,
                        weight_sharing: sharing,
                        coverage: use_coverage,
                    };
                    let config = ModelConfig {
                        d_emb: 4,
                        d_hidden: 6,
                        vocab_size: 12,
                        alignment: Alignment::Concat,
                        flags,
                        allow_temporal_with_coverage: false,
                    };
                    let code = config.code();
                    let store = ParamStore::init(config, 31 + combos as u64).unwrap();
                    // Five source tokens (one out-of-vocabulary) and four
                    // scored target steps; the pointer combos copy the
                    // out-of-vocabulary token so the copy path carries
                    // gradient too.
                    let ex = ExtendedExample {
                        source_ids: vec![4, 5, 6, UNK, 7],
                        source_ext_ids: vec![4, 5, 6, 12, 7],
                        oov_tokens: vec!["novel-token".into()],
                        target_ids: vec![1, 8, UNK, 9, 2],
                        target_ext_ids: if pointer {
                            vec![1, 8, 12, 9, 2]
                        } else {
                            vec![1, 8, UNK, 9, 2]
                        },
                    };
                    let inits: Vec<(Vec<f64>, Vec<usize>)> = store
                        .params()
                        .iter()
                        .map(|p| (p.data.clone(), p.shape.clone()))
                        .collect();
                    let err = grad_check(
                        |tape, vars| {
                            let bound = store.assemble(tape, vars.to_vec())?;
                            let mut rng = ChaCha8Rng::seed_from_u64(0);
                            batch_nll(tape, &bound, &[&ex], InputFeed::Truth, 1.0, &mut rng)
                        },
                        &inits,
                        1e-3,
                    )
                    .unwrap();
                    if err > worst {
                        worst = err;
                        worst_code = code;
                    }
                    combos += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Check {
        label: "analytic gradients match finite differences on every feature combination",
        passed: worst < 1e-4 && elapsed < 60.0,
        detail: format!(
            "{combos} combinations, worst relative error {worst:.3e} (at {worst_code}), {elapsed:.1}s"
        ),
    }
}

// ---------------------------------------------------------------------
// 2. Distribution invariants under fuzzing
// ---------------------------------------------------------------------

fn sums_to_one(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-8
}

fn check_distribution_invariants() -> Check {
    let started = Instant::now();
    let cases = 1000;
    let mut failures = Vec::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + case as u64);
        let kind = case % 3;
        let flags = match kind {
            0 => ModelFlags { pointer: true, ..Default::default() },
            1 => ModelFlags { temporal: true, intra_decoder: case % 2 == 0, ..Default::default() },
            _ => ModelFlags { coverage: true, pointer: case % 2 == 0, ..Default::default() },
        };
        let config = ModelConfig {
            d_emb: 2,
            d_hidden: 2,
            vocab_size: 6,
            alignment: if kind == 2 { Alignment::Concat } else { Alignment::General },
            flags,
            allow_temporal_with_coverage: false,
        };
        let store = ParamStore::init(config, 40_000 + case as u64).unwrap();
        let src_len = rng.gen_range(3..=6);
        let source_ids: Vec<usize> = (0..src_len).map(|_| rng.gen_range(0..6)).collect();
        let mut source_ext_ids = source_ids.clone();
        let mut max_oov = 0;
        if flags.pointer && rng.gen_bool(0.5) {
            // Plant one copyable out-of-vocabulary position.
            let pos = rng.gen_range(0..src_len);
            source_ext_ids[pos] = 6;
            max_oov = 1;
        }
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let bound = store.bind(&mut tape).unwrap();
        let enc = encode(&mut tape, &bound, &source_ids).unwrap();
        let mut state = DecoderState::initial(&mut tape, &bound, &enc);
        for _ in 0..3 {
            let prev = rng.gen_range(0..6);
            let out = decoder_step(&mut tape, &bound, &enc, &state, prev).unwrap();
            let attn = tape.data(out.attn_weights).to_vec();
            if !sums_to_one(&attn) {
                failures.push(format!("case {case}: attention off the simplex"));
            }
            let p_vocab = tape.data(out.p_vocab).to_vec();
            if !sums_to_one(&p_vocab) {
                failures.push(format!("case {case}: output distribution off the simplex"));
            }
            if let Some(switch) = &bound.switch {
                let p_gen =
                    generation_probability(&mut tape, switch, out.context, out.hidden, out.prev_emb)
                        .unwrap();
                let ext = extended_distribution(
                    &mut tape,
                    out.p_vocab,
                    out.attn_weights,
                    p_gen,
                    &source_ext_ids,
                    max_oov,
                )
                .unwrap();
                if !sums_to_one(tape.data(ext)) {
                    failures.push(format!("case {case}: extended distribution off the simplex"));
                }
            }
            if let Some(cl) = out.covloss {
                let v = tape.value(cl);
                if !(0.0..=1.0 + 1e-12).contains(&v) {
                    failures.push(format!("case {case}: coverage loss {v} outside [0, 1]"));
                }
            }
            state = out.state;
        }
        if failures.len() > 5 {
            break;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Check {
        label: "attention, output, and extended distributions stay on the simplex; coverage loss bounded",
        passed: failures.is_empty() && elapsed < 30.0,
        detail: if failures.is_empty() {
            format!("{cases} fuzzed cases x 3 steps, {elapsed:.1}s")
        } else {
            failures.join("; ")
        },
    }
}

// ---------------------------------------------------------------------
// 3. Beam search against exhaustive enumeration
// ---------------------------------------------------------------------

/// Deterministic pseudo-random sequence model over a four-token space.
/// The distribution at each step hashes the full emitted prefix, so two
/// different prefixes almost surely disagree everywhere.
struct SeedModel {
    seed: u64,
    vocab: usize,
}

impl SeedModel {
    fn probs_for(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for &id in prefix {
            h = (h ^ id as u64).wrapping_mul(0x1000_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / z).collect()
    }
}

impl StepModel for SeedModel {
    type State = Vec<usize>;

    fn start(&mut self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn ext_vocab_size(&self) -> usize {
        self.vocab
    }

    fn step(&mut self, state: &Vec<usize>, prev_id: usize) -> Result<ModelStep<Vec<usize>>> {
        let mut prefix = state.clone();
        prefix.push(prev_id);
        let probs = self.probs_for(&prefix);
        Ok(ModelStep { probs, attention: vec![1.0], state: prefix })
    }
}

/// Every complete sequence (ends with the end marker or hits the step
/// budget) with its exact log-probability.
fn enumerate_leaves(model: &SeedModel, max_steps: usize) -> Vec<(Vec<usize>, f64)> {
    let mut leaves = Vec::new();
    let mut stack: Vec<(Vec<usize>, Vec<usize>, f64)> = vec![(vec![gist_core::textdata::SOS], Vec::new(), 0.0)];
    while let Some((prefix, ids, log_p)) = stack.pop() {
        if ids.last() == Some(&EOS) || ids.len() == max_steps {
            leaves.push((ids, log_p));
            continue;
        }
        let probs = model.probs_for(&prefix);
        for (id, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let mut next_prefix = prefix.clone();
            next_prefix.push(id);
            let mut next_ids = ids.clone();
            next_ids.push(id);
            stack.push((next_prefix, next_ids, log_p + p.ln()));
        }
    }
    leaves
}

fn check_beam_oracle() -> Check {
    let started = Instant::now();
    let models = 200;
    let t_max = 3;
    let mut failures = Vec::new();
    for m in 0..models {
        let mut model = SeedModel { seed: 1000 + m as u64, vocab: 4 };
        let mut leaves = enumerate_leaves(&model, t_max);
        leaves.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        let (best_ids, best_score) = leaves[0].clone();

        let cfg = BeamConfig { beam_width: 64, max_steps: t_max, ..BeamConfig::default() };
        let hyps = beam_search(&mut model, &cfg).unwrap();
        let top = &hyps[0];
        if top.ids != best_ids || (top.log_prob - best_score).abs() > 1e-8 {
            failures.push(format!(
                "model {m}: beam found {:?} at {:.9}, enumeration found {:?} at {:.9}",
                top.ids, top.log_prob, best_ids, best_score
            ));
        }

        let narrow = BeamConfig { beam_width: 1, max_steps: t_max, ..BeamConfig::default() };
        let one = beam_search(&mut model, &narrow).unwrap();
        let greedy = greedy_decode(&mut model, t_max).unwrap();
        if one[0].ids != greedy.ids {
            failures.push(format!(
                "model {m}: width-1 beam {:?} disagrees with greedy {:?}",
                one[0].ids, greedy.ids
            ));
        }
        if failures.len() > 5 {
            break;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Check {
        label: "full-width beam equals exhaustive enumeration; width-1 beam equals greedy",
        passed: failures.is_empty() && elapsed < 60.0,
        detail: if failures.is_empty() {
            format!("{models} random models, widths 64 and 1, {elapsed:.1}s")
        } else {
            failures.join("; ")
        },
    }
}

// ---------------------------------------------------------------------
// 4. ROUGE against brute-force oracles
// ---------------------------------------------------------------------

fn brute_ngram_score(candidate: &[u8], reference: &[u8], n: usize) -> RougeScore {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            s.windows(n).map(|w| w.to_vec()).collect()
        }
    };
    let c = grams(candidate);
    let r = grams(reference);
    let mut matches = 0usize;
    let mut used = vec![false; r.len()];
    // Clipped matching by direct search: each reference n-gram can be
    // consumed once.
    for g in &c {
        if let Some(i) = r.iter().enumerate().position(|(i, rg)| !used[i] && rg == g) {
            used[i] = true;
            matches += 1;
        }
    }
    score_from(matches, c.len(), r.len())
}

fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    // Plain exponential-free DP, written independently of the library's
    // two-row formulation.
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

fn score_from(matches: usize, c_total: usize, r_total: usize) -> RougeScore {
    let precision = if c_total > 0 { matches as f64 / c_total as f64 } else { 0.0 };
    let recall = if r_total > 0 { matches as f64 / r_total as f64 } else { 0.0 };
    let f1 = if matches > 0 {
        2.0 * matches as f64 / (c_total + r_total) as f64
    } else {
        0.0
    };
    RougeScore { precision, recall, f1 }
}

fn check_rouge_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cases = 500;
    let mut failures = Vec::new();
    for case in 0..cases {
        let len_c = rng.gen_range(0..=8);
        let len_r = rng.gen_range(0..=8);
        let candidate: Vec<u8> = (0..len_c).map(|_| rng.gen_range(0..6)).collect();
        let reference: Vec<u8> = (0..len_r).map(|_| rng.gen_range(0..6)).collect();
        for n in 1..=2 {
            let got = rouge_n(&candidate, &reference, n);
            let want = brute_ngram_score(&candidate, &reference, n);
            if got != want {
                failures.push(format!("case {case}: {n}-gram scores {got:?} vs oracle {want:?}"));
            }
        }
        let got = rouge_l(&candidate, &reference);
        let lcs = brute_lcs(&candidate, &reference);
        let want = score_from(lcs, candidate.len(), reference.len());
        if got != want {
            failures.push(format!("case {case}: subsequence scores {got:?} vs oracle {want:?}"));
        }
        if failures.len() > 5 {
            break;
        }
    }
    // The worked example: unigram F1 must be exactly 4/7.
    let hand = rouge_n(&["a", "b", "e"], &["a", "b", "c", "d"], 1);
    if hand.f1 != 4.0 / 7.0 {
        failures.push(format!("worked example F1 {} is not exactly 4/7", hand.f1));
    }
    let elapsed = started.elapsed().as_secs_f64();
    Check {
        label: "n-gram and subsequence scores match brute-force oracles",
        passed: failures.is_empty() && elapsed < 10.0,
        detail: if failures.is_empty() {
            format!("{cases} fuzzed pairs plus the worked example, {elapsed:.1}s")
        } else {
            failures.join("; ")
        },
    }
}

// ---------------------------------------------------------------------
// 5-8. Tiny-corpus overfit, ablation, RL fine-tune, determinism
// ---------------------------------------------------------------------

const NAMES: [&str; 16] = [
    "veltrin", "kormath", "suvaldi", "brenorra", "tashquin", "melgrove", "ostrevan", "quilbara",
    "fendrosa", "darvolek", "yintarra", "holbrine", "zemarick", "plouvern", "werrital", "cassovey",
];

fn corpus_records() -> Vec<CorpusRecord> {
    let tok = |s: &str| -> Vec<String> { s.split_whitespace().map(str::to_string).collect() };
    let mut records = Vec::new();
    for (i, name) in NAMES.iter().enumerate() {
        let (article, summary) = match i % 4 {
            0 => (
                format!("the mayor {name} visited the old harbor on monday and praised the fishing crews"),
                format!("mayor {name} praised the crews"),
            ),
            1 => (
                format!("scientist {name} reported a rare comet above the northern valley last night"),
                format!("{name} reported a comet"),
            ),
            2 => (
                format!("the striker {name} scored twice as the home team won the cup final"),
                format!("{name} scored twice in the final"),
            ),
            _ => (
                format!("author {name} released a long novel about the river towns this spring"),
                format!("{name} released a novel"),
            ),
        };
        records.push(CorpusRecord { article: tok(&article), summary: tok(&summary) });
    }
    records
}

struct OverfitSetup {
    vocab_size: usize,
    examples: Vec<ExtendedExample>,
}

fn overfit_setup() -> OverfitSetup {
    let records = corpus_records();
    // Forty distinct non-name words, each appearing at least four times;
    // the cap admits exactly those, so every planted name stays
    // out-of-vocabulary and must be produced by copying.
    let vocab = Vocabulary::build(&records, 44).unwrap();
    for name in NAMES {
        assert!(vocab.id(name).is_none(), "planted name {name} leaked into the vocabulary");
    }
    let examples: Vec<ExtendedExample> = records
        .iter()
        .map(|r| encode_example(&r.article, &r.summary, &vocab, 30, 10).unwrap())
        .collect();
    for ex in &examples {
        assert_eq!(ex.oov_count(), 1, "each pair plants exactly one name");
    }
    OverfitSetup { vocab_size: vocab.size(), examples }
}

fn overfit_model_config(vocab_size: usize, pointer: bool) -> ModelConfig {
    ModelConfig {
        d_emb: 24,
        d_hidden: 24,
        vocab_size,
        alignment: Alignment::General,
        flags: ModelFlags { pointer, ..Default::default() },
        allow_temporal_with_coverage: false,
    }
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        strategy: Strategy::CrossEntropy,
        batch_size: 1,
        seed: 11,
        rollout_max_steps: 16,
        ..TrainConfig::default()
    }
}

/// Greedy-decode every example; returns the emitted id sequences.
fn decode_all(trainer: &Trainer, examples: &[ExtendedExample]) -> Vec<Vec<usize>> {
    examples
        .iter()
        .map(|ex| {
            let mut tape = Tape::new();
            tape.set_grad_enabled(false);
            let mut stepper = ModelStepper::new(
                &mut tape,
                &trainer.store,
                &ex.source_ids,
                &ex.source_ext_ids,
                ex.oov_count(),
            )
            .unwrap();
            greedy_decode(&mut stepper, 16).unwrap().ids
        })
        .collect()
}

struct OverfitOutcome {
    rows: Vec<String>,
    trainer: Trainer,
    epochs_used: usize,
    rouge_l: f64,
    unk_free: bool,
    names_copied: bool,
}

/// Train the pointer model until it reproduces the corpus (or the epoch
/// cap). Deterministic: the early-stop rule depends only on logged
/// metrics and greedy decodes.
fn run_overfit(setup: &OverfitSetup, pointer: bool, epoch_cap: usize) -> OverfitOutcome {
    let store = ParamStore::init(overfit_model_config(setup.vocab_size, pointer), 7).unwrap();
    let mut trainer = Trainer::new(store, overfit_train_config()).unwrap();
    let mut rows = Vec::new();
    let mut rouge_l = 0.0;
    loop {
        let until = (trainer.epoch as usize + 25).min(epoch_cap);
        let batch = trainer.run(&setup.examples, &setup.examples, until, |_, _| {}).unwrap();
        for row in &batch {
            rows.push(row.csv_line());
        }
        rouge_l = batch.last().map(|r| r.rouge_l).unwrap_or(rouge_l);
        let done = trainer.epoch as usize >= epoch_cap;
        if rouge_l >= 0.95 || done {
            let decoded = decode_all(&trainer, &setup.examples);
            let unk_free = decoded.iter().all(|ids| !ids.contains(&UNK));
            let names_copied = decoded
                .iter()
                .all(|ids| ids.iter().any(|&id| id >= setup.vocab_size));
            if (unk_free && names_copied && rouge_l >= 0.95) || done {
                return OverfitOutcome {
                    rows,
                    epochs_used: trainer.epoch as usize,
                    rouge_l,
                    unk_free,
                    names_copied,
                    trainer,
                };
            }
        }
    }
}

fn check_overfit(setup: &OverfitSetup) -> (Check, OverfitOutcome) {
    let started = Instant::now();
    let outcome = run_overfit(setup, true, 500);
    let elapsed = started.elapsed().as_secs_f64();
    let check = Check {
        label: "pointer model overfits the tiny corpus and copies every planted name",
        passed: outcome.rouge_l >= 0.95
            && outcome.unk_free
            && outcome.names_copied
            && elapsed < 900.0,
        detail: format!(
            "ROUGE-L {:.4} after {} epochs, unknown-free={}, names copied={}, {elapsed:.0}s",
            outcome.rouge_l, outcome.epochs_used, outcome.unk_free, outcome.names_copied
        ),
    };
    (check, outcome)
}

fn run_ablation(setup: &OverfitSetup, epochs: usize) -> (Vec<String>, f64) {
    let store = ParamStore::init(overfit_model_config(setup.vocab_size, false), 7).unwrap();
    let mut trainer = Trainer::new(store, overfit_train_config()).unwrap();
    let rows = trainer.run(&setup.examples, &setup.examples, epochs, |_, _| {}).unwrap();
    let lines: Vec<String> = rows.iter().map(|r| r.csv_line()).collect();
    let r1 = rows.last().map(|r| r.rouge1).unwrap_or(0.0);
    (lines, r1)
}

fn check_ablation(setup: &OverfitSetup, pointer_outcome: &OverfitOutcome) -> (Check, Vec<String>, f64) {
    let pointer_r1 = pointer_outcome
        .rows
        .last()
        .map(|line| line.split(',').nth(4).unwrap().parse::<f64>().unwrap())
        .unwrap();
    let (rows, plain_r1) = run_ablation(setup, pointer_outcome.epochs_used);
    let check = Check {
        label: "copying strictly beats the no-copy ablation on unigram overlap",
        passed: pointer_r1 > plain_r1,
        detail: format!(
            "ROUGE-1 {:.4} with copying vs {:.4} without, equal budget of {} epochs",
            pointer_r1, plain_r1, pointer_outcome.epochs_used
        ),
    };
    (check, rows, plain_r1)
}

fn scst_train_config() -> TrainConfig {
    TrainConfig {
        strategy: Strategy::SelfCritical,
        // Full-corpus batches average the self-critical advantage over all
        // sixteen rollouts, keeping the sequence-level gradient low-variance.
        batch_size: 16,
        seed: 11,
        rollout_max_steps: 16,
        rl_weight: 0.99,
        ..TrainConfig::default()
    }
}

fn run_scst(checkpoint: &std::path::Path, setup: &OverfitSetup, epochs: usize) -> (Vec<String>, Vec<RolloutDiag>, f64) {
    let loaded = load_checkpoint(checkpoint).unwrap();
    let mut trainer = Trainer::resume(loaded, scst_train_config()).unwrap();
    let start = trainer.epoch as usize;
    let mut diags = Vec::new();
    let mut min_rouge_l = f64::INFINITY;
    let rows = trainer
        .run(&setup.examples, &setup.examples, start + epochs, |row, report| {
            min_rouge_l = min_rouge_l.min(row.rouge_l);
            for step in &report.steps {
                diags.extend(step.rollouts.iter().cloned());
            }
        })
        .unwrap();
    (rows.iter().map(|r| r.csv_line()).collect(), diags, min_rouge_l)
}

fn check_scst(
    checkpoint: &std::path::Path,
    setup: &OverfitSetup,
    start_rouge_l: f64,
) -> (Check, Vec<String>) {
    let (rows, diags, min_rouge_l) = run_scst(checkpoint, setup, 50);
    let matched: Vec<&RolloutDiag> = diags.iter().filter(|d| d.matched).collect();
    let matched_zero = matched.iter().all(|d| d.rl_loss == 0.0);
    let check = Check {
        label: "self-critical fine-tuning never degrades the summary metric and zeroes matched rollouts",
        passed: min_rouge_l >= start_rouge_l - 0.02 && matched_zero && !matched.is_empty(),
        detail: format!(
            "ROUGE-L floor {:.4} vs start {:.4}, {} of {} rollouts matched greedy (all at exactly zero loss: {})",
            min_rouge_l,
            start_rouge_l,
            matched.len(),
            diags.len(),
            matched_zero
        ),
    };
    (check, rows)
}

fn check_determinism(
    setup: &OverfitSetup,
    pointer_outcome: &OverfitOutcome,
    ablation_rows: &[String],
    scst_rows: &[String],
    checkpoint: &std::path::Path,
) -> Check {
    let mut problems = Vec::new();

    // Rerun the overfit, ablation, and fine-tune with identical seeds.
    let rerun = run_overfit(setup, true, 500);
    if rerun.rows != pointer_outcome.rows {
        problems.push("overfit metrics log changed between identical runs".to_string());
    }
    let (ablation_rerun, _) = run_ablation(setup, pointer_outcome.epochs_used);
    if ablation_rerun != ablation_rows {
        problems.push("ablation metrics log changed between identical runs".to_string());
    }
    let (scst_rerun, _, _) = run_scst(checkpoint, setup, 50);
    if scst_rerun != scst_rows {
        problems.push("fine-tune metrics log changed between identical runs".to_string());
    }

    // Checkpoints round-trip bit for bit.
    let loaded = load_checkpoint(checkpoint).unwrap();
    if loaded.store.params() != pointer_outcome.trainer.store.params() {
        problems.push("checkpoint did not round-trip parameters bitwise".to_string());
    }

    // A run interrupted at an epoch boundary continues the same curve.
    let dir = tempfile::tempdir().unwrap();
    let mid = dir.path().join("mid.ckpt");
    let full = {
        let store = ParamStore::init(overfit_model_config(setup.vocab_size, true), 7).unwrap();
        let mut t = Trainer::new(store, overfit_train_config()).unwrap();
        let rows = t.run(&setup.examples, &setup.examples, 6, |_, _| {}).unwrap();
        (rows.iter().map(|r| r.csv_line()).collect::<Vec<_>>(), t.store.params().to_vec())
    };
    let split = {
        let store = ParamStore::init(overfit_model_config(setup.vocab_size, true), 7).unwrap();
        let mut t = Trainer::new(store, overfit_train_config()).unwrap();
        let mut rows = t.run(&setup.examples, &setup.examples, 3, |_, _| {}).unwrap();
        t.save(&mid).unwrap();
        let mut resumed = Trainer::resume(load_checkpoint(&mid).unwrap(), overfit_train_config()).unwrap();
        rows.extend(resumed.run(&setup.examples, &setup.examples, 6, |_, _| {}).unwrap());
        (rows.iter().map(|r| r.csv_line()).collect::<Vec<_>>(), resumed.store.params().to_vec())
    };
    if full.0 != split.0 {
        problems.push("resumed run logged a different loss curve".to_string());
    }
    if full.1 != split.1 {
        problems.push("resumed run reached different parameters".to_string());
    }

    Check {
        label: "same-seed reruns are bitwise identical; checkpoints round-trip and resume seamlessly",
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "{} + {} + {} metric rows reproduced bitwise; resume matches uninterrupted run",
                pointer_outcome.rows.len(),
                ablation_rows.len(),
                scst_rows.len()
            )
        } else {
            problems.join("; ")
        },
    }
}

// ---------------------------------------------------------------------
// 9. Decode diversity across groups
// ---------------------------------------------------------------------

fn check_diversity() -> Check {
    let started = Instant::now();
    let models = 200;
    let mut qualifying = 0;
    let mut diverse = 0;
    for m in 0..models {
        let mut model = SeedModel { seed: 1000 + m as u64, vocab: 4 };
        let first = model.probs_for(&[gist_core::textdata::SOS]);
        let mut sorted = first.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] > 0.1 {
            continue;
        }
        qualifying += 1;
        let cfg = BeamConfig {
            beam_width: 2,
            max_steps: 3,
            num_groups: 2,
            diversity_strength: 10.0,
            ..BeamConfig::default()
        };
        let hyps = beam_search(&mut model, &cfg).unwrap();
        let first_of = |group: usize| -> Option<usize> {
            hyps.iter().find(|h| h.group == group).and_then(|h| h.ids.first().copied())
        };
        if let (Some(a), Some(b)) = (first_of(0), first_of(1)) {
            if a != b {
                diverse += 1;
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let rate = if qualifying > 0 { diverse as f64 / qualifying as f64 } else { 1.0 };
    Check {
        label: "diversity groups open with different tokens when the head-to-head is close",
        passed: rate >= 0.95 && qualifying > 0,
        detail: format!(
            "{diverse} of {qualifying} close-call models diverged ({:.1}%), {elapsed:.1}s",
            rate * 100.0
        ),
    }
}

// ---------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut checks = Vec::new();

    checks.push(check_gradients());
    checks.push(check_distribution_invariants());
    checks.push(check_beam_oracle());
    checks.push(check_rouge_oracle());

    let setup = overfit_setup();
    let (overfit_check, outcome) = check_overfit(&setup);
    checks.push(overfit_check);

    let (ablation_check, ablation_rows, _) = check_ablation(&setup, &outcome);
    checks.push(ablation_check);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("overfit.ckpt");
    outcome.trainer.save(&ckpt).unwrap();
    let (scst_check, scst_rows) = check_scst(&ckpt, &setup, outcome.rouge_l);
    checks.push(scst_check);

    checks.push(check_determinism(&setup, &outcome, &ablation_rows, &scst_rows, &ckpt));
    checks.push(check_diversity());

    report(&checks);
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
    assert!(
        failed.is_empty(),
        "{} acceptance check(s) failed: {}",
        failed.len(),
        failed.iter().map(|c| c.label).collect::<Vec<_>>().join("; ")
    );
}
