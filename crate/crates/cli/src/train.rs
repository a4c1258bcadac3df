//! `gist train`: fit a model, writing checkpoints and a metrics CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gist_core::encdec::ParamStore;
use gist_core::textdata::{encode_example, read_jsonl, CorpusRecord, ExtendedExample, Vocabulary};
use gist_core::training::{load_checkpoint, Trainer, METRICS_HEADER};

use crate::config::{render_schedule, require_file, RunConfig};
use crate::CliError;

fn encode_corpus(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<Vec<ExtendedExample>, CliError> {
    records
        .iter()
        .map(|r| {
            encode_example(&r.article, &r.summary, vocab, cfg.src_max, cfg.tgt_max)
                .map_err(CliError::from)
        })
        .collect()
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let train_path = cfg.require_path("train_data")?.to_path_buf();
    let vocab_path = cfg.require_path("vocab")?.to_path_buf();
    require_file(&train_path)?;
    require_file(&vocab_path)?;
    if let Some(path) = &cfg.eval_data {
        require_file(path)?;
    }
    if let Some(path) = &cfg.checkpoint {
        require_file(path)?;
    }

    let vocab = Vocabulary::load(&vocab_path)?;
    let model = cfg.resolve_model(vocab.size())?;
    let schedule = cfg.resolve_training()?;

    let mut trainer = match &cfg.checkpoint {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.store.config != model {
                return Err(CliError::Config(format!(
                    "checkpoint holds model {} (d_emb {}, d_hidden {}, vocab {}) but the run \
                     is configured for {} (d_emb {}, d_hidden {}, vocab {})",
                    loaded.store.config.code(),
                    loaded.store.config.d_emb,
                    loaded.store.config.d_hidden,
                    loaded.store.config.vocab_size,
                    model.code(),
                    model.d_emb,
                    model.d_hidden,
                    model.vocab_size,
                )));
            }
            Trainer::resume(loaded, schedule)?
        }
        None => Trainer::new(ParamStore::init(model.clone(), cfg.seed)?, schedule)?,
    };

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let manifest_path = cfg.out_dir.join("resolved.config");
    std::fs::write(&manifest_path, cfg.render("train"))
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", manifest_path.display())))?;

    let train_set = encode_corpus(&read_jsonl(&train_path)?, &vocab, cfg)?;
    let eval_set = match &cfg.eval_data {
        Some(path) => encode_corpus(&read_jsonl(path)?, &vocab, cfg)?,
        None => train_set.clone(),
    };

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| {
        CliError::Other(format!("cannot create {}: {e}", metrics_path.display()))
    })?);
    let write_failed = |e: std::io::Error| {
        CliError::Other(format!("cannot write {}: {e}", metrics_path.display()))
    };
    writeln!(
        metrics,
        "# strategy = {}, dad = {}, model = {}, seed = {}",
        cfg.strategy.token(),
        render_schedule(&cfg.dad),
        model.code(),
        cfg.seed
    )
    .map_err(write_failed)?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(write_failed)?;

    // Run in chunks so numbered checkpoints can be cut between epochs;
    // the curve is identical to one uninterrupted run.
    let chunk = if cfg.checkpoint_every == 0 { usize::MAX } else { cfg.checkpoint_every };
    while (trainer.epoch as usize) < cfg.epochs {
        let until = cfg.epochs.min((trainer.epoch as usize).saturating_add(chunk));
        let mut row_error: Option<std::io::Error> = None;
        trainer.run(&train_set, &eval_set, until, |row, _| {
            if row_error.is_none() {
                if let Err(e) = writeln!(metrics, "{}", row.csv_line()) {
                    row_error = Some(e);
                }
            }
        })?;
        if let Some(e) = row_error {
            return Err(write_failed(e));
        }
        if cfg.checkpoint_every != 0 && (trainer.epoch as usize) < cfg.epochs {
            save_checkpoint_file(
                &trainer,
                &cfg.out_dir.join(format!("checkpoint-epoch-{}.bin", trainer.epoch)),
            )?;
        }
    }
    metrics.flush().map_err(write_failed)?;

    let final_path = cfg.out_dir.join("checkpoint.bin");
    save_checkpoint_file(&trainer, &final_path)?;
    println!(
        "trained to epoch {} ({} optimizer steps); wrote {} and {}",
        trainer.epoch,
        trainer.step,
        metrics_path.display(),
        final_path.display()
    );
    Ok(())
}

fn save_checkpoint_file(trainer: &Trainer, path: &Path) -> Result<(), CliError> {
    trainer.save(path).map_err(CliError::from)
}
