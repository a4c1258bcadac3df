//! `gist eval`: score candidate summaries against references.
//!
//! Writes a CSV report with one row per ROUGE variant; values are
//! percentages at two decimal places.

use std::fmt::Write as _;
use std::path::Path;

use gist_core::rouge::evaluate_corpus;
use gist_core::textdata::read_jsonl;

use crate::config::{manifest_path_for, require_file, reward_name};
use crate::{CliError, EvalArgs};

fn token_lines(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|line| line.split_whitespace().map(str::to_owned).collect())
        .collect())
}

fn load_side(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    if path.extension().is_some_and(|ext| ext == "jsonl") {
        Ok(read_jsonl(path)?.into_iter().map(|r| r.summary).collect())
    } else {
        token_lines(path)
    }
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    require_file(&args.candidates)?;
    require_file(&args.references)?;
    let candidates = token_lines(&args.candidates)?;
    let references = load_side(&args.references)?;
    if candidates.len() != references.len() {
        return Err(CliError::Other(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        candidates.into_iter().zip(references).collect();
    let report = evaluate_corpus(&pairs)?;

    let mut csv = String::from("variant,precision,recall,f1\n");
    for (variant, score) in &report {
        let _ = writeln!(
            csv,
            "{},{:.2},{:.2},{:.2}",
            reward_name(*variant),
            score.precision * 100.0,
            score.recall * 100.0,
            score.f1 * 100.0
        );
    }
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Other(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(&args.output, &csv)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", args.output.display())))?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "# gist eval — fully resolved configuration");
    let _ = writeln!(manifest, "candidates = {}", args.candidates.display());
    let _ = writeln!(manifest, "references = {}", args.references.display());
    let _ = writeln!(manifest, "output = {}", args.output.display());
    let manifest_path = manifest_path_for(&args.output);
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", manifest_path.display())))?;

    print!("{csv}");
    Ok(())
}
