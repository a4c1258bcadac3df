//! `gist vocab`: build a token table from a corpus.

use std::fmt::Write as _;

use gist_core::textdata::{read_jsonl, Vocabulary};

use crate::config::{manifest_path_for, require_file};
use crate::{CliError, VocabArgs};

pub fn run(args: &VocabArgs) -> Result<(), CliError> {
    require_file(&args.input)?;
    let records = read_jsonl(&args.input)?;
    let vocab = Vocabulary::build(&records, args.cap)?;
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Other(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    vocab.save(&args.output)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "# gist vocab — fully resolved configuration");
    let _ = writeln!(manifest, "input = {}", args.input.display());
    let _ = writeln!(manifest, "cap = {}", args.cap);
    let _ = writeln!(manifest, "output = {}", args.output.display());
    let manifest_path = manifest_path_for(&args.output);
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", manifest_path.display())))?;

    println!(
        "wrote vocabulary of {} entries (4 reserved) to {}",
        vocab.size(),
        args.output.display()
    );
    Ok(())
}
