//! Command-line front end tying the summarization pipeline together:
//! vocabulary building, training, decoding, and ROUGE evaluation.
//!
//! Exit status: 0 on success, 2 for an invalid configuration (the failed
//! invariant is named), 3 for a missing input file, 1 otherwise — always
//! with a one-line diagnostic on stderr.

mod config;
mod decode;
mod eval;
mod train;
mod vocab;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// How a run failed, mapped onto the exit status.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration; exits 2 and names the broken invariant.
    Config(String),
    /// A required input file does not exist; exits 3.
    Missing(String),
    /// Anything else; exits 1.
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(msg) | CliError::Missing(msg) | CliError::Other(msg) => msg,
        }
    }
}

impl From<gist_core::error::Error> for CliError {
    fn from(e: gist_core::error::Error) -> CliError {
        match e {
            gist_core::error::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gist",
    version,
    about = "Train, decode, and score abstractive summarization models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a JSON Lines corpus.
    Vocab(VocabArgs),
    /// Train a model; writes checkpoints and a metrics CSV.
    Train(RunArgs),
    /// Decode articles; writes N-best JSONL and plain-text summaries.
    Decode(RunArgs),
    /// Score candidate summaries against references; writes a ROUGE CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct VocabArgs {
    /// JSON Lines corpus with "article" and "summary" fields.
    #[arg(long)]
    pub input: PathBuf,
    /// Maximum vocabulary size, reserved tokens included.
    #[arg(long, default_value_t = 50_000)]
    pub cap: usize,
    /// Where to write the vocabulary file.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Candidate summaries: plain text, one tokenized summary per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// References: plain-text lines, or a .jsonl corpus whose summaries are used.
    #[arg(long)]
    pub references: PathBuf,
    /// Where to write the ROUGE report CSV.
    #[arg(long)]
    pub output: PathBuf,
}

/// Flags for `train` and `decode`. Values load from `--config` first,
/// then `--set` pairs, then the named flags, each layer overriding the
/// last; `gist train --help` lists the frequently used keys and any key
/// can be assigned with `--set`.
#[derive(Args)]
pub struct RunArgs {
    /// Configuration file of `key = value` lines (`#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Model code: alignment letter (D, G, C) then five 0/1 digits for
    /// pointer, temporal attention, intra-decoder attention, weight
    /// sharing, coverage — e.g. C10101.
    #[arg(long)]
    pub model: Option<String>,
    /// Word-embedding width.
    #[arg(long = "d-emb")]
    pub d_emb: Option<String>,
    /// Encoder hidden width per direction.
    #[arg(long = "d-hidden")]
    pub d_hidden: Option<String>,
    /// Training corpus (JSON Lines).
    #[arg(long = "train-data")]
    pub train_data: Option<String>,
    /// Held-out corpus scored after each epoch (defaults to train-data).
    #[arg(long = "eval-data")]
    pub eval_data: Option<String>,
    /// Articles to decode (JSON Lines; summaries optional).
    #[arg(long)]
    pub input: Option<String>,
    /// Vocabulary file from `gist vocab`.
    #[arg(long)]
    pub vocab: Option<String>,
    /// Checkpoint to resume training from or to decode with.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Directory for outputs.
    #[arg(long = "out-dir")]
    pub out_dir: Option<String>,
    /// Training strategy: xent, dad, e2e, reinforce, mixer, scst.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Truth-feeding schedule: a probability, or linear:/exp:/invsig:<alpha>.
    #[arg(long)]
    pub dad: Option<String>,
    /// Target total epoch count (resuming continues up to it).
    #[arg(long)]
    pub epochs: Option<String>,
    /// Examples per optimizer step.
    #[arg(long = "batch-size")]
    pub batch_size: Option<String>,
    /// Seed for parameter init and epoch shuffling.
    #[arg(long)]
    pub seed: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<String>,
    /// Sequence-level weight in blended losses (gamma).
    #[arg(long = "rl-weight")]
    pub rl_weight: Option<String>,
    /// Reward metric: rouge1, rouge2, rougeL.
    #[arg(long)]
    pub reward: Option<String>,
    /// Weight on the coverage loss term.
    #[arg(long = "coverage-weight")]
    pub coverage_weight: Option<String>,
    /// Save a numbered checkpoint every N epochs (0 = final only).
    #[arg(long = "checkpoint-every")]
    pub checkpoint_every: Option<String>,
    /// Decode greedily instead of with beam search.
    #[arg(long)]
    pub greedy: bool,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<String>,
    /// Decoding step budget.
    #[arg(long = "decode-max-steps")]
    pub decode_max_steps: Option<String>,
    /// Length-normalization exponent for ranking hypotheses.
    #[arg(long = "length-power")]
    pub length_power: Option<String>,
    /// Penalty per sibling rank within one parent (diverse siblings).
    #[arg(long = "sibling-penalty")]
    pub sibling_penalty: Option<String>,
    /// Number of diverse beam groups.
    #[arg(long = "num-groups")]
    pub num_groups: Option<String>,
    /// Penalty for repeating an earlier group's token at the same step.
    #[arg(long = "diversity-strength")]
    pub diversity_strength: Option<String>,
    /// Hypotheses to keep per article in the N-best list.
    #[arg(long = "n-best")]
    pub n_best: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! named {
            ($key:literal, $field:ident) => {
                if let Some(value) = &self.$field {
                    out.push(($key, value.clone()));
                }
            };
        }
        named!("model", model);
        named!("d_emb", d_emb);
        named!("d_hidden", d_hidden);
        named!("train_data", train_data);
        named!("eval_data", eval_data);
        named!("input", input);
        named!("vocab", vocab);
        named!("checkpoint", checkpoint);
        named!("out_dir", out_dir);
        named!("strategy", strategy);
        named!("dad", dad);
        named!("epochs", epochs);
        named!("batch_size", batch_size);
        named!("seed", seed);
        named!("lr", lr);
        named!("rl_weight", rl_weight);
        named!("reward", reward);
        named!("coverage_weight", coverage_weight);
        named!("checkpoint_every", checkpoint_every);
        named!("beam", beam);
        named!("decode_max_steps", decode_max_steps);
        named!("length_power", length_power);
        named!("sibling_penalty", sibling_penalty);
        named!("num_groups", num_groups);
        named!("diversity_strength", diversity_strength);
        named!("n_best", n_best);
        if self.greedy {
            out.push(("greedy", "true".to_string()));
        }
        out
    }
}

fn build_run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.load_file(path)?;
    }
    for pair in &args.sets {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(CliError::Config(format!("--set expects KEY=VALUE, got {pair:?}")));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    for (key, value) in args.overrides() {
        cfg.set(key, &value)?;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Vocab(args) => vocab::run(&args),
        Command::Train(args) => train::run(&build_run_config(&args)?),
        Command::Decode(args) => decode::run(&build_run_config(&args)?),
        Command::Eval(args) => eval::run(&args),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("gist: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
