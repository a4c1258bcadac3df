//! Run configuration shared by the `train` and `decode` subcommands.
//!
//! All knobs live in one flat `key = value` namespace. Values come from
//! an optional UTF-8 config file (`#` starts a comment) and are then
//! overridden by command-line flags, in that order. Every run writes the
//! fully-resolved result next to its outputs, so any artifact can be
//! reproduced from its manifest alone.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gist_core::decoding::BeamConfig;
use gist_core::encdec::{ModelConfig, ModelFlags};
use gist_core::rouge::RougeVariant;
use gist_core::training::{AdamConfig, BaselineMode, DecaySchedule, Strategy, TrainConfig};

use crate::CliError;

/// Every model, training, and decoding knob plus file paths and the seed.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // Model shape.
    pub model: String,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub allow_temporal_with_coverage: bool,
    // Files and data limits.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub src_max: usize,
    pub tgt_max: usize,
    // Training.
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
    pub dad: DecaySchedule,
    pub fused_top_k: usize,
    pub mixer_delta: usize,
    pub mixer_every: usize,
    pub mixer_warm: usize,
    pub rl_weight: f64,
    pub reward: RougeVariant,
    pub baseline: BaselineMode,
    pub coverage_weight: f64,
    pub rollout_max_steps: usize,
    pub checkpoint_every: usize,
    // Decoding.
    pub greedy: bool,
    pub beam: usize,
    pub decode_max_steps: usize,
    pub length_power: f64,
    pub sibling_penalty: f64,
    pub num_groups: usize,
    pub diversity_strength: f64,
    pub n_best: usize,
    /// Keys that were explicitly assigned (file or flag), for detecting
    /// conflicts with values a checkpoint carries.
    assigned: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            model: "G10000".to_string(),
            d_emb: 128,
            d_hidden: 256,
            allow_temporal_with_coverage: false,
            train_data: None,
            eval_data: None,
            input: None,
            vocab: None,
            checkpoint: None,
            out_dir: PathBuf::from("."),
            src_max: 400,
            tgt_max: 100,
            strategy: t.strategy,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            max_grad_norm: t.max_grad_norm,
            dad: t.dad,
            fused_top_k: t.fused_top_k,
            mixer_delta: t.mixer_delta,
            mixer_every: t.mixer_every,
            mixer_warm: t.mixer_warm,
            rl_weight: t.rl_weight,
            reward: t.reward,
            baseline: t.baseline,
            coverage_weight: t.coverage_weight,
            rollout_max_steps: t.rollout_max_steps,
            checkpoint_every: 0,
            greedy: false,
            beam: 4,
            decode_max_steps: 100,
            length_power: 0.0,
            sibling_penalty: 0.0,
            num_groups: 1,
            diversity_strength: 0.0,
            n_best: 1,
            assigned: BTreeSet::new(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("key `{key}`: {value:?} is not {expected}")))
}

fn parse_schedule(key: &str, value: &str) -> Result<DecaySchedule, CliError> {
    let schedule = if let Some(rest) = value.strip_prefix("linear:") {
        DecaySchedule::Linear { alpha: parse_value(key, rest, "a number")? }
    } else if let Some(rest) = value.strip_prefix("exp:") {
        DecaySchedule::Exponential { alpha: parse_value(key, rest, "a number")? }
    } else if let Some(rest) = value.strip_prefix("invsig:") {
        DecaySchedule::InverseSigmoid { alpha: parse_value(key, rest, "a number")? }
    } else if let Some(rest) = value.strip_prefix("constant:") {
        DecaySchedule::Constant { p: parse_value(key, rest, "a probability")? }
    } else {
        DecaySchedule::Constant {
            p: parse_value(key, value, "a probability or linear:/exp:/invsig: schedule")?,
        }
    };
    schedule.validate().map_err(|e| CliError::Config(format!("key `{key}`: {e}")))?;
    Ok(schedule)
}

pub fn render_schedule(schedule: &DecaySchedule) -> String {
    match *schedule {
        DecaySchedule::Linear { alpha } => format!("linear:{alpha}"),
        DecaySchedule::Exponential { alpha } => format!("exp:{alpha}"),
        DecaySchedule::InverseSigmoid { alpha } => format!("invsig:{alpha}"),
        DecaySchedule::Constant { p } => format!("{p}"),
    }
}

fn parse_baseline(key: &str, value: &str) -> Result<BaselineMode, CliError> {
    if let Some(rest) = value.strip_prefix("ema:") {
        Ok(BaselineMode::MovingAverage { decay: parse_value(key, rest, "a decay in [0, 1)")? })
    } else {
        Ok(BaselineMode::Fixed { value: parse_value(key, value, "a number or ema:<decay>")? })
    }
}

fn render_baseline(baseline: &BaselineMode) -> String {
    match *baseline {
        BaselineMode::Fixed { value } => format!("{value}"),
        BaselineMode::MovingAverage { decay } => format!("ema:{decay}"),
    }
}

fn parse_reward(key: &str, value: &str) -> Result<RougeVariant, CliError> {
    match value {
        "rouge1" => Ok(RougeVariant::Rouge1),
        "rouge2" => Ok(RougeVariant::Rouge2),
        "rougeL" => Ok(RougeVariant::RougeL),
        other => Err(CliError::Config(format!(
            "key `{key}`: {other:?} is not one of rouge1, rouge2, rougeL"
        ))),
    }
}

pub fn reward_name(variant: RougeVariant) -> &'static str {
    match variant {
        RougeVariant::Rouge1 => "rouge1",
        RougeVariant::Rouge2 => "rouge2",
        RougeVariant::RougeL => "rougeL",
    }
}

impl RunConfig {
    /// Apply `key = value` lines from `path` on top of the current values.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Missing(format!("missing file: {}", path.display()))
            } else {
                CliError::Other(format!("cannot read {}: {e}", path.display()))
            }
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected `key = value`, got {:?}",
                    path.display(),
                    lineno + 1,
                    raw.trim()
                )));
            };
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                CliError::Config(msg) => {
                    CliError::Config(format!("{}:{}: {msg}", path.display(), lineno + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Assign one key. Unknown keys and malformed values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "model" => self.model = value.to_string(),
            "d_emb" => self.d_emb = parse_value(key, value, "a positive integer")?,
            "d_hidden" => self.d_hidden = parse_value(key, value, "a positive integer")?,
            "allow_temporal_with_coverage" => {
                self.allow_temporal_with_coverage = parse_value(key, value, "true or false")?
            }
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "eval_data" => self.eval_data = Some(PathBuf::from(value)),
            "input" => self.input = Some(PathBuf::from(value)),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "src_max" => self.src_max = parse_value(key, value, "a positive integer")?,
            "tgt_max" => self.tgt_max = parse_value(key, value, "a positive integer")?,
            "strategy" => {
                self.strategy = Strategy::from_str(value)
                    .map_err(|e| CliError::Config(format!("key `{key}`: {e}")))?
            }
            "epochs" => self.epochs = parse_value(key, value, "an integer")?,
            "batch_size" => self.batch_size = parse_value(key, value, "a positive integer")?,
            "seed" => self.seed = parse_value(key, value, "an unsigned integer")?,
            "lr" => self.lr = parse_value(key, value, "a number")?,
            "beta1" => self.beta1 = parse_value(key, value, "a number")?,
            "beta2" => self.beta2 = parse_value(key, value, "a number")?,
            "eps" => self.eps = parse_value(key, value, "a number")?,
            "max_grad_norm" => self.max_grad_norm = parse_value(key, value, "a number")?,
            "dad" => self.dad = parse_schedule(key, value)?,
            "fused_top_k" => self.fused_top_k = parse_value(key, value, "a positive integer")?,
            "mixer_delta" => self.mixer_delta = parse_value(key, value, "a positive integer")?,
            "mixer_every" => self.mixer_every = parse_value(key, value, "a positive integer")?,
            "mixer_warm" => self.mixer_warm = parse_value(key, value, "an integer")?,
            "rl_weight" => self.rl_weight = parse_value(key, value, "a number in [0, 1]")?,
            "reward" => self.reward = parse_reward(key, value)?,
            "baseline" => self.baseline = parse_baseline(key, value)?,
            "coverage_weight" => self.coverage_weight = parse_value(key, value, "a number")?,
            "rollout_max_steps" => {
                self.rollout_max_steps = parse_value(key, value, "a positive integer")?
            }
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value, "an integer")?,
            "greedy" => self.greedy = parse_value(key, value, "true or false")?,
            "beam" => self.beam = parse_value(key, value, "a positive integer")?,
            "decode_max_steps" => {
                self.decode_max_steps = parse_value(key, value, "a positive integer")?
            }
            "length_power" => self.length_power = parse_value(key, value, "a number")?,
            "sibling_penalty" => self.sibling_penalty = parse_value(key, value, "a number")?,
            "num_groups" => self.num_groups = parse_value(key, value, "a positive integer")?,
            "diversity_strength" => {
                self.diversity_strength = parse_value(key, value, "a number")?
            }
            "n_best" => self.n_best = parse_value(key, value, "a positive integer")?,
            other => {
                return Err(CliError::Config(format!("unknown configuration key `{other}`")))
            }
        }
        self.assigned.insert(key.to_string());
        Ok(())
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.assigned.contains(key)
    }

    /// A required path key, or a config error naming it.
    pub fn require_path(&self, key: &str) -> Result<&Path, CliError> {
        let slot = match key {
            "train_data" => &self.train_data,
            "eval_data" => &self.eval_data,
            "input" => &self.input,
            "vocab" => &self.vocab,
            "checkpoint" => &self.checkpoint,
            other => return Err(CliError::Other(format!("no path key named `{other}`"))),
        };
        slot.as_deref().ok_or_else(|| {
            CliError::Config(format!(
                "`{key}` is required for this command; set it in the config file or with --{}",
                key.replace('_', "-")
            ))
        })
    }

    /// Model shape for a vocabulary of `vocab_size` entries, validated.
    pub fn resolve_model(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let (alignment, flags): (_, ModelFlags) = ModelConfig::parse_code(&self.model)
            .map_err(|e| CliError::Config(format!("key `model`: {e}")))?;
        let config = ModelConfig {
            d_emb: self.d_emb,
            d_hidden: self.d_hidden,
            vocab_size,
            alignment,
            flags,
            allow_temporal_with_coverage: self.allow_temporal_with_coverage,
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }

    /// Training schedule, validated.
    pub fn resolve_training(&self) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            strategy: self.strategy,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            max_grad_norm: self.max_grad_norm,
            dad: self.dad,
            fused_top_k: self.fused_top_k,
            mixer_delta: self.mixer_delta,
            mixer_every: self.mixer_every,
            mixer_warm: self.mixer_warm,
            rl_weight: self.rl_weight,
            reward: self.reward,
            baseline: self.baseline,
            coverage_weight: self.coverage_weight,
            rollout_max_steps: self.rollout_max_steps,
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }

    /// Beam settings, validated.
    pub fn resolve_beam(&self) -> Result<BeamConfig, CliError> {
        let config = BeamConfig {
            beam_width: self.beam,
            max_steps: self.decode_max_steps,
            length_power: self.length_power,
            sibling_penalty: self.sibling_penalty,
            num_groups: self.num_groups,
            diversity_strength: self.diversity_strength,
        };
        config.validate().map_err(CliError::from)?;
        if self.n_best == 0 {
            return Err(CliError::Config("n_best must be at least 1".into()));
        }
        Ok(config)
    }

    /// The fully-resolved `key = value` manifest for this run. Feeding it
    /// back through `--config` reproduces the same configuration.
    pub fn render(&self, command: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# gist {command} — fully resolved configuration");
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "d_emb = {}", self.d_emb);
        let _ = writeln!(s, "d_hidden = {}", self.d_hidden);
        let _ = writeln!(
            s,
            "allow_temporal_with_coverage = {}",
            self.allow_temporal_with_coverage
        );
        for (key, value) in [
            ("train_data", &self.train_data),
            ("eval_data", &self.eval_data),
            ("input", &self.input),
            ("vocab", &self.vocab),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(path) = value {
                let _ = writeln!(s, "{key} = {}", path.display());
            }
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "src_max = {}", self.src_max);
        let _ = writeln!(s, "tgt_max = {}", self.tgt_max);
        let _ = writeln!(s, "strategy = {}", self.strategy.token());
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "max_grad_norm = {}", self.max_grad_norm);
        let _ = writeln!(s, "dad = {}", render_schedule(&self.dad));
        let _ = writeln!(s, "fused_top_k = {}", self.fused_top_k);
        let _ = writeln!(s, "mixer_delta = {}", self.mixer_delta);
        let _ = writeln!(s, "mixer_every = {}", self.mixer_every);
        let _ = writeln!(s, "mixer_warm = {}", self.mixer_warm);
        let _ = writeln!(s, "rl_weight = {}", self.rl_weight);
        let _ = writeln!(s, "reward = {}", reward_name(self.reward));
        let _ = writeln!(s, "baseline = {}", render_baseline(&self.baseline));
        let _ = writeln!(s, "coverage_weight = {}", self.coverage_weight);
        let _ = writeln!(s, "rollout_max_steps = {}", self.rollout_max_steps);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "greedy = {}", self.greedy);
        let _ = writeln!(s, "beam = {}", self.beam);
        let _ = writeln!(s, "decode_max_steps = {}", self.decode_max_steps);
        let _ = writeln!(s, "length_power = {}", self.length_power);
        let _ = writeln!(s, "sibling_penalty = {}", self.sibling_penalty);
        let _ = writeln!(s, "num_groups = {}", self.num_groups);
        let _ = writeln!(s, "diversity_strength = {}", self.diversity_strength);
        let _ = writeln!(s, "n_best = {}", self.n_best);
        s
    }
}

/// The manifest path for a single-file output: `<file>.config` beside it.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    match output.file_name() {
        Some(name) => output.with_file_name(format!("{}.config", name.to_string_lossy())),
        None => output.with_extension("config"),
    }
}

/// A required input file, or exit-3 error naming it.
pub fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("missing file: {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_then_flag_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# a comment line\nepochs = 7   # trailing comment\nstrategy = scst\nseed = 4\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.strategy, Strategy::SelfCritical);
        cfg.set("epochs", "2").unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.seed, 4);
        assert!(cfg.was_set("strategy"));
        assert!(!cfg.was_set("model"));
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_problem() {
        let mut cfg = RunConfig::default();
        match cfg.set("leaning_rate", "0.1") {
            Err(CliError::Config(msg)) => assert!(msg.contains("leaning_rate"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match cfg.set("epochs", "three") {
            Err(CliError::Config(msg)) => assert!(msg.contains("epochs"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match cfg.set("reward", "bleu") {
            Err(CliError::Config(msg)) => assert!(msg.contains("rougeL"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn schedule_forms_parse_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.set("dad", "0.5").unwrap();
        assert_eq!(cfg.dad, DecaySchedule::Constant { p: 0.5 });
        cfg.set("dad", "linear:0.01").unwrap();
        assert_eq!(cfg.dad, DecaySchedule::Linear { alpha: 0.01 });
        cfg.set("dad", "exp:0.9").unwrap();
        assert_eq!(cfg.dad, DecaySchedule::Exponential { alpha: 0.9 });
        cfg.set("dad", "invsig:8").unwrap();
        assert_eq!(cfg.dad, DecaySchedule::InverseSigmoid { alpha: 8.0 });
        assert!(cfg.set("dad", "exp:1.5").is_err());
        assert!(cfg.set("dad", "sometimes").is_err());
    }

    #[test]
    fn manifest_reparses_to_the_same_manifest() {
        let mut cfg = RunConfig::default();
        cfg.set("strategy", "mixer").unwrap();
        cfg.set("dad", "invsig:12").unwrap();
        cfg.set("baseline", "ema:0.9").unwrap();
        cfg.set("train_data", "data/train.jsonl").unwrap();
        cfg.set("beam", "8").unwrap();
        let manifest = cfg.render("train");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.config");
        std::fs::write(&path, &manifest).unwrap();
        let mut reparsed = RunConfig::default();
        reparsed.load_file(&path).unwrap();
        assert_eq!(reparsed.render("train"), manifest);
    }

    #[test]
    fn model_resolution_names_broken_invariants() {
        let mut cfg = RunConfig::default();
        cfg.set("model", "C10101").unwrap();
        let model = cfg.resolve_model(50).unwrap();
        assert_eq!(model.code(), "C10101");

        cfg.set("model", "G10001").unwrap();
        match cfg.resolve_model(50) {
            Err(CliError::Config(msg)) => assert!(msg.contains("coverage"), "got: {msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        cfg.set("model", "X999").unwrap();
        assert!(matches!(cfg.resolve_model(50), Err(CliError::Config(_))));
    }

    #[test]
    fn sibling_manifest_paths() {
        assert_eq!(
            manifest_path_for(Path::new("out/vocab.txt")),
            Path::new("out/vocab.txt.config")
        );
        assert_eq!(manifest_path_for(Path::new("rouge.csv")), Path::new("rouge.csv.config"));
    }
}
