//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, unknown
//! keys are rejected, and [`ExperimentConfig::serialize`] writes every key in
//! a fixed order so parse → serialize → parse is the identity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::pipeline::{RmTrainConfig, SftConfig};
use crate::rl::RlConfig;
use crate::synthdata::TaskSpec;

/// `(key, description)` for every accepted key, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("out_dir", "directory receiving every stage's outputs"),
    ("task.vocab", "content tokens available to prompts and responses"),
    ("task.prompt_len", "prompt length"),
    ("task.response_cap", "longest response, EOS excluded"),
    ("task.match_bonus", "gold reward per matched prompt token"),
    ("task.length_free", "response length before the length penalty starts"),
    ("task.length_slope", "gold penalty per token beyond task.length_free"),
    ("task.repetition_penalty", "gold penalty per immediate repeat"),
    ("data.budget", "prompt budget split 20/40/40 across SFT, preferences, RL"),
    ("data.seed", "dataset generation seed"),
    ("model.vocab_size", "token ids including BOS and EOS"),
    ("model.embed_dim", "residual width"),
    ("model.heads", "attention heads"),
    ("model.ff_width", "feedforward hidden width"),
    ("model.layers", "transformer layers"),
    ("model.max_seq_len", "longest sequence BOS + prompt + response + EOS"),
    ("model.init_seed", "policy initialization seed"),
    ("sft.epochs", "supervised fine-tuning epochs"),
    ("sft.batch", "SFT minibatch size"),
    ("sft.lr", "SFT Adam learning rate"),
    ("sft.seed", "SFT shuffling seed"),
    ("rm.epochs", "reward-model epochs"),
    ("rm.batch", "reward-model minibatch size"),
    ("rm.lr", "reward-model Adam learning rate"),
    ("rm.lambda", "weight of the nuclear-norm diversity term"),
    ("rm.members", "ensemble members"),
    ("rm.rank", "LoRA rank"),
    ("rm.a_init_std", "standard deviation of the initial LoRA A factors"),
    ("rm.seed", "adapter initialization and shuffling seed"),
    ("rl.steps", "policy updates"),
    ("rl.prompts_per_batch", "prompts sampled per update"),
    ("rl.samples_per_prompt", "responses sampled per prompt"),
    ("rl.temperature", "sampling temperature"),
    ("rl.lr", "policy Adam learning rate"),
    ("rl.beta1", "KL objective weight"),
    ("rl.beta2", "uncertainty penalty weight (0 is plain RLHF)"),
    ("rl.baseline_decay", "EMA decay of the reward baseline"),
    ("rl.clip", "ratio clip epsilon, or none for REINFORCE"),
    ("rl.seed", "prompt and sampling seed of the rl subcommand"),
    ("rl.checkpoint_every", "policy snapshot interval in steps (0 disables)"),
    ("eval.prompts", "RL prompts used for rollout evaluation"),
    ("eval.seed", "rollout evaluation sampling seed"),
    ("experiment.seeds", "comma-separated RL seeds of the experiment subcommand"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub task: TaskSpec,
    pub data_budget: usize,
    pub data_seed: u64,
    pub model: BackboneConfig,
    pub init_seed: u64,
    pub sft: SftConfig,
    pub rm: RmTrainConfig,
    pub rl: RlConfig,
    pub eval_prompts: usize,
    pub eval_seed: u64,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs/default"),
            task: TaskSpec::default(),
            data_budget: 2000,
            data_seed: 0,
            model: BackboneConfig::default(),
            init_seed: 0,
            sft: SftConfig::default(),
            rm: RmTrainConfig::default(),
            rl: RlConfig {
                checkpoint_every: 25,
                ..RlConfig::default()
            },
            eval_prompts: 300,
            eval_seed: 0,
            seeds: vec![0, 1, 2, 3],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    pub fn is_key(key: &str) -> bool {
        KEYS.iter().any(|(k, _)| *k == key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "task.vocab" => self.task.vocab = parse_num(key, v)?,
            "task.prompt_len" => self.task.prompt_len = parse_num(key, v)?,
            "task.response_cap" => self.task.response_cap = parse_num(key, v)?,
            "task.match_bonus" => self.task.match_bonus = parse_num(key, v)?,
            "task.length_free" => self.task.length_free = parse_num(key, v)?,
            "task.length_slope" => self.task.length_slope = parse_num(key, v)?,
            "task.repetition_penalty" => self.task.repetition_penalty = parse_num(key, v)?,
            "data.budget" => self.data_budget = parse_num(key, v)?,
            "data.seed" => self.data_seed = parse_num(key, v)?,
            "model.vocab_size" => self.model.vocab_size = parse_num(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse_num(key, v)?,
            "model.heads" => self.model.heads = parse_num(key, v)?,
            "model.ff_width" => self.model.ff_width = parse_num(key, v)?,
            "model.layers" => self.model.layers = parse_num(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse_num(key, v)?,
            "model.init_seed" => self.init_seed = parse_num(key, v)?,
            "sft.epochs" => self.sft.epochs = parse_num(key, v)?,
            "sft.batch" => self.sft.batch = parse_num(key, v)?,
            "sft.lr" => self.sft.lr = parse_num(key, v)?,
            "sft.seed" => self.sft.seed = parse_num(key, v)?,
            "rm.epochs" => self.rm.epochs = parse_num(key, v)?,
            "rm.batch" => self.rm.batch = parse_num(key, v)?,
            "rm.lr" => self.rm.lr = parse_num(key, v)?,
            "rm.lambda" => self.rm.lambda = parse_num(key, v)?,
            "rm.members" => self.rm.members = parse_num(key, v)?,
            "rm.rank" => self.rm.rank = parse_num(key, v)?,
            "rm.a_init_std" => self.rm.a_init_std = parse_num(key, v)?,
            "rm.seed" => self.rm.seed = parse_num(key, v)?,
            "rl.steps" => self.rl.steps = parse_num(key, v)?,
            "rl.prompts_per_batch" => self.rl.prompts_per_batch = parse_num(key, v)?,
            "rl.samples_per_prompt" => self.rl.samples_per_prompt = parse_num(key, v)?,
            "rl.temperature" => self.rl.temperature = parse_num(key, v)?,
            "rl.lr" => self.rl.lr = parse_num(key, v)?,
            "rl.beta1" => self.rl.beta1 = parse_num(key, v)?,
            "rl.beta2" => self.rl.beta2 = parse_num(key, v)?,
            "rl.baseline_decay" => self.rl.baseline_decay = parse_num(key, v)?,
            "rl.clip" => {
                self.rl.clip = if v == "none" { None } else { Some(parse_num(key, v)?) };
            }
            "rl.seed" => self.rl.seed = parse_num(key, v)?,
            "rl.checkpoint_every" => self.rl.checkpoint_every = parse_num(key, v)?,
            "eval.prompts" => self.eval_prompts = parse_num(key, v)?,
            "eval.seed" => self.eval_seed = parse_num(key, v)?,
            "experiment.seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let values = [
            self.out_dir.display().to_string(),
            self.task.vocab.to_string(),
            self.task.prompt_len.to_string(),
            self.task.response_cap.to_string(),
            self.task.match_bonus.to_string(),
            self.task.length_free.to_string(),
            self.task.length_slope.to_string(),
            self.task.repetition_penalty.to_string(),
            self.data_budget.to_string(),
            self.data_seed.to_string(),
            self.model.vocab_size.to_string(),
            self.model.embed_dim.to_string(),
            self.model.heads.to_string(),
            self.model.ff_width.to_string(),
            self.model.layers.to_string(),
            self.model.max_seq_len.to_string(),
            self.init_seed.to_string(),
            self.sft.epochs.to_string(),
            self.sft.batch.to_string(),
            self.sft.lr.to_string(),
            self.sft.seed.to_string(),
            self.rm.epochs.to_string(),
            self.rm.batch.to_string(),
            self.rm.lr.to_string(),
            self.rm.lambda.to_string(),
            self.rm.members.to_string(),
            self.rm.rank.to_string(),
            self.rm.a_init_std.to_string(),
            self.rm.seed.to_string(),
            self.rl.steps.to_string(),
            self.rl.prompts_per_batch.to_string(),
            self.rl.samples_per_prompt.to_string(),
            self.rl.temperature.to_string(),
            self.rl.lr.to_string(),
            self.rl.beta1.to_string(),
            self.rl.beta2.to_string(),
            self.rl.baseline_decay.to_string(),
            self.rl.clip.map_or_else(|| "none".to_string(), |c| c.to_string()),
            self.rl.seed.to_string(),
            self.rl.checkpoint_every.to_string(),
            self.eval_prompts.to_string(),
            self.eval_seed.to_string(),
            seeds.join(","),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Entries whose key starts with one of `prefixes`, as `key = value` lines.
    pub fn subset(&self, prefixes: &[&str]) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                writeln!(s, "{k} = {v}").expect("string write");
            }
        }
        s
    }

    pub fn serialize(&self) -> String {
        self.subset(&[""])
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate(self.model.max_seq_len)?;
        self.rl.validate()?;
        if self.task.vocab as usize + 2 > self.model.vocab_size {
            return Err(Error::Config(format!(
                "task.vocab {} does not fit model.vocab_size {}",
                self.task.vocab, self.model.vocab_size
            )));
        }
        if self.data_budget < 100 {
            return Err(Error::Config(format!("data.budget {} below 100", self.data_budget)));
        }
        if self.rm.members < 2 || self.rm.rank == 0 || self.rm.lambda < 0.0 || !(self.rm.a_init_std > 0.0) {
            return Err(Error::Config("rm.members ≥ 2, rm.rank ≥ 1, rm.lambda ≥ 0 and rm.a_init_std > 0 required".into()));
        }
        if self.sft.batch == 0 || self.rm.batch == 0 || !(self.sft.lr > 0.0) || !(self.rm.lr > 0.0) {
            return Err(Error::Config("batch sizes and learning rates must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if self.eval_prompts == 0 {
            return Err(Error::Config("eval.prompts must be positive".into()));
        }
        Ok(())
    }

    /// Key reference for `--help`.
    pub fn help_text() -> String {
        let defaults = ExperimentConfig::default().entries();
        let mut s = String::new();
        for ((key, doc), (_, value)) in KEYS.iter().zip(defaults) {
            writeln!(s, "  {key:<24} {doc} [default: {value}]").expect("string write");
        }
        s
    }
}
