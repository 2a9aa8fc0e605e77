//! Command-line runner: one subcommand per pipeline stage plus `experiment`,
//! which chains them and resumes finished stages.
//!
//! Every stage directory gets a `stage.hash` marker written after its outputs:
//! a SHA-256 over the stage's config subset and the bytes of its input files.
//! `experiment` skips a stage whose marker matches and whose outputs exist.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::ensemble::RewardEnsemble;
use crate::error::{Error, Result};
use crate::eval::{calibration_csv, ece, ood_csv, rollout_stats, scored_pairs, spearman, OodRow, RolloutStats, ECE_BINS};
use crate::model::PolicyModel;
use crate::pipeline::{init_ensemble, rm_trace_csv, rm_train, sft_trace_csv, sft_train};
use crate::rl::{rl_train, rl_trace_csv};
use crate::synthdata::{build_bundle, parse_prefs, parse_prompts, parse_sft, split_sizes};
use crate::synthdata::{PREF_TEST_FILE, PREF_TRAIN_FILE, RL_PROMPTS_FILE, SFT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const HASH_FILE: &str = "stage.hash";

const COMMANDS: &[(&str, &str)] = &[
    ("gen-data", "generate SFT, preference and RL-prompt datasets plus a manifest"),
    ("sft", "supervised fine-tuning of the policy"),
    ("train-rm", "train the diverse reward LoRA ensemble"),
    ("rl", "uncertainty-penalized RL fine-tuning (--beta2 0 for plain RLHF)"),
    ("eval", "calibration, OOD curve and summary for a list of policy checkpoints"),
    ("experiment", "gen-data, sft, train-rm, then rl with beta2=0 and beta2=rl.beta2 for every seed"),
];

const ALIASES: &[(&str, &str)] = &[
    ("out", "out_dir"),
    ("seed", "rl.seed"),
    ("steps", "rl.steps"),
    ("beta1", "rl.beta1"),
    ("beta2", "rl.beta2"),
    ("lambda", "rm.lambda"),
];

/// Output locations under `out_dir`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.txt")
    }

    pub fn sft_dir(&self) -> PathBuf {
        self.root.join("sft")
    }

    pub fn sft_policy(&self) -> PathBuf {
        self.sft_dir().join("policy.ckpt")
    }

    pub fn rm_dir(&self) -> PathBuf {
        self.root.join("rm")
    }

    pub fn rm_ensemble(&self) -> PathBuf {
        self.rm_dir().join("ensemble.ckpt")
    }

    pub fn rl_dir(&self, beta2: f64, seed: u64) -> PathBuf {
        self.root.join("rl").join(format!("beta2-{beta2}_seed-{seed}"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Hash over a stage label, its config subset and the bytes of its inputs.
pub fn stage_hash(label: &str, config_subset: &str, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0]);
    h.update(config_subset.as_bytes());
    for p in inputs {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn is_fresh(dir: &Path, hash: &str, outputs: &[PathBuf]) -> bool {
    fs::read_to_string(dir.join(HASH_FILE)).is_ok_and(|h| h.trim() == hash) && outputs.iter().all(|p| p.exists())
}

fn mark(dir: &Path, hash: &str) -> Result<()> {
    write_file(&dir.join(HASH_FILE), &format!("{hash}\n"))
}

/// Runs `body` unless the stage in `dir` is already complete for `hash`.
/// Returns whether the stage ran.
fn stage(dir: &Path, hash: &str, outputs: &[PathBuf], resume: bool, body: impl FnOnce() -> Result<()>) -> Result<bool> {
    if resume && is_fresh(dir, hash, outputs) {
        return Ok(false);
    }
    // Clear the marker first so an interrupted rerun is never mistaken for done.
    let _ = fs::remove_file(dir.join(HASH_FILE));
    body()?;
    mark(dir, hash)?;
    Ok(true)
}

fn data_hash(config: &ExperimentConfig) -> Result<String> {
    stage_hash("gen-data", &config.subset(&["task.", "data."]), &[])
}

pub fn gen_data(config: &ExperimentConfig, resume: bool) -> Result<bool> {
    let layout = Layout::new(&config.out_dir);
    let dir = layout.data_dir();
    let outputs: Vec<PathBuf> = [SFT_FILE, PREF_TRAIN_FILE, PREF_TEST_FILE, RL_PROMPTS_FILE]
        .iter()
        .map(|f| dir.join(f))
        .chain([layout.manifest()])
        .collect();
    stage(&dir, &data_hash(config)?, &outputs, resume, || {
        let bundle = build_bundle(&config.task, config.data_budget, config.data_seed)?;
        bundle.write(&dir)?;
        let (sft, pref, rl) = split_sizes(config.data_budget);
        let mut m = String::new();
        writeln!(m, "budget = {}", config.data_budget).expect("string write");
        writeln!(m, "seed = {}", config.data_seed).expect("string write");
        writeln!(m, "sft_prompts = {sft}").expect("string write");
        writeln!(m, "pref_prompts = {pref}").expect("string write");
        writeln!(m, "rl_prompts = {rl}").expect("string write");
        writeln!(m, "sft_pairs = {}", bundle.sft.len()).expect("string write");
        writeln!(m, "pref_train = {}", bundle.pref_train.len()).expect("string write");
        writeln!(m, "pref_test = {}", bundle.pref_test.len()).expect("string write");
        writeln!(m, "pref_skipped = {}", pref - bundle.pref_train.len() - bundle.pref_test.len()).expect("string write");
        m.push_str(&config.subset(&["task."]));
        write_file(&layout.manifest(), &m)
    })
}

pub fn sft(config: &ExperimentConfig, resume: bool) -> Result<bool> {
    let layout = Layout::new(&config.out_dir);
    let data = layout.data_dir().join(SFT_FILE);
    let hash = stage_hash("sft", &config.subset(&["model.", "sft."]), std::slice::from_ref(&data))?;
    let dir = layout.sft_dir();
    let trace = dir.join("sft_trace.csv");
    stage(&dir, &hash, &[layout.sft_policy(), trace.clone()], resume, || {
        let pairs = parse_sft(&read_text(&data)?)?;
        let init = PolicyModel::new(config.model, config.init_seed)?;
        let out = sft_train(init, &pairs, &config.sft)?;
        checkpoint::write(&layout.sft_policy(), &out.model.named_tensors())?;
        write_file(&trace, &sft_trace_csv(&out.loss_trace))
    })
}

pub fn load_policy(path: &Path) -> Result<PolicyModel> {
    PolicyModel::from_named(&checkpoint::read(path)?)
}

pub fn load_ensemble(path: &Path) -> Result<RewardEnsemble> {
    RewardEnsemble::from_named(&checkpoint::read(path)?)
}

pub fn train_rm(config: &ExperimentConfig, resume: bool) -> Result<bool> {
    let layout = Layout::new(&config.out_dir);
    let train = layout.data_dir().join(PREF_TRAIN_FILE);
    let test = layout.data_dir().join(PREF_TEST_FILE);
    let inputs = vec![train.clone(), test.clone(), layout.sft_policy()];
    let hash = stage_hash("train-rm", &config.subset(&["rm."]), &inputs)?;
    let dir = layout.rm_dir();
    let trace = dir.join("rm_trace.csv");
    stage(&dir, &hash, &[layout.rm_ensemble(), trace.clone()], resume, || {
        let train = parse_prefs(&read_text(&train)?)?;
        let test = parse_prefs(&read_text(&test)?)?;
        let sft = load_policy(&layout.sft_policy())?;
        let out = rm_train(init_ensemble(&sft, &config.rm)?, &train, &test, &config.rm)?;
        checkpoint::write(&layout.rm_ensemble(), &out.ensemble.named_tensors())?;
        write_file(&trace, &rm_trace_csv(&out.trace))
    })
}

fn checkpoint_name(step: usize) -> String {
    format!("step-{step:05}.ckpt")
}

/// Runs RL for `config.rl.beta2` and `config.rl.seed`.
pub fn rl(config: &ExperimentConfig, resume: bool) -> Result<bool> {
    let layout = Layout::new(&config.out_dir);
    let prompts = layout.data_dir().join(RL_PROMPTS_FILE);
    let inputs = vec![prompts.clone(), layout.sft_policy(), layout.rm_ensemble()];
    let hash = stage_hash("rl", &config.subset(&["rl.", "task."]), &inputs)?;
    let dir = layout.rl_dir(config.rl.beta2, config.rl.seed);
    let policy_path = dir.join("policy.ckpt");
    let trace = dir.join("rl_trace.csv");
    stage(&dir, &hash, &[policy_path.clone(), trace.clone()], resume, || {
        let prompts = parse_prompts(&read_text(&prompts)?)?;
        let sft = load_policy(&layout.sft_policy())?;
        let ensemble = load_ensemble(&layout.rm_ensemble())?;
        let out = rl_train(&sft, &ensemble, &prompts, &config.task, &config.rl)?;
        let ck_dir = dir.join("checkpoints");
        if ck_dir.exists() {
            fs::remove_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        }
        for (step, p) in &out.checkpoints {
            checkpoint::write(&ck_dir.join(checkpoint_name(*step)), &p.named_tensors())?;
        }
        checkpoint::write(&policy_path, &out.policy.named_tensors())?;
        write_file(&trace, &rl_trace_csv(&out.trace))
    })
}

/// Snapshot files of an RL run, in step order.
pub fn run_checkpoints(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck_dir = run_dir.join("checkpoints");
    let mut files: Vec<PathBuf> = fs::read_dir(&ck_dir)
        .map_err(|e| Error::io(&ck_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub checkpoints: usize,
    pub rm_accuracy: f64,
    pub rm_ece: f64,
    pub final_gold: f64,
    pub final_kl: f64,
    pub final_u: f64,
    pub spearman_kl_u: f64,
}

impl EvalSummary {
    pub fn to_text(&self) -> String {
        format!(
            "checkpoints = {}\nrm_accuracy = {}\nrm_ece = {}\nfinal_gold = {}\nfinal_kl = {}\nfinal_u = {}\nspearman_kl_u = {}\n",
            self.checkpoints, self.rm_accuracy, self.rm_ece, self.final_gold, self.final_kl, self.final_u, self.spearman_kl_u
        )
    }
}

fn eval_prompts(layout: &Layout, config: &ExperimentConfig) -> Result<Vec<Vec<u32>>> {
    let prompts = parse_prompts(&read_text(&layout.data_dir().join(RL_PROMPTS_FILE))?)?;
    Ok(prompts.into_iter().take(config.eval_prompts).collect())
}

fn curve_stats(config: &ExperimentConfig, layout: &Layout, checkpoints: &[PathBuf]) -> Result<Vec<RolloutStats>> {
    let sft = load_policy(&layout.sft_policy())?;
    let ensemble = load_ensemble(&layout.rm_ensemble())?;
    let prompts = eval_prompts(layout, config)?;
    checkpoints
        .iter()
        .map(|p| rollout_stats(&load_policy(p)?, &sft, &ensemble, &config.task, &prompts, config.eval_seed))
        .collect()
}

/// Calibration of the ensemble and an OOD curve over `checkpoints` (defaults
/// to the snapshots of the run selected by `rl.beta2` / `rl.seed`).
pub fn eval(config: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<EvalSummary> {
    let layout = Layout::new(&config.out_dir);
    let checkpoints = if checkpoints.is_empty() {
        run_checkpoints(&layout.rl_dir(config.rl.beta2, config.rl.seed))?
    } else {
        checkpoints.to_vec()
    };
    if checkpoints.len() < 2 {
        return Err(Error::Config("eval needs at least two checkpoints".into()));
    }
    let ensemble = load_ensemble(&layout.rm_ensemble())?;
    let test = parse_prefs(&read_text(&layout.data_dir().join(PREF_TEST_FILE))?)?;
    let report = ece(&scored_pairs(&ensemble, &test)?, ECE_BINS)?;
    let stats = curve_stats(config, &layout, &checkpoints)?;
    let rows: Vec<OodRow> = stats
        .iter()
        .enumerate()
        .map(|(i, s)| OodRow {
            checkpoint: i,
            kl: s.kl,
            u_mean: s.u_mean,
            gold_mean: s.gold_mean,
        })
        .collect();
    let kl: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.u_mean).collect();
    let last = rows.last().expect("at least two rows");
    let summary = EvalSummary {
        checkpoints: rows.len(),
        rm_accuracy: report.accuracy,
        rm_ece: report.ece,
        final_gold: last.gold_mean,
        final_kl: last.kl,
        final_u: last.u_mean,
        spearman_kl_u: spearman(&kl, &u),
    };
    let dir = layout.eval_dir();
    write_file(&dir.join("calibration.csv"), &calibration_csv(&report))?;
    write_file(&dir.join("ood_curve.csv"), &ood_csv(&rows))?;
    write_file(&dir.join("summary.txt"), &summary.to_text())?;
    Ok(summary)
}

/// Per-checkpoint rollout statistics of one run, as CSV.
pub fn curve_csv(steps: &[usize], stats: &[RolloutStats]) -> String {
    let mut s = String::from("step,kl,u_mean,gold_mean,proxy_mean\n");
    for (step, r) in steps.iter().zip(stats) {
        writeln!(s, "{step},{},{},{},{}", r.kl, r.u_mean, r.gold_mean, r.proxy_mean).expect("string write");
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub beta2: f64,
    pub final_gold: f64,
    pub max_gold: f64,
    pub final_kl: f64,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("seed,variant,final_gold,max_gold,final_kl\n");
    for r in rows {
        writeln!(s, "{},beta2={},{},{},{}", r.seed, r.beta2, r.final_gold, r.max_gold, r.final_kl).expect("string write");
    }
    s
}

/// Evaluates every snapshot of one run into `curve.csv` (resumable).
fn run_curve(config: &ExperimentConfig, layout: &Layout, run_dir: &Path) -> Result<Vec<RolloutStats>> {
    let files = run_checkpoints(run_dir)?;
    let path = run_dir.join("curve.csv");
    let mut inputs = files.clone();
    inputs.extend([layout.sft_policy(), layout.rm_ensemble(), layout.data_dir().join(RL_PROMPTS_FILE)]);
    let hash = stage_hash("curve", &config.subset(&["eval.", "task."]), &inputs)?;
    let marker = run_dir.join("curve.hash");
    if fs::read_to_string(&marker).is_ok_and(|h| h.trim() == hash) && path.exists() {
        return parse_curve(&read_text(&path)?);
    }
    let stats = curve_stats(config, layout, &files)?;
    let steps: Vec<usize> = files.iter().map(|f| step_of(f)).collect::<Result<_>>()?;
    write_file(&path, &curve_csv(&steps, &stats))?;
    write_file(&marker, &format!("{hash}\n"))?;
    Ok(stats)
}

fn step_of(path: &Path) -> Result<usize> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("step-"))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("unexpected checkpoint name {}", path.display())))
}

fn parse_curve(text: &str) -> Result<Vec<RolloutStats>> {
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<f64> = line
                .split(',')
                .map(|x| x.parse().map_err(|_| Error::Format(format!("bad curve row {line:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 5 {
                return Err(Error::Format(format!("bad curve row {line:?}")));
            }
            Ok(RolloutStats {
                kl: f[1],
                u_mean: f[2],
                gold_mean: f[3],
                proxy_mean: f[4],
            })
        })
        .collect()
}

/// The full ablation: shared upstream stages, then every seed with and
/// without the uncertainty penalty. Finished stages are reused.
pub fn experiment(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<ComparisonRow>> {
    let layout = Layout::new(&config.out_dir);
    let report = |log: &mut dyn FnMut(&str), name: &str, ran: bool| {
        log(&format!("{name}: {}", if ran { "done" } else { "up to date" }));
    };
    report(log, "gen-data", gen_data(config, true)?);
    report(log, "sft", sft(config, true)?);
    report(log, "train-rm", train_rm(config, true)?);
    if config.rl.checkpoint_every == 0 {
        return Err(Error::Config("experiment needs rl.checkpoint_every > 0".into()));
    }
    let mut variants = vec![0.0];
    if config.rl.beta2 != 0.0 {
        variants.push(config.rl.beta2);
    }
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        for &beta2 in &variants {
            let mut c = config.clone();
            c.rl.seed = seed;
            c.rl.beta2 = beta2;
            let ran = rl(&c, true)?;
            report(log, &format!("rl beta2={beta2} seed={seed}"), ran);
            let stats = run_curve(&c, &layout, &layout.rl_dir(beta2, seed))?;
            let last = stats.last().ok_or_else(|| Error::Format("empty curve".into()))?;
            rows.push(ComparisonRow {
                seed,
                beta2,
                final_gold: last.gold_mean,
                max_gold: stats.iter().map(|s| s.gold_mean).fold(f64::NEG_INFINITY, f64::max),
                final_kl: last.kl,
            });
        }
    }
    write_file(&layout.comparison(), &comparison_csv(&rows))?;
    let mut c = config.clone();
    c.rl.beta2 = 0.0;
    c.rl.seed = config.seeds[0];
    let summary = eval(&c, &[])?;
    log(&format!("eval: {}", summary.to_text().trim().replace('\n', ", ")));
    Ok(rows)
}

/// A parsed command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config: ExperimentConfig,
    pub positional: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Help,
}

fn resolve_key(flag: &str) -> Option<&str> {
    if ExperimentConfig::is_key(flag) {
        return Some(flag);
    }
    ALIASES.iter().find(|(a, _)| *a == flag).map(|(_, k)| *k)
}

/// Parses `<command> [--config FILE] [--key value | --key=value]... [args]`.
/// Defaults < config file < flags; a key given twice on the command line is
/// a usage error.
pub fn parse_args(args: &[String]) -> std::result::Result<Invocation, CliError> {
    let mut it = args.iter();
    let command = match it.next().map(String::as_str) {
        None | Some("help" | "--help" | "-h") => return Err(CliError::Help),
        Some(c) if COMMANDS.iter().any(|(n, _)| *n == c) => c.to_string(),
        Some(c) => return Err(CliError::Usage(format!("unknown command {c:?}"))),
    };
    let mut config_file = None;
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut positional = Vec::new();
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            return Err(CliError::Help);
        }
        let Some(flag) = arg.strip_prefix("--") else {
            positional.push(arg.clone());
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if name == "config" {
            if config_file.replace(value).is_some() {
                return Err(CliError::Usage("--config given twice".into()));
            }
            continue;
        }
        let key = resolve_key(&name).ok_or_else(|| CliError::Usage(format!("unknown option --{name}")))?;
        if flags.iter().any(|(k, _)| k == key) {
            return Err(CliError::Usage(format!("--{name} given more than once")));
        }
        flags.push((key.to_string(), value));
    }
    let mut config = match config_file {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
            ExperimentConfig::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    for (k, v) in &flags {
        config.set(k, v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Invocation {
        command,
        config,
        positional,
    })
}

pub fn usage() -> String {
    let mut s = String::from("usage: uprlhf <command> [--config FILE] [--KEY VALUE]... [ARGS]\n\ncommands:\n");
    for (name, doc) in COMMANDS {
        writeln!(s, "  {name:<12} {doc}").expect("string write");
    }
    s.push_str("\neval takes policy checkpoint paths as ARGS (default: the rl.beta2/rl.seed run's snapshots).\n");
    s.push_str("\nconfig keys (settable in FILE as `key = value` or as --key value):\n");
    s.push_str(&ExperimentConfig::help_text());
    s.push_str("\nshort flags:");
    for (a, k) in ALIASES {
        write!(s, " --{a}={k}").expect("string write");
    }
    s.push_str("\n\nexit codes: 0 success, 1 usage, 2 io, 3 numeric failure\n");
    s
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        _ => EXIT_NUMERIC,
    }
}

fn dispatch(inv: &Invocation) -> Result<()> {
    let config = &inv.config;
    if inv.command != "eval" && !inv.positional.is_empty() {
        return Err(Error::Config(format!("{} takes no positional arguments", inv.command)));
    }
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    write_file(&config.out_dir.join(format!("{}.config", inv.command)), &config.serialize())?;
    match inv.command.as_str() {
        "gen-data" => {
            gen_data(config, false)?;
            print!("{}", read_text(&Layout::new(&config.out_dir).manifest())?);
        }
        "sft" => {
            sft(config, false)?;
        }
        "train-rm" => {
            train_rm(config, false)?;
        }
        "rl" => {
            rl(config, false)?;
        }
        "eval" => {
            let paths: Vec<PathBuf> = inv.positional.iter().map(PathBuf::from).collect();
            print!("{}", eval(config, &paths)?.to_text());
        }
        "experiment" => {
            let rows = experiment(config, &mut |line| println!("{line}"))?;
            print!("{}", comparison_csv(&rows));
        }
        other => unreachable!("command {other} validated during parsing"),
    }
    Ok(())
}

/// Entry point of the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(CliError::Help) => {
            print!("{}", usage());
            return EXIT_OK;
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", usage());
            return EXIT_USAGE;
        }
    };
    match dispatch(&inv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_and_aliases() {
        let inv = parse_args(&args("rl --beta2 0 --rl.steps=7 --out /tmp/x")).unwrap();
        assert_eq!(inv.command, "rl");
        assert_eq!(inv.config.rl.beta2, 0.0);
        assert_eq!(inv.config.rl.steps, 7);
        assert_eq!(inv.config.out_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn duplicate_flag_is_usage_error() {
        assert!(matches!(parse_args(&args("rl --beta2 0 --beta2 1.0")), Err(CliError::Usage(_))));
        assert!(matches!(parse_args(&args("rl --beta2 0 --rl.beta2 1.0")), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_things_rejected() {
        assert!(matches!(parse_args(&args("train")), Err(CliError::Usage(_))));
        match parse_args(&args("sft --sft.bogus 3")) {
            Err(CliError::Usage(m)) => assert!(m.contains("sft.bogus")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_args(&args("sft --sft.epochs")), Err(CliError::Usage(_))));
        assert!(matches!(parse_args(&args("--help")), Err(CliError::Help)));
    }

    #[test]
    fn help_lists_every_key() {
        let u = usage();
        for (k, _) in crate::config::KEYS {
            assert!(u.contains(k), "{k}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_IO);
        assert_eq!(
            exit_code(&Error::Training {
                reason: "nan".into(),
                trace: vec![]
            }),
            EXIT_NUMERIC
        );
    }

    #[test]
    fn stage_hash_tracks_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.txt");
        fs::write(&f, "a").unwrap();
        let h1 = stage_hash("s", "k = 1\n", std::slice::from_ref(&f)).unwrap();
        assert_eq!(h1, stage_hash("s", "k = 1\n", std::slice::from_ref(&f)).unwrap());
        assert_ne!(h1, stage_hash("s", "k = 2\n", std::slice::from_ref(&f)).unwrap());
        fs::write(&f, "b").unwrap();
        assert_ne!(h1, stage_hash("s", "k = 1\n", std::slice::from_ref(&f)).unwrap());
        assert!(matches!(stage_hash("s", "", &[dir.path().join("missing")]), Err(Error::Io { .. })));
    }

    #[test]
    fn comparison_format() {
        let rows = vec![ComparisonRow {
            seed: 2,
            beta2: 0.0,
            final_gold: 4.5,
            max_gold: 5.0,
            final_kl: 1.25,
        }];
        assert_eq!(comparison_csv(&rows), "seed,variant,final_gold,max_gold,final_kl\n2,beta2=0,4.5,5,1.25\n");
    }
}
