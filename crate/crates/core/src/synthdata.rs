//! Synthetic prompt-echo task with a programmatic gold reward.
//!
//! Prompts are five content tokens. A good response repeats prompt tokens
//! back (each prompt position can be credited once), stays short, and avoids
//! immediate repeats. The gold reward scores exactly that, and every dataset
//! label is derived from it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::EOS;
use crate::numerics::{derive_indexed, derive_seed, rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub vocab: u32,
    pub prompt_len: usize,
    pub response_cap: usize,
    pub match_bonus: f64,
    /// Responses longer than this pay the length penalty per extra token.
    pub length_free: usize,
    pub length_slope: f64,
    pub repetition_penalty: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab: 16,
            prompt_len: 5,
            response_cap: 12,
            match_bonus: 2.0,
            length_free: 8,
            length_slope: 0.5,
            repetition_penalty: 1.5,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        let coeffs = [self.match_bonus, self.length_slope, self.repetition_penalty];
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("gold-reward coefficients must be finite".into()));
        }
        if self.prompt_len + self.response_cap + 2 > max_seq_len {
            return Err(Error::Config(format!(
                "prompt_len {} + response_cap {} + 2 exceeds max_seq_len {max_seq_len}",
                self.prompt_len, self.response_cap
            )));
        }
        if self.vocab == 0 || self.vocab > EOS - 1 || self.prompt_len == 0 {
            return Err(Error::Config("vocab must be in 1..=16 and prompt_len positive".into()));
        }
        Ok(())
    }
}

/// Response tokens before the first EOS.
pub fn content(response: &[u32]) -> &[u32] {
    let end = response.iter().position(|&t| t == EOS).unwrap_or(response.len());
    &response[..end]
}

/// Match bonus per credited prompt position, minus the length and
/// immediate-repeat penalties. Tokens from EOS on are ignored.
pub fn gold_reward(spec: &TaskSpec, prompt: &[u32], response: &[u32]) -> f64 {
    let y = content(response);
    let mut available: Vec<u32> = prompt.to_vec();
    let mut matched = 0usize;
    for tok in y {
        if let Some(pos) = available.iter().position(|p| p == tok) {
            available.swap_remove(pos);
            matched += 1;
        }
    }
    let over = y.len().saturating_sub(spec.length_free);
    let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
    spec.match_bonus * matched as f64 - spec.length_slope * over as f64 - spec.repetition_penalty * repeats as f64
}

/// Demonstration policy: a shuffled walk over the prompt positions of length
/// 4–6 (wrapping around after five), each position replaced by a uniform
/// random content token with probability `noise`, then EOS.
pub fn scripted_reference_policy(spec: &TaskSpec, prompt: &[u32], noise: f64, rng: &mut Rng) -> Vec<u32> {
    let len = rng.random_range(4..=6usize);
    let mut order: Vec<usize> = (0..prompt.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(len + 1);
    for i in 0..len {
        let tok = if rng.random::<f64>() < noise {
            rng.random_range(0..spec.vocab)
        } else {
            prompt[order[i % order.len()]]
        };
        out.push(tok);
    }
    out.push(EOS);
    out
}

pub fn random_prompt(spec: &TaskSpec, rng: &mut Rng) -> Vec<u32> {
    (0..spec.prompt_len).map(|_| rng.random_range(0..spec.vocab)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SftPair {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

/// `y_w` is strictly preferred by the gold reward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferenceTriple {
    pub x: Vec<u32>,
    pub y_w: Vec<u32>,
    pub y_l: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetBundle {
    pub sft: Vec<SftPair>,
    pub pref_train: Vec<PreferenceTriple>,
    pub pref_test: Vec<PreferenceTriple>,
    pub rl_prompts: Vec<Vec<u32>>,
}

pub const SFT_NOISE: f64 = 0.1;
pub const PREF_NOISE: f64 = 0.35;
pub const TIE_RETRIES: usize = 10;

/// Sizes of the three disjoint prompt pools: 20% / 40% / remaining 40%.
pub fn split_sizes(budget: usize) -> (usize, usize, usize) {
    let sft = budget * 20 / 100;
    let pref = budget * 40 / 100;
    (sft, pref, budget - sft - pref)
}

fn labelled_pair(spec: &TaskSpec, x: &[u32], rng: &mut Rng) -> Option<PreferenceTriple> {
    for _ in 0..TIE_RETRIES {
        let a = scripted_reference_policy(spec, x, PREF_NOISE, rng);
        let b = scripted_reference_policy(spec, x, PREF_NOISE, rng);
        let (ga, gb) = (gold_reward(spec, x, &a), gold_reward(spec, x, &b));
        if ga == gb {
            continue;
        }
        let (y_w, y_l) = if ga > gb { (a, b) } else { (b, a) };
        return Some(PreferenceTriple { x: x.to_vec(), y_w, y_l });
    }
    None
}

pub fn build_bundle(spec: &TaskSpec, prompt_budget: usize, seed: u64) -> Result<DatasetBundle> {
    if prompt_budget < 100 {
        return Err(Error::Contract(format!("prompt budget {prompt_budget} below 100")));
    }
    let possible = (spec.vocab as f64).powi(spec.prompt_len as i32);
    if (prompt_budget as f64) > possible / 2.0 {
        return Err(Error::Contract("prompt budget too large for the prompt space".into()));
    }
    let mut prompt_rng = rng(derive_seed(seed, "prompts"));
    let mut seen = HashSet::with_capacity(prompt_budget);
    let mut prompts = Vec::with_capacity(prompt_budget);
    while prompts.len() < prompt_budget {
        let p = random_prompt(spec, &mut prompt_rng);
        if seen.insert(p.clone()) {
            prompts.push(p);
        }
    }
    let (n_sft, n_pref, _) = split_sizes(prompt_budget);
    let rl_prompts = prompts.split_off(n_sft + n_pref);
    let pref_prompts = prompts.split_off(n_sft);
    let sft_prompts = prompts;

    let sft = sft_prompts
        .into_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng(derive_indexed(seed, "sft-demo", i as u64));
            let y = scripted_reference_policy(spec, &x, SFT_NOISE, &mut r);
            SftPair { x, y }
        })
        .collect();

    let mut prefs: Vec<PreferenceTriple> = pref_prompts
        .iter()
        .enumerate()
        .filter_map(|(i, x)| labelled_pair(spec, x, &mut rng(derive_indexed(seed, "pref-pair", i as u64))))
        .collect();
    let n_train = prefs.len() * 9 / 10;
    let pref_test = prefs.split_off(n_train);

    Ok(DatasetBundle {
        sft,
        pref_train: prefs,
        pref_test,
        rl_prompts,
    })
}

fn ids(tokens: &[u32]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{t}").expect("string write");
    }
    s
}

fn parse_ids(field: &str) -> Result<Vec<u32>> {
    field
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Format(format!("bad token id {t:?}"))))
        .collect()
}

/// Splits `k1:v1\tk2:v2...` checking the keys in order.
fn fields<'a>(line: &'a str, keys: &[&str]) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != keys.len() {
        return Err(Error::Format(format!("expected {} fields in {line:?}", keys.len())));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(p, k)| {
            p.strip_prefix(k)
                .and_then(|r| r.strip_prefix(':'))
                .ok_or_else(|| Error::Format(format!("expected field {k:?} in {line:?}")))
        })
        .collect()
}

pub fn format_sft(pairs: &[SftPair]) -> String {
    pairs.iter().map(|p| format!("x:{}\ty:{}\n", ids(&p.x), ids(&p.y))).collect()
}

pub fn parse_sft(text: &str) -> Result<Vec<SftPair>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f = fields(l, &["x", "y"])?;
            Ok(SftPair {
                x: parse_ids(f[0])?,
                y: parse_ids(f[1])?,
            })
        })
        .collect()
}

pub fn format_prefs(triples: &[PreferenceTriple]) -> String {
    triples
        .iter()
        .map(|t| format!("x:{}\tw:{}\tl:{}\n", ids(&t.x), ids(&t.y_w), ids(&t.y_l)))
        .collect()
}

pub fn parse_prefs(text: &str) -> Result<Vec<PreferenceTriple>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f = fields(l, &["x", "w", "l"])?;
            Ok(PreferenceTriple {
                x: parse_ids(f[0])?,
                y_w: parse_ids(f[1])?,
                y_l: parse_ids(f[2])?,
            })
        })
        .collect()
}

pub fn format_prompts(prompts: &[Vec<u32>]) -> String {
    prompts.iter().map(|p| format!("x:{}\n", ids(p))).collect()
}

pub fn parse_prompts(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| parse_ids(fields(l, &["x"])?[0]))
        .collect()
}

pub const SFT_FILE: &str = "sft.txt";
pub const PREF_TRAIN_FILE: &str = "pref_train.txt";
pub const PREF_TEST_FILE: &str = "pref_test.txt";
pub const RL_PROMPTS_FILE: &str = "rl_prompts.txt";

impl DatasetBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (SFT_FILE, format_sft(&self.sft)),
            (PREF_TRAIN_FILE, format_prefs(&self.pref_train)),
            (PREF_TEST_FILE, format_prefs(&self.pref_test)),
            (RL_PROMPTS_FILE, format_prompts(&self.rl_prompts)),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(DatasetBundle {
            sft: parse_sft(&load(SFT_FILE)?)?,
            pref_train: parse_prefs(&load(PREF_TRAIN_FILE)?)?,
            pref_test: parse_prefs(&load(PREF_TEST_FILE)?)?,
            rl_prompts: parse_prompts(&load(RL_PROMPTS_FILE)?)?,
        })
    }
}
