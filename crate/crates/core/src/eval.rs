//! Evaluation: preference calibration (binned ECE), ensemble accuracy,
//! policy-vs-reference KL, OOD-uncertainty curves, and the closed-form
//! KL-regularized optimal policy on a finite answer set.
//!
//! Preference probabilities use the Bradley–Terry softmax form
//! `exp(r_w) / (exp(r_w) + exp(r_l)) = σ(r_w − r_l)`, increasing in `r_w`.

use std::fmt::Write as _;

use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::ensemble::RewardEnsemble;
use crate::error::{Error, Result};
use crate::model::{PolicyModel, Sample, EOS};
use crate::numerics::{derive_indexed, log_softmax, logsumexp, rng, sigmoid, Adam, AdamConfig, Graph, Rng, Tensor};
use crate::synthdata::{gold_reward, PreferenceTriple, TaskSpec};

pub const ECE_BINS: usize = 15;
/// Confidence assigned to the largest reward difference in a test set.
pub const MAX_CONFIDENCE: f64 = 0.99;

pub fn preference_prob(delta: f64) -> f64 {
    sigmoid(delta)
}

/// Scale `s` with `σ(s · max|Δ|) = 0.99`.
pub fn calibration_scale(deltas: &[f64]) -> Result<f64> {
    let max = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Domain("calibration scale needs a finite non-zero reward difference".into()));
    }
    Ok((MAX_CONFIDENCE / (1.0 - MAX_CONFIDENCE)).ln() / max)
}

/// One preference pair seen through a reward model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    /// `r(y_w|x) − r(y_l|x)` where `y_w` is the labelled winner.
    pub delta: f64,
    /// 1 if the model ranks the labelled winner higher, 0 if lower, 0.5 on ties.
    pub correct: f64,
}

impl ScoredPair {
    pub fn from_delta(delta: f64) -> Self {
        let correct = if delta > 0.0 {
            1.0
        } else if delta < 0.0 {
            0.0
        } else {
            0.5
        };
        ScoredPair { delta, correct }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationBin {
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub scale: f64,
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub accuracy: f64,
}

/// Confidence in the predicted winner: `σ(s·|Δ|) ∈ [0.5, 1)`.
pub fn confidence(delta: f64, scale: f64) -> f64 {
    sigmoid(scale * delta.abs())
}

pub fn bin_index(conf: f64, bins: usize) -> usize {
    let width = 0.5 / bins as f64;
    (((conf - 0.5) / width).floor().max(0.0) as usize).min(bins - 1)
}

/// Expected calibration error over `bins` equal-width confidence bins on
/// `[0.5, 1]`. Differences are rescaled first with [`calibration_scale`];
/// a set of all-zero differences keeps scale 1 (every confidence is 0.5).
pub fn ece(pairs: &[ScoredPair], bins: usize) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("ece needs at least one pair".into()));
    }
    if bins == 0 {
        return Err(Error::Contract("ece needs at least one bin".into()));
    }
    let deltas: Vec<f64> = pairs.iter().map(|p| p.delta).collect();
    let scale = if deltas.iter().all(|&d| d == 0.0) {
        1.0
    } else {
        calibration_scale(&deltas)?
    };
    let mut count = vec![0usize; bins];
    let mut acc = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for p in pairs {
        let c = confidence(p.delta, scale);
        let b = bin_index(c, bins);
        count[b] += 1;
        acc[b] += p.correct;
        conf[b] += c;
    }
    let total = pairs.len() as f64;
    let mut ece = 0.0;
    let bins: Vec<CalibrationBin> = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                return CalibrationBin {
                    count: 0,
                    acc: 0.0,
                    conf: 0.0,
                };
            }
            let n = count[b] as f64;
            let (a, c) = (acc[b] / n, conf[b] / n);
            ece += n / total * (a - c).abs();
            CalibrationBin {
                count: count[b],
                acc: a,
                conf: c,
            }
        })
        .collect();
    let accuracy = pairs.iter().map(|p| p.correct).sum::<f64>() / total;
    Ok(CalibrationReport {
        scale,
        bins,
        ece,
        accuracy,
    })
}

pub fn scored_pairs(e: &RewardEnsemble, triples: &[PreferenceTriple]) -> Result<Vec<ScoredPair>> {
    triples
        .iter()
        .map(|t| Ok(ScoredPair::from_delta(e.mean_reward(&t.x, &t.y_w)? - e.mean_reward(&t.x, &t.y_l)?)))
        .collect()
}

/// Fraction of triples where the ensemble mean ranks the winner higher
/// (ties count half).
pub fn rm_accuracy(e: &RewardEnsemble, triples: &[PreferenceTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Contract("accuracy of an empty test set".into()));
    }
    let pairs = scored_pairs(e, triples)?;
    Ok(pairs.iter().map(|p| p.correct).sum::<f64>() / pairs.len() as f64)
}

pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut s = String::from("bin,count,acc,conf\n");
    for (i, b) in report.bins.iter().enumerate() {
        writeln!(s, "{i},{},{},{}", b.count, b.acc, b.conf).expect("string write");
    }
    s
}

/// Anything that defines an autoregressive distribution over responses.
pub trait SequencePolicy {
    fn sample_response(&self, prompt: &[u32], temperature: f64, rng: &mut Rng) -> Result<Sample>;
    /// Log-distribution over the next token at each response position.
    fn response_distributions(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>>;
}

impl SequencePolicy for PolicyModel {
    fn sample_response(&self, prompt: &[u32], temperature: f64, rng: &mut Rng) -> Result<Sample> {
        self.sample(prompt, temperature, rng)
    }

    fn response_distributions(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>> {
        PolicyModel::response_distributions(self, prompt, response)
    }
}

/// `KL(p ‖ q)` for log-probability vectors.
pub fn kl_categorical(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Summed per-position exact KL along one response.
pub fn trajectory_kl(policy: &dyn SequencePolicy, reference: &dyn SequencePolicy, prompt: &[u32], response: &[u32]) -> Result<f64> {
    let p = policy.response_distributions(prompt, response)?;
    let q = reference.response_distributions(prompt, response)?;
    Ok(p.iter().zip(&q).map(|(a, b)| kl_categorical(a, b)).sum())
}

/// Monte-Carlo over trajectories `y ~ π` of the exact per-position KL to the
/// reference, summed along each trajectory and averaged.
pub fn measure_kl(
    policy: &dyn SequencePolicy,
    reference: &dyn SequencePolicy,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, x) in prompts.iter().enumerate() {
        let mut r = rng(derive_indexed(seed, "measure-kl", i as u64));
        for _ in 0..samples_per_prompt {
            let s = policy.sample_response(x, 1.0, &mut r)?;
            total += trajectory_kl(policy, reference, x, &s.response)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("measure_kl needs at least one sample".into()));
    }
    Ok(total / n as f64)
}

/// Position-indexed categorical policy, ignoring the prompt. Step `t` uses
/// `steps[t]` (the last entry repeats); useful as a small analytic testbed.
#[derive(Clone, Debug)]
pub struct TabularPolicy {
    pub steps: Vec<Vec<f64>>,
}

impl TabularPolicy {
    /// From unnormalized logits per step.
    pub fn from_logits(steps: Vec<Vec<f64>>) -> Self {
        TabularPolicy {
            steps: steps.iter().map(|l| log_softmax(l)).collect(),
        }
    }

    fn dist(&self, t: usize) -> &[f64] {
        &self.steps[t.min(self.steps.len() - 1)]
    }
}

impl SequencePolicy for TabularPolicy {
    fn sample_response(&self, _prompt: &[u32], temperature: f64, rng: &mut Rng) -> Result<Sample> {
        let mut response = Vec::new();
        let mut logprobs = Vec::new();
        for t in 0..=crate::model::RESPONSE_CAP {
            let lp = self.dist(t);
            let w: Vec<f64> = log_softmax(&lp.iter().map(|l| l / temperature).collect::<Vec<_>>())
                .iter()
                .map(|l| l.exp())
                .collect();
            let tok = WeightedIndex::new(&w)
                .map_err(|e| Error::Numeric(format!("bad tabular distribution: {e}")))?
                .sample(rng) as u32;
            response.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == EOS {
                return Ok(Sample {
                    response,
                    logprobs,
                    truncated: false,
                });
            }
        }
        Err(Error::Contract("tabular policy never emitted EOS".into()))
    }

    fn response_distributions(&self, _prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok((0..response.len()).map(|t| self.dist(t).to_vec()).collect())
    }
}

/// One rollout measurement over a prompt set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutStats {
    pub kl: f64,
    pub u_mean: f64,
    pub gold_mean: f64,
    pub proxy_mean: f64,
}

/// Samples one response per prompt from `policy` and averages exact KL to
/// `reference`, ensemble uncertainty and reward, and gold reward.
pub fn rollout_stats(
    policy: &PolicyModel,
    reference: &PolicyModel,
    ensemble: &RewardEnsemble,
    spec: &TaskSpec,
    prompts: &[Vec<u32>],
    seed: u64,
) -> Result<RolloutStats> {
    if prompts.is_empty() {
        return Err(Error::Contract("rollout over no prompts".into()));
    }
    let (mut kl, mut u, mut gold, mut proxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, x) in prompts.iter().enumerate() {
        let mut r = rng(derive_indexed(seed, "rollout", i as u64));
        let s = policy.sample(x, 1.0, &mut r)?;
        kl += trajectory_kl(policy, reference, x, &s.response)?;
        let (mean, unc) = ensemble.score(x, &s.response)?;
        u += unc;
        proxy += mean;
        gold += gold_reward(spec, x, &s.response);
    }
    let n = prompts.len() as f64;
    Ok(RolloutStats {
        kl: kl / n,
        u_mean: u / n,
        gold_mean: gold / n,
        proxy_mean: proxy / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodRow {
    pub checkpoint: usize,
    pub kl: f64,
    pub u_mean: f64,
    pub gold_mean: f64,
}

/// KL to the reference, ensemble uncertainty and gold reward for each policy
/// checkpoint, on fresh rollouts (same sampling seed for every checkpoint).
pub fn ood_curve(
    checkpoints: &[PolicyModel],
    reference: &PolicyModel,
    ensemble: &RewardEnsemble,
    spec: &TaskSpec,
    prompts: &[Vec<u32>],
    seed: u64,
) -> Result<Vec<OodRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::Contract("an OOD curve needs at least two checkpoints".into()));
    }
    checkpoints
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = rollout_stats(p, reference, ensemble, spec, prompts, seed)?;
            Ok(OodRow {
                checkpoint: i,
                kl: s.kl,
                u_mean: s.u_mean,
                gold_mean: s.gold_mean,
            })
        })
        .collect()
}

pub fn ood_csv(rows: &[OodRow]) -> String {
    let mut s = String::from("checkpoint,kl,u_mean,gold_mean\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.checkpoint, r.kl, r.u_mean, r.gold_mean).expect("string write");
    }
    s
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
        let mut out = vec![0.0; xs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0;
            for k in i..=j {
                out[idx[k]] = r;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// The KL-regularized optimum `π*(y) = π_D(y)·exp(r(y)/β) / Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormPolicy {
    pub probs: Vec<f64>,
    pub log_partition: f64,
}

pub fn closed_form_policy(reference: &[f64], rewards: &[f64], beta: f64) -> Result<ClosedFormPolicy> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    if reference.len() != rewards.len() || reference.is_empty() {
        return Err(Error::Contract("reference and rewards must have equal non-zero length".into()));
    }
    let total: f64 = reference.iter().sum();
    if reference.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("reference must be a probability distribution".into()));
    }
    let logits: Vec<f64> = reference
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| if p > 0.0 { p.ln() + r / beta } else { f64::NEG_INFINITY })
        .collect();
    let log_partition = logsumexp(&logits);
    Ok(ClosedFormPolicy {
        probs: logits.iter().map(|l| (l - log_partition).exp()).collect(),
        log_partition,
    })
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Trains a bare softmax policy over the answers by gradient ascent on the
/// exact objective `E_π[r] − β·KL(π ‖ π_D)`, starting from uniform logits.
pub fn fit_one_step_policy(reference: &[f64], rewards: &[f64], beta: f64, steps: usize, lr: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let k = reference.len();
    let mut logits = Tensor::zeros(&[k]);
    let log_ref = Tensor::vector(reference.iter().map(|p| p.ln()).collect());
    let r = Tensor::vector(rewards.to_vec());
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    for _ in 0..steps {
        let mut g = Graph::new();
        let theta = g.param(logits.clone());
        let lp = g.log_softmax_rows(theta);
        let p = g.exp(lp);
        let rv = g.constant(r.clone());
        let lref = g.constant(log_ref.clone());
        let pr = g.mul(p, rv)?;
        let expected = g.sum(pr);
        let ratio = g.sub(lp, lref)?;
        let weighted = g.mul(p, ratio)?;
        let kl = g.sum(weighted);
        let kl = g.scale(kl, beta);
        let objective = g.sub(expected, kl)?;
        let loss = g.scale(objective, -1.0);
        let grads = g.backward(loss)?;
        adam.step(&mut [&mut logits], &[grads.get(theta)])?;
    }
    let lp = log_softmax(logits.data());
    Ok(lp.iter().map(|l| l.exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_prob_values() {
        assert_eq!(preference_prob(0.0), 0.5);
        assert!((preference_prob(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((preference_prob(-(3f64.ln())) - 0.25).abs() < 1e-15);
        for d in [-5.0, -0.1, 0.3, 7.0] {
            assert!((preference_prob(d) + preference_prob(-d) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn calibration_scale_values() {
        let l99 = 99f64.ln();
        assert!((calibration_scale(&[l99, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((calibration_scale(&[0.2, -2.0 * l99]).unwrap() - 0.5).abs() < 1e-15);
        let ds = [0.3, -1.7, 0.01, 2.4];
        let s = calibration_scale(&ds).unwrap();
        assert!((sigmoid(s * 2.4) - 0.99).abs() < 1e-12);
        assert!(matches!(calibration_scale(&[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn saturated_and_tie_cases() {
        let pairs = vec![ScoredPair::from_delta(5.0); 10];
        let r = ece(&pairs, ECE_BINS).unwrap();
        assert!((r.ece - 0.01).abs() < 1e-12);
        assert_eq!(r.bins[14].count, 10);

        let r = ece(&[ScoredPair::from_delta(0.0)], ECE_BINS).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.bins[0].count, 1);
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn report_invariants() {
        let deltas = [0.5, -0.2, 1.5, 3.0, -2.0, 0.0, 0.7];
        let pairs: Vec<_> = deltas.iter().map(|&d| ScoredPair::from_delta(d)).collect();
        let r = ece(&pairs, ECE_BINS).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());
        assert!((0.0..=0.5).contains(&r.ece));
        for b in r.bins.iter().filter(|b| b.count > 0) {
            assert!(b.conf >= 0.5 && b.conf < 1.0);
        }
        let mut rev = pairs.clone();
        rev.reverse();
        assert!((ece(&rev, ECE_BINS).unwrap().ece - r.ece).abs() < 1e-15);
    }

    #[test]
    fn closed_form_values() {
        let u = closed_form_policy(&[0.25; 4], &[1.0; 4], 0.5).unwrap();
        assert!(u.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!((u.log_partition - 2.0).abs() < 1e-14);
        let beta = 0.7;
        let two = closed_form_policy(&[0.5, 0.5], &[beta * 3f64.ln(), 0.0], beta).unwrap();
        assert!((two.probs[0] - 0.75).abs() < 1e-14);
        assert!(closed_form_policy(&[0.5, 0.5], &[1.0, 0.0], 0.0).is_err());
        let shifted = closed_form_policy(&[0.5, 0.5], &[beta * 3f64.ln() + 4.0, 4.0], beta).unwrap();
        assert!(total_variation(&shifted.probs, &two.probs) < 1e-12);
    }

    #[test]
    fn tabular_kl_is_exact_single_step() {
        let mut base = vec![0.0; 18];
        base[EOS as usize] = f64::NEG_INFINITY;
        let mut shifted = base.clone();
        shifted[3] += 1.2;
        let mut stop = vec![f64::NEG_INFINITY; 18];
        stop[EOS as usize] = 0.0;
        let p = TabularPolicy::from_logits(vec![shifted.clone(), stop.clone()]);
        let q = TabularPolicy::from_logits(vec![base.clone(), stop]);
        let analytic = kl_categorical(&log_softmax(&shifted), &log_softmax(&base));
        let est = measure_kl(&p, &q, &vec![vec![0; 5]; 20], 5, 3).unwrap();
        assert!((est - analytic).abs() < 1e-12);
        assert!(measure_kl(&q, &q, &vec![vec![0; 5]; 4], 2, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }
}
