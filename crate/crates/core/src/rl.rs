//! Uncertainty-penalized policy optimization.
//!
//! Each step samples responses from the current policy, scores them with the
//! reward ensemble, and penalizes the mean reward by how far the ensemble's
//! disagreement exceeds its running average: `r − β₂·(u − ū)`. The actor loss
//! is REINFORCE with an EMA baseline on those penalized rewards (or a clipped
//! ratio surrogate). KL control is a separate differentiable term,
//! `β₁·mean((log π_θ(y|x) − log π_SFT(y|x))²)`, added to the loss rather
//! than folded into the reward.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::ensemble::RewardEnsemble;
use crate::error::{Error, Result};
use crate::eval::kl_categorical;
use crate::model::{PolicyModel, PolicyVars};
use crate::numerics::{derive_indexed, rng, Adam, AdamConfig, Graph, Tensor, Var};
use crate::synthdata::{gold_reward, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlConfig {
    pub steps: usize,
    pub prompts_per_batch: usize,
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub lr: f64,
    /// KL weight.
    pub beta1: f64,
    /// Uncertainty-penalty weight; 0 gives plain RLHF.
    pub beta2: f64,
    pub baseline_decay: f64,
    /// Ratio clip ε for the clipped surrogate; `None` uses plain REINFORCE.
    pub clip: Option<f64>,
    pub seed: u64,
    /// Keep a policy snapshot every this many steps (0 keeps none).
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            steps: 300,
            prompts_per_batch: 16,
            samples_per_prompt: 1,
            temperature: 1.0,
            lr: 3e-4,
            beta1: 0.01,
            beta2: 1.0,
            baseline_decay: 0.95,
            clip: None,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("beta1 and beta2 must be non-negative".into()));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("temperature and lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must be in [0, 1)".into()));
        }
        if self.prompts_per_batch == 0 || self.samples_per_prompt == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if let Some(eps) = self.clip {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::Config(format!("clip epsilon {eps} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// `r − β₂·(u − ū)`.
pub fn penalized_reward(r: f64, u: f64, u_bar: f64, beta2: f64) -> f64 {
    r - beta2 * (u - u_bar)
}

/// Running mean of every uncertainty seen so far.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UncertaintyTracker {
    pub count: u64,
    pub mean: f64,
}

impl UncertaintyTracker {
    pub fn update(&mut self, values: &[f64]) -> f64 {
        for &u in values {
            self.count += 1;
            self.mean += (u - self.mean) / self.count as f64;
        }
        self.mean
    }
}

/// Exponential moving average of penalized rewards, seeded by the first batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmaBaseline {
    pub value: Option<f64>,
}

impl EmaBaseline {
    /// Baseline to use for a batch with mean `batch_mean` (before updating).
    pub fn current(&self, batch_mean: f64) -> f64 {
        self.value.unwrap_or(batch_mean)
    }

    pub fn update(&mut self, batch_mean: f64, decay: f64) {
        let prev = self.current(batch_mean);
        self.value = Some(decay * prev + (1.0 - decay) * batch_mean);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Per-token log-probs under the sampling policy (detached).
    pub logprobs: Vec<f64>,
    /// Per-token log-probs under the frozen SFT reference (detached).
    pub ref_logprobs: Vec<f64>,
    /// Ensemble-mean proxy reward.
    pub reward: f64,
    pub uncertainty: f64,
    /// Evaluation only.
    pub gold: f64,
    /// Exact summed per-position KL to the reference along this response.
    pub kl_exact: f64,
}

impl Rollout {
    pub fn log_ratio(&self) -> f64 {
        self.logprobs.iter().sum::<f64>() - self.ref_logprobs.iter().sum::<f64>()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub samples: Vec<Rollout>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn mean_of(&self, f: impl Fn(&Rollout) -> f64) -> f64 {
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn uncertainties(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.uncertainty).collect()
    }
}

/// Samples and scores responses for `prompts`.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &PolicyModel,
    reference: &PolicyModel,
    ensemble: &RewardEnsemble,
    spec: &TaskSpec,
    prompts: &[Vec<u32>],
    samples_per_prompt: usize,
    temperature: f64,
    seed: u64,
) -> Result<RolloutBatch> {
    let mut samples = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for (i, x) in prompts.iter().enumerate() {
        let mut r = rng(derive_indexed(seed, "rollout-sample", i as u64));
        for _ in 0..samples_per_prompt {
            let s = policy.sample(x, temperature, &mut r)?;
            let p_dist = policy.response_distributions(x, &s.response)?;
            let q_dist = reference.response_distributions(x, &s.response)?;
            let ref_logprobs = q_dist.iter().zip(&s.response).map(|(q, &t)| q[t as usize]).collect();
            let kl_exact = p_dist.iter().zip(&q_dist).map(|(p, q)| kl_categorical(p, q)).sum();
            let (reward, uncertainty) = ensemble.score(x, &s.response)?;
            samples.push(Rollout {
                prompt: x.clone(),
                gold: gold_reward(spec, x, &s.response),
                response: s.response,
                logprobs: s.logprobs,
                ref_logprobs,
                reward,
                uncertainty,
                kl_exact,
            });
        }
    }
    Ok(RolloutBatch { samples })
}

/// Sequence log-probabilities `log π_θ(y|x)` for each rollout as a graph vector.
pub fn sequence_logprobs(policy: &PolicyModel, g: &mut Graph, vars: &PolicyVars, batch: &RolloutBatch) -> Result<Var> {
    let mut seqs = Vec::with_capacity(batch.len());
    for s in &batch.samples {
        let lp = policy.token_logprobs(g, vars, &s.prompt, &s.response)?;
        seqs.push(g.sum(lp));
    }
    g.stack(&seqs)
}

/// `β₁·mean((log π_θ(y|x) − log π_SFT(y|x))²)` given the policy's sequence
/// log-probs; the reference side is a constant.
pub fn kl_objective_var(g: &mut Graph, seq_logprobs: Var, batch: &RolloutBatch, beta1: f64) -> Result<Var> {
    let reference = g.constant(Tensor::vector(
        batch.samples.iter().map(|s| s.ref_logprobs.iter().sum()).collect(),
    ));
    let diff = g.sub(seq_logprobs, reference)?;
    let sq = g.square(diff);
    let m = g.mean(sq);
    Ok(g.scale(m, beta1))
}

/// The KL objective evaluated at the sampling policy.
pub fn kl_objective(batch: &RolloutBatch, beta1: f64) -> f64 {
    beta1 * batch.mean_of(|s| s.log_ratio().powi(2))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub proxy_reward_mean: f64,
    pub gold_mean: f64,
    pub u_mean: f64,
    pub u_bar: f64,
    pub kl_value: f64,
    pub kl_measured: f64,
}

/// Policy loss for one batch: actor term on centered penalized rewards plus
/// the KL objective. Returns the loss and the KL objective's value.
pub fn policy_loss(
    policy: &PolicyModel,
    g: &mut Graph,
    vars: &PolicyVars,
    batch: &RolloutBatch,
    advantages: &[f64],
    config: &RlConfig,
) -> Result<(Var, f64)> {
    let seq = sequence_logprobs(policy, g, vars, batch)?;
    let adv = g.constant(Tensor::vector(advantages.to_vec()));
    let actor = match config.clip {
        None => {
            let weighted = g.mul(seq, adv)?;
            let m = g.mean(weighted);
            g.scale(m, -1.0)
        }
        Some(eps) => {
            let old = g.constant(Tensor::vector(
                batch.samples.iter().map(|s| s.logprobs.iter().sum()).collect(),
            ));
            let log_ratio = g.sub(seq, old)?;
            let ratio = g.exp(log_ratio);
            let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let a = g.mul(ratio, adv)?;
            let b = g.mul(clipped, adv)?;
            let surrogate = g.minimum(a, b)?;
            let m = g.mean(surrogate);
            g.scale(m, -1.0)
        }
    };
    let kl = kl_objective_var(g, seq, batch, config.beta1)?;
    let kl_value = g.value(kl).item();
    Ok((g.add(actor, kl)?, kl_value))
}

/// One update of `policy` from a batch sampled from it.
///
/// The batch's uncertainties enter the running mean before its own rewards
/// are penalized.
pub fn policy_update(
    policy: &mut PolicyModel,
    adam: &mut Adam,
    batch: &RolloutBatch,
    tracker: &mut UncertaintyTracker,
    baseline: &mut EmaBaseline,
    config: &RlConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Contract("policy update on an empty batch".into()));
    }
    let u_bar = tracker.update(&batch.uncertainties());
    let penalized: Vec<f64> = batch
        .samples
        .iter()
        .map(|s| penalized_reward(s.reward, s.uncertainty, u_bar, config.beta2))
        .collect();
    let batch_mean = penalized.iter().sum::<f64>() / penalized.len() as f64;
    let b = baseline.current(batch_mean);
    let advantages: Vec<f64> = penalized.iter().map(|p| p - b).collect();
    baseline.update(batch_mean, config.baseline_decay);

    let mut g = Graph::new();
    let vars = policy.register(&mut g, true);
    let (loss, kl_value) = policy_loss(policy, &mut g, &vars, batch, &advantages, config)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let dump: Vec<String> = batch
            .samples
            .iter()
            .filter(|s| !s.reward.is_finite() || !s.uncertainty.is_finite() || !s.log_ratio().is_finite())
            .map(|s| format!("{:?}->{:?}", s.prompt, s.response))
            .collect();
        return Err(Error::Training {
            reason: format!("policy loss {value}; offending samples: {}", dump.join(", ")),
            trace: advantages,
        });
    }
    let mut grads = g.backward(loss)?;
    let owned: Vec<_> = vars.flat().iter().map(|v| grads.take(*v)).collect();
    let refs: Vec<_> = owned.iter().map(Option::as_ref).collect();
    adam.step(&mut policy.tensors_mut(), &refs)?;

    Ok(StepMetrics {
        proxy_reward_mean: batch.mean_of(|s| s.reward),
        gold_mean: batch.mean_of(|s| s.gold),
        u_mean: batch.mean_of(|s| s.uncertainty),
        u_bar,
        kl_value,
        kl_measured: batch.mean_of(|s| s.kl_exact),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlRow {
    pub step: usize,
    pub proxy_reward: f64,
    pub gold_reward: f64,
    pub kl_measured: f64,
    pub u_mean: f64,
    pub u_running_mean: f64,
    pub kl_objective: f64,
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub policy: PolicyModel,
    pub trace: Vec<RlRow>,
    /// `(step, snapshot)` pairs, starting with the SFT policy at step 0.
    pub checkpoints: Vec<(usize, PolicyModel)>,
}

/// Picks the prompts for one step.
fn step_prompts(prompts: &[Vec<u32>], count: usize, seed: u64, step: usize) -> Vec<Vec<u32>> {
    let mut r = rng(derive_indexed(seed, "rl-batch", step as u64));
    (0..count).map(|_| prompts[r.random_range(0..prompts.len())].clone()).collect()
}

/// Fine-tunes a copy of `sft` against the ensemble for `config.steps` updates.
pub fn rl_train(
    sft: &PolicyModel,
    ensemble: &RewardEnsemble,
    prompts: &[Vec<u32>],
    spec: &TaskSpec,
    config: &RlConfig,
) -> Result<RlOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Contract("no RL prompts".into()));
    }
    let mut policy = sft.clone();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut tracker = UncertaintyTracker::default();
    let mut baseline = EmaBaseline::default();
    let mut trace = Vec::with_capacity(config.steps);
    let mut checkpoints = Vec::new();
    if config.checkpoint_every > 0 {
        checkpoints.push((0, policy.clone()));
    }
    for step in 0..config.steps {
        let xs = step_prompts(prompts, config.prompts_per_batch, config.seed, step);
        let batch = collect_rollouts(
            &policy,
            sft,
            ensemble,
            spec,
            &xs,
            config.samples_per_prompt,
            config.temperature,
            derive_indexed(config.seed, "rl-sample", step as u64),
        )?;
        let m = policy_update(&mut policy, &mut adam, &batch, &mut tracker, &mut baseline, config)?;
        trace.push(RlRow {
            step,
            proxy_reward: m.proxy_reward_mean,
            gold_reward: m.gold_mean,
            kl_measured: m.kl_measured,
            u_mean: m.u_mean,
            u_running_mean: m.u_bar,
            kl_objective: m.kl_value,
        });
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            checkpoints.push((step + 1, policy.clone()));
        }
    }
    Ok(RlOutcome {
        policy,
        trace,
        checkpoints,
    })
}

pub fn rl_trace_csv(trace: &[RlRow]) -> String {
    let mut s = String::from("step,proxy_reward,gold_reward,kl_measured,u_mean,u_running_mean,kl_objective_value\n");
    for r in trace {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step, r.proxy_reward, r.gold_reward, r.kl_measured, r.u_mean, r.u_running_mean, r.kl_objective
        )
        .expect("string write");
    }
    s
}
