//! Supervised fine-tuning of the policy and training of the diverse reward
//! LoRA ensemble.
//!
//! The reward objective minimized per batch is
//! `mean(−log σ(r̄(y_w|x) − r̄(y_l|x))) − λ·diversity`, where `r̄` is the
//! ensemble-mean reward and `diversity` the mean stacked-`A`
//! nuclear/Frobenius ratio over adapted matrices. The backbone is frozen;
//! only adapter factors and heads move.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::ensemble::{EnsembleVars, RewardEnsemble};
use crate::error::{Error, Result};
use crate::eval::{ece, scored_pairs, ECE_BINS};
use crate::model::PolicyModel;
use crate::numerics::{derive_indexed, derive_seed, rng, Adam, AdamConfig, Graph, Var};
use crate::synthdata::{PreferenceTriple, SftPair};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 30,
            batch: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    pub model: PolicyModel,
    /// Mean per-token NLL of each epoch.
    pub loss_trace: Vec<f64>,
}

fn batches<T: Clone>(data: &[T], batch: usize, seed: u64, label: &str, epoch: usize) -> Vec<Vec<T>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng(derive_indexed(seed, label, epoch as u64)));
    order
        .chunks(batch.max(1))
        .map(|c| c.iter().map(|&i| data[i].clone()).collect())
        .collect()
}

/// Mean per-token NLL of `batch` as a graph scalar.
pub fn sft_loss(model: &PolicyModel, g: &mut Graph, vars: &crate::model::PolicyVars, batch: &[SftPair]) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut tokens = 0usize;
    for p in batch {
        let lp = model.token_logprobs(g, vars, &p.x, &p.y)?;
        tokens += g.value(lp).len();
        let s = g.sum(lp);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty SFT batch".into()))?;
    Ok(g.scale(total, -1.0 / tokens as f64))
}

/// Fits `model` to the demonstrations by minimizing per-token NLL with Adam.
pub fn sft_train(mut model: PolicyModel, data: &[SftPair], config: &SftConfig) -> Result<SftOutcome> {
    if data.is_empty() {
        return Err(Error::Contract("no SFT demonstrations".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in batches(data, config.batch, config.seed, "sft-shuffle", epoch) {
            let mut g = Graph::new();
            let vars = model.register(&mut g, true);
            let loss = sft_loss(&model, &mut g, &vars, &batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                trace.push(value);
                return Err(Error::Training {
                    reason: format!("SFT loss {value} in epoch {epoch}"),
                    trace,
                });
            }
            epoch_loss += value;
            count += 1;
            let mut grads = g.backward(loss)?;
            let flat = vars.flat();
            let owned: Vec<_> = flat.iter().map(|v| grads.take(*v)).collect();
            let refs: Vec<_> = owned.iter().map(Option::as_ref).collect();
            adam.step(&mut model.tensors_mut(), &refs)?;
        }
        trace.push(epoch_loss / count as f64);
    }
    Ok(SftOutcome {
        model,
        loss_trace: trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the diversity term.
    pub lambda: f64,
    pub members: usize,
    pub rank: usize,
    /// Standard deviation of the Gaussian initial `A` factors.
    pub a_init_std: f64,
    pub seed: u64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            epochs: 5,
            batch: 32,
            lr: 3e-3,
            lambda: 0.1,
            members: 5,
            rank: 4,
            a_init_std: 0.2,
            seed: 0,
        }
    }
}

/// Fresh ensemble on the SFT backbone: Gaussian `A`, zero `B`, zero heads.
pub fn init_ensemble(sft: &PolicyModel, config: &RmTrainConfig) -> Result<RewardEnsemble> {
    if config.lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", config.lambda)));
    }
    RewardEnsemble::new(sft.backbone.clone(), config.members, config.rank, config.a_init_std, derive_seed(config.seed, "rm-lora"))
}

/// `mean(−log σ(r̄_w − r̄_l))` over the batch, as a graph scalar.
pub fn rank_loss_var(e: &RewardEnsemble, g: &mut Graph, vars: &EnsembleVars, batch: &[PreferenceTriple]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty preference batch".into()));
    }
    let mut total: Option<Var> = None;
    for t in batch {
        let w = e.mean_reward_var(g, vars, &t.x, &t.y_w)?;
        let l = e.mean_reward_var(g, vars, &t.x, &t.y_l)?;
        let diff = g.sub(w, l)?;
        let ls = g.log_sigmoid(diff);
        total = Some(match total {
            None => ls,
            Some(acc) => g.add(acc, ls)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), -1.0 / batch.len() as f64))
}

pub fn rank_loss(e: &RewardEnsemble, batch: &[PreferenceTriple]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = e.register(&mut g, false);
    let l = rank_loss_var(e, &mut g, &vars, batch)?;
    Ok(g.value(l).item())
}

/// Total objective `rank_loss − λ·diversity` on one batch.
pub struct RmObjective {
    pub loss: Var,
    pub rank_loss: f64,
    pub diversity: f64,
}

pub fn rm_objective(e: &RewardEnsemble, g: &mut Graph, vars: &EnsembleVars, batch: &[PreferenceTriple], lambda: f64) -> Result<RmObjective> {
    let rl = rank_loss_var(e, g, vars, batch)?;
    let rank_loss = g.value(rl).item();
    let (div, diversity) = e.diversity_var(g, vars)?;
    let penalty = g.scale(div, lambda);
    let loss = g.sub(rl, penalty)?;
    Ok(RmObjective {
        loss,
        rank_loss,
        diversity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmEpoch {
    pub epoch: usize,
    pub rank_loss: f64,
    pub diversity: f64,
    pub holdout_acc: f64,
    pub holdout_ece: f64,
}

#[derive(Clone, Debug)]
pub struct RmOutcome {
    pub ensemble: RewardEnsemble,
    pub trace: Vec<RmEpoch>,
}

/// Jointly trains all members (the diversity term couples them).
pub fn rm_train(
    mut e: RewardEnsemble,
    train: &[PreferenceTriple],
    holdout: &[PreferenceTriple],
    config: &RmTrainConfig,
) -> Result<RmOutcome> {
    if train.is_empty() {
        return Err(Error::Contract("no preference training data".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut trace = Vec::with_capacity(config.epochs);
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        let (mut rank_sum, mut batches_seen) = (0.0, 0usize);
        for batch in batches(train, config.batch, config.seed, "rm-shuffle", epoch) {
            let mut g = Graph::new();
            let vars = e.register(&mut g, true);
            let obj = rm_objective(&e, &mut g, &vars, &batch, config.lambda)?;
            let value = g.value(obj.loss).item();
            losses.push(value);
            if !value.is_finite() {
                return Err(Error::Training {
                    reason: format!("reward-model loss {value} in epoch {epoch}"),
                    trace: losses,
                });
            }
            rank_sum += obj.rank_loss;
            batches_seen += 1;
            let mut grads = g.backward(obj.loss)?;
            let owned: Vec<_> = vars.trainable().iter().map(|v| grads.take(*v)).collect();
            let refs: Vec<_> = owned.iter().map(Option::as_ref).collect();
            adam.step(&mut e.trainable_mut(), &refs)?;
        }
        let (holdout_acc, holdout_ece) = if holdout.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let report = ece(&scored_pairs(&e, holdout)?, ECE_BINS)?;
            (report.accuracy, report.ece)
        };
        trace.push(RmEpoch {
            epoch,
            rank_loss: rank_sum / batches_seen as f64,
            diversity: e.diversity_term()?.value,
            holdout_acc,
            holdout_ece,
        });
    }
    Ok(RmOutcome { ensemble: e, trace })
}

pub fn rm_trace_csv(trace: &[RmEpoch]) -> String {
    let mut s = String::from("epoch,rank_loss,diversity_value,holdout_acc,holdout_ece\n");
    for r in trace {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.rank_loss, r.diversity, r.holdout_acc, r.holdout_ece).expect("string write");
    }
    s
}

pub fn sft_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,nll\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("string write");
    }
    s
}
