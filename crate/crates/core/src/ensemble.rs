//! Reward LoRA ensemble over one frozen backbone.
//!
//! Every member runs the full backbone with its own adapters on the query and
//! value projections and reads its own scalar head. The ensemble reward is the
//! mean of member rewards and the uncertainty is their population standard
//! deviation. Diversity is measured on each adapted matrix by stacking the
//! members' `A` factors and taking `‖A‖_* / ‖A‖_F`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{nnm_ratio_with_grad, vstack};
use crate::model::{default_targets, meta_heads, read_lora_units, reward_var, AdapterVars, Backbone, BackboneVars, LoraUnit, RewardHead};
use crate::numerics::{derive_indexed, rng, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    /// One adapter per entry of [`RewardEnsemble::targets`], same order.
    pub lora: Vec<LoraUnit>,
    pub head: RewardHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardEnsemble {
    pub backbone: Backbone,
    pub targets: Vec<String>,
    pub members: Vec<Member>,
}

#[derive(Clone, Debug)]
pub struct MemberVars {
    pub adapters: AdapterVars,
    /// `(A, B)` per target.
    pub factors: Vec<(Var, Var)>,
    pub head: Var,
}

#[derive(Clone, Debug)]
pub struct EnsembleVars {
    pub backbone: BackboneVars,
    pub members: Vec<MemberVars>,
}

impl EnsembleVars {
    /// Trainable handles in [`RewardEnsemble::trainable_mut`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for m in &self.members {
            for &(a, b) in &m.factors {
                out.push(a);
                out.push(b);
            }
            out.push(m.head);
        }
        out
    }
}

/// Value of the diversity term and its gradient for every member's `A`.
#[derive(Clone, Debug)]
pub struct Diversity {
    pub value: f64,
    /// `grads[n][m]`: gradient with respect to member `n`'s `A` on target `m`.
    pub grads: Vec<Vec<Tensor>>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation with divisor `N`.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl RewardEnsemble {
    /// Fresh ensemble on `backbone`: `n` members, `A ~ N(0, a_std²)` with a
    /// per-member seed, zero `B`, zero heads.
    pub fn new(backbone: Backbone, n: usize, rank: usize, a_std: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Contract(format!("an ensemble needs at least 2 members, got {n}")));
        }
        let targets = default_targets(&backbone.config);
        let mut members = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng(derive_indexed(seed, "lora-member", i as u64));
            let lora = targets
                .iter()
                .map(|t| {
                    let w = backbone.target(t)?;
                    LoraUnit::with_init_std(t, w.cols(), w.rows(), rank, a_std, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            members.push(Member {
                lora,
                head: RewardHead::zeros(backbone.config.embed_dim),
            });
        }
        Ok(RewardEnsemble {
            backbone,
            targets,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn check_member(&self, n: usize) -> Result<()> {
        if n >= self.members.len() {
            return Err(Error::Contract(format!(
                "member {n} out of range for ensemble of {}",
                self.members.len()
            )));
        }
        Ok(())
    }

    /// Registers the backbone as constants and the members' adapters and heads
    /// with the requested trainability.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> EnsembleVars {
        let backbone = self.backbone.register(g, false);
        let members = self
            .members
            .iter()
            .map(|m| {
                let mut adapters = AdapterVars::none();
                let factors = m.lora.iter().map(|u| u.register(g, trainable, &mut adapters)).collect();
                let head = g.leaf(m.head.w.clone(), trainable);
                MemberVars {
                    adapters,
                    factors,
                    head,
                }
            })
            .collect();
        EnsembleVars { backbone, members }
    }

    /// Adapter factors and heads in [`EnsembleVars::trainable`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for m in &mut self.members {
            for u in &mut m.lora {
                out.push(&mut u.a);
                out.push(&mut u.b);
            }
            out.push(&mut m.head.w);
        }
        out
    }

    pub fn member_reward_var(&self, g: &mut Graph, vars: &EnsembleVars, n: usize, prompt: &[u32], response: &[u32]) -> Result<Var> {
        self.check_member(n)?;
        let mv = &vars.members[n];
        reward_var(&self.backbone, g, &vars.backbone, &mv.adapters, mv.head, prompt, response)
    }

    /// Mean of member rewards as a graph scalar.
    pub fn mean_reward_var(&self, g: &mut Graph, vars: &EnsembleVars, prompt: &[u32], response: &[u32]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for n in 0..self.len() {
            let r = self.member_reward_var(g, vars, n, prompt, response)?;
            total = Some(match total {
                None => r,
                Some(t) => g.add(t, r)?,
            });
        }
        Ok(g.scale(total.expect("non-empty ensemble"), 1.0 / self.len() as f64))
    }

    pub fn member_reward(&self, n: usize, prompt: &[u32], response: &[u32]) -> Result<f64> {
        self.check_member(n)?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let r = self.member_reward_var(&mut g, &vars, n, prompt, response)?;
        Ok(g.value(r).item())
    }

    /// Every member's reward for one `(x, y)`, sharing one backbone registration.
    pub fn member_rewards(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        (0..self.len())
            .map(|n| {
                let r = self.member_reward_var(&mut g, &vars, n, prompt, response)?;
                Ok(g.value(r).item())
            })
            .collect()
    }

    pub fn mean_reward(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        Ok(mean(&self.member_rewards(prompt, response)?))
    }

    pub fn uncertainty(&self, prompt: &[u32], response: &[u32]) -> Result<f64> {
        Ok(population_std(&self.member_rewards(prompt, response)?))
    }

    /// `(mean reward, uncertainty)` from one pass over the members.
    pub fn score(&self, prompt: &[u32], response: &[u32]) -> Result<(f64, f64)> {
        let rs = self.member_rewards(prompt, response)?;
        Ok((mean(&rs), population_std(&rs)))
    }

    fn target_index(&self, target: &str) -> Result<usize> {
        self.targets
            .iter()
            .position(|t| t == target)
            .ok_or_else(|| Error::Contract(format!("{target:?} is not an adapted matrix")))
    }

    /// Members' `A` factors for `target` stacked in member order: `(N·r) × d_in`.
    pub fn concat_a(&self, target: &str) -> Result<Tensor> {
        let m = self.target_index(target)?;
        let blocks: Vec<&Tensor> = self.members.iter().map(|mem| &mem.lora[m].a).collect();
        vstack(&blocks)
    }

    /// Mean over adapted matrices of the stacked-`A` nuclear/Frobenius ratio,
    /// with gradients split back into member blocks. The caller applies λ.
    pub fn diversity_term(&self) -> Result<Diversity> {
        let n_targets = self.targets.len() as f64;
        let mut value = 0.0;
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::with_capacity(self.targets.len()); self.len()];
        for t in &self.targets {
            let stacked = self.concat_a(t)?;
            let (v, g) = nnm_ratio_with_grad(&stacked)?;
            value += v / n_targets;
            let cols = stacked.cols();
            let mut row = 0;
            for (n, mem) in self.members.iter().enumerate() {
                let r = mem.lora[self.target_index(t)?].a.rows();
                let block: Vec<f64> = g.data()[row * cols..(row + r) * cols].iter().map(|x| x / n_targets).collect();
                grads[n].push(Tensor::matrix(r, cols, block)?);
                row += r;
            }
        }
        Ok(Diversity { value, grads })
    }

    /// The diversity term as a graph scalar depending on every member's `A`.
    pub fn diversity_var(&self, g: &mut Graph, vars: &EnsembleVars) -> Result<(Var, f64)> {
        let d = self.diversity_term()?;
        let mut parents = Vec::new();
        let mut local = Vec::new();
        for (mv, grads) in vars.members.iter().zip(d.grads) {
            for (&(a, _), grad) in mv.factors.iter().zip(grads) {
                parents.push(a);
                local.push(grad);
            }
        }
        Ok((g.external_scalar(&parents, d.value, local)?, d.value))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("meta/heads".to_string(), Tensor::scalar(self.backbone.config.heads as f64)),
            ("meta/members".to_string(), Tensor::scalar(self.len() as f64)),
        ];
        out.extend(self.backbone.named_tensors("backbone/"));
        for (n, m) in self.members.iter().enumerate() {
            for u in &m.lora {
                out.push((format!("member{n}/lora/{}/a", u.target), u.a.clone()));
                out.push((format!("member{n}/lora/{}/b", u.target), u.b.clone()));
            }
            out.push((format!("member{n}/head"), m.head.w.clone()));
        }
        out
    }

    pub fn from_named(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let heads = meta_heads(map)?;
        let backbone = Backbone::from_named(map, "backbone/", heads)?;
        let count = map
            .get("meta/members")
            .map(|t| t.item() as usize)
            .ok_or_else(|| Error::Format("checkpoint lacks meta/members".into()))?;
        let targets = default_targets(&backbone.config);
        let mut members = Vec::with_capacity(count);
        for n in 0..count {
            let units = read_lora_units(map, &format!("member{n}/lora/"))?;
            let mut lora = Vec::with_capacity(targets.len());
            for t in &targets {
                let u = units
                    .iter()
                    .find(|u| &u.target == t)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("member {n} lacks adapter for {t}")))?;
                lora.push(u);
            }
            let w = map
                .get(&format!("member{n}/head"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("member {n} lacks its head")))?;
            members.push(Member {
                lora,
                head: RewardHead { w },
            });
        }
        if members.len() < 2 {
            return Err(Error::Format("ensemble checkpoint has fewer than 2 members".into()));
        }
        Ok(RewardEnsemble {
            backbone,
            targets,
            members,
        })
    }
}
