//! Tiny causal transformer used both as the policy (language head) and as the
//! reward backbone (scalar value head), plus LoRA adapters.
//!
//! Weight matrices are stored `d_out × d_in` and applied to row-major
//! activations as `X·Wᵀ`, so a LoRA-adapted projection computes
//! `X·W0ᵀ + (X·Aᵀ)·Bᵀ`, the row form of `W0·z + B·A·z`.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, rng, Graph, Rng, Tensor, Var};

pub const CONTENT_TOKENS: u32 = 16;
pub const BOS: u32 = 16;
pub const EOS: u32 = 17;
/// Longest response, EOS excluded.
pub const RESPONSE_CAP: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub layers: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 18,
            embed_dim: 32,
            heads: 2,
            ff_width: 64,
            layers: 1,
            max_seq_len: 20,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config(format!("vocab_size {} leaves no room for BOS/EOS", self.vocab_size)));
        }
        if self.layers == 0 || self.ff_width == 0 || self.max_seq_len < 2 {
            return Err(Error::Config("layers, ff_width and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// One attention + feedforward layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff1: Tensor,
    pub b1: Tensor,
    pub ff2: Tensor,
    pub b2: Tensor,
}

const BLOCK_NAMES: [&str; 8] = ["wq", "wk", "wv", "wo", "ff1", "b1", "ff2", "b2"];

impl Block {
    fn init(c: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = c.embed_dim;
        let proj = 1.0 / (d as f64).sqrt();
        Block {
            wq: Tensor::randn(&[d, d], proj, rng),
            wk: Tensor::randn(&[d, d], proj, rng),
            wv: Tensor::randn(&[d, d], proj, rng),
            wo: Tensor::randn(&[d, d], proj, rng),
            ff1: Tensor::randn(&[c.ff_width, d], proj, rng),
            b1: Tensor::zeros(&[c.ff_width]),
            ff2: Tensor::randn(&[d, c.ff_width], 1.0 / (c.ff_width as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.b1, &self.ff2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff1,
            &mut self.b1,
            &mut self.ff2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
}

/// Graph handles for a registered [`Backbone`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<[Var; 8]>,
}

impl BackboneVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out
    }
}

/// Registered LoRA adapters keyed by target matrix name.
#[derive(Clone, Debug, Default)]
pub struct AdapterVars {
    units: Vec<(String, Var, Var)>,
}

impl AdapterVars {
    pub fn none() -> Self {
        AdapterVars::default()
    }

    pub fn push(&mut self, target: &str, a: Var, b: Var) {
        self.units.push((target.to_string(), a, b));
    }

    fn get(&self, target: &str) -> Option<(Var, Var)> {
        self.units.iter().find(|(t, _, _)| t == target).map(|&(_, a, b)| (a, b))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var, Var)> {
        self.units.iter()
    }
}

/// Name of the adapted projection `proj` ("wq", "wv", ...) in layer `layer`.
pub fn target_name(layer: usize, proj: &str) -> String {
    format!("block{layer}.{proj}")
}

/// The matrices adapted by LoRA: query and value projections of every layer.
pub fn default_targets(config: &BackboneConfig) -> Vec<String> {
    (0..config.layers)
        .flat_map(|l| [target_name(l, "wq"), target_name(l, "wv")])
        .collect()
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Backbone {
            config,
            tok_emb: Tensor::randn(&[config.vocab_size, d], 0.5, rng),
            pos_emb: Tensor::randn(&[config.max_seq_len, d], 0.5, rng),
            blocks: (0..config.layers).map(|_| Block::init(&config, rng)).collect(),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..self.blocks.len() {
            out.extend(BLOCK_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        out
    }

    /// The base matrix a LoRA target refers to.
    pub fn target(&self, name: &str) -> Result<&Tensor> {
        let names = self.names();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown target matrix {name:?}")))?;
        Ok(self.tensors()[idx])
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let tok_emb = g.leaf(self.tok_emb.clone(), trainable);
        let pos_emb = g.leaf(self.pos_emb.clone(), trainable);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.tensors().map(|t| g.leaf(t.clone(), trainable)))
            .collect();
        BackboneVars {
            tok_emb,
            pos_emb,
            blocks,
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    pub fn from_named(map: &BTreeMap<String, Tensor>, prefix: &str, heads: usize) -> Result<Self> {
        let fetch = |n: &str| -> Result<Tensor> {
            map.get(&format!("{prefix}{n}"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {prefix}{n}")))
        };
        let tok_emb = fetch("tok_emb")?;
        let pos_emb = fetch("pos_emb")?;
        let mut layers = 0;
        while map.contains_key(&format!("{prefix}block{layers}.wq")) {
            layers += 1;
        }
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let t = |n: &str| fetch(&format!("block{l}.{n}"));
            blocks.push(Block {
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                ff1: t("ff1")?,
                b1: t("b1")?,
                ff2: t("ff2")?,
                b2: t("b2")?,
            });
        }
        let ff_width = blocks.first().map_or(0, |b| b.ff1.rows());
        let config = BackboneConfig {
            vocab_size: tok_emb.rows(),
            embed_dim: tok_emb.cols(),
            heads,
            ff_width,
            layers,
            max_seq_len: pos_emb.rows(),
        };
        config.validate()?;
        let out = Backbone {
            config,
            tok_emb,
            pos_emb,
            blocks,
        };
        out.check_shapes()?;
        Ok(out)
    }

    fn check_shapes(&self) -> Result<()> {
        let fresh = Backbone::new(self.config, &mut rng(0))?;
        for ((n, a), b) in self.names().iter().zip(self.tensors()).zip(fresh.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!("tensor {n} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    /// Hidden states `[T × d]` for `tokens`, with optional LoRA adapters.
    pub fn hidden(&self, g: &mut Graph, vars: &BackboneVars, adapters: &AdapterVars, tokens: &[u32]) -> Result<Var> {
        let c = &self.config;
        let t = tokens.len();
        if t == 0 || t > c.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {t} outside 1..={}",
                c.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&tok| tok as usize >= c.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} out of range for vocab {}", c.vocab_size)));
        }
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.select_rows(vars.tok_emb, &ids)?;
        let pos = g.select_rows(vars.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;

        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (l, bv) in vars.blocks.iter().enumerate() {
            let [wq, wk, wv, wo, ff1, b1, ff2, b2] = *bv;
            let q = linear(g, x, wq, adapters.get(&target_name(l, "wq")))?;
            let k = linear(g, x, wk, adapters.get(&target_name(l, "wk")))?;
            let v = linear(g, x, wv, adapters.get(&target_name(l, "wv")))?;
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let p = g.softmax_rows(scores, true);
                heads.push(g.matmul(p, vh)?);
            }
            let o = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = linear(g, o, wo, adapters.get(&target_name(l, "wo")))?;
            x = g.add(x, attn)?;
            let f = g.matmul_nt(x, ff1)?;
            let f = g.add_row(f, b1)?;
            let f = g.relu(f);
            let f = g.matmul_nt(f, ff2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}

/// `X·Wᵀ`, plus `(X·Aᵀ)·Bᵀ` when an adapter is attached.
fn linear(g: &mut Graph, x: Var, w: Var, adapter: Option<(Var, Var)>) -> Result<Var> {
    let base = g.matmul_nt(x, w)?;
    match adapter {
        None => Ok(base),
        Some((a, b)) => {
            let xa = g.matmul_nt(x, a)?;
            let delta = g.matmul_nt(xa, b)?;
            g.add(base, delta)
        }
    }
}

/// Low-rank update `ΔW = B·A` for one base matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraUnit {
    pub target: String,
    /// `r × d_in`, Gaussian at construction.
    pub a: Tensor,
    /// `d_out × r`, zero at construction.
    pub b: Tensor,
}

pub const LORA_INIT_STD: f64 = 0.02;

impl LoraUnit {
    pub fn new(target: &str, d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        LoraUnit::with_init_std(target, d_in, d_out, rank, LORA_INIT_STD, rng)
    }

    /// Like [`LoraUnit::new`] with `A ~ N(0, std²)`.
    pub fn with_init_std(target: &str, d_in: usize, d_out: usize, rank: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Contract(format!("lora init std must be positive, got {std}")));
        }
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::Contract(format!(
                "lora rank {rank} must be in 1..{}",
                d_in.min(d_out)
            )));
        }
        Ok(LoraUnit {
            target: target.to_string(),
            a: Tensor::randn(&[rank, d_in], std, rng),
            b: Tensor::zeros(&[d_out, rank]),
        })
    }

    /// Adapter for `base` (a `d_out × d_in` matrix).
    pub fn for_matrix(target: &str, base: &Tensor, rank: usize, rng: &mut Rng) -> Result<Self> {
        LoraUnit::new(target, base.cols(), base.rows(), rank, rng)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// The dense update `B·A`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("lora factor shapes")
    }

    pub fn register(&self, g: &mut Graph, trainable: bool, adapters: &mut AdapterVars) -> (Var, Var) {
        let a = g.leaf(self.a.clone(), trainable);
        let b = g.leaf(self.b.clone(), trainable);
        adapters.push(&self.target, a, b);
        (a, b)
    }
}

/// `W0·z_in + B·(A·z_in)` for column inputs `z_in: d_in × n`.
pub fn lora_forward(w0: &Tensor, unit: &LoraUnit, z_in: &Tensor) -> Result<Tensor> {
    if w0.cols() != unit.a.cols() || w0.rows() != unit.b.rows() || unit.b.cols() != unit.a.rows() {
        return Err(Error::shape("lora_forward", w0.shape(), unit.a.shape()));
    }
    let base = w0.matmul(z_in)?;
    let low = unit.b.matmul(&unit.a.matmul(z_in)?)?;
    let data = base.data().iter().zip(low.data()).map(|(x, y)| x + y).collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Checks a prompt/response pair and builds `[BOS] + prompt + response`.
///
/// Tokens after the first EOS in `response` are dropped; a response without
/// EOS is rejected.
pub fn sequence(config: &BackboneConfig, prompt: &[u32], response: &[u32]) -> Result<Vec<u32>> {
    let end = response
        .iter()
        .position(|&t| t == EOS)
        .ok_or_else(|| Error::Contract("response must end with EOS".into()))?;
    let response = &response[..=end];
    let len = 1 + prompt.len() + response.len();
    if len > config.max_seq_len {
        return Err(Error::Contract(format!(
            "prompt+response needs {len} positions, max_seq_len is {}",
            config.max_seq_len
        )));
    }
    let mut seq = Vec::with_capacity(len);
    seq.push(BOS);
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(response);
    if let Some(bad) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} out of range")));
    }
    Ok(seq)
}

/// A sampled response.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Response tokens ending with EOS.
    pub response: Vec<u32>,
    /// Un-tempered log-probability of each response token.
    pub logprobs: Vec<f64>,
    /// The length cap was hit and EOS was appended.
    pub truncated: bool,
}

/// The language model being fine-tuned.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub backbone: Backbone,
    /// `vocab × d`.
    pub lm_head: Tensor,
    pub lora: Vec<LoraUnit>,
}

#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub backbone: BackboneVars,
    pub lm_head: Var,
    pub adapters: AdapterVars,
}

impl PolicyVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.backbone.flat();
        out.push(self.lm_head);
        for (_, a, b) in self.adapters.iter() {
            out.push(*a);
            out.push(*b);
        }
        out
    }
}

impl PolicyModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut r = rng(seed);
        let backbone = Backbone::new(config, &mut r)?;
        let lm_head = Tensor::randn(&[config.vocab_size, config.embed_dim], 1.0 / (config.embed_dim as f64).sqrt(), &mut r);
        Ok(PolicyModel {
            backbone,
            lm_head,
            lora: Vec::new(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Parameters in [`PolicyVars::flat`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.tensors_mut();
        out.push(&mut self.lm_head);
        for u in &mut self.lora {
            out.push(&mut u.a);
            out.push(&mut u.b);
        }
        out
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        let backbone = self.backbone.register(g, trainable);
        let lm_head = g.leaf(self.lm_head.clone(), trainable);
        let mut adapters = AdapterVars::none();
        for u in &self.lora {
            u.register(g, trainable, &mut adapters);
        }
        PolicyVars {
            backbone,
            lm_head,
            adapters,
        }
    }

    /// Log-distributions `[|response| × vocab]` over the token at each response
    /// position, conditioned on everything before it.
    pub fn response_logprob_matrix(&self, g: &mut Graph, vars: &PolicyVars, prompt: &[u32], response: &[u32]) -> Result<Var> {
        let seq = sequence(self.config(), prompt, response)?;
        let n_resp = seq.len() - 1 - prompt.len();
        // The last token is never an input.
        let h = self.backbone.hidden(g, &vars.backbone, &vars.adapters, &seq[..seq.len() - 1])?;
        let rows: Vec<usize> = (prompt.len()..prompt.len() + n_resp).collect();
        let h = g.select_rows(h, &rows)?;
        let logits = g.matmul_nt(h, vars.lm_head)?;
        Ok(g.log_softmax_rows(logits))
    }

    /// Per-token `log π(y_t | x, y_<t)` as a graph vector, EOS included.
    pub fn token_logprobs(&self, g: &mut Graph, vars: &PolicyVars, prompt: &[u32], response: &[u32]) -> Result<Var> {
        let lp = self.response_logprob_matrix(g, vars, prompt, response)?;
        let seq = sequence(self.config(), prompt, response)?;
        let at: Vec<(usize, usize)> = seq[1 + prompt.len()..]
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t as usize))
            .collect();
        g.pick(lp, &at)
    }

    pub fn policy_logprobs(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let v = self.token_logprobs(&mut g, &vars, prompt, response)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Full next-token log-distribution at every response position.
    pub fn response_distributions(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let m = self.response_logprob_matrix(&mut g, &vars, prompt, response)?;
        let v = g.value(m);
        Ok((0..v.rows()).map(|i| v.row(i).to_vec()).collect())
    }

    /// Next-token log-distribution after `prefix` (which starts with BOS).
    fn next_logprobs(&self, g: &mut Graph, vars: &PolicyVars, prefix: &[u32]) -> Result<Vec<f64>> {
        let h = self.backbone.hidden(g, &vars.backbone, &vars.adapters, prefix)?;
        let last = g.select_rows(h, &[prefix.len() - 1])?;
        let logits = g.matmul_nt(last, vars.lm_head)?;
        Ok(log_softmax(g.value(logits).data()))
    }

    /// Ancestral sampling until EOS or [`RESPONSE_CAP`] tokens.
    ///
    /// Temperature reshapes the sampling distribution only; the returned
    /// log-probabilities come from the untempered model. A capped response
    /// gets EOS appended, scored under the model, and is flagged truncated.
    pub fn sample(&self, prompt: &[u32], temperature: f64, rng: &mut Rng) -> Result<Sample> {
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
        }
        let cap = RESPONSE_CAP.min(self.config().max_seq_len.saturating_sub(prompt.len() + 2));
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let mut prefix = Vec::with_capacity(prompt.len() + cap + 2);
        prefix.push(BOS);
        prefix.extend_from_slice(prompt);
        let mut response = Vec::new();
        let mut logprobs = Vec::new();
        loop {
            let lp = self.next_logprobs(&mut g, &vars, &prefix)?;
            if response.len() == cap {
                response.push(EOS);
                logprobs.push(lp[EOS as usize]);
                return Ok(Sample {
                    response,
                    logprobs,
                    truncated: true,
                });
            }
            let tok = sample_token(&lp, temperature, rng);
            response.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == EOS {
                return Ok(Sample {
                    response,
                    logprobs,
                    truncated: false,
                });
            }
            prefix.push(tok);
        }
    }

    pub fn greedy(&self, prompt: &[u32]) -> Result<Sample> {
        self.sample(prompt, f64::MIN_POSITIVE, &mut rng(0))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("meta/heads".to_string(), Tensor::scalar(self.config().heads as f64))];
        out.extend(self.backbone.named_tensors("backbone/"));
        out.push(("lm_head".to_string(), self.lm_head.clone()));
        for u in &self.lora {
            out.push((format!("lora/{}/a", u.target), u.a.clone()));
            out.push((format!("lora/{}/b", u.target), u.b.clone()));
        }
        out
    }

    pub fn from_named(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let heads = meta_heads(map)?;
        let backbone = Backbone::from_named(map, "backbone/", heads)?;
        let lm_head = map
            .get("lm_head")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks lm_head".into()))?;
        if lm_head.shape() != [backbone.config.vocab_size, backbone.config.embed_dim] {
            return Err(Error::Format(format!("lm_head has shape {:?}", lm_head.shape())));
        }
        let lora = read_lora_units(map, "lora/")?;
        Ok(PolicyModel {
            backbone,
            lm_head,
            lora,
        })
    }
}

pub(crate) fn meta_heads(map: &BTreeMap<String, Tensor>) -> Result<usize> {
    let h = map
        .get("meta/heads")
        .ok_or_else(|| Error::Format("checkpoint lacks meta/heads".into()))?;
    if h.len() != 1 || h.item() < 1.0 || h.item().fract() != 0.0 {
        return Err(Error::Format("meta/heads must be a positive integer scalar".into()));
    }
    Ok(h.item() as usize)
}

pub(crate) fn read_lora_units(map: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Vec<LoraUnit>> {
    let mut units = Vec::new();
    for (name, a) in map.range(prefix.to_string()..) {
        let Some(rest) = name.strip_prefix(prefix) else { break };
        let Some(target) = rest.strip_suffix("/a") else { continue };
        let b = map
            .get(&format!("{prefix}{target}/b"))
            .cloned()
            .ok_or_else(|| Error::Format(format!("lora {target} lacks its B factor")))?;
        if b.cols() != a.rows() {
            return Err(Error::Format(format!("lora {target} factors disagree on rank")));
        }
        units.push(LoraUnit {
            target: target.to_string(),
            a: a.clone(),
            b,
        });
    }
    Ok(units)
}

/// Draws a token from `softmax(logprobs / temperature)`. Very small
/// temperatures reduce to argmax (ties go to the lowest id).
pub fn sample_token(logprobs: &[f64], temperature: f64, rng: &mut Rng) -> u32 {
    let scaled: Vec<f64> = logprobs.iter().map(|l| l / temperature).collect();
    let lp = log_softmax(&scaled);
    let weights: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let best = weights.iter().copied().fold(0.0, f64::max);
    if best >= 1.0 - 1e-15 || !weights.iter().all(|w| w.is_finite()) {
        return argmax(logprobs) as u32;
    }
    match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng) as u32,
        Err(_) => argmax(logprobs) as u32,
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scalar value head applied to the hidden state of the final (EOS) token.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardHead {
    /// `1 × d`.
    pub w: Tensor,
}

impl RewardHead {
    pub fn zeros(d: usize) -> Self {
        RewardHead {
            w: Tensor::zeros(&[1, d]),
        }
    }
}

/// Reward `r(y|x)` as a graph scalar, read at the EOS position.
pub fn reward_var(
    backbone: &Backbone,
    g: &mut Graph,
    vars: &BackboneVars,
    adapters: &AdapterVars,
    head: Var,
    prompt: &[u32],
    response: &[u32],
) -> Result<Var> {
    let seq = sequence(&backbone.config, prompt, response)?;
    let h = backbone.hidden(g, vars, adapters, &seq)?;
    let last = g.select_rows(h, &[seq.len() - 1])?;
    let r = g.matmul_nt(last, head)?;
    Ok(g.sum(r))
}

/// Reward of one backbone + adapters + head, evaluated without gradients.
pub fn reward_forward_single(backbone: &Backbone, lora: &[LoraUnit], head: &RewardHead, prompt: &[u32], response: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = backbone.register(&mut g, false);
    let mut adapters = AdapterVars::none();
    for u in lora {
        u.register(&mut g, false, &mut adapters);
    }
    let h = g.constant(head.w.clone());
    let r = reward_var(backbone, &mut g, &vars, &adapters, h, prompt, response)?;
    Ok(g.value(r).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> PolicyModel {
        PolicyModel::new(BackboneConfig::default(), 1).unwrap()
    }

    #[test]
    fn zero_b_is_identity_update() {
        let mut r = rng(2);
        let w0 = Tensor::randn(&[5, 4], 1.0, &mut r);
        let unit = LoraUnit::new("w", 4, 5, 2, &mut r).unwrap();
        let z = Tensor::randn(&[4, 3], 1.0, &mut r);
        assert_eq!(lora_forward(&w0, &unit, &z).unwrap(), w0.matmul(&z).unwrap());
    }

    #[test]
    fn identity_composition() {
        let mut r = rng(3);
        let d = 3;
        let unit = LoraUnit {
            target: "w".into(),
            a: Tensor::identity(d),
            b: Tensor::identity(d),
        };
        let z = Tensor::randn(&[d, 2], 1.0, &mut r);
        assert_eq!(lora_forward(&Tensor::zeros(&[d, d]), &unit, &z).unwrap(), z);
    }

    #[test]
    fn lora_rank_must_be_small() {
        let mut r = rng(0);
        assert!(LoraUnit::new("w", 4, 4, 4, &mut r).is_err());
        let u = LoraUnit::new("w", 32, 32, 4, &mut r).unwrap();
        assert!(u.b.data().iter().all(|&x| x == 0.0));
        assert!(u.a.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zeroed_head_gives_uniform_logprobs() {
        let mut p = policy();
        p.lm_head = Tensor::zeros(p.lm_head.shape());
        let lp = p.policy_logprobs(&[1, 2, 3, 4, 5], &[3, 4, EOS]).unwrap();
        for v in lp {
            assert!((v - (1.0f64 / 18.0).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn contract_errors() {
        let p = policy();
        assert!(p.policy_logprobs(&[1, 2, 3, 4, 5], &[3, 4]).is_err());
        assert!(p.policy_logprobs(&[1, 2, 3, 4, 5], &[30, EOS]).is_err());
        let long = vec![1u32; 14];
        let mut resp = long.clone();
        resp.push(EOS);
        assert!(p.policy_logprobs(&[1, 2, 3, 4, 5], &resp).is_err());
    }

    #[test]
    fn distributions_normalize() {
        let p = policy();
        for row in p.response_distributions(&[0, 5, 9, 2, 2], &[9, 9, 1, EOS]).unwrap() {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causality() {
        let p = policy();
        let a = p.response_distributions(&[1, 2, 3, 4, 5], &[6, 7, 8, EOS]).unwrap();
        let b = p.response_distributions(&[1, 2, 3, 4, 5], &[6, 7, 0, EOS]).unwrap();
        // Rows 0..=2 condition on tokens before response position 2 only.
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn sampling_is_seeded_and_scored_untempered() {
        let p = policy();
        let prompt = [3, 1, 4, 1, 5];
        let s1 = p.sample(&prompt, 1.3, &mut rng(9)).unwrap();
        let s2 = p.sample(&prompt, 1.3, &mut rng(9)).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(*s1.response.last().unwrap(), EOS);
        assert!(s1.response.len() <= RESPONSE_CAP + 1);
        let scored = p.policy_logprobs(&prompt, &s1.response).unwrap();
        for (a, b) in scored.iter().zip(&s1.logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let p = policy();
        let prompt = [3, 1, 4, 1, 5];
        let greedy = p.greedy(&prompt).unwrap();
        let mut prefix = prompt.to_vec();
        prefix.insert(0, BOS);
        for &tok in &greedy.response {
            let mut g = Graph::new();
            let vars = p.register(&mut g, false);
            let lp = p.next_logprobs(&mut g, &vars, &prefix).unwrap();
            if prefix.len() - 1 - prompt.len() == RESPONSE_CAP {
                break;
            }
            assert_eq!(tok as usize, argmax(&lp));
            prefix.push(tok);
        }
        let cold = p.sample(&prompt, 1e-6, &mut rng(4)).unwrap();
        assert_eq!(cold.response, greedy.response);
    }

    #[test]
    fn zero_head_reward_is_zero_and_ignores_padding() {
        let p = policy();
        let head = RewardHead::zeros(32);
        assert_eq!(reward_forward_single(&p.backbone, &[], &head, &[1, 2, 3, 4, 5], &[1, EOS]).unwrap(), 0.0);
        let mut r = rng(8);
        let head = RewardHead {
            w: Tensor::randn(&[1, 32], 1.0, &mut r),
        };
        let a = reward_forward_single(&p.backbone, &[], &head, &[1, 2, 3, 4, 5], &[1, EOS]).unwrap();
        let b = reward_forward_single(&p.backbone, &[], &head, &[1, 2, 3, 4, 5], &[1, EOS, 7, 7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_adapters_leave_forward_unchanged() {
        let p = policy();
        let mut r = rng(12);
        let lora: Vec<LoraUnit> = default_targets(p.config())
            .iter()
            .map(|t| LoraUnit::for_matrix(t, p.backbone.target(t).unwrap(), 4, &mut r).unwrap())
            .collect();
        let head = RewardHead {
            w: Tensor::randn(&[1, 32], 1.0, &mut r),
        };
        let base = reward_forward_single(&p.backbone, &[], &head, &[1, 2, 3, 4, 5], &[2, 2, EOS]).unwrap();
        let adapted = reward_forward_single(&p.backbone, &lora, &head, &[1, 2, 3, 4, 5], &[2, 2, EOS]).unwrap();
        assert_eq!(base, adapted);
    }
}
