//! Ensemble uncertainty as an out-of-distribution signal: as RL pushes the
//! policy away from the SFT reference, uncertainty on its samples tracks the
//! measured KL. The quartile table at the end shows whether the most uncertain
//! responses are also the ones the gold reward dislikes; at this scale they
//! often are not.
//!
//! cargo run --release --example ood_uncertainty

use uprlhf::eval::{ood_csv, ood_curve, spearman};
use uprlhf::model::{BackboneConfig, PolicyModel};
use uprlhf::numerics::rng;
use uprlhf::pipeline::{init_ensemble, rm_train, sft_train, RmTrainConfig, SftConfig};
use uprlhf::rl::{rl_train, RlConfig};
use uprlhf::synthdata::{build_bundle, gold_reward, TaskSpec};
use uprlhf::Result;

fn main() -> Result<()> {
    let spec = TaskSpec::default();
    let bundle = build_bundle(&spec, 2000, 0)?;
    let sft = sft_train(PolicyModel::new(BackboneConfig::default(), 0)?, &bundle.sft, &SftConfig::default())?.model;
    let rm = RmTrainConfig::default();
    let ensemble = rm_train(init_ensemble(&sft, &rm)?, &bundle.pref_train, &bundle.pref_test, &rm)?.ensemble;

    let config = RlConfig {
        beta2: 0.0,
        checkpoint_every: 25,
        ..RlConfig::default()
    };
    let out = rl_train(&sft, &ensemble, &bundle.rl_prompts, &spec, &config)?;
    let policies: Vec<PolicyModel> = out.checkpoints.iter().map(|(_, p)| p.clone()).collect();
    let prompts = &bundle.rl_prompts[..200];
    let rows = ood_curve(&policies, &sft, &ensemble, &spec, prompts, 11)?;
    print!("{}", ood_csv(&rows));
    let kl: Vec<f64> = rows.iter().map(|r| r.kl).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.u_mean).collect();
    println!("Spearman(KL, u) = {:.3}", spearman(&kl, &u));

    // Split the final policy's samples into uncertainty quartiles.
    let mut r = rng(3);
    let mut scored = Vec::new();
    for x in prompts {
        let y = out.policy.sample(x, 1.0, &mut r)?.response;
        let u = ensemble.uncertainty(x, &y)?;
        scored.push((u, y.len() as f64, gold_reward(&spec, x, &y)));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (q, chunk) in scored.chunks(scored.len().div_ceil(4)).enumerate() {
        let n = chunk.len() as f64;
        let (u, len, gold) = chunk.iter().fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2));
        println!("uncertainty quartile {}: u {:.3}, length {:.1}, gold {:.2}", q + 1, u / n, len / n, gold / n);
    }
    Ok(())
}
