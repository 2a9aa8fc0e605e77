//! Policy-gradient fine-tuning against the reward ensemble, with and without
//! the uncertainty penalty, scored by the hidden gold reward.
//!
//! cargo run --release --example penalized_rl

use uprlhf::eval::rollout_stats;
use uprlhf::model::{BackboneConfig, PolicyModel};
use uprlhf::pipeline::{init_ensemble, rm_train, sft_train, RmTrainConfig, SftConfig};
use uprlhf::rl::{rl_train, RlConfig};
use uprlhf::synthdata::{build_bundle, TaskSpec};
use uprlhf::Result;

fn main() -> Result<()> {
    let spec = TaskSpec::default();
    let bundle = build_bundle(&spec, 2000, 0)?;
    let sft = sft_train(PolicyModel::new(BackboneConfig::default(), 0)?, &bundle.sft, &SftConfig::default())?.model;
    let rm = RmTrainConfig::default();
    let ensemble = rm_train(init_ensemble(&sft, &rm)?, &bundle.pref_train, &bundle.pref_test, &rm)?.ensemble;
    let eval_prompts = &bundle.rl_prompts[..200];

    for beta2 in [0.0, 1.0] {
        let config = RlConfig {
            beta2,
            checkpoint_every: 50,
            ..RlConfig::default()
        };
        let out = rl_train(&sft, &ensemble, &bundle.rl_prompts, &spec, &config)?;
        println!("beta2 = {beta2}");
        println!("  step    KL      u    gold   proxy");
        for (step, p) in &out.checkpoints {
            let s = rollout_stats(p, &sft, &ensemble, &spec, eval_prompts, 7)?;
            println!("  {step:4} {:6.3} {:6.3} {:6.3} {:7.3}", s.kl, s.u_mean, s.gold_mean, s.proxy_mean);
        }
        let last = out.trace.last().expect("at least one step");
        println!("  running mean uncertainty after training: {:.4}", last.u_running_mean);
    }
    Ok(())
}
