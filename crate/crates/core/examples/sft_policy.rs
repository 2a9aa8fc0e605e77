//! Supervised fine-tuning of the tiny transformer policy on scripted
//! demonstrations, then sampling and a checkpoint round trip.
//!
//! cargo run --release --example sft_policy

use uprlhf::checkpoint;
use uprlhf::model::{BackboneConfig, PolicyModel};
use uprlhf::numerics::rng;
use uprlhf::pipeline::{sft_train, SftConfig};
use uprlhf::synthdata::{build_bundle, gold_reward, TaskSpec};
use uprlhf::Result;

fn mean_gold(policy: &PolicyModel, spec: &TaskSpec, prompts: &[Vec<u32>]) -> Result<f64> {
    let mut r = rng(5);
    let mut total = 0.0;
    for x in prompts {
        total += gold_reward(spec, x, &policy.sample(x, 1.0, &mut r)?.response);
    }
    Ok(total / prompts.len() as f64)
}

fn main() -> Result<()> {
    let spec = TaskSpec::default();
    let bundle = build_bundle(&spec, 2000, 0)?;
    let init = PolicyModel::new(BackboneConfig::default(), 0)?;
    let held_out = &bundle.rl_prompts[..200];
    println!("untrained policy: mean gold {:.3}", mean_gold(&init, &spec, held_out)?);

    let out = sft_train(init, &bundle.sft, &SftConfig::default())?;
    for (epoch, nll) in out.loss_trace.iter().enumerate().step_by(5) {
        println!("epoch {epoch:2}: per-token NLL {nll:.4}");
    }
    let policy = out.model;
    println!("SFT policy: mean gold {:.3}", mean_gold(&policy, &spec, held_out)?);

    let mut r = rng(1);
    for x in &held_out[..4] {
        let s = policy.sample(x, 1.0, &mut r)?;
        println!("  {x:?} -> {:?} (gold {})", s.response, gold_reward(&spec, x, &s.response));
    }

    let path = std::env::temp_dir().join("uprlhf-sft-policy.ckpt");
    checkpoint::write(&path, &policy.named_tensors())?;
    let back = PolicyModel::from_named(&checkpoint::read(&path)?)?;
    println!("checkpoint {} reloads identically: {}", path.display(), back == policy);
    Ok(())
}
