//! Trains the reward LoRA ensemble with and without the nuclear-norm
//! diversity term and compares fit, diversity, calibration and uncertainty.
//!
//! cargo run --release --example reward_ensemble

use uprlhf::eval::{ece, scored_pairs, ECE_BINS};
use uprlhf::model::{BackboneConfig, PolicyModel, EOS};
use uprlhf::pipeline::{init_ensemble, rm_train, sft_train, RmTrainConfig, SftConfig};
use uprlhf::synthdata::{build_bundle, TaskSpec};
use uprlhf::Result;

fn main() -> Result<()> {
    let spec = TaskSpec::default();
    let bundle = build_bundle(&spec, 2000, 0)?;
    let sft = sft_train(PolicyModel::new(BackboneConfig::default(), 0)?, &bundle.sft, &SftConfig::default())?.model;

    for lambda in [0.0, 0.1] {
        let cfg = RmTrainConfig { lambda, ..RmTrainConfig::default() };
        let fresh = init_ensemble(&sft, &cfg)?;
        let x = &bundle.pref_test[0].x;
        println!("lambda {lambda}: uncertainty at init {}", fresh.uncertainty(x, &bundle.pref_test[0].y_w)?);
        let out = rm_train(fresh, &bundle.pref_train, &bundle.pref_test, &cfg)?;
        for e in &out.trace {
            println!(
                "  epoch {}: rank loss {:.4}, diversity {:.4}, holdout acc {:.3}, ECE {:.3}",
                e.epoch, e.rank_loss, e.diversity, e.holdout_acc, e.holdout_ece
            );
        }
        let report = ece(&scored_pairs(&out.ensemble, &bundle.pref_test)?, ECE_BINS)?;
        println!("  calibration scale s = {:.3}", report.scale);
        let in_dist = &bundle.pref_test[1];
        let (r, u) = out.ensemble.score(&in_dist.x, &in_dist.y_w)?;
        println!("  demo-like response  {:?}: reward {r:.3}, uncertainty {u:.3}", in_dist.y_w);
        let verbose: Vec<u32> = in_dist.x.iter().cycle().take(11).copied().chain([EOS]).collect();
        let (r, u) = out.ensemble.score(&in_dist.x, &verbose)?;
        println!("  verbose response    {verbose:?}: reward {r:.3}, uncertainty {u:.3}");
    }
    Ok(())
}
