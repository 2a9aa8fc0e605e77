//! The prompt-echo task: gold reward, the scripted demonstrator, and the
//! 20/40/40 dataset bundle written as line-delimited text.
//!
//! cargo run --release --example synthetic_task [out_dir]

use std::path::PathBuf;

use uprlhf::model::EOS;
use uprlhf::numerics::rng;
use uprlhf::synthdata::{build_bundle, gold_reward, scripted_reference_policy, DatasetBundle, TaskSpec};
use uprlhf::Result;

fn main() -> Result<()> {
    let spec = TaskSpec::default();
    let x = vec![1, 2, 3, 4, 5];
    for y in [vec![1, 2, 3, EOS], vec![5, 4, 3, 2, 1, EOS], vec![7; 10].into_iter().chain([EOS]).collect(), vec![1, 1, 9, EOS]] {
        println!("gold({x:?}, {y:?}) = {}", gold_reward(&spec, &x, &y));
    }

    let mut r = rng(0);
    for noise in [0.0, 0.35, 1.0] {
        let y = scripted_reference_policy(&spec, &x, noise, &mut r);
        println!("scripted, noise {noise:.2}: {y:?} -> {}", gold_reward(&spec, &x, &y));
    }

    let bundle = build_bundle(&spec, 2000, 0)?;
    println!(
        "bundle: {} SFT pairs, {} + {} preference triples, {} RL prompts",
        bundle.sft.len(),
        bundle.pref_train.len(),
        bundle.pref_test.len(),
        bundle.rl_prompts.len()
    );
    let t = &bundle.pref_train[0];
    println!(
        "first triple: x {:?} w {:?} ({}) l {:?} ({})",
        t.x,
        t.y_w,
        gold_reward(&spec, &t.x, &t.y_w),
        t.y_l,
        gold_reward(&spec, &t.x, &t.y_l)
    );

    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("uprlhf-data"));
    bundle.write(&dir)?;
    assert_eq!(DatasetBundle::read(&dir)?, bundle);
    println!("wrote and re-read {}", dir.display());
    Ok(())
}
