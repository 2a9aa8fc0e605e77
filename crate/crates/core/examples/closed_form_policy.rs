//! KL-regularized reward maximization on a one-step K=8 problem: gradient
//! training of a softmax policy converges to π*(y) ∝ π_ref(y)·exp(r(y)/β).
//!
//! cargo run --release --example closed_form_policy

use uprlhf::eval::{closed_form_policy, fit_one_step_policy, total_variation};
use uprlhf::Result;

fn main() -> Result<()> {
    let reference = vec![0.30, 0.20, 0.15, 0.10, 0.10, 0.07, 0.05, 0.03];
    let rewards = vec![0.0, 0.5, 1.0, -0.5, 2.0, 0.3, 1.5, -1.0];
    for beta in [0.25, 1.0, 4.0] {
        let exact = closed_form_policy(&reference, &rewards, beta)?;
        let trained = fit_one_step_policy(&reference, &rewards, beta, 2000, 0.05)?;
        println!("beta {beta}: log Z = {:.4}, TV(trained, closed form) = {:.2e}", exact.log_partition, total_variation(&trained, &exact.probs));
        println!("  closed form {:?}", exact.probs.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
