//! Expected calibration error of pairwise preference predictions: a
//! perfectly calibrated synthetic population, a systematically
//! overconfident one, and the per-bin reliability table.
//!
//! cargo run --release --example calibration

use rand::Rng as _;
use uprlhf::eval::{calibration_csv, calibration_scale, ece, preference_prob, ScoredPair, ECE_BINS};
use uprlhf::numerics::rng;
use uprlhf::Result;

/// Pairs whose chosen side wins with probability σ(Δ/temperature).
fn population(n: usize, temperature: f64, seed: u64) -> Vec<ScoredPair> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let delta: f64 = r.random_range(-4.0..4.0);
            let correct = r.random::<f64>() < preference_prob(delta.abs() / temperature);
            ScoredPair {
                delta,
                correct: if correct { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

fn main() -> Result<()> {
    let deltas = [0.5, -2.0, 1.0];
    let s = calibration_scale(&deltas)?;
    println!("scale for max |Δ| = 2: s = {s:.6}, σ(s·2) = {:.6}", preference_prob(2.0 * s));

    for (label, temperature) in [("calibrated", 4.0 / 99f64.ln() * 1.0), ("overconfident", 4.0 / 99f64.ln() * 3.0)] {
        let report = ece(&population(10_000, temperature, 1), ECE_BINS)?;
        println!("{label}: accuracy {:.3}, ECE {:.4}", report.accuracy, report.ece);
        if label == "overconfident" {
            print!("{}", calibration_csv(&report));
        }
    }
    Ok(())
}
