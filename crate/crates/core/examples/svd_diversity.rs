//! One-sided Jacobi SVD and the nuclear/Frobenius ratio used as the
//! ensemble diversity measure: stacked copies of one matrix score low,
//! independent random blocks score near the √rank ceiling.
//!
//! cargo run --release --example svd_diversity

use uprlhf::linalg::{frobenius_norm, nnm_ratio, nnm_ratio_with_grad, nuclear_norm, svd, vstack};
use uprlhf::numerics::{rng, Tensor};
use uprlhf::Result;

fn main() -> Result<()> {
    let mut r = rng(3);
    let a = Tensor::randn(&[6, 4], 1.0, &mut r);
    let d = svd(&a)?;
    println!("singular values {:?}", d.s.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>());
    println!("reconstruction error {:.2e}", d.reconstruct().max_abs_diff(&a));
    println!("‖A‖_F {:.4}  ‖A‖_* {:.4}", frobenius_norm(&a), nuclear_norm(&a)?);

    // Five rank-4 adapter blocks over a 32-dimensional input.
    let block = Tensor::randn(&[4, 32], 0.02, &mut r);
    let copies = vstack(&[&block; 5])?;
    let blocks: Vec<Tensor> = (0..5).map(|_| Tensor::randn(&[4, 32], 0.02, &mut r)).collect();
    let refs: Vec<&Tensor> = blocks.iter().collect();
    let independent = vstack(&refs)?;
    println!("ratio, 5 identical blocks   {:.4} (single block {:.4})", nnm_ratio(&copies)?, nnm_ratio(&block)?);
    println!("ratio, 5 independent blocks {:.4} (ceiling √20 = {:.4})", nnm_ratio(&independent)?, 20f64.sqrt());

    // Gradient ascent on the ratio spreads the spectrum of nearly identical blocks.
    let jitter = Tensor::randn(copies.shape(), 1e-4, &mut r);
    let mut m = Tensor::new(copies.shape().to_vec(), copies.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect())?;
    for step in 0..=200 {
        let (ratio, grad) = nnm_ratio_with_grad(&m)?;
        if step % 50 == 0 {
            println!("ascent step {step:3}: ratio {ratio:.4}");
        }
        let lr = 0.05 * frobenius_norm(&m);
        m = Tensor::new(m.shape().to_vec(), m.data().iter().zip(grad.data()).map(|(v, g)| v + lr * g).collect())?;
    }
    Ok(())
}
