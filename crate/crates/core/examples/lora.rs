//! LoRA adapters: a zero `B` leaves the base projection untouched, and the
//! adapted forward `W0·z + B·A·z` equals a forward through the merged weight.
//!
//! cargo run --release --example lora

use uprlhf::model::{lora_forward, LoraUnit};
use uprlhf::numerics::{rng, Tensor};
use uprlhf::Result;

fn main() -> Result<()> {
    let mut r = rng(11);
    let w0 = Tensor::randn(&[8, 6], 0.4, &mut r);
    let z = Tensor::randn(&[6, 3], 1.0, &mut r);
    let mut unit = LoraUnit::for_matrix("block0.wq", &w0, 2, &mut r)?;
    println!("A {:?}, B {:?}, rank {}", unit.a.shape(), unit.b.shape(), unit.rank());

    let base = w0.matmul(&z)?;
    let fresh = lora_forward(&w0, &unit, &z)?;
    println!("fresh adapter changes the output by {:.1e}", fresh.max_abs_diff(&base));

    unit.b = Tensor::randn(unit.b.shape(), 0.3, &mut r);
    let adapted = lora_forward(&w0, &unit, &z)?;
    let delta = unit.delta();
    let merged = Tensor::new(w0.shape().to_vec(), w0.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect())?;
    println!("trained adapter moves the output by {:.3}", adapted.max_abs_diff(&base));
    println!("adapted vs merged weight: {:.1e}", adapted.max_abs_diff(&merged.matmul(&z)?));
    println!(
        "trainable fraction for this matrix: {:.1}%",
        100.0 * (unit.a.len() + unit.b.len()) as f64 / w0.len() as f64
    );
    Ok(())
}
