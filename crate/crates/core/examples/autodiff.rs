//! Reverse-mode autodiff on a tiny two-layer classifier, with a central
//! finite-difference check of every parameter gradient.
//!
//! cargo run --release --example autodiff

use uprlhf::numerics::{rng, Graph, Tensor};
use uprlhf::Result;

fn loss(x: &Tensor, w1: &Tensor, w2: &Tensor, labels: &[usize]) -> Result<(Graph, uprlhf::numerics::Var, [uprlhf::numerics::Var; 2])> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a = g.param(w1.clone());
    let b = g.param(w2.clone());
    let h = g.matmul(xv, a)?;
    let h = g.tanh(h);
    let logits = g.matmul(h, b)?;
    let lp = g.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    let picked = g.pick(lp, &picks)?;
    let m = g.mean(picked);
    let out = g.scale(m, -1.0);
    Ok((g, out, [a, b]))
}

fn main() -> Result<()> {
    let mut r = rng(7);
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let w1 = Tensor::randn(&[4, 5], 0.5, &mut r);
    let w2 = Tensor::randn(&[5, 3], 0.5, &mut r);
    let labels = [0, 2, 1, 1, 0, 2];

    let (mut g, out, [a, b]) = loss(&x, &w1, &w2, &labels)?;
    println!("cross-entropy {:.6}", g.value(out).item());
    let grads = g.backward(out)?;

    let h = 1e-6;
    for (name, var, which) in [("w1", a, 0), ("w2", b, 1)] {
        let analytic = grads.get(var).expect("parameter gradient");
        let mut worst: f64 = 0.0;
        for i in 0..analytic.len() {
            let eval = |delta: f64| -> Result<f64> {
                let (mut p1, mut p2) = (w1.clone(), w2.clone());
                let t = if which == 0 { &mut p1 } else { &mut p2 };
                t.data_mut()[i] += delta;
                let (g, out, _) = loss(&x, &p1, &p2, &labels)?;
                Ok(g.value(out).item())
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let an = analytic.data()[i];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
        }
        println!("{name}: {} entries, max relative error {worst:.2e}", analytic.len());
    }
    Ok(())
}
