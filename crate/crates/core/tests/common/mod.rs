//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use uprlhf::numerics::{Graph, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares tape gradients of the scalar `build(g, leaves)` against central
/// differences in every input coordinate. Returns the worst relative error.
pub fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Central-difference gradient of a plain function of one tensor.
pub fn fd_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= FD_STEP;
        out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * FD_STEP);
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Singular values of `m` (descending, `min(p, d)` of them) from the
/// eigenvalues of the symmetric embedding `[[0, M], [Mᵀ, 0]]`, which are `±σᵢ`
/// plus zeros. Avoids squaring the condition number.
pub fn singular_values_oracle(m: &Tensor) -> Vec<f64> {
    let (p, d) = m.dims2();
    let n = p + d;
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..p {
        for j in 0..d {
            h[i][p + j] = m.at(i, j);
            h[p + j][i] = m.at(i, j);
        }
    }
    let eig = symmetric_eigenvalues(h);
    eig[..p.min(d)].iter().map(|e| e.max(0.0)).collect()
}

/// ECE by enumerating, for every bin, the pairs whose confidence lies in it.
/// Returns `(ece, per-bin counts)`.
pub fn brute_force_ece(deltas: &[f64], correct: &[f64], bins: usize) -> (f64, Vec<usize>) {
    let max = deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let scale = if max == 0.0 { 1.0 } else { (0.99f64 / (1.0 - 0.99)).ln() / max };
    let conf: Vec<f64> = deltas
        .iter()
        .map(|d| {
            let z = scale * d.abs();
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let width = 0.5 / bins as f64;
    let total = deltas.len() as f64;
    let mut ece = 0.0;
    let mut counts = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = 0.5 + b as f64 * width;
        let hi = 0.5 + (b + 1) as f64 * width;
        let last = b + 1 == bins;
        let members: Vec<usize> = (0..deltas.len())
            .filter(|&i| {
                let pos = (conf[i] - 0.5) / width;
                let inside = pos >= b as f64 && (pos < (b + 1) as f64 || last);
                debug_assert!(!inside || (conf[i] >= lo - 1e-15 && (last || conf[i] < hi + 1e-15)));
                inside
            })
            .collect();
        counts.push(members.len());
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let a: f64 = members.iter().map(|&i| correct[i]).sum::<f64>() / n;
        let c: f64 = members.iter().map(|&i| conf[i]).sum::<f64>() / n;
        ece += n / total * (a - c).abs();
    }
    (ece, counts)
}

/// Spearman correlation by the textbook formula on distinct values.
pub fn spearman_distinct(a: &[f64], b: &[f64]) -> f64 {
    let rank = |xs: &[f64]| {
        xs.iter()
            .map(|x| xs.iter().filter(|y| *y < x).count() as f64)
            .collect::<Vec<_>>()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}
