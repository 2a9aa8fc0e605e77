//! Thin SVD by one-sided Jacobi rotations, and the nuclear/Frobenius ratio
//! used as the ensemble diversity regularizer.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Off-diagonal tolerance: columns `i, j` count as orthogonal once
/// `|aᵢ·aⱼ| ≤ tol·‖aᵢ‖‖aⱼ‖`.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 60;
/// Column norm, relative to `‖A‖_F`, below which a column counts as zero.
pub const NEGLIGIBLE_COLUMN: f64 = 1e-14;

/// `A = U·diag(S)·Vᵀ` with `U: p×q`, `V: d×q`, `q = min(p, d)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        let (p, q) = self.u.dims2();
        let d = self.v.rows();
        let mut out = Tensor::zeros(&[p, d]);
        for i in 0..p {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += self.u.at(i, k) * self.s[k] * self.v.at(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

fn check_matrix(a: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Contract(format!("svd needs a non-empty matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::Domain("svd of a matrix with non-finite entries".into()));
    }
    Ok(())
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    check_matrix(a)?;
    let (p, d) = a.dims2();
    if p >= d {
        tall_svd(a)
    } else {
        let t = tall_svd(&a.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// One-sided Jacobi on the columns of a `p×d` matrix with `p ≥ d`.
fn tall_svd(a: &Tensor) -> Result<SvdResult> {
    let (p, d) = a.dims2();
    // Column-major working copies: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..p).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns this small are rounding noise of a zero singular value; their
    // normalized inner products never settle, so they are left alone.
    let negligible = a.frobenius_sq() * NEGLIGIBLE_COLUMN * NEGLIGIBLE_COLUMN;
    let mut converged = false;
    let mut off = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        off = 0.0;
        let mut rotated = false;
        for i in 0..d {
            for j in i + 1..d {
                let alpha: f64 = cols[i].iter().map(|x| x * x).sum();
                let beta: f64 = cols[j].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || alpha.min(beta) <= negligible {
                    continue;
                }
                let rel = gamma.abs() / scale;
                off = f64::max(off, rel);
                if rel <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps (residual off-diagonal {off:e})"
        )));
    }

    let mut order: Vec<usize> = (0..d).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let scale = norms.iter().copied().fold(0.0, f64::max);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut s = Vec::with_capacity(d);
    let mut v = Tensor::zeros(&[d, d]);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for (i, val) in vcols[j].iter().enumerate() {
            v.set(i, k, *val);
        }
        if sigma > scale * 1e-14 && sigma > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            ucols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut ucols, p);

    let mut u = Tensor::zeros(&[p, d]);
    for (k, col) in ucols.iter().enumerate() {
        for (i, val) in col.iter().enumerate() {
            u.set(i, k, *val);
        }
    }
    let mut out = SvdResult { u, s, v };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty columns (zero singular values) with unit vectors orthogonal to
/// every other column, by Gram–Schmidt over the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], p: usize) {
    let mut basis = 0;
    for k in 0..cols.len() {
        if !cols[k].is_empty() {
            continue;
        }
        while basis < p {
            let mut cand = vec![0.0; p];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= dot * o;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                cols[k] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of each `U` column positive, flipping the
/// paired `V` column with it.
fn fix_signs(r: &mut SvdResult) {
    let (p, q) = r.u.dims2();
    let d = r.v.rows();
    for k in 0..q {
        let mut best = 0.0f64;
        for i in 0..p {
            let x = r.u.at(i, k);
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            for i in 0..p {
                r.u.set(i, k, -r.u.at(i, k));
            }
            for i in 0..d {
                r.v.set(i, k, -r.v.at(i, k));
            }
        }
    }
}

pub fn nuclear_norm(a: &Tensor) -> Result<f64> {
    Ok(svd(a)?.s.iter().sum())
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.frobenius_sq().sqrt()
}

/// `‖A‖_* / ‖A‖_F` and its gradient with respect to `A`.
///
/// The nuclear norm is differentiated through the subgradient `U·Vᵀ` of the
/// thin SVD, used as-is at repeated or zero singular values.
pub fn nnm_ratio_with_grad(a: &Tensor) -> Result<(f64, Tensor)> {
    check_matrix(a)?;
    let fro = frobenius_norm(a);
    if fro <= 1e-10 {
        return Err(Error::Domain(format!(
            "nuclear/frobenius ratio undefined for near-zero matrix (‖A‖_F = {fro:e})"
        )));
    }
    let r = svd(a)?;
    let nuc: f64 = r.s.iter().sum();
    let (p, d) = a.dims2();
    let q = r.s.len();
    let coef = nuc / (fro * fro * fro);
    let mut grad = Tensor::zeros(&[p, d]);
    for i in 0..p {
        for j in 0..d {
            let mut uv = 0.0;
            for k in 0..q {
                uv += r.u.at(i, k) * r.v.at(j, k);
            }
            grad.set(i, j, uv / fro - coef * a.at(i, j));
        }
    }
    Ok((nuc / fro, grad))
}

pub fn nnm_ratio(a: &Tensor) -> Result<f64> {
    let fro = frobenius_norm(a);
    if fro <= 1e-10 {
        return Err(Error::Domain(format!(
            "nuclear/frobenius ratio undefined for near-zero matrix (‖A‖_F = {fro:e})"
        )));
    }
    Ok(nuclear_norm(a)? / fro)
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[&Tensor]) -> Result<Tensor> {
    let cols = blocks
        .first()
        .ok_or_else(|| Error::Contract("vstack of nothing".into()))?
        .cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for b in blocks {
        if b.cols() != cols {
            return Err(Error::shape("vstack", blocks[0].shape(), b.shape()));
        }
        rows += b.rows();
        data.extend_from_slice(b.data());
    }
    Tensor::matrix(rows, cols, data)
}
