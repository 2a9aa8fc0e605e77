//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation as a node whose parents have smaller
//! indices, so node order is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse and then marks the graph consumed; a second
//! call is rejected because intermediate buffers are not reusable.

use super::tensor::{log_softmax, mm, mm_nt, mm_tn, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Pick { x: Var, at: Vec<(usize, usize)> },
    Stack(Vec<Var>),
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    External { parents: Vec<Var>, local: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::matrix(m, n, mm(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let out = Tensor::matrix(m, n, mm_nt(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_with(a, b, Op::Minimum(a, b), f64::min))
    }

    /// Adds a bias row `b` (shape `[n]` or `[1, n]`) to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let row_ok = match bv.shape() {
            [n] => *n == av.cols(),
            [1, n] => *n == av.cols(),
            _ => false,
        };
        if av.rank() != 2 || !row_ok {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Addition of a constant scalar.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log σ(x)`, computed as `−softplus(−x)` so it stays finite for very
    /// negative inputs.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), |x| -softplus(-x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { x: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row-wise log-softmax; a vector is treated as a single row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.cols();
        let data: Vec<f64> = v.data().chunks(n).flat_map(log_softmax).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let v = self.value(a);
        let (r, c) = v.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &v.data()[i * c..i * c + width];
            let lp = log_softmax(row);
            for (o, l) in out[i * c..i * c + width].iter_mut().zip(lp) {
                *o = l.exp();
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2();
        if v.rank() != 2 || start + len > c {
            return Err(Error::shape("slice_cols", v.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rank() != 2 || v.rows() != r {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Gathers rows of a matrix (embedding lookup); repeated indices accumulate
    /// gradient.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2();
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(v.row(i));
        }
        let out = Tensor::matrix(rows.len(), c, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Picks single entries `(row, col)` of a matrix into a vector.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims2();
        if let Some(bad) = at.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Contract(format!("pick {bad:?} outside {r}x{c}")));
        }
        let out = Tensor::vector(at.iter().map(|&(i, j)| v.data()[i * c + j]).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Pick {
                x: a,
                at: at.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for s in scalars {
            let v = self.value(*s);
            if v.len() != 1 {
                return Err(Error::shape("stack", v.shape(), &[]));
            }
            data.push(v.item());
        }
        let rg = self.rg(scalars);
        Ok(self.push(Tensor::vector(data), Op::Stack(scalars.to_vec()), rg))
    }

    /// A scalar computed outside the tape whose local gradients with respect
    /// to `parents` are already known.
    pub fn external_scalar(&mut self, parents: &[Var], value: f64, local: Vec<Tensor>) -> Result<Var> {
        if parents.len() != local.len() {
            return Err(Error::Contract("one local gradient per parent required".into()));
        }
        for (p, g) in parents.iter().zip(&local) {
            let pv = self.value(*p);
            if pv.shape() != g.shape() {
                return Err(Error::shape("external_scalar", pv.shape(), g.shape()));
            }
        }
        let rg = self.rg(parents);
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                parents: parents.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`.
    ///
    /// Every node is visited at most once, in reverse tape order. The graph is
    /// consumed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &|d| add_into(d, &mm_nt(g, bv.data(), m, n, k)));
                acc(*b, &|d| add_into(d, &mm_tn(av.data(), g, m, k, n)));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &|d| add_into(d, &mm(g, bv.data(), m, n, k)));
                acc(*b, &|d| add_into(d, &mm_tn(g, av.data(), m, n, k)));
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                acc(*a, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| {
                    for (d, s) in d.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        if av[i] > bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = node.value.cols();
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| {
                for (d, s) in d.iter_mut().zip(g) {
                    *d += c * s;
                }
            }),
            Op::AddScalar(a) => acc(*a, &|d| add_into(d, g)),
            Op::Sigmoid(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * val[i] * (1.0 - val[i]);
                }
            }),
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(-x[i]);
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - val[i] * val[i]);
                }
            }),
            Op::Exp(a) => acc(*a, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * val[i];
                }
            }),
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                })
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * x[i] * g[i];
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, &|d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                acc(*a, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(val.chunks(n)) {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                })
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                acc(*x, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(val.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let (r, len) = node.value.dims2();
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &|d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.cols();
                acc(*x, &|d| {
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                })
            }
            Op::Pick { x, at } => {
                let c = self.value(*x).cols();
                acc(*x, &|d| {
                    for (k, &(i, j)) in at.iter().enumerate() {
                        d[i * c + j] += g[k];
                    }
                })
            }
            Op::Stack(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    acc(*p, &|d| d[0] += g[k]);
                }
            }
            Op::External { parents, local } => {
                for (p, lg) in parents.iter().zip(local) {
                    acc(*p, &|d| {
                        for (d, l) in d.iter_mut().zip(lg.data()) {
                            *d += g[0] * l;
                        }
                    });
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
