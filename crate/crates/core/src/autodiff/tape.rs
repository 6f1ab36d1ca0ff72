//! Gradient tape: primitive operations are appended in evaluation order and
//! replayed in reverse by [`Tape::backward`].

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSumExpRows { x: Var, mask: Option<Vec<bool>> },
    PickColumns { x: Var, cols: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape. Inputs of every node precede it, so the
/// node list is a topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not influence the output through a
    /// differentiable path (constants, detached branches).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Elementwise `a + b`. `b` may also be a row vector (`[1, C]` or `[C]`)
    /// broadcast over the rows of an `[R, C]` matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary_broadcast(a, b, "add", |x, y| x + y)?;
        let value = Tensor::checked(self.value(a).shape().to_vec(), data, "add")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise `a - b` with the same broadcast rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary_broadcast(a, b, "sub", |x, y| x - y)?;
        let value = Tensor::checked(self.value(a).shape().to_vec(), data, "sub")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "mul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        let value = Tensor::checked(value.shape().to_vec(), value.into_data(), "scale")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + offset);
        let value = Tensor::checked(value.shape().to_vec(), value.into_data(), "add_scalar")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let value = Tensor::checked(value.shape().to_vec(), value.into_data(), "exp")?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Exp(a), rg))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                value: bad,
            });
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Tanh(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - max).exp();
                total += *dst;
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(a), rg))
    }

    /// Row-wise `log Σ_j exp(x_ij)` over the columns selected by `mask`
    /// (all columns when `None`). Output shape `[R, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.dims2(a, "logsumexp_rows")?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::ShapeMismatch {
                    op: "logsumexp_rows",
                    left: vec![r, c],
                    right: vec![m.len()],
                });
            }
        }
        let x = self.value(a).data();
        let included = |idx: usize| mask.as_ref().map_or(true, |m| m[idx]);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let max = (0..c)
                .filter(|&j| included(i * c + j))
                .map(|j| x[i * c + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "logsumexp_rows: row {i} has no selected entries"
                )));
            }
            let total = sum_sorted(
                (0..c)
                    .filter(|&j| included(i * c + j))
                    .map(|j| (x[i * c + j] - max).exp())
                    .collect(),
            );
            out.push(max + total.ln());
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![r, 1], out),
            Op::LogSumExpRows { x: a, mask },
            rg,
        ))
    }

    /// Gather `x[i, cols[i]]` for every row. Output shape `[R, 1]`.
    pub fn pick_columns(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims2(a, "pick_columns")?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::ShapeMismatch {
                op: "pick_columns",
                left: vec![r, c],
                right: vec![cols.len()],
            });
        }
        let x = self.value(a);
        let out = cols.iter().enumerate().map(|(i, &j)| x.get(i, j)).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![r, 1], out),
            Op::PickColumns { x: a, cols },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyBatch);
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: vec![r, pc],
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyBatch);
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r],
                    right: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Row sums, output `[R, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "sum_rows")?;
        let x = self.value(a).data();
        let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(vec![r, 1], out), Op::SumRows(a), rg))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![total]), Op::Sum(a), rg))
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let m = sum_sorted(t.data().to_vec()) / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(Vec::new(), vec![m]), Op::Mean(a), rg))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "l2_normalize_rows")?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { row: i, norm });
            }
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormalizeRows { x: a, norms },
            rg,
        ))
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    fn binary_broadcast(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect());
        }
        if is_row_broadcast(ta, tb) {
            let c = ta.cols();
            return Ok(ta
                .data()
                .iter()
                .enumerate()
                .map(|(idx, &x)| f(x, tb.data()[idx % c]))
                .collect());
        }
        Err(Error::ShapeMismatch {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        })
    }

    /// Reverse pass from a scalar `output`. A tape supports exactly one
    /// backward pass; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: out_value.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|d| Tensor::from_parts(node.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Matmul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let bt = tb.transpose().expect("rank checked in forward");
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let at = ta.transpose().expect("rank checked in forward");
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut db, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.to_vec());
                let tb = self.value(*b);
                let db = if tb.numel() == g.len() {
                    g.iter().map(|v| sign * v).collect()
                } else {
                    let c = tb.numel();
                    let mut acc = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % c] += sign * v;
                    }
                    acc
                };
                self.accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(xb).map(|(g, x)| g * x).collect());
                self.accumulate(grads, *b, g.iter().zip(xa).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Tanh(a) => self.accumulate(
                grads,
                *a,
                g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let s = i * c..(i + 1) * c;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(g, y)| g * y).sum();
                    for j in s {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSumExpRows { x, mask } => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let xd = tx.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        if mask.as_ref().map_or(true, |m| m[k]) {
                            dx[k] = g[i] * (xd[k] - y[i]).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PickColumns { x, cols } => {
                let c = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut col0 = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + col0..i * total + col0 + pc]);
                    }
                    self.accumulate(grads, *p, dp);
                    col0 += pc;
                }
            }
            Op::SumRows(a) => {
                let c = self.value(*a).cols();
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, (0..n).map(|k| g[k / c]).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let s = i * c..(i + 1) * c;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(g, y)| g * y).sum();
                    for k in s {
                        dx[k] = (g[k] - y[k] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    a.is_matrix()
        && b.numel() == a.cols()
        && match b.shape() {
            [c] => *c == a.cols(),
            [1, c] => *c == a.cols(),
            _ => false,
        }
}


/// Sum in ascending order, so the result does not depend on the order the
/// terms arrive in (and small terms are not swamped early).
fn sum_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}
