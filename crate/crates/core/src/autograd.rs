//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node holding its output value. Node order is a
//! topological order, so the backward sweep walks the tape from the end and
//! visits each node once. Only nodes that descend from a learnable leaf take
//! part in the sweep.

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Silu(Var),
    Gelu(Var),
    Conv2d { x: Var, w: Var, spec: ConvSpec, b: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, rows: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mse { pred: Var, target: Tensor },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn row_len(row: &Tensor) -> Result<usize> {
    match row.shape() {
        [n] | [1, n] => Ok(*n),
        s => Err(Error::dim(format!("expected a row vector, got {s:?}"))),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(value), op, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// A learnable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), a_t, self.value(b), b_t)?;
        Ok(self.push_op(out, Op::MatMul { a, b, a_t, b_t }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + row`, broadcasting the row over every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, |a, b| a + b)?;
        Ok(self.push_op(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x * row`, broadcasting the row over every last-axis slice of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, |a, b| a * b)?;
        Ok(self.push_op(out, Op::MulRow(x, row), &[x, row]))
    }

    fn row_broadcast(&self, x: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let xv = self.value(x);
        let rv = self.value(row);
        let n = row_len(rv)?;
        if xv.last_dim() != n {
            return Err(Error::dim(format!(
                "row of length {n} does not broadcast over {:?}",
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (a, &b) in chunk.iter_mut().zip(rv.data()) {
                *a = f(*a, b);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis. The mask is a constant and receives no
    /// gradient.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x), mask)?;
        Ok(self.push_op(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (out, inv_std) = ops::layer_norm(self.value(x), eps);
        self.push_op(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::silu);
        self.push_op(out, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::gelu);
        self.push_op(out, Op::Gelu(x), &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push_op(out, Op::Conv2d { x, w, spec, b }, &[x, w, b]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::dim(format!(
                "column slice {start}..{} exceeds {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.push_op(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of nothing"));
        };
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows of a `[n, d]` table, stacked into `[rows.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::input(format!("row {r} out of range for table of {n}")));
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push_op(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2d()?;
        Ok(self.push_op(out, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "mse shapes differ: {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push_op(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.get();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.requires_grad(a) {
                    // C = op(A) op(B): d op(A) = G op(B)^T
                    let da = if a_t {
                        ops::matmul_t(bv, b_t, g, true)?
                    } else {
                        ops::matmul_t(g, false, bv, !b_t)?
                    };
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let db = if b_t {
                        ops::matmul_t(g, true, av, a_t)?
                    } else {
                        ops::matmul_t(av, !a_t, g, false)?
                    };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, g.clone());
                if self.requires_grad(row) {
                    let rv = self.value(row);
                    let n = rv.len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, row, Tensor::new(rv.shape().to_vec(), dr)?);
                }
            }
            &Op::MulRow(x, row) => {
                let rv = self.value(row);
                let n = rv.len();
                if self.requires_grad(x) {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(n) {
                        for (d, r) in chunk.iter_mut().zip(rv.data()) {
                            *d *= r;
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.requires_grad(row) {
                    let xv = self.value(x);
                    let mut dr = vec![0.0; n];
                    for (gc, xc) in g.data().chunks(n).zip(xv.data().chunks(n)) {
                        for ((d, gv), xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += gv * xv;
                        }
                    }
                    self.accumulate(grads, row, Tensor::new(rv.shape().to_vec(), dr)?);
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::Softmax(x) => self.accumulate(grads, x, ops::softmax_backward(out, g)),
            Op::LayerNorm { x, inv_std } => {
                self.accumulate(grads, *x, ops::layer_norm_backward(out, inv_std, g));
            }
            &Op::Silu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| gv * ops::silu_grad(xv))?;
                self.accumulate(grads, x, dx);
            }
            &Op::Gelu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| gv * ops::gelu_grad(xv))?;
                self.accumulate(grads, x, dx);
            }
            &Op::Conv2d { x, w, spec, b } => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(x), self.value(w), spec, g)?;
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                self.accumulate(grads, b, db);
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2()?;
                let (_, len) = g.dims2()?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, x, Tensor::new(vec![r, c], dx)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![r, w], dp)?);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, rows } => {
                let tv = self.value(*table);
                let (_, d) = tv.dims2()?;
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dt.data_mut()[r * d..(r + 1) * d];
                    for (a, b) in dst.iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshape(&shape)?);
            }
            &Op::Transpose(x) => self.accumulate(grads, x, g.transpose2d()?),
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::full(&shape, g.data()[0]));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let k = 2.0 * g.data()[0] / p.len().max(1) as f64;
                self.accumulate(grads, *pred, p.zip_map(target, |a, b| k * (a - b))?);
            }
        }
        Ok(())
    }
}
