//! Dynamic-tape reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are created from
//! [`Tensor`]s; calling [`Graph::backward`] on a scalar node walks the tape in reverse
//! and accumulates gradients into every leaf that requires them. Gradients keep
//! accumulating across backward calls until [`Graph::zero_grad`].
//!
//! Tensors have rank 0 (scalar), 1 or 2. Binary ops broadcast a rank-1 right operand
//! across the rows of a rank-2 left operand (`add`) and a scalar right operand over
//! anything (`mul`).

use std::collections::HashMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::num::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("update {step} outside [0, {total}]")]
    OutOfRangeStep { step: u64, total: u64 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() || shape.contains(&0) || shape.len() > 2 {
            return Err(AutodiffError::ShapeMismatch { op: "tensor", lhs: shape, rhs: vec![values.len()] });
        }
        Ok(Self { shape, values, grad: None, requires_grad: false })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], values: vec![v], grad: None, requires_grad: false }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self { shape: vec![values.len()], values, grad: None, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![T::zero(); n], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Embedding(Var, Vec<usize>),
    Transpose(Var),
    GradReverse(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations built during one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(values: &[T], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite(op))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a leaf (absent until a backward pass reaches it).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        check_finite(&values, name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::MeanAxis(a, _)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::GradReverse(a, _)
            | Op::Embedding(a, _) => self.nodes[a.0].needs_grad,
            Op::Concat(parts, _) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        let value = Tensor { shape, values, grad: None, requires_grad: false };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn as_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(mismatch(op, s, &[])),
        }
    }

    /// `[m, k] × [k, n] → [m, n]`; a rank-1 left operand is treated as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul")?;
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(mismatch("matmul", self.shape(a), bs));
        }
        let n = bs[1];
        let av = &self.nodes[a.0].value.values;
        let bv = &self.nodes[b.0].value.values;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o = *o + x * *y;
                }
            }
        }
        let shape = if self.shape(a).len() == 1 { vec![n] } else { vec![m, n] };
        self.push(shape, out, Op::MatMul(a, b), "matmul")
    }

    /// Elementwise sum; a rank-1 `b` is broadcast over the rows of a rank-2 `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = &self.nodes[a.0].value.values;
        let bv = &self.nodes[b.0].value.values;
        let out: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(x, y)| *x + *y).collect()
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            av.iter().enumerate().map(|(i, x)| *x + bv[i % sb[0]]).collect()
        } else {
            return Err(mismatch("add", &sa, &sb));
        };
        self.push(sa, out, Op::Add(a, b), "add")
    }

    /// Elementwise product; a scalar `b` multiplies every element of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = &self.nodes[a.0].value.values;
        let bv = &self.nodes[b.0].value.values;
        let out: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(x, y)| *x * *y).collect()
        } else if sb.is_empty() {
            av.iter().map(|x| *x * bv[0]).collect()
        } else {
            return Err(mismatch("mul", &sa, &sb));
        };
        self.push(sa, out, Op::Mul(a, b), "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.nodes[a.0].value.values.iter().map(|x| *x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.values.iter().map(|x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.values.iter().map(|x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), "tanh")
    }

    fn rowwise(&self, a: Var) -> (usize, usize) {
        let t = &self.nodes[a.0].value;
        (t.len() / t.cols(), t.cols())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rowwise(a);
        let av = &self.nodes[a.0].value.values;
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|x| (*x - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            out.extend(exps.into_iter().map(|e| e / z));
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), "softmax")
    }

    /// `log(softmax(a))` over the last axis, computed stably.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rowwise(a);
        let av = &self.nodes[a.0].value.values;
        let mut out = Vec::with_capacity(av.len());
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|x| *x - lse));
        }
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), "log_softmax")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.values.iter().map(|x| x.ln()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Log(a), "log")
    }

    /// Mean of a rank-2 tensor over `axis` (0: over rows, 1: over columns), or of a
    /// rank-1 tensor over its only axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let av = &self.nodes[a.0].value.values;
        let (shape, out) = match (s.len(), axis) {
            (1, 0) => (vec![], vec![av.iter().copied().sum::<T>() / T::from_usize_lossy(s[0])]),
            (2, 0) => {
                let (m, n) = (s[0], s[1]);
                let mut out = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        out[c] = out[c] + av[r * n + c];
                    }
                }
                let d = T::from_usize_lossy(m);
                (vec![n], out.into_iter().map(|x| x / d).collect())
            }
            (2, 1) => {
                let (m, n) = (s[0], s[1]);
                let d = T::from_usize_lossy(n);
                (vec![m], (0..m).map(|r| av[r * n..(r + 1) * n].iter().copied().sum::<T>() / d).collect())
            }
            _ => return Err(mismatch("mean_axis", &s, &[axis])),
        };
        self.push(shape, out, Op::MeanAxis(a, axis), "mean_axis")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.values.iter().copied().sum();
        self.push(vec![], vec![total], Op::Sum(a), "sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Concatenation along `axis` (0 joins rows, 1 joins columns; rank-1 joins along 0).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| mismatch("concat", &[], &[]))?).to_vec();
        let mut values = Vec::new();
        let shape = match (first.len(), axis) {
            (1, 0) => {
                for p in parts {
                    if self.shape(*p).len() != 1 {
                        return Err(mismatch("concat", &first, self.shape(*p)));
                    }
                    values.extend_from_slice(&self.nodes[p.0].value.values);
                }
                vec![values.len()]
            }
            (2, 0) => {
                let mut rows = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if s.len() != 2 || s[1] != first[1] {
                        return Err(mismatch("concat", &first, s));
                    }
                    rows += s[0];
                    values.extend_from_slice(&self.nodes[p.0].value.values);
                }
                vec![rows, first[1]]
            }
            (2, 1) => {
                let mut cols = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if s.len() != 2 || s[0] != first[0] {
                        return Err(mismatch("concat", &first, s));
                    }
                    cols += s[1];
                }
                for r in 0..first[0] {
                    for p in parts {
                        let t = &self.nodes[p.0].value;
                        let c = t.shape[1];
                        values.extend_from_slice(&t.values[r * c..(r + 1) * c]);
                    }
                }
                vec![first[0], cols]
            }
            _ => return Err(mismatch("concat", &first, &[axis])),
        };
        self.push(shape, values, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// Gathers rows of a rank-2 table: `[V, d]` with `n` ids gives `[n, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(mismatch("embedding", &s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        let tv = &self.nodes[table.0].value.values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::IndexOutOfRange { index: id, len: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(vec![ids.len(), d], out, Op::Embedding(table, ids.to_vec()), "embedding")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.as_matrix(a, "transpose")?;
        let av = &self.nodes[a.0].value.values;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a), "transpose")
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn grl(&mut self, x: Var, lambda: T) -> Result<Var> {
        let out = self.nodes[x.0].value.values.clone();
        self.push(self.shape(x).to_vec(), out, Op::GradReverse(x, lambda), "grl")
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            check_finite(&g, "backward")?;
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate(&g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut adj);
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], to: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        let slot = adj[to.0].get_or_insert_with(|| vec![T::zero(); self.nodes[to.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, i: usize, op: &Op<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value.values;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.as_matrix(*a, "matmul").expect("checked in forward");
                let n = self.shape(*b)[1];
                let av = &self.nodes[a.0].value.values;
                let bv = &self.nodes[b.0].value.values;
                self.send(adj, *a, |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let dot: T = grow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
                            ga[r * k + p] = ga[r * k + p] + dot;
                        }
                    }
                });
                self.send(adj, *b, |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + x * *y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.send(adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y));
                let nb = self.nodes[b.0].value.len();
                self.send(adj, *b, |gb| {
                    for (idx, y) in g.iter().enumerate() {
                        gb[idx % nb] = gb[idx % nb] + *y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.values;
                let bv = &self.nodes[b.0].value.values;
                let scalar_b = bv.len() == 1 && self.shape(*b).is_empty();
                self.send(adj, *a, |ga| {
                    for (idx, y) in g.iter().enumerate() {
                        let f = if scalar_b { bv[0] } else { bv[idx] };
                        ga[idx] = ga[idx] + *y * f;
                    }
                });
                self.send(adj, *b, |gb| {
                    if scalar_b {
                        let s: T = g.iter().zip(av).map(|(y, x)| *y * *x).sum();
                        gb[0] = gb[0] + s;
                    } else {
                        for (idx, y) in g.iter().enumerate() {
                            gb[idx] = gb[idx] + *y * av[idx];
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.send(adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y * *c)),
            Op::GradReverse(a, lambda) => {
                let factor = -*lambda;
                self.send(adj, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y * factor))
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value.values;
                self.send(adj, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > T::zero() {
                            *x = *x + *y;
                        }
                    }
                })
            }
            Op::Tanh(a) => self.send(adj, *a, |ga| {
                for ((x, y), t) in ga.iter_mut().zip(g).zip(out) {
                    *x = *x + *y * (T::one() - *t * *t);
                }
            }),
            Op::Softmax(a) => {
                let (rows, cols) = self.rowwise(*a);
                self.send(adj, *a, |ga| {
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let dot: T = g[sl.clone()].iter().zip(&out[sl.clone()]).map(|(y, p)| *y * *p).sum();
                        for j in sl {
                            ga[j] = ga[j] + out[j] * (g[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = self.rowwise(*a);
                self.send(adj, *a, |ga| {
                    for r in 0..rows {
                        let sl = r * cols..(r + 1) * cols;
                        let total: T = g[sl.clone()].iter().copied().sum();
                        for j in sl {
                            ga[j] = ga[j] + g[j] - out[j].exp() * total;
                        }
                    }
                })
            }
            Op::Log(a) => {
                let av = &self.nodes[a.0].value.values;
                self.send(adj, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        *x = *x + *y / *v;
                    }
                })
            }
            Op::MeanAxis(a, axis) => {
                let s = self.shape(*a).to_vec();
                self.send(adj, *a, |ga| match (s.len(), *axis) {
                    (1, _) => {
                        let d = g[0] / T::from_usize_lossy(s[0]);
                        ga.iter_mut().for_each(|x| *x = *x + d);
                    }
                    (_, 0) => {
                        let (m, n) = (s[0], s[1]);
                        let inv = T::one() / T::from_usize_lossy(m);
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] = ga[r * n + c] + g[c] * inv;
                            }
                        }
                    }
                    _ => {
                        let (m, n) = (s[0], s[1]);
                        let inv = T::one() / T::from_usize_lossy(n);
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] = ga[r * n + c] + g[r] * inv;
                            }
                        }
                    }
                })
            }
            Op::Sum(a) => self.send(adj, *a, |ga| ga.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Concat(parts, axis) => {
                let out_shape = &self.nodes[i].value.shape;
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        self.send(adj, *p, |gp| {
                            gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, y)| *x = *x + *y)
                        });
                        offset += len;
                    }
                } else {
                    let total_cols = out_shape[1];
                    let mut col0 = 0;
                    for p in parts {
                        let c = self.shape(*p)[1];
                        let rows = out_shape[0];
                        self.send(adj, *p, |gp| {
                            for r in 0..rows {
                                for j in 0..c {
                                    gp[r * c + j] = gp[r * c + j] + g[r * total_cols + col0 + j];
                                }
                            }
                        });
                        col0 += c;
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = self.shape(*table)[1];
                self.send(adj, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                })
            }
            Op::Transpose(a) => {
                let (m, n) = self.as_matrix(*a, "transpose").expect("checked in forward");
                self.send(adj, *a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] = ga[r * n + c] + g[c * m + r];
                        }
                    }
                })
            }
        }
    }
}

/// Gradient-reversal strength: fixed, or `2 / (1 + exp(-gamma * p)) - 1` with `p` the
/// fraction of updates done.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSchedule {
    pub gamma: f64,
    pub total_updates: u64,
    pub fixed_lambda: Option<f64>,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { gamma: 10.0, total_updates: 2_000, fixed_lambda: None }
    }
}

impl LambdaSchedule {
    pub fn fixed(lambda: f64) -> Self {
        Self { fixed_lambda: Some(lambda), ..Self::default() }
    }

    pub fn lambda_at(&self, updates_done: u64) -> Result<f64> {
        if updates_done > self.total_updates {
            return Err(AutodiffError::OutOfRangeStep { step: updates_done, total: self.total_updates });
        }
        if let Some(l) = self.fixed_lambda {
            return Ok(l);
        }
        let p = updates_done as f64 / self.total_updates.max(1) as f64;
        Ok(2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0)
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, updates_done: u64) -> Result<f64> {
    schedule.lambda_at(updates_done)
}

/// Ordered set of named tensors: model parameters, optimizer moments, checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// True when both sets hold the same names, in order, with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, x), (b, y))| a == b && x.shape == y.shape)
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for d in &t.shape {
                out.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in &t.values {
                out.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        fn u32_of(input: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(AutodiffError::MalformedCheckpoint("bad magic".into()));
        }
        let count = u32_of(&mut input)?;
        let mut set = Self::new();
        for _ in 0..count {
            let name_len = u32_of(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| AutodiffError::MalformedCheckpoint("name not UTF-8".into()))?;
            let rank = u32_of(&mut input)? as usize;
            if rank > 2 {
                return Err(AutodiffError::MalformedCheckpoint(format!("rank {rank} for {name}")));
            }
            let dims = (0..rank).map(|_| u32_of(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 8];
            input.read_exact(&mut raw)?;
            let values = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
            set.insert(name, Tensor::new(dims, values)?);
        }
        Ok(set)
    }
}
