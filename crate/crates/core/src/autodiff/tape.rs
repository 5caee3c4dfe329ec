//! Reverse-mode tape: every differentiable operation appends a node holding
//! its output value and the handles of its inputs. `backward` walks the nodes
//! from the loss back to the leaves exactly once.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{CampError, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Elementwise activations and binary ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: S },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Linear { x: Var, w: Var, b: Var },
    Softmax { x: Var, scale: S },
    Log { x: Var, lo: S, hi: S },
    Sum(Var),
    Column { x: Var, j: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherCols { x: Var, cols: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Stack(Vec<Var>),
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape is single-owner; build one per independent computation. Tapes made
/// with [`Tape::inference`] keep values only and never require gradients.
#[derive(Debug)]
pub struct Tape<S> {
    id: u32,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates forward passes without keeping backward state.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id {
            return Err(CampError::Tape(format!(
                "tensor #{} belongs to tape {}, not tape {}",
                v.idx, v.tape, self.id
            )));
        }
        self.nodes
            .get(v.index())
            .ok_or_else(|| CampError::Tape(format!("tensor #{} not on tape", v.idx)))
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    /// Records a leaf tensor. `requires_grad` is ignored on inference tapes.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var { tape: self.id, idx }
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.check(v).expect("var from this tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<S>> {
        self.check(v).map(|n| &n.value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.check(v).ok()?;
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.check(v)?.value;
        if !t.is_matrix() {
            return Err(CampError::InvalidShape(format!(
                "{op} expects a matrix, got {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(CampError::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(CampError::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Matrix product whose inner-axis reduction does not depend on the
    /// order of the `k` terms, so permuting columns of `a` together with rows
    /// of `b` gives bit-identical results. Gradients match [`Tape::matmul`].
    pub fn matmul_canonical(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(CampError::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n);
        let mut terms = Vec::with_capacity(k);
        for i in 0..m {
            for j in 0..n {
                terms.clear();
                terms.extend((0..k).map(|p| ta[i * k + p] * tb[p * n + j]));
                data.push(canonical_sum(&mut terms));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| scale * x + shift);
        Ok(self.push(out, Op::Affine { x: a, scale }, &[a]))
    }

    pub fn scale(&mut self, a: Var, scale: S) -> Result<Var> {
        self.affine(a, scale, S::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.tanh());
        Ok(self.push(out, Op::Tanh(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.max(S::zero()));
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    /// Dispatches one of the [`Pointwise`] kinds; binary kinds require `b`.
    pub fn pointwise(&mut self, kind: Pointwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| CampError::InvalidShape(format!("{kind:?} needs two operands")));
        match kind {
            Pointwise::Sigmoid => self.sigmoid(a),
            Pointwise::Tanh => self.tanh(a),
            Pointwise::Relu => self.relu(a),
            Pointwise::Add => {
                let b = need_b()?;
                self.add(a, b)
            }
            Pointwise::Mul => {
                let b = need_b()?;
                self.mul(a, b)
            }
        }
    }

    /// `w x + b`, with `b` added to every column of the product.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (d_in, n) = self.matrix_dims(x, "linear")?;
        let (d_out, w_in) = self.matrix_dims(w, "linear")?;
        if w_in != d_in {
            return Err(CampError::Shape {
                op: "linear",
                lhs: self.value(w).shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let tb = self.value(b);
        if tb.numel() != d_out || tb.cols() != 1 {
            return Err(CampError::Shape {
                op: "linear bias",
                lhs: self.value(w).shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = matmul_raw(self.value(w).data(), self.value(x).data(), d_out, d_in, n);
        for (i, &bias) in self.value(b).data().iter().enumerate() {
            for v in &mut data[i * n..(i + 1) * n] {
                *v += bias;
            }
        }
        let out = Tensor::new(vec![d_out, n], data)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Row-wise `softmax(m / scale)`. Positions whose mask entry is `false`
    /// get weight exactly zero; `mask` is row-major with one flag per entry.
    pub fn scaled_softmax(&mut self, m: Var, scale: S, mask: Option<&[bool]>) -> Result<Var> {
        if !(scale > S::zero()) || !scale.is_finite() {
            return Err(CampError::Domain(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        let (r, c) = self.matrix_dims(m, "scaled_softmax")?;
        if let Some(mask) = mask {
            if mask.len() != r * c {
                return Err(CampError::Shape {
                    op: "scaled_softmax mask",
                    lhs: vec![r, c],
                    rhs: vec![mask.len()],
                });
            }
        }
        let x = self.value(m).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|mk| mk[i * c + j]);
            let row = &x[i * c..(i + 1) * c];
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    max = max.max(v / scale);
                }
            }
            if max == S::neg_infinity() {
                return Err(CampError::DegenerateRow { row: i });
            }
            let mut terms = Vec::with_capacity(c);
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v / scale - max).exp();
                    out[i * c + j] = e;
                    terms.push(e);
                }
            }
            let total = canonical_sum(&mut terms);
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= total;
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        Ok(self.push(out, Op::Softmax { x: m, scale }, &[m]))
    }

    /// Natural log after clamping to `[lo, hi]`; the gradient is zero where the
    /// clamp is active.
    pub fn clamped_log(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let out = self.check(a)?.value.map(|x| x.max(lo).min(hi).ln());
        Ok(self.push(out, Op::Log { x: a, lo, hi }, &[a]))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Column `j` of a matrix as an `r x 1` tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (_, c) = self.matrix_dims(a, "column")?;
        if j >= c {
            return Err(CampError::InvalidShape(format!("column {j} of a {c}-column matrix")));
        }
        let out = self.value(a).col(j);
        Ok(self.push(out, Op::Column { x: a, j }, &[a]))
    }

    /// Columns of `a` selected (with repetition) by `cols`.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "gather_cols")?;
        if cols.is_empty() || cols.iter().any(|&j| j >= c) {
            return Err(CampError::InvalidShape(format!(
                "column selection {cols:?} invalid for {c} columns"
            )));
        }
        let src = self.value(a);
        let out = Tensor::from_fn(r, cols.len(), |i, k| src.get(i, cols[k]));
        Ok(self.push(
            out,
            Op::GatherCols {
                x: a,
                cols: cols.to_vec(),
            },
            &[a],
        ))
    }

    /// Flat (row-major) entries of `a` as an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = &self.check(a)?.value;
        if idx.is_empty() || idx.iter().any(|&i| i >= src.numel()) {
            return Err(CampError::InvalidShape(format!(
                "gather indices {idx:?} invalid for {} elements",
                src.numel()
            )));
        }
        let out = Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| src.data()[i]).collect())?;
        Ok(self.push(
            out,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CampError::InvalidShape("concat of nothing".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(CampError::Shape {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CampError::InvalidShape("concat of nothing".into()))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(CampError::Shape {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Packs one-element tensors into a tensor of the given shape.
    pub fn stack(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.check(p)?.value;
            if t.numel() != 1 {
                return Err(CampError::InvalidShape(format!(
                    "stack expects one-element tensors, got {:?}",
                    t.shape()
                )));
            }
            data.push(t.item());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Stack(parts.to_vec()), parts))
    }

    /// Cosine similarity of two same-shaped tensors as a `1 x 1` tensor.
    /// A zero operand yields 0 with a warning.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let dot: S = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        let na = norm(ta.data());
        let nb = norm(tb.data());
        let c = if na == S::zero() || nb == S::zero() {
            log::warn!("cosine similarity of a zero vector; defined as 0");
            S::zero()
        } else {
            dot / (na * nb)
        };
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    ///
    /// Gradients from repeated uses of a tensor are summed. Calling backward
    /// again replaces the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.check(loss)?.value;
        if root.numel() != 1 {
            return Err(CampError::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.index()].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.index()] = Some(Tensor::full(root.shape(), S::one()));

        for idx in (0..=loss.index()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Interior gradients stay available for inspection.
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let val = |v: Var| &self.nodes[v.index()].value;
        let mut acc = |v: Var, contrib: Tensor<S>| {
            if !self.nodes[v.index()].requires_grad {
                return;
            }
            match &mut grads[v.index()] {
                Some(existing) => existing.add_assign_unchecked(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let y = &node.value;
        let like = |t: &Tensor<S>, data: Vec<S>| Tensor::new(t.shape().to_vec(), data).expect("shape");

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = matmul_bt_raw(g.data(), tb.data(), m, n, k);
                let gb = matmul_at_raw(ta.data(), g.data(), m, k, n);
                acc(*a, like(ta, ga));
                acc(*b, like(tb, gb));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(&u, &v)| u * v).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(&u, &v)| u * v).collect();
                acc(*a, like(ta, ga));
                acc(*b, like(tb, gb));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * *scale)),
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&u, &s)| u * s * (S::one() - s))
                    .collect();
                acc(*x, like(y, d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&u, &t)| u * (S::one() - t * t))
                    .collect();
                acc(*x, like(y, d));
            }
            Op::Relu(x) => {
                let tx = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&u, &v)| if v > S::zero() { u } else { S::zero() })
                    .collect();
                acc(*x, like(tx, d));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw, tb) = (val(*x), val(*w), val(*b));
                let (d_out, d_in, n) = (tw.rows(), tw.cols(), tx.cols());
                acc(*x, like(tx, matmul_at_raw(tw.data(), g.data(), d_out, d_in, n)));
                acc(*w, like(tw, matmul_bt_raw(g.data(), tx.data(), d_out, n, d_in)));
                let gb = (0..d_out)
                    .map(|i| g.data()[i * n..(i + 1) * n].iter().copied().sum())
                    .collect();
                acc(*b, like(tb, gb));
            }
            Op::Softmax { x, scale } => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = vec![S::zero(); r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot) / *scale;
                    }
                }
                acc(*x, like(y, d));
            }
            Op::Log { x, lo, hi } => {
                let tx = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&u, &v)| if v < *lo || v > *hi { S::zero() } else { u / v })
                    .collect();
                acc(*x, like(tx, d));
            }
            Op::Sum(x) => {
                let tx = val(*x);
                acc(*x, Tensor::full(tx.shape(), g.item()));
            }
            Op::Column { x, j } => {
                let tx = val(*x);
                let mut d = Tensor::zeros(tx.shape());
                for i in 0..tx.rows() {
                    d.set(i, *j, g.data()[i]);
                }
                acc(*x, d);
            }
            Op::GatherCols { x, cols } => {
                let tx = val(*x);
                let mut d = Tensor::zeros(tx.shape());
                let k = cols.len();
                for i in 0..tx.rows() {
                    for (p, &j) in cols.iter().enumerate() {
                        let cur = d.get(i, j);
                        d.set(i, j, cur + g.data()[i * k + p]);
                    }
                }
                acc(*x, d);
            }
            Op::Gather { x, idx } => {
                let tx = val(*x);
                let mut d = Tensor::zeros(tx.shape());
                for (p, &i) in idx.iter().enumerate() {
                    d.data_mut()[i] += g.data()[p];
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.cols();
                    let r = tp.rows();
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, like(tp, d));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let n = tp.numel();
                    acc(p, like(tp, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    let tp = val(p);
                    acc(p, like(tp, vec![g.data()[k]]));
                }
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (norm(ta.data()), norm(tb.data()));
                if na == S::zero() || nb == S::zero() {
                    return;
                }
                let c = y.item();
                let gv = g.item();
                let inv = S::one() / (na * nb);
                let ga = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &z)| gv * (z * inv - c * x / (na * na)))
                    .collect();
                let gb = tb
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&z, &x)| gv * (x * inv - c * z / (nb * nb)))
                    .collect();
                acc(*a, like(ta, ga));
                acc(*b, like(tb, gb));
            }
        }
    }
}

/// Logistic function, kept strictly inside `(0, 1)` even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    let top = S::one() - S::epsilon() / S::lit(2.0);
    y.max(S::min_positive_value()).min(top)
}

/// Sums in ascending order so the result depends only on the multiset of terms.
pub(crate) fn canonical_sum<S: Scalar>(terms: &mut [S]) -> S {
    terms.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().fold(S::zero(), |acc, &t| acc + t)
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}
