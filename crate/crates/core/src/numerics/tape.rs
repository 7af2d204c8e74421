//! Tensor-level reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes created before it.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm, Tensor};
use crate::blocks::TailPadding;
use crate::cowkv;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    ClampMin(Var, f64),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SumRows(Var),
    Broadcast(Var),
    Reshape(Var),
    NormalizeLast { x: Var, eps: f64 },
    TokenShift { x: Var, mix: Var },
    CoWkv { k: Var, v: Var, w: Var, u: Var },
    CoverWindows { x: Var, cover: usize, pad: TailPadding },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations on tensors for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// `small` broadcasts against `big` when it is a suffix of `big`'s shape.
fn broadcasts(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `[.., T, C]` -> (sequences, T, C).
fn seq_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(alloc::format!("{op} expects [.., T, C], got {shape:?}")));
    }
    let c = shape[shape.len() - 1];
    let t = shape[shape.len() - 2];
    Ok((shape[..shape.len() - 2].iter().product(), t, c))
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

    /// Adds an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, kind: Op, inputs: &[Var]) -> Result<Var> {
        let value = Tensor::checked(op, shape, data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, op: &'static str, x: Var, kind: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(op, shape, data, kind, &[x])
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        kind: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcasts(ta.shape(), tb.shape()) {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let data = if bd.is_empty() {
            Vec::new()
        } else {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % bd.len()]))
                .collect()
        };
        let shape = ta.shape().to_vec();
        self.push(op, shape, data, kind, &[a, b])
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let shape = out.shape().to_vec();
        self.push("matmul", shape, out.into_data(), Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), libm::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), libm::log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.unary("clamp_min", x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let lead = {
            let s = self.shape(*first);
            if s.is_empty() {
                return Err(invalid("concat of scalars"));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, data, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let w = t.last_dim();
        if t.rank() == 0 || start + len > w {
            return Err(invalid(alloc::format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.push("slice_last", shape, data, Op::Slice { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Vec::new(), vec![m], Op::Mean(x), &[x])
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::Empty("variance"));
        }
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        let v = t.data().iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
        self.push("variance", Vec::new(), vec![v], Op::Variance(x), &[x])
    }

    /// Sum over every leading axis: `[.., C] -> [C]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        let mut acc = vec![0.0; c];
        for row in t.data().chunks(c.max(1)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        self.push("sum_rows", vec![c], acc, Op::SumRows(x), &[x])
    }

    /// Repeats `x` over new leading axes so its shape becomes `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if !broadcasts(shape, t.shape()) {
            return Err(mismatch("broadcast", shape, t.shape()));
        }
        let n: usize = shape.iter().product();
        let d = t.data();
        let data = if d.is_empty() {
            Vec::new()
        } else {
            (0..n).map(|i| d[i % d.len()]).collect()
        };
        self.push("broadcast", shape.to_vec(), data, Op::Broadcast(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshape(shape)?;
        self.push("reshape", shape.to_vec(), out.into_data(), Op::Reshape(x), &[x])
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        if c == 0 {
            return Err(Error::Empty("normalize_last"));
        }
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let (mean, inv) = row_stats(row, eps);
            data.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let shape = t.shape().to_vec();
        self.push("normalize_last", shape, data, Op::NormalizeLast { x, eps }, &[x])
    }

    /// `out_t = mix ⊙ x_t + (1 - mix) ⊙ x_{t-1}` with `x_{-1} = 0`.
    pub fn token_shift(&mut self, x: Var, mix: Var) -> Result<Var> {
        let (tx, tm) = (&self.nodes[x.0].value, &self.nodes[mix.0].value);
        let (seqs, len, c) = seq_dims(tx.shape(), "token_shift")?;
        if tm.shape() != [c] {
            return Err(mismatch("token_shift", tx.shape(), tm.shape()));
        }
        let (xd, md) = (tx.data(), tm.data());
        let mut data = vec![0.0; xd.len()];
        for s in 0..seqs {
            for t in 0..len {
                let base = (s * len + t) * c;
                for j in 0..c {
                    let prev = if t == 0 { 0.0 } else { xd[base - c + j] };
                    data[base + j] = md[j] * xd[base + j] + (1.0 - md[j]) * prev;
                }
            }
        }
        let shape = tx.shape().to_vec();
        self.push("token_shift", shape, data, Op::TokenShift { x, mix }, &[x, mix])
    }

    /// Contextual-WKV over `[.., T, C]` keys and values with `[C]` decay and bonus.
    pub fn cowkv(&mut self, k: Var, v: Var, w: Var, u: Var) -> Result<Var> {
        if self.shape(k) != self.shape(v) {
            return Err(mismatch("cowkv", self.shape(k), self.shape(v)));
        }
        let out = cowkv::scan_raw(
            self.shape(k),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[u.0].value.data(),
        )?;
        let shape = self.shape(k).to_vec();
        self.push("cowkv", shape, out, Op::CoWkv { k, v, w, u }, &[k, v, w, u])
    }

    /// `[.., T] -> [.., T, cover]` overlapping forward windows.
    pub fn cover_windows(&mut self, x: Var, cover: usize, pad: TailPadding) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if cover == 0 {
            return Err(invalid("cover length must be >= 1"));
        }
        if t.rank() == 0 || t.last_dim() == 0 {
            return Err(Error::Empty("cover_windows"));
        }
        let len = t.last_dim();
        let mut data = Vec::with_capacity(t.len() * cover);
        for row in t.data().chunks(len) {
            for i in 0..len {
                for j in 0..cover {
                    data.push(match (row.get(i + j), pad) {
                        (Some(&v), _) => v,
                        (None, TailPadding::Zero) => 0.0,
                        (None, TailPadding::Replicate) => row[len - 1],
                    });
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.push(cover);
        self.push("cover_windows", shape, data, Op::CoverWindows { x, cover, pad }, &[x])
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient of
    /// every leaf that requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Tensor::checked("backward", node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), tb.shape()[0], tb.shape()[1]);
                if needs(*a) {
                    let ga = slot(grads, *a, ta.len());
                    gemm(m, n, k, g, false, tb.data(), true, ga, 1.0);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, tb.len());
                    gemm(k, m, n, ta.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let n = val(*b).len();
                    let gb = slot(grads, *b, n);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let n = bd.len();
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[i % n];
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, n);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi * ad[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.len());
                for (a, &gi) in gx.iter_mut().zip(g) {
                    *a += s * gi;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Exp(x) => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i];
                }
            }
            Op::Log(x) => {
                let xd = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xd[i];
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Square(x) => {
                let xd = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += 2.0 * xd[i] * g[i];
                }
            }
            Op::ClampMin(x, lo) => {
                let xd = val(*x);
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > *lo {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = if total == 0 { 0 } else { g.len() / total };
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if needs(*p) {
                        let gp = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let tx = &self.nodes[x.0].value;
                let (w, len) = (tx.last_dim(), node.value.last_dim());
                let gx = slot(grads, *x, tx.len());
                for (r, gr) in g.chunks(len.max(1)).enumerate() {
                    add_into(&mut gx[r * w + start..r * w + start + len], gr);
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, val(*x).len());
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                let s = g[0] / n as f64;
                gx.iter_mut().for_each(|a| *a += s);
            }
            Op::Variance(x) => {
                let xd = val(*x);
                let n = xd.len() as f64;
                let m = xd.iter().sum::<f64>() / n;
                let gx = slot(grads, *x, xd.len());
                for i in 0..xd.len() {
                    gx[i] += g[0] * 2.0 * (xd[i] - m) / n;
                }
            }
            Op::SumRows(x) => {
                let n = val(*x).len();
                let c = g.len();
                let gx = slot(grads, *x, n);
                for (i, a) in gx.iter_mut().enumerate() {
                    *a += g[i % c];
                }
            }
            Op::Broadcast(x) => {
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for (i, &gi) in g.iter().enumerate() {
                    gx[i % n] += gi;
                }
            }
            Op::NormalizeLast { x, eps } => {
                let xd = val(*x);
                let c = node.value.last_dim();
                let gx = slot(grads, *x, xd.len());
                for (r, row) in xd.chunks(c).enumerate() {
                    let (_, inv) = row_stats(row, *eps);
                    let y = &out[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] += inv * (gr[j] - mg - y[j] * mgy);
                    }
                }
            }
            Op::TokenShift { x, mix } => {
                let (seqs, len, c) = seq_dims(node.value.shape(), "token_shift")?;
                let (xd, md) = (val(*x), val(*mix));
                if needs(*x) {
                    let gx = slot(grads, *x, xd.len());
                    for s in 0..seqs {
                        for t in 0..len {
                            let base = (s * len + t) * c;
                            for j in 0..c {
                                let mut acc = md[j] * g[base + j];
                                if t + 1 < len {
                                    acc += (1.0 - md[j]) * g[base + c + j];
                                }
                                gx[base + j] += acc;
                            }
                        }
                    }
                }
                if needs(*mix) {
                    let gm = slot(grads, *mix, c);
                    for s in 0..seqs {
                        for t in 0..len {
                            let base = (s * len + t) * c;
                            for j in 0..c {
                                let prev = if t == 0 { 0.0 } else { xd[base - c + j] };
                                gm[j] += g[base + j] * (xd[base + j] - prev);
                            }
                        }
                    }
                }
            }
            Op::CoWkv { k, v, w, u } => {
                let raw = cowkv::grad_raw(
                    node.value.shape(),
                    val(*k),
                    val(*v),
                    val(*w),
                    val(*u),
                    g,
                )?;
                for (var, gr) in [(*k, raw.k), (*v, raw.v), (*w, raw.decay), (*u, raw.bonus)] {
                    if needs(var) {
                        add_into(slot(grads, var, gr.len()), &gr);
                    }
                }
            }
            Op::CoverWindows { x, cover, pad } => {
                let tx = &self.nodes[x.0].value;
                let len = tx.last_dim();
                let gx = slot(grads, *x, tx.len());
                for (r, gr) in g.chunks(len * cover).enumerate() {
                    let row = &mut gx[r * len..(r + 1) * len];
                    for i in 0..len {
                        for j in 0..*cover {
                            let gi = gr[i * cover + j];
                            if i + j < len {
                                row[i + j] += gi;
                            } else if *pad == TailPadding::Replicate {
                                row[len - 1] += gi;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / libm::sqrt(var + eps))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
