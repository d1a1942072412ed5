//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the reverse sweep visits each node once.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set exposed through [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Scale(f64),
    Sigmoid,
    Softmax,
    L2Normalize,
    CosineSim,
    /// Two-class softmax cross-entropy against the given target index.
    CrossEntropy2Class(usize),
    Entropy,
    SqL2Dist,
    Hinge,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CosineSim => "cosine_sim",
            OpKind::CrossEntropy2Class(_) => "cross_entropy_2class",
            OpKind::Entropy => "entropy",
            OpKind::SqL2Dist => "sq_l2_dist",
            OpKind::Hinge => "hinge",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Hinge(Var),
    Softmax(Var),
    L2Normalize(Var, Vec<f64>),
    CosineSim(Var, Var),
    CrossEntropy(Var, usize),
    Entropy(Var),
    SqL2Dist(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    MeanRows(Var),
    Rows(Var, usize, usize),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    consumed: bool,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.by_name.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Largest absolute gradient entry across all parameters.
    pub fn max_abs(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn shape_err(kind: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::ShapeMismatch {
        kind,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        kind: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { kind });
        }
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// A named trainable leaf. Registering the same name twice returns the
    /// existing node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var, DiffError> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let v = self.push("param", t.clone(), Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Dispatches one of the listed primitives by kind.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, DiffError> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::CosineSim | OpKind::SqL2Dist => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(DiffError::Arity {
                kind: kind.name(),
                expected: arity,
                got: inputs.len(),
            });
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Scale(c) => self.scale(inputs[0], c),
            OpKind::Sigmoid => self.sigmoid(inputs[0]),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::L2Normalize => self.l2_normalize(inputs[0]),
            OpKind::CosineSim => self.cosine_sim(inputs[0], inputs[1]),
            OpKind::CrossEntropy2Class(y) => self.cross_entropy_2class(inputs[0], y),
            OpKind::Entropy => self.entropy(inputs[0]),
            OpKind::SqL2Dist => self.sq_l2_dist(inputs[0], inputs[1]),
            OpKind::Hinge => self.hinge(inputs[0]),
        }
    }

    /// `[m×k]·[k×n]`; a rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, vec_out) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(shape_err("matmul", &[sa, sb])),
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let shape = if vec_out { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum; a rank-1 right operand is broadcast over the rows
    /// of a matrix left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        if ta.shape() == tb.shape() {
            let out = ta.zip_map(tb, |x, y| x + y);
            return self.push("add", out, Op::Add(a, b), rg);
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.shape()[1] == tb.shape()[0] {
            let d = tb.len();
            let mut out = ta.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += tb.data()[i % d];
            }
            return self.push("add", out, Op::AddRow(a, b), rg);
        }
        Err(shape_err("add", &[ta.shape(), tb.shape()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", &[ta.shape(), tb.shape()]));
        }
        let out = ta.zip_map(tb, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", &[ta.shape(), tb.shape()]));
        }
        let out = ta.zip_map(tb, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    /// `c·x + offset`, elementwise.
    pub fn affine(&mut self, a: Var, c: f64, offset: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| c * x + offset);
        let rg = self.rg(a);
        self.push("affine", out, Op::Affine(a, c), rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", &[self.value(a).shape(), ts.shape()]));
        }
        let c = ts.data()[0];
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a) || self.rg(s);
        self.push("scale_by", out, Op::ScaleBy(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", out, Op::Tanh(a), rg)
    }

    /// `max(0, x)` elementwise; the subgradient at 0 is 0.
    pub fn hinge(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push("hinge", out, Op::Hinge(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 || ta.rank() == 0 {
            return Err(shape_err("softmax", &[ta.shape()]));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push("softmax", out, Op::Softmax(a), rg)
    }

    /// Unit-normalizes each row over the last axis. Zero rows are an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 || ta.rank() == 0 {
            return Err(shape_err("l2_normalize", &[ta.shape()]));
        }
        let mut out = ta.clone();
        let mut norms = Vec::with_capacity(ta.outer_len());
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(DiffError::ZeroNorm {
                    kind: "l2_normalize",
                });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push("l2_normalize", out, Op::L2Normalize(a, norms), rg)
    }

    /// Cosine similarity of two equal-length vectors.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(shape_err("cosine_sim", &[ta.shape(), tb.shape()]));
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(DiffError::ZeroNorm { kind: "cosine_sim" });
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "cosine_sim",
            Tensor::scalar(dot / (na * nb)),
            Op::CosineSim(a, b),
            rg,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(shape_err("dot", &[ta.shape(), tb.shape()]));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("dot", Tensor::scalar(dot), Op::Dot(a, b), rg)
    }

    /// Softmax cross-entropy for a two-entry logit vector.
    pub fn cross_entropy_2class(&mut self, logits: Var, target: usize) -> Result<Var, DiffError> {
        let tl = self.value(logits);
        if tl.shape() != [2] || target > 1 {
            return Err(shape_err("cross_entropy_2class", &[tl.shape()]));
        }
        let l = tl.data();
        let mx = l[0].max(l[1]);
        let lse = mx + ((l[0] - mx).exp() + (l[1] - mx).exp()).ln();
        let loss = lse - l[target];
        let rg = self.rg(logits);
        self.push(
            "cross_entropy_2class",
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, target),
            rg,
        )
    }

    /// Shannon entropy (natural log) of a probability vector; `0·ln 0 = 0`.
    pub fn entropy(&mut self, p: Var) -> Result<Var, DiffError> {
        let tp = self.value(p);
        if tp.rank() != 1 {
            return Err(shape_err("entropy", &[tp.shape()]));
        }
        if tp.data().iter().any(|&v| v < 0.0) {
            return Err(DiffError::Domain {
                kind: "entropy",
                reason: "negative probability".into(),
            });
        }
        let h: f64 = tp
            .data()
            .iter()
            .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
            .sum();
        let rg = self.rg(p);
        self.push("entropy", Tensor::scalar(h), Op::Entropy(p), rg)
    }

    /// Squared Euclidean distance between equal-shape tensors.
    pub fn sq_l2_dist(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("sq_l2_dist", &[ta.shape(), tb.shape()]));
        }
        let d: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("sq_l2_dist", Tensor::scalar(d), Op::SqL2Dist(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", &[self.value(a).shape()]));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of a list of equal-shape values.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var, DiffError> {
        let (&first, rest) = items.split_first().ok_or(DiffError::Arity {
            kind: "add_all",
            expected: 1,
            got: 0,
        })?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Mean over the rows of a matrix, giving a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[0] == 0 {
            return Err(shape_err("mean_rows", &[ta.shape()]));
        }
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; d];
        for row in ta.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let rg = self.rg(a);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(a), rg)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.rank() != 2 || i >= ta.shape()[0] {
            return Err(shape_err("row", &[ta.shape()]));
        }
        let out = Tensor::vector(ta.row(i).to_vec());
        let rg = self.rg(a);
        self.push("row", out, Op::Rows(a, i, i + 1), rg)
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.rank() != 2 || start >= end || end > ta.shape()[0] {
            return Err(shape_err("rows", &[ta.shape()]));
        }
        let d = ta.shape()[1];
        let out = Tensor::new(vec![end - start, d], ta.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(a);
        self.push("rows", out, Op::Rows(a, start, end), rg)
    }

    /// Stacks equal-length vectors into a matrix.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var, DiffError> {
        if items.is_empty() {
            return Err(DiffError::Arity {
                kind: "stack",
                expected: 1,
                got: 0,
            });
        }
        let d = self.value(items[0]).len();
        let mut out = Vec::with_capacity(d * items.len());
        for &v in items {
            let t = self.value(v);
            if t.rank() != 1 || t.len() != d {
                return Err(shape_err(
                    "stack",
                    &[self.value(items[0]).shape(), t.shape()],
                ));
            }
            out.extend_from_slice(t.data());
        }
        let rg = items.iter().any(|&v| self.rg(v));
        self.push(
            "stack",
            Tensor::new(vec![items.len(), d], out)?,
            Op::Stack(items.to_vec()),
            rg,
        )
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, items: &[Var]) -> Result<Var, DiffError> {
        let mut out = Vec::new();
        for &v in items {
            let t = self.value(v);
            if t.rank() > 1 {
                return Err(shape_err("concat", &[t.shape()]));
            }
            out.extend_from_slice(t.data());
        }
        let rg = items.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::vector(out),
            Op::Concat(items.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    /// Reverse sweep from a scalar loss. Every registered parameter gets an
    /// entry; those the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        if self.consumed {
            return Err(DiffError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(DiffError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, n) = (tb.shape()[0], tb.shape()[1]);
                let m = ta.len() / k;
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), tb.data(), &mut ga, m, k, n);
                    acc(*a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_acc(ta.data(), g.data(), &mut gb, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    let d = self.value(*b).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::vector(gb));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, c) | Op::Affine(a, c) => {
                let c = *c;
                acc(*a, g.map(|v| c * v));
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).data()[0];
                acc(*a, g.map(|v| c * v));
                if self.rg(*s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(*s, Tensor::full(self.value(*s).shape(), ds));
                }
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Hinge(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(x, z)| x * z).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - s);
                    }
                }
                acc(*a, ga);
            }
            Op::L2Normalize(a, norms) => {
                let d = y.last_dim();
                let mut ga = g.clone();
                for ((grow, yrow), n) in ga
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(norms)
                {
                    let s: f64 = grow.iter().zip(yrow).map(|(x, z)| x * z).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - yv * s) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::CosineSim(a, b) => {
                let gs = g.data()[0];
                let c = y.data()[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                if self.rg(*a) {
                    let ga = ta.zip_map(tb, |av, bv| gs * (bv / (na * nb) - c * av / (na * na)));
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let gb = tb.zip_map(ta, |bv, av| gs * (av / (na * nb) - c * bv / (nb * nb)));
                    acc(*b, gb);
                }
            }
            Op::Dot(a, b) => {
                let gs = g.data()[0];
                acc(*a, self.value(*b).map(|v| gs * v));
                acc(*b, self.value(*a).map(|v| gs * v));
            }
            Op::CrossEntropy(l, target) => {
                let gs = g.data()[0];
                let tl = self.value(*l).data();
                let mx = tl[0].max(tl[1]);
                let e0 = (tl[0] - mx).exp();
                let e1 = (tl[1] - mx).exp();
                let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
                let mut gl = vec![gs * p[0], gs * p[1]];
                gl[*target] -= gs;
                acc(*l, Tensor::vector(gl));
            }
            Op::Entropy(p) => {
                let gs = g.data()[0];
                acc(
                    *p,
                    self.value(*p)
                        .map(|v| if v > 0.0 { -gs * (v.ln() + 1.0) } else { 0.0 }),
                );
            }
            Op::SqL2Dist(a, b) => {
                let gs = g.data()[0];
                let diff = self
                    .value(*a)
                    .zip_map(self.value(*b), |x, z| 2.0 * gs * (x - z));
                acc(*b, diff.map(|v| -v));
                acc(*a, diff);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), gs));
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.shape()[0] as f64;
                let d = ta.shape()[1];
                let mut ga = Tensor::zeros(ta.shape());
                for (i, v) in ga.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i % d] / n;
                }
                acc(*a, ga);
            }
            Op::Rows(a, start, end) => {
                if self.rg(*a) {
                    let ta = self.value(*a);
                    let d = ta.shape()[1];
                    let mut ga = Tensor::zeros(ta.shape());
                    ga.data_mut()[start * d..end * d].copy_from_slice(g.data());
                    acc(*a, ga);
                }
            }
            Op::Stack(items) => {
                let d = g.shape()[1];
                for (r, v) in items.iter().enumerate() {
                    if self.rg(*v) {
                        acc(*v, Tensor::vector(g.data()[r * d..(r + 1) * d].to_vec()));
                    }
                }
            }
            Op::Concat(items) => {
                let mut off = 0;
                for v in items {
                    let t = self.value(*v);
                    let n = t.len();
                    if self.rg(*v) {
                        let part = Tensor::new(t.shape().to_vec(), g.data()[off..off + n].to_vec())
                            .unwrap();
                        acc(*v, part);
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.clone().reshape(shape).unwrap());
            }
        }
    }
}
