//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every primitive is evaluated eagerly when it is recorded, so node values
//! are available immediately through [`Graph::value`]. Nodes are appended in
//! evaluation order, which makes the node list a topological order; backward
//! walks it in reverse and visits each node once.

use super::tensor::{for_each_line, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    All,
    Axis(usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    DivScalar(Var, Var),
    Square(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var, Reduce),
    Mean(Var, Reduce),
    /// Source flat index of every output element.
    Extremum(Var, Vec<usize>),
    L2NormalizeRows(Var),
    DepthwiseConv(Var, Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Pick(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes zeros for untouched parameters.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
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

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of the root. Nodes are evaluated as they are recorded, so this is
    /// a lookup.
    pub fn forward(&self, root: Var) -> &Tensor {
        self.value(root)
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, op: Op, a: Var, value: Tensor) -> Var {
        let t = self.tracked(a);
        self.push(op, value, t)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(op, value, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(Op::MatMul(a, b), a, b, v))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.unary(Op::Transpose(a), a, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.binary(Op::Add(a, b), a, b, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.binary(Op::Sub(a, b), a, b, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.binary(Op::Mul(a, b), a, b, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.unary(Op::Scale(a, c), a, v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(Op::AddScalar(a), a, v)
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "div_scalar",
                lhs: self.value(a).shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let d = sv.item();
        let v = self.value(a).map(|x| x / d);
        Ok(self.binary(Op::DivScalar(a, s), a, s, v))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(Op::Square(a), a, v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(Op::Sigmoid(a), a, v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(Op::Relu(a), a, v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(Op::Exp(a), a, v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(Op::Log(a), a, v)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).softmax(axis)?;
        Ok(self.unary(Op::Softmax(a, axis), a, v))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).log_softmax(axis)?;
        Ok(self.unary(Op::LogSoftmax(a, axis), a, v))
    }

    pub fn sum(&mut self, a: Var, reduce: Reduce) -> Result<Var> {
        let v = reduce_sum(self.value(a), reduce)?;
        Ok(self.unary(Op::Sum(a, reduce), a, v))
    }

    pub fn mean(&mut self, a: Var, reduce: Reduce) -> Result<Var> {
        let x = self.value(a);
        let count = reduce_count(x, reduce);
        let mut v = reduce_sum(x, reduce)?;
        v.data_mut().iter_mut().for_each(|e| *e /= count as f64);
        Ok(self.unary(Op::Mean(a, reduce), a, v))
    }

    /// Maximum; ties go to the first index in row-major order.
    pub fn max(&mut self, a: Var, reduce: Reduce) -> Result<Var> {
        self.extremum(a, reduce, |cand, best| cand > best)
    }

    /// Minimum; ties go to the first index in row-major order.
    pub fn min(&mut self, a: Var, reduce: Reduce) -> Result<Var> {
        self.extremum(a, reduce, |cand, best| cand < best)
    }

    fn extremum(&mut self, a: Var, reduce: Reduce, better: impl Fn(f64, f64) -> bool) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "max/min",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let pick = |idx: &[usize]| {
            let mut best = idx[0];
            for &i in &idx[1..] {
                if better(x.data()[i], x.data()[best]) {
                    best = i;
                }
            }
            best
        };
        let (shape, src) = match reduce {
            Reduce::All => {
                let all: Vec<usize> = (0..x.len()).collect();
                (Vec::new(), vec![pick(&all)])
            }
            Reduce::Axis(axis) => {
                let (m, n) = x.require_matrix("max/min")?;
                let mut src = Vec::new();
                for_each_line(m, n, axis, |idx| src.push(pick(idx)))?;
                let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
                (shape, src)
            }
        };
        let data = src.iter().map(|&i| x.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.unary(Op::Extremum(a, src), a, v))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).l2_normalize_rows()?;
        Ok(self.unary(Op::L2NormalizeRows(a), a, v))
    }

    /// Depthwise temporal convolution of `x: T×C` with `kernel: C×W`, "same"
    /// zero padding.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = self.value(x).depthwise_conv(self.value(kernel))?;
        Ok(self.binary(Op::DepthwiseConv(x, kernel), x, kernel, v))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).select_rows(indices)?;
        Ok(self.unary(Op::SelectRows(a, indices.to_vec()), a, v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let (_, n) = self.value(*first).require_matrix("concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (m, c) = t.require_matrix("concat_rows")?;
            if c != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, tracked))
    }

    /// Gathers elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            let v = *x.data().get(i).ok_or_else(|| Error::ShapeMismatch {
                op: "pick",
                lhs: x.shape().to_vec(),
                rhs: vec![i],
            })?;
            data.push(v);
        }
        let v = Tensor::new(vec![flat.len()], data)?;
        Ok(self.unary(Op::Pick(a, flat.to_vec()), a, v))
    }

    /// Reverse-mode sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose()?)?);
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, av.transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(bv, "mul", |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(av, "mul", |x, y| x * y)?);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                self.accumulate(grads, *a, g.map(|x| x / d));
                if self.tracked(*s) {
                    let av = self.value(*a);
                    let dot: f64 = Tensor::dot(g.data(), av.data());
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::filled(&shape, -dot / (d * d)));
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, "square", |x, y| 2.0 * x * y)?);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, "sigmoid", |x, s| x * s * (1.0 - s))?);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, "relu", |x, y| if y > 0.0 { x } else { 0.0 })?);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, "exp", |x, e| x * e)?),
            Op::Log(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, "log", |x, y| x / y)?);
            }
            Op::Softmax(a, axis) => {
                let (m, n) = out.require_matrix("softmax")?;
                let mut d = Tensor::zeros(out.shape());
                for_each_line(m, n, *axis, |idx| {
                    let s: f64 = idx.iter().map(|&i| g.data()[i] * out.data()[i]).sum();
                    for &i in idx {
                        d.data_mut()[i] = out.data()[i] * (g.data()[i] - s);
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let (m, n) = out.require_matrix("log_softmax")?;
                let mut d = Tensor::zeros(out.shape());
                for_each_line(m, n, *axis, |idx| {
                    let s: f64 = idx.iter().map(|&i| g.data()[i]).sum();
                    for &i in idx {
                        d.data_mut()[i] = g.data()[i] - out.data()[i].exp() * s;
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a, reduce) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, broadcast_back(g, &shape, *reduce, 1.0));
            }
            Op::Mean(a, reduce) => {
                let x = self.value(*a);
                let count = reduce_count(x, *reduce) as f64;
                let shape = x.shape().to_vec();
                self.accumulate(grads, *a, broadcast_back(g, &shape, *reduce, 1.0 / count));
            }
            Op::Extremum(a, src) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (k, &i) in src.iter().enumerate() {
                    d.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let (m, _) = x.require_matrix("l2_normalize_rows")?;
                let mut d = Tensor::zeros(x.shape());
                for i in 0..m {
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let norm = Tensor::norm(xr);
                    let s = norm + NORM_EPS;
                    let gx = Tensor::dot(gr, xr);
                    let coef = if norm > 0.0 { gx / (s * s * norm) } else { 0.0 };
                    for (o, (&gv, &xv)) in d.row_mut(i).iter_mut().zip(gr.iter().zip(xr)) {
                        *o = gv / s - xv * coef;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::DepthwiseConv(x, k) => {
                let xv = self.value(*x);
                let kv = self.value(*k);
                let (t, c) = xv.require_matrix("depthwise_conv")?;
                let w = kv.cols();
                let pad = (w - 1) / 2;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                for i in 0..t {
                    for j in 0..w {
                        let src = i as isize + j as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let gv = g.data()[i * c + ch];
                            dx.data_mut()[src * c + ch] += gv * kv.data()[ch * w + j];
                            dk.data_mut()[ch * w + j] += gv * xv.data()[src * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *k, dk);
            }
            Op::SelectRows(a, indices) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (r, &i) in indices.iter().enumerate() {
                    d.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = shape[0] * shape[1];
                    let d = Tensor::new(shape, g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    self.accumulate(grads, p, d);
                }
            }
            Op::Pick(a, flat) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (k, &i) in flat.iter().enumerate() {
                    d.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *a, d);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduce_count(x: &Tensor, reduce: Reduce) -> usize {
    match reduce {
        Reduce::All => x.len(),
        Reduce::Axis(0) => x.rows(),
        Reduce::Axis(_) => x.cols(),
    }
}

fn reduce_sum(x: &Tensor, reduce: Reduce) -> Result<Tensor> {
    match reduce {
        Reduce::All => Ok(Tensor::scalar(x.data().iter().sum())),
        Reduce::Axis(axis) => {
            let (m, n) = x.require_matrix("sum")?;
            let mut out = Vec::new();
            for_each_line(m, n, axis, |idx| out.push(idx.iter().map(|&i| x.data()[i]).sum()))?;
            let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
            Tensor::new(shape, out)
        }
    }
}

fn broadcast_back(g: &Tensor, shape: &[usize], reduce: Reduce, factor: f64) -> Tensor {
    let mut d = Tensor::zeros(shape);
    match reduce {
        Reduce::All => {
            let v = g.item() * factor;
            d.data_mut().iter_mut().for_each(|e| *e = v);
        }
        Reduce::Axis(axis) => {
            let n = shape[1];
            for (flat, e) in d.data_mut().iter_mut().enumerate() {
                let (i, j) = (flat / n, flat % n);
                let src = if axis == 0 { j } else { i };
                *e = g.data()[src] * factor;
            }
        }
    }
    d
}
