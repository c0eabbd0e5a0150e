//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its operator, its inputs and the
//! forward value. [`Tape::backward`] walks the nodes in reverse insertion
//! order (which is a topological order by construction) and accumulates
//! adjoints. Parameters are read from a borrowed [`ParamStore`] without
//! copying; their gradients are returned in [`Gradients`] and folded back
//! into the store by the caller.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Concat(Vec<Var>, Axis),
    Slice { x: Var, axis: Axis, start: usize, len: usize },
    Gather { table: Var, idx: Vec<usize> },
    Reshape(Var, usize, usize),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Normalize(Var),
    Pick { x: Var, idx: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Normalize(_) => "normalize",
            Op::Pick { .. } => "pick",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x, ..)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Normalize(x)
            | Op::Pick { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Ordered record of executed primitives (the computation record).
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only inputs and variables.
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").value(*id),
            (None, _) => unreachable!("non-param node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_node(Node { op: Op::Input, value: Some(t), requires_grad: false })
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_node(Node { op: Op::Input, value: Some(t), requires_grad: true })
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        let v = self.push_node(Node { op: Op::Param(id), value: None, requires_grad: true });
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let get = |v: Var| self.value(v);
            eval(&op, &get)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(Node { op, value: Some(value), requires_grad }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(x, row))
    }

    /// Multiplies row `r` of `x` by `s[r]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleRows(x, s))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        self.push(Op::ScaleBy(s, x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn concat(&mut self, xs: &[Var], axis: Axis) -> Result<Var> {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, axis, start, len })
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::Gather { table, idx: idx.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::Reshape(x, rows, cols))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    /// Column means: `[m, n]` to `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MeanRows(x))
    }

    /// `x / sum(x)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Normalize(x))
    }

    /// One element per row: output `[m, 1]` with `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.push(Op::Pick { x, idx: idx.to_vec() })
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    /// `x W + b` for a row-vector or matrix `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Recomputes every forward value from the recorded operators and the
    /// current leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let t = match &node.op {
                Op::Input => node.value.clone().expect("input node without value"),
                Op::Param(id) => self.params.expect("param node without store").value(*id).clone(),
                op => eval(op, &|v: Var| &values[v.0])?,
            };
            values.push(t);
        }
        Ok(values)
    }

    /// Accumulates adjoints of `loss` into every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        let mut vars = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = grads[i].take() else { continue };
            let shape = self.value(Var(i)).shape().to_vec();
            let t = Tensor::from_parts(shape, g);
            match node.op {
                Op::Param(id) => params.push((id, t)),
                Op::Input if node.requires_grad => vars.push((Var(i), t)),
                _ => {}
            }
        }
        Ok(Gradients { params, vars })
    }

    fn propagate(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    let bd = bv.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            ga[i * k + kk] += dot(gi, brow);
                        }
                    }
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let ad = av.data();
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = ad[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            axpy(aik, gi, &mut gb[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    axpy(1.0, g, slot(grads, *a, g.len()));
                }
                if needs(*b) {
                    axpy(1.0, g, slot(grads, *b, g.len()));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(1.0, g, slot(grads, *a, g.len()));
                }
                if needs(*b) {
                    axpy(-1.0, g, slot(grads, *b, g.len()));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bd = self.value(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((ga, g), b) in ga.iter_mut().zip(g).zip(bd) {
                        *ga += g * b;
                    }
                }
                if needs(*b) {
                    let ad = self.value(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((gb, g), a) in gb.iter_mut().zip(g).zip(ad) {
                        *gb += g * a;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    axpy(1.0, g, slot(grads, *x, g.len()));
                }
                if needs(*row) {
                    let n = self.value(*row).numel();
                    let gr = slot(grads, *row, n);
                    for chunk in g.chunks(n) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let n = xv.cols();
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (r, &sr) in sv.iter().enumerate() {
                        axpy(sr, &g[r * n..(r + 1) * n], &mut gx[r * n..(r + 1) * n]);
                    }
                }
                if needs(*s) {
                    let xd = xv.data();
                    let gs = slot(grads, *s, sv.len());
                    for (r, gs) in gs.iter_mut().enumerate() {
                        *gs += dot(&g[r * n..(r + 1) * n], &xd[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ScaleBy(s, x) => {
                let sv = self.value(*s).item();
                if needs(*x) {
                    axpy(sv, g, slot(grads, *x, g.len()));
                }
                if needs(*s) {
                    let d = dot(g, self.value(*x).data());
                    slot(grads, *s, 1)[0] += d;
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    axpy(*c, g, slot(grads, *x, g.len()));
                }
            }
            Op::AddScalar(x, _) | Op::Reshape(x, ..) => {
                if needs(*x) {
                    axpy(1.0, g, slot(grads, *x, g.len()));
                }
            }
            Op::Concat(xs, axis) => {
                let out_cols = self.value(out).cols();
                let mut offset = 0;
                for x in xs {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    if needs(*x) {
                        let gx = slot(grads, *x, r * c);
                        match axis {
                            Axis::Cols => {
                                for i in 0..r {
                                    let src = &g[i * out_cols + offset..i * out_cols + offset + c];
                                    axpy(1.0, src, &mut gx[i * c..(i + 1) * c]);
                                }
                            }
                            Axis::Rows => {
                                axpy(1.0, &g[offset * c..(offset + r) * c], gx);
                            }
                        }
                    }
                    offset += match axis {
                        Axis::Cols => c,
                        Axis::Rows => r,
                    };
                }
            }
            Op::Slice { x, axis, start, len } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let gx = slot(grads, *x, r * c);
                    match axis {
                        Axis::Cols => {
                            for i in 0..r {
                                axpy(
                                    1.0,
                                    &g[i * len..(i + 1) * len],
                                    &mut gx[i * c + start..i * c + start + len],
                                );
                            }
                        }
                        Axis::Rows => axpy(1.0, g, &mut gx[start * c..(start + len) * c]),
                    }
                }
            }
            Op::Gather { table, idx } => {
                if needs(*table) {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let gt = slot(grads, *table, tv.numel());
                    for (r, &row) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut gt[row * c..(row + 1) * c]);
                    }
                }
            }
            Op::Tanh(x) => {
                if needs(*x) {
                    let y = self.value(out).data();
                    let gx = slot(grads, *x, g.len());
                    for ((gx, g), y) in gx.iter_mut().zip(g).zip(y) {
                        *gx += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = self.value(out).data();
                    let gx = slot(grads, *x, g.len());
                    for ((gx, g), y) in gx.iter_mut().zip(g).zip(y) {
                        *gx += g * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xd = self.value(*x).data();
                    let gx = slot(grads, *x, g.len());
                    for ((gx, g), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *gx += g;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    let yv = self.value(out);
                    let n = yv.cols();
                    let y = yv.data();
                    let gx = slot(grads, *x, g.len());
                    for r in 0..yv.rows() {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let s = dot(gr, yr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if needs(*x) {
                    let yv = self.value(out);
                    let n = yv.cols();
                    let y = yv.data();
                    let gx = slot(grads, *x, g.len());
                    for r in 0..yv.rows() {
                        let gr = &g[r * n..(r + 1) * n];
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            gx[r * n + j] += gr[j] - math::exp(y[r * n + j]) * s;
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    let scale = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    for v in slot(grads, *x, n).iter_mut() {
                        *v += scale;
                    }
                }
            }
            Op::MeanRows(x) => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let gx = slot(grads, *x, m * n);
                    let inv = 1.0 / m as f64;
                    for r in 0..m {
                        axpy(inv, g, &mut gx[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Normalize(x) => {
                if needs(*x) {
                    let total: f64 = self.value(*x).data().iter().sum();
                    let y = self.value(out).data();
                    let s = dot(g, y);
                    let gx = slot(grads, *x, g.len());
                    for (gx, g) in gx.iter_mut().zip(g) {
                        *gx += (g - s) / total;
                    }
                }
            }
            Op::Pick { x, idx } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = slot(grads, *x, xv.numel());
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += g[r];
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    vars: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient for a leaf created with [`Tape::variable`].
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.iter().find(|(x, _)| *x == v).map(|(_, t)| t)
    }

    /// Parameters in `store` that the loss never reached.
    pub fn unreached(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|id| self.param(*id).is_none()).collect()
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(vec![rows, cols], data)
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    matrix(x.rows(), x.cols(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    matrix(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn eval<'a>(op: &Op, get: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            if b.rows() != k {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = ad[i * k + kk];
                    if aik != 0.0 {
                        axpy(aik, &bd[kk * n..(kk + 1) * n], orow);
                    }
                }
            }
            matrix(m, n, out)
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (get(*a), get(*b));
            check_same(name, a, b)?;
            match op {
                Op::Add(..) => zip_map(a, b, |x, y| x + y),
                Op::Sub(..) => zip_map(a, b, |x, y| x - y),
                _ => zip_map(a, b, |x, y| x * y),
            }
        }
        Op::AddRow(x, row) => {
            let (x, row) = (get(*x), get(*row));
            if row.numel() != x.cols() {
                return Err(shape_err(name, format!("{:?} + row {:?}", x.shape(), row.shape())));
            }
            let n = x.cols();
            let mut out = x.data().to_vec();
            for chunk in out.chunks_mut(n) {
                axpy(1.0, row.data(), chunk);
            }
            matrix(x.rows(), n, out)
        }
        Op::ScaleRows(x, s) => {
            let (x, s) = (get(*x), get(*s));
            if s.numel() != x.rows() {
                return Err(shape_err(name, format!("{:?} rows scaled by {:?}", x.shape(), s.shape())));
            }
            let n = x.cols();
            let mut out = x.data().to_vec();
            for (chunk, &sr) in out.chunks_mut(n).zip(s.data()) {
                chunk.iter_mut().for_each(|v| *v *= sr);
            }
            matrix(x.rows(), n, out)
        }
        Op::ScaleBy(s, x) => {
            let (s, x) = (get(*s), get(*x));
            if s.numel() != 1 {
                return Err(shape_err(name, format!("scale factor has shape {:?}", s.shape())));
            }
            let c = s.item();
            map(x, |v| c * v)
        }
        Op::Scale(x, c) => map(get(*x), |v| c * v),
        Op::AddScalar(x, c) => map(get(*x), |v| v + c),
        Op::Concat(xs, axis) => {
            if xs.is_empty() {
                return Err(shape_err(name, "nothing to concatenate".into()));
            }
            let parts: Vec<&Tensor> = xs.iter().map(|v| get(*v)).collect();
            match axis {
                Axis::Cols => {
                    let r = parts[0].rows();
                    if parts.iter().any(|p| p.rows() != r) {
                        return Err(shape_err(name, "row counts differ".into()));
                    }
                    let c: usize = parts.iter().map(|p| p.cols()).sum();
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for p in &parts {
                            out.extend_from_slice(p.row_slice(i));
                        }
                    }
                    matrix(r, c, out)
                }
                Axis::Rows => {
                    let c = parts[0].cols();
                    if parts.iter().any(|p| p.cols() != c) {
                        return Err(shape_err(name, "column counts differ".into()));
                    }
                    let r: usize = parts.iter().map(|p| p.rows()).sum();
                    let mut out = Vec::with_capacity(r * c);
                    for p in &parts {
                        out.extend_from_slice(p.data());
                    }
                    matrix(r, c, out)
                }
            }
        }
        Op::Slice { x, axis, start, len } => {
            let x = get(*x);
            let (r, c) = (x.rows(), x.cols());
            let extent = if *axis == Axis::Cols { c } else { r };
            if *len == 0 || start + len > extent {
                return Err(shape_err(name, format!("[{start}, {}) out of {extent}", start + len)));
            }
            match axis {
                Axis::Cols => {
                    let mut out = Vec::with_capacity(r * len);
                    for i in 0..r {
                        out.extend_from_slice(&x.row_slice(i)[*start..start + len]);
                    }
                    matrix(r, *len, out)
                }
                Axis::Rows => matrix(*len, c, x.data()[start * c..(start + len) * c].to_vec()),
            }
        }
        Op::Gather { table, idx } => {
            let t = get(*table);
            let c = t.cols();
            if idx.is_empty() || idx.iter().any(|&i| i >= t.rows()) {
                return Err(shape_err(name, format!("indices {idx:?} outside {} rows", t.rows())));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(t.row_slice(i));
            }
            matrix(idx.len(), c, out)
        }
        Op::Reshape(x, r, c) => {
            let x = get(*x);
            if r * c != x.numel() || *r == 0 {
                return Err(shape_err(name, format!("{:?} to [{r}, {c}]", x.shape())));
            }
            matrix(*r, *c, x.data().to_vec())
        }
        Op::Tanh(x) => map(get(*x), math::tanh),
        Op::Sigmoid(x) => map(get(*x), math::sigmoid),
        Op::Relu(x) => map(get(*x), |v| if v > 0.0 { v } else { 0.0 }),
        Op::Softmax(x) | Op::LogSoftmax(x) => {
            let x = get(*x);
            let n = x.cols();
            let log = matches!(op, Op::LogSoftmax(_));
            let mut out = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| math::exp(v - max)).sum();
                if log {
                    let lz = math::ln(z);
                    out.extend(row.iter().map(|v| v - max - lz));
                } else {
                    out.extend(row.iter().map(|v| math::exp(v - max) / z));
                }
            }
            matrix(x.rows(), n, out)
        }
        Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
        Op::Mean(x) => {
            let x = get(*x);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Op::MeanRows(x) => {
            let x = get(*x);
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![0.0; n];
            for r in 0..m {
                axpy(1.0 / m as f64, x.row_slice(r), &mut out);
            }
            matrix(1, n, out)
        }
        Op::Normalize(x) => {
            let x = get(*x);
            let total: f64 = x.data().iter().sum();
            if total == 0.0 {
                return Err(Error::NonFinite { op: name });
            }
            map(x, |v| v / total)
        }
        Op::Pick { x, idx } => {
            let x = get(*x);
            if idx.len() != x.rows() || idx.iter().any(|&j| j >= x.cols()) {
                return Err(shape_err(name, format!("indices {idx:?} for {:?}", x.shape())));
            }
            let out = idx.iter().enumerate().map(|(r, &j)| x.row_slice(r)[j]).collect();
            matrix(idx.len(), 1, out)
        }
    })
}
