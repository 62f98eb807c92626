//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed through the [`Var`] handles it
//! hands out. Nodes are appended in execution order, so the node list is
//! already a topological order and [`Tape::gradients`] walks it once in
//! reverse. Parameters from a [`ParamStore`] are copied onto the tape the first
//! time they are used and their gradients are written back by
//! [`Tape::backward`].
//!
//! Most operations work on the last axis: a tensor of shape `[..., n]` is
//! treated as a matrix of `numel / n` rows.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    MulConst(usize, Rc<Vec<f64>>),
    AddConst(usize),
    Relu(usize),
    Gelu(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax {
        x: usize,
        probs: Rc<Vec<f64>>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Rc<Vec<f64>>,
        inv_std: Rc<Vec<f64>>,
    },
    Transpose(usize),
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Rows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    WeightedRowSum {
        x: usize,
        weights: Rc<Vec<f64>>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass. Not `Send`: a tape
/// belongs to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Adjoints computed by a backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
}

fn add_into(acc: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *acc = Some(delta),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        o.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records an input leaf whose gradient can be read back from
    /// [`Gradients::wrt`].
    pub fn input(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad());
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for every bound parameter that requires one. A
    /// bound parameter that `loss` does not depend on gets zeros.
    pub fn param_gradients(&self, loss: Var<'_>, store: &ParamStore) -> Result<Vec<(ParamId, Vec<f64>)>> {
        let grads = self.gradients(loss)?;
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .borrow()
            .iter()
            .filter(|(&pid, _)| store.get(pid).requires_grad())
            .map(|(&pid, &node)| {
                let g = grads.grads[node]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; store.get(pid).numel()]);
                (pid, g)
            })
            .collect();
        out.sort_by_key(|(pid, _)| pid.0);
        Ok(out)
    }

    /// Runs the backward pass and accumulates into every bound parameter that
    /// requires a gradient. Gradients add to whatever the store already holds.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        for (pid, g) in self.param_gradients(loss, store)? {
            store.get_mut(pid).accumulate_grad(&g)?;
        }
        Ok(())
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| nodes[i].value.as_slice();
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                add_into(&mut grads[*a], da);
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut db[p * n..(p + 1) * n];
                        for (d, &gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += aip * gv;
                        }
                    }
                }
                add_into(&mut grads[*b], db);
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.to_vec());
            }
            if needs(*b) {
                add_into(&mut grads[*b], g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.to_vec());
            }
            if needs(*b) {
                add_into(&mut grads[*b], g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
            }
            if needs(*b) {
                add_into(&mut grads[*b], g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
            }
        }
        Op::AddRow(a, b) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.to_vec());
            }
            if needs(*b) {
                let n = nodes[*b].value.len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                add_into(&mut grads[*b], db);
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.iter().map(|v| v * c).collect());
            }
        }
        Op::ScaleBy(a, s) => {
            let sv = val(*s)[0];
            if needs(*a) {
                add_into(&mut grads[*a], g.iter().map(|v| v * sv).collect());
            }
            if needs(*s) {
                let ds: f64 = g.iter().zip(val(*a)).map(|(g, x)| g * x).sum();
                add_into(&mut grads[*s], vec![ds]);
            }
        }
        Op::MulConst(a, c) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.iter().zip(c.iter()).map(|(g, c)| g * c).collect());
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.to_vec());
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[*a], d);
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let d = g.iter().zip(val(*a)).map(|(g, &x)| g * gelu_grad(x)).collect();
                add_into(&mut grads[*a], d);
            }
        }
        Op::Log(a) => {
            if needs(*a) {
                add_into(&mut grads[*a], g.iter().zip(val(*a)).map(|(g, x)| g / x).collect());
            }
        }
        Op::Softmax(a) => {
            if needs(*a) {
                let (rows, cols) = split_last(&node.shape);
                let y = node.value.as_slice();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
                add_into(&mut grads[*a], d);
            }
        }
        Op::LogSoftmax { x, probs } => {
            if needs(*x) {
                let (rows, cols) = split_last(&node.shape);
                let mut d = vec![0.0; probs.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let total: f64 = g[s.clone()].iter().sum();
                    for i in s {
                        d[i] = g[i] - probs[i] * total;
                    }
                }
                add_into(&mut grads[*x], d);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (rows, cols) = split_last(&node.shape);
            let gv = val(*gain);
            if needs(*x) {
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for (j, i) in s.clone().enumerate() {
                        let dxh = g[i] * gv[j];
                        mean_d += dxh;
                        mean_dx += dxh * xhat[i];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for (j, i) in s.enumerate() {
                        let dxh = g[i] * gv[j];
                        dx[i] = inv_std[r] * (dxh - mean_d - xhat[i] * mean_dx);
                    }
                }
                add_into(&mut grads[*x], dx);
            }
            if needs(*gain) {
                let mut dg = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dg[j] += g[r * cols + j] * xhat[r * cols + j];
                    }
                }
                add_into(&mut grads[*gain], dg);
            }
            if needs(*bias) {
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                add_into(&mut grads[*bias], db);
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                add_into(&mut grads[*a], d);
            }
        }
        Op::SliceCols { x, start } => {
            if needs(*x) {
                let (rows, cols) = split_last(&nodes[*x].shape);
                let width = node.shape[1];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                add_into(&mut grads[*x], d);
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].shape[1];
                if needs(p) {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    add_into(&mut grads[p], d);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if needs(p) {
                    add_into(&mut grads[p], g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::Rows { x, idx } => {
            if needs(*x) {
                let (_, cols) = split_last(&nodes[*x].shape);
                let mut d = vec![0.0; nodes[*x].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut d[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, v)| *d += v);
                }
                add_into(&mut grads[*x], d);
            }
        }
        Op::WeightedRowSum { x, weights } => {
            if needs(*x) {
                let cols = g.len();
                let mut d = vec![0.0; weights.len() * cols];
                for (r, w) in weights.iter().enumerate() {
                    for j in 0..cols {
                        d[r * cols + j] = w * g[j];
                    }
                }
                add_into(&mut grads[*x], d);
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                add_into(&mut grads[*a], vec![g[0]; nodes[*a].value.len()]);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn numel(&self) -> usize {
        self.value().len()
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s,
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape { op, lhs: a, rhs: b });
        }
        Ok(a)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v: Vec<f64> = self.value().iter().map(|&x| f(x)).collect();
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(self.shape(), v, op, needs)
    }

    fn binary(&self, other: &Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let shape = self.same_shape(other, name)?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(shape, v, op, needs))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (a, b) = (self.value(), other.value());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let out = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(vec![m, n], c, Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// Adds a length-`n` vector to every row of a `[..., n]` tensor.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let (_, cols) = split_last(&self.shape());
        let n = row.numel();
        if n != cols {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let (a, b) = (self.value(), row.value());
        let v = a.iter().enumerate().map(|(i, x)| x + b[i % n]).collect();
        let needs = self.tape.needs(&[self.id, row.id]);
        Ok(self.tape.push(self.shape(), v, Op::AddRow(self.id, row.id), needs))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    /// Multiplies every element by a single-element node.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        if s.numel() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(),
                rhs: s.shape(),
            });
        }
        let sv = s.item();
        let v = self.value().iter().map(|x| x * sv).collect();
        let needs = self.tape.needs(&[self.id, s.id]);
        Ok(self.tape.push(self.shape(), v, Op::ScaleBy(self.id, s.id), needs))
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&self, c: Vec<f64>) -> Result<Var<'t>> {
        if c.len() != self.numel() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(),
                rhs: vec![c.len()],
            });
        }
        let v = self.value().iter().zip(&c).map(|(x, c)| x * c).collect();
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(self.shape(), v, Op::MulConst(self.id, Rc::new(c)), needs))
    }

    /// Elementwise sum with a constant buffer of the same length.
    pub fn add_const(&self, c: &[f64]) -> Result<Var<'t>> {
        if c.len() != self.numel() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(),
                rhs: vec![c.len()],
            });
        }
        let v = self.value().iter().zip(c).map(|(x, c)| x + c).collect();
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(self.shape(), v, Op::AddConst(self.id), needs))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = split_last(&shape);
        if cols == 0 || shape.is_empty() {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let v = softmax_rows(&self.value(), rows, cols);
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(shape, v, Op::Softmax(self.id), needs))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = split_last(&shape);
        if cols == 0 || shape.is_empty() {
            return Err(Error::invalid("log_softmax over an empty axis"));
        }
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let probs = softmax_rows(&x, rows, cols);
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::LogSoftmax {
                x: self.id,
                probs: Rc::new(probs),
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, cols) = split_last(&shape);
        if cols == 0 || gain.numel() != cols || bias.numel() != cols {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: gain.shape(),
            });
        }
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..cols {
                let h = (row[j] - mean) * inv;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Rc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
            needs,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (m, n) = self.matrix_dims("transpose")?;
        let a = self.value();
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = a[i * n + j];
            }
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(vec![n, m], v, Op::Transpose(self.id), needs))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(shape, self.value().to_vec(), Op::Reshape(self.id), needs))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (m, n) = self.matrix_dims("slice_cols")?;
        if start + width > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, width],
            });
        }
        let a = self.value();
        let mut v = Vec::with_capacity(m * width);
        for r in 0..m {
            v.extend_from_slice(&a[r * n + start..r * n + start + width]);
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(vec![m, width], v, Op::SliceCols { x: self.id, start }, needs))
    }

    /// Gathers rows by index from a `[rows, cols]` matrix.
    pub fn rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (m, n) = self.matrix_dims("rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index {
                table: "rows".into(),
                index: bad,
                size: m,
            });
        }
        let a = self.value();
        let mut v = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            v.extend_from_slice(&a[i * n..(i + 1) * n]);
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            vec![idx.len(), n],
            v,
            Op::Rows {
                x: self.id,
                idx: Rc::new(idx.to_vec()),
            },
            needs,
        ))
    }

    /// `sum_r weights[r] * x[r, :]`, producing a `[cols]` vector.
    pub fn weighted_row_sum(&self, weights: Vec<f64>) -> Result<Var<'t>> {
        let (m, n) = self.matrix_dims("weighted_row_sum")?;
        if weights.len() != m {
            return Err(Error::Shape {
                op: "weighted_row_sum",
                lhs: vec![m, n],
                rhs: vec![weights.len()],
            });
        }
        let a = self.value();
        let mut v = vec![0.0; n];
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for j in 0..n {
                v[j] += w * a[r * n + j];
            }
        }
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(
            vec![n],
            v,
            Op::WeightedRowSum {
                x: self.id,
                weights: Rc::new(weights),
            },
            needs,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().iter().sum();
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(Vec::new(), vec![s], Op::Sum(self.id), needs)
    }
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
    let tape = first.tape;
    let (rows, _) = first.matrix_dims("concat_cols")?;
    let mut total = 0;
    for p in parts {
        let (r, c) = p.matrix_dims("concat_cols")?;
        if r != rows {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: first.shape(),
                rhs: p.shape(),
            });
        }
        total += c;
    }
    let vals: Vec<_> = parts.iter().map(|p| (p.value(), p.shape()[1])).collect();
    let mut v = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (pv, w) in &vals {
            v.extend_from_slice(&pv[r * w..(r + 1) * w]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(vec![rows, total], v, Op::ConcatCols(ids), needs))
}

/// Concatenates tensors along the first axis. Inputs must share the trailing
/// extent; 1-D inputs are treated as single rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
    let tape = first.tape;
    let cols = split_last(&first.shape()).1;
    let mut rows = 0;
    let mut v = Vec::new();
    for p in parts {
        let (r, c) = split_last(&p.shape());
        if c != cols {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: p.shape(),
            });
        }
        rows += r;
        v.extend_from_slice(&p.value());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(vec![rows, cols], v, Op::ConcatRows(ids), needs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new();
        let a = tape.constant(&mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(&mat(&[vec![5.0], vec![6.0]]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = tape.constant(&mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(&mat(&[vec![0.3, -2.0], vec![7.5, 1e-3]]));
        assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros([2, 3]));
        let b = tape.constant(&Tensor::zeros([2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let s = tape
            .constant(&Tensor::new([3], vec![0.0; 3]).unwrap())
            .softmax()
            .unwrap();
        for v in s.value().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = tape
            .constant(&Tensor::new([2], vec![1000.0, 1000.0]).unwrap())
            .softmax()
            .unwrap();
        assert_eq!(s.value().as_slice(), &[0.5, 0.5]);
        let s = tape
            .constant(&Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap())
            .softmax()
            .unwrap();
        assert!((s.value()[0] - 0.25).abs() < 1e-15);
        assert!((s.value()[1] - 0.75).abs() < 1e-15);
        let empty = tape.constant(&Tensor::zeros([2, 0]));
        assert!(empty.softmax().is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let g = tape.constant(&Tensor::new([2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(&Tensor::zeros([2]));
        let y = tape
            .constant(&Tensor::new([2], vec![1.0, 3.0]).unwrap())
            .layer_norm(&g, &b, 0.0)
            .unwrap();
        assert_eq!(y.value().as_slice(), &[-1.0, 1.0]);
        let g3 = tape.constant(&Tensor::new([3], vec![1.0; 3]).unwrap());
        let b3 = tape.constant(&Tensor::zeros([3]));
        let y = tape
            .constant(&Tensor::new([3], vec![4.2; 3]).unwrap())
            .layer_norm(&g3, &b3, 1e-12)
            .unwrap();
        assert!(y.value().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn elementwise_activations() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().as_slice(), &[0.0, 2.0]);
        let z = tape.constant(&Tensor::scalar(0.0));
        assert_eq!(z.gelu().item(), 0.0);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        tape.backward(wv.sum(), &mut store).unwrap();
        assert_eq!(store.get(w).grad(), Some(&[1.0, 1.0, 1.0][..]));

        store.zero_grad();
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let loss = wv.mul(&wv).unwrap().sum();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad(), Some(&[2.0, -4.0, 1.0][..]));
        // a second backward without zeroing accumulates
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad(), Some(&[4.0, -8.0, 2.0][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.input(&Tensor::zeros([2]));
        assert!(matches!(tape.gradients(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn param_binding_is_cached() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros([2]));
        let tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a.id(), b.id());
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn rows_gather_scatters_gradient() {
        let tape = Tape::new();
        let x = tape.input(&mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = x.rows(&[1, 1, 0]).unwrap();
        let g = tape.gradients(y.sum()).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(x.rows(&[2]).is_err());
    }
}
