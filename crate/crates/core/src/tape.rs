//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and the
//! information its backward rule needs. [`Tape::backward`] replays the nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because inputs are always recorded before their consumers.
//!
//! Binary elementwise ops broadcast only over the leading axis: the right
//! operand may have the full shape of the left, the shape with the leading
//! axis dropped, or the shape with a leading axis of 1.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, Tensor};

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Rows,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize, Bcast),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Sqrt(usize),
    Pow(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    ConcatCols(Vec<(usize, usize)>),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    Reshape(usize),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if !a.is_empty() {
        if b == &a[1..] {
            return Ok(Bcast::Rows);
        }
        if b.len() == a.len() && b[0] == 1 && b[1..] == a[1..] {
            return Ok(Bcast::Rows);
        }
    }
    Err(Error::shape(op, a, b))
}

fn cols_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        _ => Err(Error::shape("expected a 2-D tensor", shape, &[])),
    }
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

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    /// Concatenates 2-D vars with equal row counts along the column axis.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::config("concat_cols of nothing"))?;
        let (n, _) = cols_of(&nodes[first.id].shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pm) = cols_of(&nodes[p.id].shape)?;
            if pn != n {
                return Err(Error::shape(
                    "concat_cols",
                    &nodes[first.id].shape,
                    &nodes[p.id].shape,
                ));
            }
            widths.push((p.id, pm));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = vec![0.0; n * total];
        for i in 0..n {
            let mut off = 0;
            for &(id, m) in &widths {
                out[i * total + off..i * total + off + m]
                    .copy_from_slice(&nodes[id].value[i * m..(i + 1) * m]);
                off += m;
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        Ok(self.push(vec![n, total], out, Op::ConcatCols(widths), rg))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// node that requires grad.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn unary_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    input: usize,
    g: &[f64],
    f: impl Fn(usize) -> f64,
) {
    if let Some(ga) = acc(grads, nodes, input) {
        for (i, (a, gi)) in ga.iter_mut().zip(g).enumerate() {
            *a += gi * f(i);
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b, bc) => {
            let (a, b, bc, kind) = (*a, *b, *bc, *kind);
            let inner = nodes[b].value.len();
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let bidx = |i: usize| if bc == Bcast::Same { i } else { i % inner };
            if let Some(ga) = acc(grads, nodes, a) {
                for (i, (gai, gi)) in ga.iter_mut().zip(g).enumerate() {
                    *gai += match kind {
                        Binary::Add | Binary::Sub => *gi,
                        Binary::Mul => gi * bv[bidx(i)],
                        Binary::Div => gi / bv[bidx(i)],
                    };
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (i, gi) in g.iter().enumerate() {
                    let j = bidx(i);
                    gb[j] += match kind {
                        Binary::Add => *gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[i],
                        Binary::Div => -gi * av[i] / (bv[j] * bv[j]),
                    };
                }
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (n, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let m = nodes[b].shape[1];
            // dA = G B^T, dB = A^T G
            let bv = &nodes[b].value;
            let av = &nodes[a].value;
            if let Some(ga) = acc(grads, nodes, a) {
                gemm(n, m, k, g, false, bv, true, ga, true);
            }
            if let Some(gb) = acc(grads, nodes, b) {
                gemm(k, n, m, av, true, g, false, gb, true);
            }
        }
        Op::Scale(a, c) => unary_backward(nodes, grads, *a, g, |_| *c),
        Op::AddScalar(a) => unary_backward(nodes, grads, *a, g, |_| 1.0),
        Op::Exp(a) => unary_backward(nodes, grads, *a, g, |i| out[i]),
        Op::Ln(a) => {
            let av = &nodes[*a].value;
            unary_backward(nodes, grads, *a, g, |i| 1.0 / av[i])
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            unary_backward(nodes, grads, *a, g, |i| if av[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Sigmoid(a) => unary_backward(nodes, grads, *a, g, |i| out[i] * (1.0 - out[i])),
        Op::Tanh(a) => unary_backward(nodes, grads, *a, g, |i| 1.0 - out[i] * out[i]),
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            unary_backward(nodes, grads, *a, g, |i| {
                if av[i] > 0.0 {
                    1.0
                } else if av[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sqrt(a) => unary_backward(nodes, grads, *a, g, |i| 0.5 / out[i]),
        Op::Pow(a, p) => {
            let av = &nodes[*a].value;
            unary_backward(nodes, grads, *a, g, |i| p * av[i].powf(p - 1.0))
        }
        Op::Clamp(a, lo, hi) => {
            let av = &nodes[*a].value;
            unary_backward(nodes, grads, *a, g, |i| {
                if av[i] > *lo && av[i] < *hi {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().for_each(|v| *v += g[0] / n);
            }
        }
        Op::SumRows(a) => {
            let inner = out.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, v) in ga.iter_mut().enumerate() {
                    *v += g[i % inner];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let n = out.len() / total.max(1);
            let mut off = 0;
            for &(id, m) in parts {
                if let Some(gp) = acc(grads, nodes, id) {
                    for i in 0..n {
                        for j in 0..m {
                            gp[i * m + j] += g[i * total + off + j];
                        }
                    }
                }
                off += m;
            }
        }
        Op::SliceCols(a, start, end) => {
            let m = nodes[*a].shape[1];
            let w = end - start;
            if let Some(ga) = acc(grads, nodes, *a) {
                let n = ga.len() / m;
                for i in 0..n {
                    for j in 0..w {
                        ga[i * m + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            let inner = numel(&nodes[*a].shape[1..]);
            if let Some(ga) = acc(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..inner {
                        ga[src * inner + j] += g[r * inner + j];
                    }
                }
            }
        }
        Op::SegmentSum(a, seg) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &s) in seg.iter().enumerate() {
                    ga[i] += g[s];
                }
            }
        }
        Op::Reshape(a) => unary_backward(nodes, grads, *a, g, |_| 1.0),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Detached copy of the value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape and value agree")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&v| f(v)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, value, op(self.id), rg)
    }

    fn binary(&self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value, bc, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let bc = bcast(name, &a.shape, &b.shape)?;
            let inner = b.value.len();
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let value: Vec<f64> = match bc {
                Bcast::Same => a
                    .value
                    .iter()
                    .zip(&b.value)
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
                Bcast::Rows => a
                    .value
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.value[i % inner]))
                    .collect(),
            };
            (
                a.shape.clone(),
                value,
                bc,
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self
            .tape
            .push(shape, value, Op::Binary(kind, self.id, other.id, bc), rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, n, m, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ok = a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0];
            if !ok {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; n * m];
            gemm(n, k, m, &a.value, false, &b.value, false, &mut c, false);
            (c, n, m, a.requires_grad || b.requires_grad)
        };
        Ok(self
            .tape
            .push(vec![n, m], value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map(|v| v * c, |a| Op::Scale(a, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map(|v| v + c, Op::AddScalar)
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.map(f64::ln, Op::Ln)
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|v| v.max(0.0), Op::Relu)
    }

    /// `max(0, x)`.
    pub fn max0(&self) -> Var<'t> {
        self.relu()
    }

    /// `min(0, x)`.
    pub fn min0(&self) -> Var<'t> {
        self.neg().relu().neg()
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map(sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.map(f64::tanh, Op::Tanh)
    }

    pub fn abs(&self) -> Var<'t> {
        self.map(f64::abs, Op::Abs)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.map(f64::sqrt, Op::Sqrt)
    }

    pub fn pow(&self, p: f64) -> Var<'t> {
        self.map(|v| v.powf(p), |a| Op::Pow(a, p))
    }

    pub fn square(&self) -> Var<'t> {
        self.pow(2.0)
    }

    /// `sqrt(x^2 + delta)`, a differentiable stand-in for `|x|`.
    pub fn smooth_abs(&self, delta: f64) -> Var<'t> {
        self.square().add_scalar(delta).sqrt()
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map(|v| v.clamp(lo, hi), |a| Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum(), n.requires_grad)
        };
        self.tape.push(Vec::new(), vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.iter().sum::<f64>() / n.value.len() as f64,
                n.requires_grad,
            )
        };
        self.tape.push(Vec::new(), vec![s], Op::Mean(self.id), rg)
    }

    /// Sum over the leading axis.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.is_empty() {
                return Err(Error::shape("sum_rows", &n.shape, &[]));
            }
            let inner = numel(&n.shape[1..]);
            let mut out = vec![0.0; inner];
            for (i, v) in n.value.iter().enumerate() {
                out[i % inner] += v;
            }
            (n.shape[1..].to_vec(), out, n.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::SumRows(self.id), rg))
    }

    /// Columns `start..end` of a 2-D var.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, n, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (n, m) = cols_of(&a.shape)?;
            if start > end || end > m {
                return Err(Error::shape("slice_cols", &a.shape, &[start, end]));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(n * w);
            for i in 0..n {
                out.extend_from_slice(&a.value[i * m + start..i * m + end]);
            }
            (out, n, a.requires_grad)
        };
        Ok(self.tape.push(
            vec![n, end - start],
            value,
            Op::SliceCols(self.id, start, end),
            rg,
        ))
    }

    /// Rows `idx` of the leading axis (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.is_empty() {
                return Err(Error::shape("gather_rows", &a.shape, &[idx.len()]));
            }
            let inner = numel(&a.shape[1..]);
            let mut out = Vec::with_capacity(idx.len() * inner);
            for &r in idx {
                if r >= a.shape[0] {
                    return Err(Error::shape("gather_rows", &a.shape, &[r]));
                }
                out.extend_from_slice(&a.value[r * inner..(r + 1) * inner]);
            }
            let mut shape = a.shape.clone();
            shape[0] = idx.len();
            (shape, out, a.requires_grad)
        };
        Ok(self
            .tape
            .push(shape, value, Op::GatherRows(self.id, idx.into()), rg))
    }

    /// `out[g] = sum of x[i] over i with segment[i] == g`, for a flat `x`.
    pub fn segment_sum(&self, segment: &[usize], groups: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.value.len() != segment.len() {
                return Err(Error::shape("segment_sum", &a.shape, &[segment.len()]));
            }
            let mut out = vec![0.0; groups];
            for (v, &s) in a.value.iter().zip(segment) {
                if s >= groups {
                    return Err(Error::shape("segment_sum", &[groups], &[s]));
                }
                out[s] += v;
            }
            (out, a.requires_grad)
        };
        Ok(self.tape.push(
            vec![groups],
            value,
            Op::SegmentSum(self.id, segment.into()),
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if numel(shape) != a.value.len() {
                return Err(Error::shape("reshape", &a.shape, shape));
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Splits a 2-D var into column blocks of the given widths.
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Var<'t>>> {
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let v = self.slice_cols(start, start + w);
                start += w;
                v
            })
            .collect()
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

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        assert_eq!(i.matmul(m).unwrap().to_vec(), vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4]));
        let err = a.add(c).unwrap_err().to_string();
        assert!(err.starts_with("add"), "{err}");
    }

    #[test]
    fn row_broadcast() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&Tensor::vector(vec![10.0, 20.0]).with_grad());
        let s = a.add(b).unwrap();
        assert_eq!(s.to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        let g = tape.backward(s.sum()).unwrap();
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_and_minimum() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0).with_grad());
        let g = tape.backward(x.scale(3.0)).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);

        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0]).with_grad());
        let loss = x.add_scalar(-1.0).square().mean();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(&Tensor::vector(vec![3.0, 4.0]).with_grad());
        let g = tape.backward(c.mul(x).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn segment_and_gather() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]).with_grad());
        let s = x.segment_sum(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(s.to_vec(), vec![4.0, 6.0]);
        let w = tape.constant(Tensor::vector(vec![1.0, 10.0]));
        let g = tape.backward(s.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 10.0, 1.0, 10.0]);

        let tape = Tape::new();
        let m = tape.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let r = m.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(r.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let g = tape.backward(r.sum()).unwrap();
        assert_eq!(g.get(m).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = c.split_cols(&[1, 2]).unwrap();
        assert_eq!(parts[0].to_vec(), a.to_vec());
        assert_eq!(parts[1].to_vec(), b.to_vec());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert!(sigmoid(-1000.0).is_finite());
        assert!(sigmoid(1000.0) == 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
