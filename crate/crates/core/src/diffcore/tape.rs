//! Eager reverse-mode differentiation over an explicit tape.
//!
//! Every primitive evaluates its value immediately and appends a node that
//! remembers its parents plus whatever the backward rule needs. Nodes are
//! pushed in evaluation order, so the tape is already topologically sorted;
//! [`Tape::backward`] walks it once in reverse.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{axis_extents, gemm, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Backward rule for a primitive defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input receives none).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Softmax { input: usize, axis: usize },
    Ln(usize),
    Exp(usize),
    Relu(usize),
    Sigmoid(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Gather { input: usize, rows: Rc<[usize]> },
    Reshape(usize),
    MinAxis { input: usize, axis: usize, argmin: Vec<usize> },
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()).expect("node shapes are valid"),
        }
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

    /// A differentiable input (parameter or data we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Records a primitive whose backward rule lives outside the tape.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, op: Rc<dyn CustomOp>) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = self.any_needs(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, needs)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn any_needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar output. Every node is visited once.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_value = &nodes[output.id].value;
        if out_value.numel() != 1 {
            return Err(Error::NonScalar(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::new(out_value.shape(), vec![1.0])?);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = node_backward(&nodes, node, &g)?;
            for (parent, pg) in contributions {
                if !nodes[parent].needs_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.accumulate(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn node_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let y = &node.value;
    Ok(match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), "mul", |g, b| g * b)?),
            (*b, g.zip_map(val(*a), "mul", |g, a| g * a)?),
        ],
        Op::Div(a, b) => {
            let ga = g.zip_map(val(*b), "div", |g, b| g / b)?;
            let gb = ga.zip_map(y, "div", |ga, y| -ga * y)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::AddRow(a, r) => {
            let n = val(*r).numel();
            let mut gr = vec![0.0; n];
            for chunk in g.data().chunks(n) {
                for (acc, v) in gr.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*r, Tensor::new(val(*r).shape(), gr)?)]
        }
        Op::MulRow(a, r) => {
            let row = val(*r).data();
            let n = row.len();
            let mut ga = g.clone();
            let mut gr = vec![0.0; n];
            for (gc, xc) in ga.data_mut().chunks_mut(n).zip(val(*a).data().chunks(n)) {
                for i in 0..n {
                    gr[i] += gc[i] * xc[i];
                    gc[i] *= row[i];
                }
            }
            vec![(*a, ga), (*r, Tensor::new(val(*r).shape(), gr)?)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut ga = vec![0.0; m * k];
            gemm(g.data(), bv.data(), &mut ga, m, n, k, false, true, false);
            let mut gb = vec![0.0; k * n];
            gemm(av.data(), g.data(), &mut gb, k, m, n, true, false, false);
            vec![(*a, Tensor::new(&[m, k], ga)?), (*b, Tensor::new(&[k, n], gb)?)]
        }
        Op::Softmax { input, axis } => {
            let (outer, len, inner) = y.axis_extents(*axis)?;
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                    for k in 0..len {
                        gx[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                    }
                }
            }
            vec![(*input, Tensor::new(y.shape(), gx)?)]
        }
        Op::Ln(a) => vec![(*a, g.zip_map(val(*a), "ln", |g, x| g / x)?)],
        Op::Exp(a) => vec![(*a, g.zip_map(y, "exp", |g, y| g * y)?)],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?)],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?)],
        Op::LayerNorm { input, inv_std } => {
            let n = *y.shape().last().expect("rank >= 1");
            let mut gx = vec![0.0; y.numel()];
            for (r, ((gx_row, g_row), y_row)) in gx
                .chunks_mut(n)
                .zip(g.data().chunks(n))
                .zip(y.data().chunks(n))
                .enumerate()
            {
                let mean_g = g_row.iter().sum::<f64>() / n as f64;
                let mean_gy = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for i in 0..n {
                    gx_row[i] = inv_std[r] * (g_row[i] - mean_g - y_row[i] * mean_gy);
                }
            }
            vec![(*input, Tensor::new(y.shape(), gx)?)]
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let x = val(*input);
            let (outer, len, inner) = x.axis_extents(*axis)?;
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        gx[(o * len + k) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            vec![(*input, Tensor::new(x.shape(), gx)?)]
        }
        Op::SumAll(a) => {
            let gv = g.data()[0];
            vec![(*a, Tensor::full(val(*a).shape(), gv)?)]
        }
        Op::MeanAll(a) => {
            let x = val(*a);
            let gv = g.data()[0] / x.numel() as f64;
            vec![(*a, Tensor::full(x.shape(), gv)?)]
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = y.axis_extents(*axis)?;
            let total = y.shape()[*axis];
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for &p in inputs {
                let len = val(p).shape()[*axis];
                let mut gp = Vec::with_capacity(val(p).numel());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    gp.extend_from_slice(&g.data()[start..start + len * inner]);
                }
                out.push((p, Tensor::new(val(p).shape(), gp)?));
                offset += len;
            }
            out
        }
        Op::Gather { input, rows } => {
            let x = val(*input);
            let width = x.numel() / x.shape()[0];
            let mut gx = vec![0.0; x.numel()];
            for (dst, &src) in rows.iter().enumerate() {
                let gsrc = &g.data()[dst * width..(dst + 1) * width];
                for (acc, v) in gx[src * width..(src + 1) * width].iter_mut().zip(gsrc) {
                    *acc += v;
                }
            }
            vec![(*input, Tensor::new(x.shape(), gx)?)]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::MinAxis { input, axis, argmin } => {
            let x = val(*input);
            let (_, len, inner) = x.axis_extents(*axis)?;
            let mut gx = vec![0.0; x.numel()];
            for (slot, &k) in argmin.iter().enumerate() {
                let (o, i) = (slot / inner, slot % inner);
                gx[(o * len + k) * inner + i] = g.data()[slot];
            }
            vec![(*input, Tensor::new(x.shape(), gx)?)]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = op.backward(&ins, y, g)?;
            if gs.len() != inputs.len() {
                return Err(Error::InvalidArgument(format!(
                    "custom op {} returned {} gradients for {} inputs",
                    op.name(),
                    gs.len(),
                    inputs.len()
                )));
            }
            let mut out = Vec::new();
            for (&p, gp) in inputs.iter().zip(gs) {
                if let Some(gp) = gp {
                    val(p).expect_same_shape(&gp, "custom backward")?;
                    out.push((p, gp));
                }
            }
            out
        }
    })
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("operands recorded on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.any_needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.any_needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self.binary(&other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(&other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(&other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), "div", |a, b| a / b)?;
        Ok(self.binary(&other, v, Op::Div(self.id, other.id)))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("an operand always matches itself")
    }

    fn row_operand(&self, row: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        self.same_tape(row)?;
        let (x, r) = (self.value(), row.value());
        let last = *x.shape().last().expect("rank >= 1");
        if r.rank() != 1 || r.numel() != last {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        Ok((x, r))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = self.row_operand(&row, "add_row")?;
        let n = r.numel();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (a, b) in chunk.iter_mut().zip(r.data()) {
                *a += b;
            }
        }
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.binary(&row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row along the last axis by a vector.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (x, r) = self.row_operand(&row, "mul_row")?;
        let n = r.numel();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (a, b) in chunk.iter_mut().zip(r.data()) {
                *a *= b;
            }
        }
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.binary(&row, v, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(a.data(), b.data(), &mut out, m, k, n, false, false, false);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.binary(&other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_extents(axis)?;
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x.data()[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x.data()[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(v, Op::Softmax { input: self.id, axis }))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// ReLU; the derivative at exactly zero is taken as zero.
    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Normalizes over the last axis (no affine part; see `mul_row`/`add_row`).
    pub fn layer_norm(&self) -> Var<'t> {
        let x = self.value();
        let n = *x.shape().last().expect("rank >= 1");
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / n);
        for (o, row) in out.chunks_mut(n).zip(x.data().chunks(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (dst, v) in o.iter_mut().zip(row) {
                *dst = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::new(x.shape(), out).expect("same shape");
        self.unary(v, Op::LayerNorm { input: self.id, inv_std })
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_extents(axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + k) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let v = Tensor::new(&reduced_shape(x.shape(), axis), out)?;
        let op = if mean {
            Op::MeanAxis { input: self.id, axis }
        } else {
            Op::SumAxis { input: self.id, axis }
        };
        Ok(self.unary(v, op))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.unary(v, Op::MeanAll(self.id))
    }

    /// Minimum along `axis`; the gradient is routed to the first minimizer.
    pub fn min_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = x.axis_extents(axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut argmin = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..len {
                    if x.data()[(o * len + k) * inner + i] < x.data()[(o * len + best) * inner + i] {
                        best = k;
                    }
                }
                out[o * inner + i] = x.data()[(o * len + best) * inner + i];
                argmin[o * inner + i] = best;
            }
        }
        let v = Tensor::new(&reduced_shape(x.shape(), axis), out)?;
        Ok(self.unary(
            v,
            Op::MinAxis {
                input: self.id,
                axis,
                argmin,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if rows.is_empty() {
            return Err(Error::Empty("gather index list"));
        }
        let n = x.shape()[0];
        let width = x.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange { index: r, len: n });
            }
            out.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let v = Tensor::new(&shape, out)?;
        Ok(self.unary(
            v,
            Op::Gather {
                input: self.id,
                rows: rows.into(),
            },
        ))
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat operand list"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor>> = parts
        .iter()
        .map(|p| p.same_tape(first).map(|_| p.value()))
        .collect::<Result<_>>()?;
    let base = values[0].shape().to_vec();
    axis_extents(&base, axis)?;
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let (outer, _, inner) = axis_extents(&shape, axis)?;
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.any_needs(&ids);
    Ok(tape.push(Tensor::new(&shape, out)?, Op::Concat { inputs: ids, axis }, needs))
}
