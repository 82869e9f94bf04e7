//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every optimization step. Operations append a
//! node holding the op, the ids of its inputs and its forward value. Node ids
//! are handed out in push order, so the node list is already topologically
//! sorted and `backward` is a single reverse sweep.

use std::fmt;

use crate::error::{Error, Result};
use crate::numcore::tensor::{matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, Axis),
    MeanAxis(usize, Axis),
    Concat(Vec<usize>, Axis),
    Slice {
        src: usize,
        axis: Axis,
        start: usize,
        end: usize,
    },
    Transpose(usize),
}

/// Discriminant of a tape operation, used in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    Concat,
    Slice,
    Transpose,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Const => "const",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
        }
    }

    /// Every differentiable primitive.
    pub const PRIMITIVES: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Const => OpKind::Const,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(_) => OpKind::Transpose,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::Slice { src, .. } => vec![*src],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

/// How one operand of a binary op maps onto the output.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Full,
    Scalar,
    Row,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Full));
    }
    if b.is_scalar_like() {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Scalar));
    }
    if a.is_scalar_like() {
        return Ok((b.shape().to_vec(), Bcast::Scalar, Bcast::Full));
    }
    let is_row = |t: &Tensor| t.rows() == 1 && t.rank() <= 2;
    if b.rank() == 2 && is_row(a) && a.cols() == b.cols() {
        return Ok((b.shape().to_vec(), Bcast::Row, Bcast::Full));
    }
    if a.rank() == 2 && is_row(b) && a.cols() == b.cols() {
        return Ok((a.shape().to_vec(), Bcast::Full, Bcast::Row));
    }
    Err(Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

#[inline]
fn bidx(mode: Bcast, i: usize, cols: usize) -> usize {
    match mode {
        Bcast::Full => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (shape, ma, mb) = broadcast(op, a, b)?;
    let n: usize = shape.iter().product();
    let cols = match shape.len() {
        0 => 1,
        1 => shape[0],
        _ => shape[1..].iter().product(),
    };
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| f(ad[bidx(ma, i, cols)], bd[bidx(mb, i, cols)]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Reduces an output-shaped gradient back onto an operand that was broadcast.
fn unbroadcast(g: &Tensor, mode: Bcast, target: &Tensor) -> Tensor {
    match mode {
        Bcast::Full => g.clone(),
        Bcast::Scalar => Tensor::from_parts(target.shape().to_vec(), vec![g.sum()]),
        Bcast::Row => {
            let c = g.cols();
            let mut acc = vec![0.0; c];
            for r in 0..g.rows() {
                for (a, v) in acc.iter_mut().zip(g.row_slice(r)) {
                    *a += v;
                }
            }
            Tensor::from_parts(target.shape().to_vec(), acc)
        }
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::invalid(op, format!("expects a rank-2 operand, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - mx).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..start + c] {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn compute(op: &Op, vals: &[Tensor]) -> Result<Tensor> {
    Ok(match *op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => vals[a].matmul(&vals[b])?,
        Op::Add(a, b) => binary("add", &vals[a], &vals[b], |x, y| x + y)?,
        Op::Sub(a, b) => binary("sub", &vals[a], &vals[b], |x, y| x - y)?,
        Op::Mul(a, b) => binary("mul", &vals[a], &vals[b], |x, y| x * y)?,
        Op::Scale(a, k) => vals[a].map(|x| k * x),
        Op::Relu(a) => vals[a].map(|x| x.max(0.0)),
        Op::Tanh(a) => vals[a].map(f64::tanh),
        Op::Sigmoid(a) => vals[a].map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
        Op::Exp(a) => vals[a].map(f64::exp),
        Op::Log(a) => vals[a].map(f64::ln),
        Op::Abs(a) => vals[a].map(f64::abs),
        Op::Square(a) => vals[a].map(|x| x * x),
        Op::Softmax(a) => softmax_rows(&vals[a]),
        Op::LogSoftmax(a) => log_softmax_rows(&vals[a]),
        Op::Sum(a) => Tensor::scalar(vals[a].sum()),
        Op::Mean(a) => Tensor::scalar(vals[a].mean()),
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = &vals[a];
            let (r, c) = require_rank2("reduce_axis", x)?;
            let mean = matches!(op, Op::MeanAxis(..));
            match axis {
                Axis::Rows => {
                    let mut acc = vec![0.0; c];
                    for i in 0..r {
                        for (s, v) in acc.iter_mut().zip(x.row_slice(i)) {
                            *s += v;
                        }
                    }
                    if mean {
                        acc.iter_mut().for_each(|s| *s /= r as f64);
                    }
                    Tensor::from_parts(vec![1, c], acc)
                }
                Axis::Cols => {
                    let div = if mean { c as f64 } else { 1.0 };
                    let acc = (0..r).map(|i| x.row_slice(i).iter().sum::<f64>() / div).collect();
                    Tensor::from_parts(vec![r, 1], acc)
                }
            }
        }
        Op::Concat(ref xs, axis) => {
            let first = &vals[xs[0]];
            let (r0, c0) = require_rank2("concat", first)?;
            match axis {
                Axis::Rows => {
                    let parts: Vec<Tensor> = xs.iter().map(|&i| vals[i].clone()).collect();
                    for p in &parts {
                        if p.rank() != 2 || p.cols() != c0 {
                            return Err(Error::Shape {
                                op: "concat",
                                lhs: first.shape().to_vec(),
                                rhs: p.shape().to_vec(),
                            });
                        }
                    }
                    Tensor::concat_rows(&parts)?
                }
                Axis::Cols => {
                    let mut total = 0;
                    for &i in xs {
                        let p = &vals[i];
                        if p.rank() != 2 || p.rows() != r0 {
                            return Err(Error::Shape {
                                op: "concat",
                                lhs: first.shape().to_vec(),
                                rhs: p.shape().to_vec(),
                            });
                        }
                        total += p.cols();
                    }
                    let mut data = Vec::with_capacity(r0 * total);
                    for r in 0..r0 {
                        for &i in xs {
                            data.extend_from_slice(vals[i].row_slice(r));
                        }
                    }
                    Tensor::from_parts(vec![r0, total], data)
                }
            }
        }
        Op::Slice {
            src,
            axis,
            start,
            end,
        } => {
            let x = &vals[src];
            let (r, c) = require_rank2("slice", x)?;
            let extent = if axis == Axis::Rows { r } else { c };
            if start >= end || end > extent {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{end} out of bounds for {:?} along {axis:?}", x.shape()),
                ));
            }
            match axis {
                Axis::Rows => x.slice_rows(start, end)?,
                Axis::Cols => {
                    let mut data = Vec::with_capacity(r * (end - start));
                    for i in 0..r {
                        data.extend_from_slice(&x.row_slice(i)[start..end]);
                    }
                    Tensor::from_parts(vec![r, end - start], data)
                }
            }
        }
        Op::Transpose(a) => {
            require_rank2("transpose", &vals[a])?;
            vals[a].transpose()
        }
    })
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when no path reaches it from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a trainable leaf. Unreached leaves get zeros.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.adjoints[v.0]
            .as_ref()
            .expect("backward fills every trainable leaf")
    }
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    fault: Option<(OpKind, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Trainable parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Const, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Handle for node `id`.
    pub fn var(&self, id: usize) -> Var {
        assert!(id < self.ops.len(), "node #{id} not on tape");
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn item(&self, v: Var) -> f64 {
        self.values[v.0].item()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.ops[v.0].kind()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.trainable[v.0]
    }

    pub fn trainable_leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| Var(i))
    }

    /// Scales the backward rule of every `kind` node by `factor`. Only used to
    /// check that gradient checking catches a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn push_raw(&mut self, op: Op, value: Tensor, trainable: bool) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.trainable.push(trainable);
        Var(self.ops.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.values)?;
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
                node: self.ops.len(),
            });
        }
        Ok(self.push_raw(op, value, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.push(Op::Scale(a.0, k))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let c = self.scalar(k);
        self.add(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a.0))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a.0))
    }

    /// Row-wise log-softmax over the last axis, max-shifted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a.0))
    }

    /// `Axis::Rows` collapses rows to `[1, c]`; `Axis::Cols` gives `[r, 1]`.
    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.push(Op::SumAxis(a.0, axis))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.push(Op::MeanAxis(a.0, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        self.push(Op::Concat(parts.iter().map(|v| v.0).collect(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice {
            src: a.0,
            axis,
            start,
            end,
        })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a.0))
    }

    /// Row-wise log-sum-exp, `[r, c] -> [r, 1]`, composed from primitives:
    /// `x - log_softmax(x)` is constant along each row and equals the lse.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax(a)?;
        let d = self.sub(a, ls)?;
        self.mean_axis(d, Axis::Cols)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.values[loss.0];
        if !lv.is_scalar_like() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        adj[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let op = &self.ops[id];
            let contributions = self.local_grads(id, op, &g)?;
            let factor = match self.fault {
                Some((kind, f)) if kind == op.kind() => f,
                _ => 1.0,
            };
            for (input, mut gi) in contributions {
                if factor != 1.0 {
                    gi.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
                if !gi.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        op: op.kind().name(),
                        node: id,
                    });
                }
                match &mut adj[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            adj[id] = Some(g);
        }
        for (i, slot) in adj.iter_mut().enumerate() {
            if self.trainable[i] && slot.is_none() {
                *slot = Some(Tensor::zeros(self.values[i].shape().to_vec()));
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn local_grads(&self, id: usize, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let v = &self.values;
        let y = &v[id];
        let elementwise = |a: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(usize, Tensor)> {
            let x = &v[a];
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![(a, Tensor::from_parts(x.shape().to_vec(), data))]
        };
        Ok(match *op {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) => {
                let (n, k) = (v[a].rows(), v[a].cols());
                let m = v[b].cols();
                let ga = matmul_nt(g.data(), v[b].data(), n, m, k);
                let gb = matmul_tn(v[a].data(), g.data(), n, k, m);
                vec![
                    (a, Tensor::from_parts(v[a].shape().to_vec(), ga)),
                    (b, Tensor::from_parts(v[b].shape().to_vec(), gb)),
                ]
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (_, ma, mb) = broadcast("add", &v[a], &v[b])?;
                let ga = unbroadcast(g, ma, &v[a]);
                let mut gb = unbroadcast(g, mb, &v[b]);
                if matches!(op, Op::Sub(..)) {
                    gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Mul(a, b) => {
                let (_, ma, mb) = broadcast("mul", &v[a], &v[b])?;
                let cols = g.cols();
                let (ad, bd) = (v[a].data(), v[b].data());
                let mut ga_full = Vec::with_capacity(g.len());
                let mut gb_full = Vec::with_capacity(g.len());
                for (i, &gi) in g.data().iter().enumerate() {
                    ga_full.push(gi * bd[bidx(mb, i, cols)]);
                    gb_full.push(gi * ad[bidx(ma, i, cols)]);
                }
                let ga_full = Tensor::from_parts(g.shape().to_vec(), ga_full);
                let gb_full = Tensor::from_parts(g.shape().to_vec(), gb_full);
                vec![
                    (a, unbroadcast(&ga_full, ma, &v[a])),
                    (b, unbroadcast(&gb_full, mb, &v[b])),
                ]
            }
            Op::Scale(a, k) => elementwise(a, &|_, _, gi| k * gi),
            Op::Relu(a) => elementwise(a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            Op::Tanh(a) => elementwise(a, &|_, y, gi| gi * (1.0 - y * y)),
            Op::Sigmoid(a) => elementwise(a, &|_, y, gi| gi * y * (1.0 - y)),
            Op::Exp(a) => elementwise(a, &|_, y, gi| gi * y),
            Op::Log(a) => elementwise(a, &|x, _, gi| gi / x),
            Op::Abs(a) => elementwise(a, &|x, _, gi| {
                if x > 0.0 {
                    gi
                } else if x < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }),
            Op::Square(a) => elementwise(a, &|x, _, gi| 2.0 * x * gi),
            Op::Softmax(a) => {
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(a, Tensor::from_parts(y.shape().to_vec(), out))]
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| gi - yi.exp() * gs));
                }
                vec![(a, Tensor::from_parts(y.shape().to_vec(), out))]
            }
            Op::Sum(a) => vec![(a, Tensor::full(v[a].shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = v[a].len() as f64;
                vec![(a, Tensor::full(v[a].shape().to_vec(), g.item() / n))]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = (v[a].rows(), v[a].cols());
                let mean = matches!(op, Op::MeanAxis(..));
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = match axis {
                            Axis::Rows => g.data()[j] / if mean { r as f64 } else { 1.0 },
                            Axis::Cols => g.data()[i] / if mean { c as f64 } else { 1.0 },
                        };
                    }
                }
                vec![(a, Tensor::from_parts(vec![r, c], out))]
            }
            Op::Concat(ref xs, axis) => {
                let mut res = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &i in xs {
                    let (r, c) = (v[i].rows(), v[i].cols());
                    let part = match axis {
                        Axis::Rows => {
                            let gc = g.cols();
                            g.data()[offset * gc..(offset + r) * gc].to_vec()
                        }
                        Axis::Cols => {
                            let gc = g.cols();
                            let mut d = Vec::with_capacity(r * c);
                            for row in 0..r {
                                d.extend_from_slice(&g.data()[row * gc + offset..row * gc + offset + c]);
                            }
                            d
                        }
                    };
                    offset += if axis == Axis::Rows { r } else { c };
                    res.push((i, Tensor::from_parts(v[i].shape().to_vec(), part)));
                }
                res
            }
            Op::Slice {
                src,
                axis,
                start,
                end,
            } => {
                let (r, c) = (v[src].rows(), v[src].cols());
                let mut out = vec![0.0; r * c];
                match axis {
                    Axis::Rows => out[start * c..end * c].copy_from_slice(g.data()),
                    Axis::Cols => {
                        let w = end - start;
                        for i in 0..r {
                            out[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                        }
                    }
                }
                vec![(src, Tensor::from_parts(vec![r, c], out))]
            }
            Op::Transpose(a) => vec![(a, g.transpose())],
        })
    }

    /// Input node ids of `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs().into_iter().map(Var).collect()
    }

    /// Recomputes every node after `node` with its value replaced by
    /// `value` and returns the new value of `output`. Used for finite
    /// differences against intermediate nodes.
    pub fn replay_with(&self, node: Var, value: Tensor, output: Var) -> Result<Tensor> {
        let mut vals: Vec<Tensor> = self.values[..=output.0].to_vec();
        vals[node.0] = value;
        for id in node.0 + 1..=output.0 {
            match self.ops[id] {
                Op::Leaf | Op::Const => {}
                ref op => vals[id] = compute(op, &vals)?,
            }
        }
        Ok(vals.swap_remove(output.0))
    }
}
