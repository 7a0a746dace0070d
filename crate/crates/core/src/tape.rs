//! Recorded-operation reverse-mode differentiation.
//!
//! Every operation appends one node to the [`Tape`]. Node ids are handed out
//! in creation order, so the node list is already a topological order and the
//! backward pass is a single reverse sweep.
//!
//! ```
//! use tvqa_core::tape::Tape;
//! use tvqa_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
//! let sq = tape.hadamard(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Log,
    Scale(f64),
    Shift(f64),
}

/// Coarse operation kind. Used to select a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Hadamard,
    AddBias,
    Tanh,
    Relu,
    Sigmoid,
    Log,
    Scale,
    Shift,
    ScaleBy,
    ScaleRows,
    Softmax,
    MaxPool,
    ElemMax,
    Conv1d,
    Sum,
    Mean,
    SumAll,
    IndexSelect,
    Reshape,
    Stack,
    NormalizeSum,
    BatchNormTrain,
    BatchNormEval,
    BinaryCrossEntropy,
}

impl OpTag {
    pub fn parse(name: &str) -> Option<OpTag> {
        use OpTag::*;
        let tag = match name {
            "matmul" => MatMul,
            "transpose" => Transpose,
            "add" => Add,
            "sub" => Sub,
            "hadamard" => Hadamard,
            "add_bias" => AddBias,
            "tanh" => Tanh,
            "relu" => Relu,
            "sigmoid" => Sigmoid,
            "log" => Log,
            "scale" => Scale,
            "shift" => Shift,
            "scale_by" => ScaleBy,
            "scale_rows" => ScaleRows,
            "softmax" => Softmax,
            "maxpool" => MaxPool,
            "elem_max" => ElemMax,
            "conv1d" => Conv1d,
            "sum" => Sum,
            "mean" => Mean,
            "sum_all" => SumAll,
            "index_select" => IndexSelect,
            "reshape" => Reshape,
            "stack" => Stack,
            "normalize_sum" => NormalizeSum,
            "batch_norm_train" => BatchNormTrain,
            "batch_norm_eval" => BatchNormEval,
            "bce" => BinaryCrossEntropy,
            _ => return None,
        };
        Some(tag)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddBias(Var, Var),
    Unary(Var, Unary),
    ScaleBy(Var, Var),
    ScaleRows(Var, Var),
    Softmax(Var, usize),
    MaxPool {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    ElemMax {
        inputs: Vec<Var>,
        winner: Vec<usize>,
    },
    Conv1d {
        seq: Var,
        filter: Var,
        bias: Var,
    },
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    IndexSelect {
        input: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Stack(Vec<Var>),
    NormalizeSum(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Transpose(..) => OpTag::Transpose,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Hadamard(..) => OpTag::Hadamard,
            Op::AddBias(..) => OpTag::AddBias,
            Op::Unary(_, u) => match u {
                Unary::Tanh => OpTag::Tanh,
                Unary::Relu => OpTag::Relu,
                Unary::Sigmoid => OpTag::Sigmoid,
                Unary::Log => OpTag::Log,
                Unary::Scale(_) => OpTag::Scale,
                Unary::Shift(_) => OpTag::Shift,
            },
            Op::ScaleBy(..) => OpTag::ScaleBy,
            Op::ScaleRows(..) => OpTag::ScaleRows,
            Op::Softmax(..) => OpTag::Softmax,
            Op::MaxPool { .. } => OpTag::MaxPool,
            Op::ElemMax { .. } => OpTag::ElemMax,
            Op::Conv1d { .. } => OpTag::Conv1d,
            Op::Sum(..) => OpTag::Sum,
            Op::Mean(..) => OpTag::Mean,
            Op::SumAll(..) => OpTag::SumAll,
            Op::IndexSelect { .. } => OpTag::IndexSelect,
            Op::Reshape(..) => OpTag::Reshape,
            Op::Stack(..) => OpTag::Stack,
            Op::NormalizeSum(..) => OpTag::NormalizeSum,
            Op::BatchNormTrain { .. } => OpTag::BatchNormTrain,
            Op::BatchNormEval { .. } => OpTag::BatchNormEval,
            Op::Bce { .. } => OpTag::BinaryCrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lanes of a 1-D or 2-D tensor along `axis`: `(lane_count, lane_len, index)`.
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, impl Fn(usize, usize) -> usize)> {
    let (count, len, cols, along_rows) = match (shape, axis) {
        ([n], 0) => (1, *n, *n, true),
        ([r, c], 0) => (*c, *r, *c, false),
        ([r, c], 1) => (*r, *c, *c, true),
        _ => {
            return Err(Error::Shape(format!("axis {axis} is not valid for shape {shape:?}")));
        }
    };
    let index = move |lane: usize, j: usize| {
        if along_rows {
            lane * cols + j
        } else {
            j * cols + lane
        }
    };
    Ok((count, len, index))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Start offset of a window of size `len` centered (or left-biased, for even
/// sizes) on position `i`.
pub fn window_start(i: usize, len: usize) -> isize {
    i as isize - (len / 2) as isize
}

pub const BCE_CLAMP: f64 = 1e-12;
const FAULT_FACTOR: f64 = 1.25;

/// A single-use recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    fault: Option<OpTag>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose backward rule for `tag` is deliberately wrong. Only meant
    /// as a negative control for gradient checking.
    pub fn with_fault(tag: OpTag) -> Self {
        Tape {
            fault: Some(tag),
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        value.check_finite(&format!("{:?} output", op.tag()))?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// How far the recorded computation is from a point where a max, an
    /// elementwise max or a relu would switch branch: the smallest gap
    /// between a winner and its runner-up, or between a relu input and zero.
    /// Infinite when nothing on the tape can switch.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            match &node.op {
                Op::Unary(a, Unary::Relu) => {
                    for &x in nodes[a.0].value.data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::MaxPool { input, axis, .. } => {
                    let t = &nodes[input.0].value;
                    if let Ok((count, len, idx)) = lanes(t.shape(), *axis) {
                        for lane in 0..count {
                            let mut lane_vals: Vec<f64> = (0..len).map(|j| t.data()[idx(lane, j)]).collect();
                            lane_vals.sort_by(|a, b| b.total_cmp(a));
                            if let [top, next, ..] = lane_vals[..] {
                                margin = margin.min(top - next);
                            }
                        }
                    }
                }
                Op::ElemMax { inputs, winner } => {
                    for (i, (&top, &w)) in node.value.data().iter().zip(winner).enumerate() {
                        for (k, v) in inputs.iter().enumerate() {
                            if k != w {
                                margin = margin.min(top - nodes[v.0].value.data()[i]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product. A 1-D left operand is treated as a single row and the
    /// result stays 1-D.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = ta.dims2()?;
            let (k2, n) = match tb.shape() {
                [r, c] => (*r, *c),
                s => return Err(Error::Shape(format!("matmul right operand must be 2-D, got {s:?}"))),
            };
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul inner dimensions differ: {:?} x {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let out = matmul_raw(ta.data(), tb.data(), m, k, n);
            let shape = if ta.ndim() == 1 { vec![n] } else { vec![m, n] };
            (
                Tensor::new(shape, out)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |t| -> Result<Tensor> {
            let (r, c) = match t.shape() {
                [r, c] => (*r, *c),
                s => return Err(Error::Shape(format!("transpose needs a matrix, got {s:?}"))),
            };
            let data = (0..r * c).map(|i| t.data()[(i % r) * c + i / r]).collect();
            Tensor::new(vec![c, r], data)
        })?;
        self.push(value, Op::Transpose(a), self.requires(a))
    }

    fn zip_same(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{name} needs identical shapes, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((
            Tensor::new(ta.shape().to_vec(), data)?,
            nodes[a.0].requires_grad || nodes[b.0].requires_grad,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn hadamard(&self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.zip_same(a, b, "hadamard", |x, y| x * y)?;
        self.push(v, Op::Hadamard(a, b), rg)
    }

    /// Adds a length-n bias to every row of an `[m, n]` (or `[n]`) tensor.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let (_, n) = tx.dims2()?;
            if tb.shape() != [n] {
                return Err(Error::Shape(format!(
                    "bias {:?} does not match trailing dimension of {:?}",
                    tb.shape(),
                    tx.shape()
                )));
            }
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + tb.data()[i % n])
                .collect();
            (
                Tensor::new(tx.shape().to_vec(), data)?,
                nodes[x.0].requires_grad || nodes[bias.0].requires_grad,
            )
        };
        self.push(value, Op::AddBias(x, bias), rg)
    }

    pub fn unary(&self, a: Var, f: Unary) -> Result<Var> {
        let value = self.with(a, |t| -> Result<Tensor> {
            if f == Unary::Log {
                if let Some(x) = t.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive entry {x}")));
                }
            }
            Ok(t.map(|x| match f {
                Unary::Tanh => x.tanh(),
                Unary::Relu => x.max(0.0),
                Unary::Sigmoid => sigmoid(x),
                Unary::Log => x.ln(),
                Unary::Scale(c) => c * x,
                Unary::Shift(c) => x + c,
            }))
        })?;
        self.push(value, Op::Unary(a, f), self.requires(a))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }

    pub fn shift(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Shift(c))
    }

    /// Multiplies every entry of `x` by the scalar node `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[s.0].value;
            if ts.len() != 1 {
                return Err(Error::Shape(format!("scale_by needs a scalar, got {:?}", ts.shape())));
            }
            let c = ts.item();
            (
                nodes[x.0].value.map(|v| v * c),
                nodes[x.0].requires_grad || nodes[s.0].requires_grad,
            )
        };
        self.push(value, Op::ScaleBy(x, s), rg)
    }

    /// Row `i` of `x` is multiplied by `s[i]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
            let (m, n) = match tx.shape() {
                [m, n] => (*m, *n),
                sh => return Err(Error::Shape(format!("scale_rows needs a matrix, got {sh:?}"))),
            };
            if ts.shape() != [m] {
                return Err(Error::Shape(format!(
                    "scale_rows: {} row factors for {:?}",
                    ts.len(),
                    tx.shape()
                )));
            }
            let data = (0..m * n).map(|i| tx.data()[i] * ts.data()[i / n]).collect();
            (
                Tensor::new(vec![m, n], data)?,
                nodes[x.0].requires_grad || nodes[s.0].requires_grad,
            )
        };
        self.push(value, Op::ScaleRows(x, s), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = self.with(a, |t| -> Result<Tensor> {
            let (count, len, idx) = lanes(t.shape(), axis)?;
            let mut out = vec![0.0; t.len()];
            for lane in 0..count {
                let max = (0..len)
                    .map(|j| t.data()[idx(lane, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (t.data()[idx(lane, j)] - max).exp();
                    out[idx(lane, j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(lane, j)] /= total;
                }
            }
            Tensor::new(t.shape().to_vec(), out)
        })?;
        self.push(value, Op::Softmax(a, axis), self.requires(a))
    }

    /// Maximum along `axis`; the lowest index wins ties.
    pub fn maxpool(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, argmax) = self.with(a, |t| -> Result<(Tensor, Vec<usize>)> {
            let (count, len, idx) = lanes(t.shape(), axis)?;
            let mut out = Vec::with_capacity(count);
            let mut arg = Vec::with_capacity(count);
            for lane in 0..count {
                let mut best = idx(lane, 0);
                for j in 1..len {
                    if t.data()[idx(lane, j)] > t.data()[best] {
                        best = idx(lane, j);
                    }
                }
                out.push(t.data()[best]);
                arg.push(best);
            }
            Ok((Tensor::new(reduced_shape(t.shape(), axis), out)?, arg))
        })?;
        self.push(value, Op::MaxPool { input: a, axis, argmax }, self.requires(a))
    }

    /// Elementwise maximum across same-shaped inputs; earliest input wins ties.
    pub fn elem_max(&self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Shape("elem_max of no inputs".into()));
        }
        let (value, winner, rg) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[inputs[0].0].value;
            for v in inputs {
                if nodes[v.0].value.shape() != first.shape() {
                    return Err(Error::Shape("elem_max inputs differ in shape".into()));
                }
            }
            let mut out = first.data().to_vec();
            let mut winner = vec![0usize; out.len()];
            for (w, v) in inputs.iter().enumerate().skip(1) {
                for (i, &x) in nodes[v.0].value.data().iter().enumerate() {
                    if x > out[i] {
                        out[i] = x;
                        winner[i] = w;
                    }
                }
            }
            let rg = inputs.iter().any(|v| nodes[v.0].requires_grad);
            (Tensor::new(first.shape().to_vec(), out)?, winner, rg)
        };
        self.push(
            value,
            Op::ElemMax {
                inputs: inputs.to_vec(),
                winner,
            },
            rg,
        )
    }

    /// Same-length 1-D convolution over the rows of `seq` (`[M, d_in]`) with a
    /// `[L, d_in, d_out]` filter bank. Positions outside the sequence read as
    /// zero vectors.
    pub fn conv1d_same(&self, seq: Var, filter: Var, bias: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ts, tf, tb) = (&nodes[seq.0].value, &nodes[filter.0].value, &nodes[bias.0].value);
            let (m, din) = match ts.shape() {
                [m, d] => (*m, *d),
                s => return Err(Error::Shape(format!("conv1d sequence must be 2-D, got {s:?}"))),
            };
            let (len, fin, dout) = match tf.shape() {
                [l, i, o] => (*l, *i, *o),
                s => return Err(Error::Shape(format!("conv1d filter must be 3-D, got {s:?}"))),
            };
            if fin != din || tb.shape() != [dout] {
                return Err(Error::Shape(format!(
                    "conv1d shapes disagree: seq {:?}, filter {:?}, bias {:?}",
                    ts.shape(),
                    tf.shape(),
                    tb.shape()
                )));
            }
            let mut out = vec![0.0; m * dout];
            for i in 0..m {
                let orow = &mut out[i * dout..(i + 1) * dout];
                orow.copy_from_slice(tb.data());
                let start = window_start(i, len);
                for t in 0..len {
                    let p = start + t as isize;
                    if p < 0 || p >= m as isize {
                        continue;
                    }
                    let srow = ts.row(p as usize);
                    for (c, &sv) in srow.iter().enumerate() {
                        let frow = &tf.data()[(t * din + c) * dout..(t * din + c + 1) * dout];
                        for (o, fv) in orow.iter_mut().zip(frow) {
                            *o += sv * fv;
                        }
                    }
                }
            }
            let rg = [seq, filter, bias].iter().any(|v| nodes[v.0].requires_grad);
            (Tensor::new(vec![m, dout], out)?, rg)
        };
        self.push(value, Op::Conv1d { seq, filter, bias }, rg)
    }

    fn reduce(&self, a: Var, axis: usize, mean: bool) -> Result<Tensor> {
        self.with(a, |t| {
            let (count, len, idx) = lanes(t.shape(), axis)?;
            let out = (0..count)
                .map(|lane| {
                    let s: f64 = (0..len).map(|j| t.data()[idx(lane, j)]).sum();
                    if mean {
                        s / len as f64
                    } else {
                        s
                    }
                })
                .collect();
            Tensor::new(reduced_shape(t.shape(), axis), out)
        })
    }

    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce(a, axis, false)?;
        self.push(v, Op::Sum(a, axis), self.requires(a))
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce(a, axis, true)?;
        self.push(v, Op::Mean(a, axis), self.requires(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.with(a, |t| t.data().iter().sum());
        self.push(Tensor::scalar(s), Op::SumAll(a), self.requires(a))
            .expect("sum of finite values")
    }

    /// Rows of a 2-D tensor (or entries of a 1-D tensor) picked by `ids`.
    pub fn index_select(&self, a: Var, ids: &[usize]) -> Result<Var> {
        let value = self.with(a, |t| -> Result<Tensor> {
            if ids.is_empty() {
                return Err(Error::Shape("index_select with no indices".into()));
            }
            let rows = t.shape()[0];
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(Error::Lookup(format!("index {bad} out of range for {rows} rows")));
            }
            match t.shape() {
                [_] => Ok(Tensor::vector(ids.iter().map(|&i| t.data()[i]).collect())),
                [_, c] => {
                    let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                    Tensor::new(vec![ids.len(), *c], data)
                }
                s => Err(Error::Shape(format!("index_select on shape {s:?}"))),
            }
        })?;
        self.push(
            value,
            Op::IndexSelect {
                input: a,
                ids: ids.to_vec(),
            },
            self.requires(a),
        )
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.with(a, |t| t.reshaped(shape))?;
        self.push(v, Op::Reshape(a), self.requires(a))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&self, rows: &[Var]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = rows.first().ok_or_else(|| Error::Shape("stack of no rows".into()))?;
            let n = match nodes[first.0].value.shape() {
                [n] => *n,
                s => return Err(Error::Shape(format!("stack needs vectors, got {s:?}"))),
            };
            let mut data = Vec::with_capacity(rows.len() * n);
            for r in rows {
                let t = &nodes[r.0].value;
                if t.shape() != [n] {
                    return Err(Error::Shape("stack rows differ in length".into()));
                }
                data.extend_from_slice(t.data());
            }
            let rg = rows.iter().any(|v| nodes[v.0].requires_grad);
            (Tensor::new(vec![rows.len(), n], data)?, rg)
        };
        self.push(value, Op::Stack(rows.to_vec()), rg)
    }

    /// `x / sum(x)`. Fails when the sum is within `1e-8` of zero.
    pub fn normalize_sum(&self, a: Var) -> Result<Var> {
        let value = self.with(a, |t| -> Result<Tensor> {
            let s: f64 = t.data().iter().sum();
            if s.abs() < 1e-8 {
                return Err(Error::DegenerateAttention { denominator: s });
            }
            Ok(t.map(|x| x / s))
        })?;
        self.push(value, Op::NormalizeSum(a), self.requires(a))
    }

    /// Batch normalization over the rows of `x` using the batch's own
    /// statistics. Returns the output and the per-feature batch mean and
    /// (biased) variance.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (value, xhat, inv_std, mean, var, rg) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (b, h) = match tx.shape() {
                [b, h] => (*b, *h),
                s => return Err(Error::Shape(format!("batch norm needs [B, h], got {s:?}"))),
            };
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            let (tg, tbeta) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if tg.shape() != [h] || tbeta.shape() != [h] {
                return Err(Error::Shape("batch norm scale/shift width mismatch".into()));
            }
            let mut mean = vec![0.0; h];
            let mut var = vec![0.0; h];
            for r in 0..b {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += tx.at2(r, j);
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            for r in 0..b {
                for j in 0..h {
                    let d = tx.at2(r, j) - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; b * h];
            let mut out = vec![0.0; b * h];
            for r in 0..b {
                for j in 0..h {
                    let xh = (tx.at2(r, j) - mean[j]) * inv_std[j];
                    xhat[r * h + j] = xh;
                    out[r * h + j] = tg.data()[j] * xh + tbeta.data()[j];
                }
            }
            let rg = [x, gamma, beta].iter().any(|v| nodes[v.0].requires_grad);
            (
                Tensor::new(vec![b, h], out)?,
                Tensor::new(vec![b, h], xhat)?,
                inv_std,
                mean,
                var,
                rg,
            )
        };
        let y = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed statistics. Accepts `[B, h]` or `[h]`.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (value, xhat, inv_std, rg) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let (_, h) = tx.dims2()?;
            let (tg, tbeta) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            if tg.shape() != [h] || tbeta.shape() != [h] || mean.len() != h || var.len() != h {
                return Err(Error::Shape("batch norm statistics width mismatch".into()));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let xhat: Vec<f64> = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| (v - mean[i % h]) * inv_std[i % h])
                .collect();
            let out = xhat
                .iter()
                .enumerate()
                .map(|(i, &xh)| tg.data()[i % h] * xh + tbeta.data()[i % h])
                .collect();
            let rg = [x, gamma, beta].iter().any(|v| nodes[v.0].requires_grad);
            (
                Tensor::new(tx.shape().to_vec(), out)?,
                Tensor::new(tx.shape().to_vec(), xhat)?,
                inv_std,
                rg,
            )
        };
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean two-sided binary cross-entropy of probabilities `p` against 0/1
    /// targets. Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn binary_cross_entropy(&self, p: Var, targets: &[f64]) -> Result<Var> {
        let value = self.with(p, |t| -> Result<f64> {
            if t.len() != targets.len() {
                return Err(Error::Shape(format!(
                    "{} probabilities for {} targets",
                    t.len(),
                    targets.len()
                )));
            }
            let n = t.len() as f64;
            Ok(t.data()
                .iter()
                .zip(targets)
                .map(|(&pi, &ti)| {
                    let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln())
                })
                .sum::<f64>()
                / n)
        })?;
        self.push(
            Tensor::scalar(value),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            self.requires(p),
        )
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut g_out = g.clone();
            grads[id] = Some(g);
            if self.fault == Some(node.op.tag()) {
                g_out.data_mut().iter_mut().for_each(|x| *x *= FAULT_FACTOR);
            }
            let g = g_out.data();
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.data_mut().iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                    slot @ None => {
                        *slot = Some(
                            Tensor::new(nodes[v.0].value.shape().to_vec(), delta)
                                .expect("gradient shape matches value"),
                        );
                    }
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = ta.dims2()?;
                    let n = tb.shape()[1];
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] = (0..n).map(|j| g[i * n + j] * tb.data()[p * n + j]).sum();
                            }
                        }
                        acc(*a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                        acc(*b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    acc(*a, (0..r * c).map(|i| g[(i % r) * c + i / r]).collect());
                }
                Op::Add(a, b) => {
                    acc(*a, g.to_vec());
                    acc(*b, g.to_vec());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.to_vec());
                    acc(*b, g.iter().map(|x| -x).collect());
                }
                Op::Hadamard(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    acc(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
                Op::AddBias(x, b) => {
                    acc(*x, g.to_vec());
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                    acc(*b, gb);
                }
                Op::Unary(a, f) => {
                    let (x, y) = (val(*a).data(), node.value.data());
                    let d: Vec<f64> = (0..g.len())
                        .map(|i| {
                            g[i] * match f {
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Log => 1.0 / x[i],
                                Unary::Scale(c) => *c,
                                Unary::Shift(_) => 1.0,
                            }
                        })
                        .collect();
                    acc(*a, d);
                }
                Op::ScaleBy(x, s) => {
                    let c = val(*s).item();
                    acc(*x, g.iter().map(|v| v * c).collect());
                    let gs = g.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, vec![gs]);
                }
                Op::ScaleRows(x, s) => {
                    let (tx, ts) = (val(*x), val(*s));
                    let n = tx.shape()[1];
                    acc(*x, (0..g.len()).map(|i| g[i] * ts.data()[i / n]).collect());
                    let mut gs = vec![0.0; ts.len()];
                    for (i, gv) in g.iter().enumerate() {
                        gs[i / n] += gv * tx.data()[i];
                    }
                    acc(*s, gs);
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let (count, len, idx) = lanes(y.shape(), *axis)?;
                    let mut d = vec![0.0; y.len()];
                    for lane in 0..count {
                        let dot: f64 = (0..len).map(|j| g[idx(lane, j)] * y.data()[idx(lane, j)]).sum();
                        for j in 0..len {
                            let i = idx(lane, j);
                            d[i] = y.data()[i] * (g[i] - dot);
                        }
                    }
                    acc(*a, d);
                }
                Op::MaxPool { input, argmax, .. } => {
                    let mut d = vec![0.0; val(*input).len()];
                    for (gv, &i) in g.iter().zip(argmax) {
                        d[i] += gv;
                    }
                    acc(*input, d);
                }
                Op::ElemMax { inputs, winner } => {
                    for (w, v) in inputs.iter().enumerate() {
                        let d = g
                            .iter()
                            .zip(winner)
                            .map(|(gv, &win)| if win == w { *gv } else { 0.0 })
                            .collect();
                        acc(*v, d);
                    }
                }
                Op::Conv1d { seq, filter, bias } => {
                    let (ts, tf) = (val(*seq), val(*filter));
                    let (m, din) = (ts.shape()[0], ts.shape()[1]);
                    let (len, dout) = (tf.shape()[0], tf.shape()[2]);
                    let mut gs = vec![0.0; m * din];
                    let mut gf = vec![0.0; tf.len()];
                    let mut gb = vec![0.0; dout];
                    for i in 0..m {
                        let grow = &g[i * dout..(i + 1) * dout];
                        for (o, gv) in grow.iter().enumerate() {
                            gb[o] += gv;
                        }
                        let start = window_start(i, len);
                        for t in 0..len {
                            let p = start + t as isize;
                            if p < 0 || p >= m as isize {
                                continue;
                            }
                            let p = p as usize;
                            for c in 0..din {
                                let base = (t * din + c) * dout;
                                let sv = ts.data()[p * din + c];
                                let mut s = 0.0;
                                for o in 0..dout {
                                    gf[base + o] += grow[o] * sv;
                                    s += grow[o] * tf.data()[base + o];
                                }
                                gs[p * din + c] += s;
                            }
                        }
                    }
                    acc(*seq, gs);
                    acc(*filter, gf);
                    acc(*bias, gb);
                }
                Op::Sum(a, axis) | Op::Mean(a, axis) => {
                    let ta = val(*a);
                    let (count, len, idx) = lanes(ta.shape(), *axis)?;
                    let scale = if matches!(node.op, Op::Mean(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut d = vec![0.0; ta.len()];
                    for lane in 0..count {
                        for j in 0..len {
                            d[idx(lane, j)] = g[lane] * scale;
                        }
                    }
                    acc(*a, d);
                }
                Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::IndexSelect { input, ids } => {
                    let ta = val(*input);
                    let width = if ta.ndim() == 1 { 1 } else { ta.shape()[1] };
                    let mut d = vec![0.0; ta.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..width {
                            d[i * width + c] += g[r * width + c];
                        }
                    }
                    acc(*input, d);
                }
                Op::Reshape(a) => acc(*a, g.to_vec()),
                Op::Stack(rows) => {
                    let n = node.value.shape()[1];
                    for (r, v) in rows.iter().enumerate() {
                        acc(*v, g[r * n..(r + 1) * n].to_vec());
                    }
                }
                Op::NormalizeSum(a) => {
                    let y = node.value.data();
                    let s: f64 = val(*a).data().iter().sum();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    acc(*a, g.iter().map(|gv| (gv - dot) / s).collect());
                }
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (b, h) = (xhat.shape()[0], xhat.shape()[1]);
                    let tg = val(*gamma).data();
                    let mut gg = vec![0.0; h];
                    let mut gbeta = vec![0.0; h];
                    let mut sum_gxh = vec![0.0; h];
                    let mut sum_gxh_xh = vec![0.0; h];
                    for r in 0..b {
                        for j in 0..h {
                            let i = r * h + j;
                            gg[j] += g[i] * xhat.data()[i];
                            gbeta[j] += g[i];
                            let gxh = g[i] * tg[j];
                            sum_gxh[j] += gxh;
                            sum_gxh_xh[j] += gxh * xhat.data()[i];
                        }
                    }
                    let bf = b as f64;
                    let mut gx = vec![0.0; b * h];
                    for r in 0..b {
                        for j in 0..h {
                            let i = r * h + j;
                            let gxh = g[i] * tg[j];
                            gx[i] = inv_std[j] / bf * (bf * gxh - sum_gxh[j] - xhat.data()[i] * sum_gxh_xh[j]);
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let h = inv_std.len();
                    let tg = val(*gamma).data();
                    let mut gg = vec![0.0; h];
                    let mut gbeta = vec![0.0; h];
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % h] += gv * xhat.data()[i];
                        gbeta[i % h] += gv;
                    }
                    acc(*x, (0..g.len()).map(|i| g[i] * tg[i % h] * inv_std[i % h]).collect());
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
                Op::Bce { p, targets } => {
                    let tp = val(*p).data();
                    let n = tp.len() as f64;
                    let d = tp
                        .iter()
                        .zip(targets)
                        .map(|(&pi, &ti)| {
                            if pi <= BCE_CLAMP || pi >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                g[0] * (-ti / pi + (1.0 - ti) / (1.0 - pi)) / n
                            }
                        })
                        .collect();
                    acc(*p, d);
                }
            }
        }
        Ok(Gradients { grads })
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
mod tests;
