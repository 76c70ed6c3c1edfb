//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape
//! order is always a valid evaluation order and backward is a single reverse
//! sweep. A tape lives in one thread; tensors read out of it are plain values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Precision, SparseMatrix, Tensor};

/// Lower clamp applied to `log` inputs unless a caller passes its own floor.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
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
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    MeanAxis(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    AddRowVector(Var, Var),
    Square(Var),
    Sqrt(Var),
    Log(Var, f64),
    Reshape(Var),
    Transpose(Var),
    SpMM(Arc<SparseMatrix>, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; gradients accumulate into it on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = value.rounded(self.precision);
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.rounded(self.precision);
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (None before any backward pass).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = value.rounded(self.precision);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax();
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).mean_axis(axis)?;
        Ok(self.push(v, Op::MeanAxis(a, axis), &[a]))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean of all entries as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn add_row_vector(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row_vector(self.value(row))?;
        Ok(self.push(v, Op::AddRowVector(a, row), &[a, row]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, LOG_FLOOR)
    }

    /// Natural log of `max(x, floor)`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let floor = floor.max(LOG_FLOOR);
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Log(a, floor), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Constant sparse matrix times a dense matrix.
    pub fn spmm(&mut self, m: Arc<SparseMatrix>, a: Var) -> Result<Var> {
        let v = m.matmul(self.value(a))?;
        Ok(self.push(v, Op::SpMM(m, a), &[a]))
    }

    /// Linear layer `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_vector(y, b),
            None => Ok(y),
        }
    }

    /// Propagates d`loss` to every node and accumulates into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut send = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    send(*a, g.matmul_t(false, val(*b), true)?)?;
                }
                if needs(*b) {
                    send(*b, val(*a).matmul_t(true, g, false)?)?;
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.mul(val(*b))?)?;
                }
                if needs(*b) {
                    send(*b, g.mul(val(*a))?)?;
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c))?,
            Op::Tanh(a) => send(*a, g.zip_map(y, "tanh'", |g, y| g * (1.0 - y * y))?)?,
            Op::Relu(a) => {
                send(*a, g.zip_map(val(*a), "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?)?
            }
            Op::Softmax(a) => {
                let c = y.cols().max(1);
                let mut out = Tensor::zeros(y.shape());
                for ((o, yr), gr) in out
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, out)?;
            }
            Op::MeanAxis(a, axis) => {
                let x = val(*a);
                let mut out = Tensor::zeros(x.shape());
                match (x.shape().len(), axis) {
                    (1, 0) => {
                        let s = g.item() / x.len().max(1) as f64;
                        out.data_mut().iter_mut().for_each(|o| *o = s);
                    }
                    (2, 0) => {
                        let (r, c) = (x.shape()[0], x.shape()[1]);
                        let inv = 1.0 / r.max(1) as f64;
                        for row in out.data_mut().chunks_mut(c.max(1)) {
                            for (o, gv) in row.iter_mut().zip(g.data()) {
                                *o = gv * inv;
                            }
                        }
                    }
                    (2, 1) => {
                        let c = x.shape()[1];
                        let inv = 1.0 / c.max(1) as f64;
                        for (row, gv) in out.data_mut().chunks_mut(c.max(1)).zip(g.data()) {
                            row.iter_mut().for_each(|o| *o = gv * inv);
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
                send(*a, out)?;
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item()))?,
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let piece = match (ps.len(), axis) {
                        (1, 0) | (2, 0) => {
                            let n = val(p).len();
                            let t = Tensor::new(ps.clone(), g.data()[offset..offset + n].to_vec())?;
                            offset += n;
                            t
                        }
                        (2, 1) => {
                            let (r, c) = (ps[0], ps[1]);
                            let total = g.cols();
                            let mut data = Vec::with_capacity(r * c);
                            for row in 0..r {
                                let start = row * total + offset;
                                data.extend_from_slice(&g.data()[start..start + c]);
                            }
                            offset += c;
                            Tensor::new(ps.clone(), data)?
                        }
                        _ => unreachable!("validated in forward"),
                    };
                    send(p, piece)?;
                }
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                for (k, &r) in idx.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (o, s) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                send(*a, out)?;
            }
            Op::AddRowVector(a, row) => {
                send(*a, g.clone())?;
                if needs(*row) {
                    let sums = g.mean_axis(0)?.scale(g.rows() as f64);
                    send(*row, sums)?;
                }
            }
            Op::Square(a) => send(*a, g.zip_map(val(*a), "square'", |g, x| 2.0 * x * g)?)?,
            Op::Sqrt(a) => send(*a, g.zip_map(y, "sqrt'", |g, y| 0.5 * g / y)?)?,
            Op::Log(a, floor) => send(
                *a,
                g.zip_map(val(*a), "log'", |g, x| if x > *floor { g / x } else { 0.0 })?,
            )?,
            Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?)?,
            Op::Transpose(a) => send(*a, g.transpose()?)?,
            Op::SpMM(m, a) => send(*a, m.matmul_transposed(g)?)?,
        }
        Ok(())
    }
}

/// Largest relative error between the tape gradient and central differences.
///
/// The error at a coordinate is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// The function is evaluated on a 64-bit tape regardless of caller precision.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}

/// [`grad_check`] over several inputs at once; returns one error per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_pairs(f, inputs, step)?
        .iter()
        .map(|(analytic, numeric)| {
            let mut worst = 0.0_f64;
            for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
                let denom = a.abs().max(n.abs()).max(1e-8);
                worst = worst.max((a - n).abs() / denom);
            }
            Ok(worst)
        })
        .collect()
}

/// Tape gradient and central-difference estimate `(f(x+h) − f(x−h)) / 2h`
/// for every input, evaluated on 64-bit tapes.
pub fn gradient_pairs<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<(Tensor, Tensor)>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::F64);
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut pairs = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[k].data_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let n = (fp - fm) / (2.0 * step);
            if !n.is_finite() || !analytic.data()[j].is_finite() {
                return Err(Error::NonFinite {
                    location: format!("input {k}, coordinate {j}"),
                });
            }
            numeric.data_mut()[j] = n;
        }
        pairs.push((analytic, numeric));
    }
    Ok(pairs)
}
