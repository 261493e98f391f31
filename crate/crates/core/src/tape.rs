//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in exact reverse recording order and accumulates gradients into
//! leaf nodes; intermediate gradients live only for the duration of one pass.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{logic, Error, Result};
use crate::ops;
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dilation: usize },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    AddConst(Var),
    Square(Var),
    Sum(Var),
    SumChannels(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(logic!("variable {v:?} is not recorded on tape {}", self.id));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var { tape: self.id, index }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let out = ops::conv2d(self.value(input), self.value(kernel), self.value(bias).data(), dilation)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Result<Var> {
        self.check(x)?;
        let out = f(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::relu, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::tanh, Op::Tanh(x))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::softmax_channels, Op::Softmax(x))
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::log_softmax_channels, Op::LogSoftmax(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, |t| t.scale(k), Op::Scale(x, k))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |t| t.map(|v| v * v), Op::Square(x))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |t| Tensor::scalar(t.sum()), Op::Sum(x))
    }

    /// Mean of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        self.unary(x, ops::sum_channels, Op::SumChannels(x))
    }

    pub fn gather_channels(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let out = ops::gather_channels(self.value(x), &index)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather(x, index), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a constant tensor that receives no gradient.
    pub fn mul_const(&mut self, x: Var, k: Tensor) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).zip_map(&k, "mul_const", |a, b| a * b)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, k), rg))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(&mut self, x: Var, k: &Tensor) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).add(k)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// Backpropagates from a scalar `loss`, adding into the gradients of every leaf
    /// that requires one. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.value(loss).shape();
        if shape != Shape::scalar() {
            return Err(logic!("backward needs a scalar loss, got shape {shape}"));
        }
        self.backward_with_grad(loss, Tensor::scalar(1.0))
    }

    /// Backpropagates an explicit output gradient `seed` from `output`.
    pub fn backward_with_grad(&mut self, output: Var, seed: Tensor) -> Result<()> {
        self.check(output)?;
        self.value(output).expect_same_shape(&seed, "backward seed")?;
        let end = output.index() + 1;
        let mut work: Vec<Option<Tensor>> = vec![None; end];
        work[output.index()] = Some(seed);
        for i in (0..end).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    accumulate(&mut self.grads[i], g)?;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    dilation,
                } => {
                    let need_in = self.rg(*input);
                    let (gi, gk, gb) =
                        ops::conv2d_backward(self.value(*input), self.value(*kernel), *dilation, &g, need_in)?;
                    if let Some(gi) = gi {
                        accumulate(&mut work[input.index()], gi)?;
                    }
                    if self.rg(*kernel) {
                        accumulate(&mut work[kernel.index()], gk)?;
                    }
                    if self.rg(*bias) {
                        let bshape = self.value(*bias).shape();
                        accumulate(&mut work[bias.index()], Tensor::from_vec(bshape, gb)?)?;
                    }
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::Tanh(x) => {
                    let gx = ops::tanh_backward(&node.value, &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::Softmax(x) => {
                    let gx = ops::softmax_channels_backward(&node.value, &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::LogSoftmax(x) => {
                    let gx = ops::log_softmax_channels_backward(&node.value, &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(b) {
                        accumulate(&mut work[b.index()], g.clone())?;
                    }
                    if self.rg(a) {
                        accumulate(&mut work[a.index()], g)?;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(b) {
                        accumulate(&mut work[b.index()], g.scale(-1.0))?;
                    }
                    if self.rg(a) {
                        accumulate(&mut work[a.index()], g)?;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let ga = g.zip_map(self.value(b), "mul", |x, y| x * y)?;
                        accumulate(&mut work[a.index()], ga)?;
                    }
                    if self.rg(b) {
                        let gb = g.zip_map(self.value(a), "mul", |x, y| x * y)?;
                        accumulate(&mut work[b.index()], gb)?;
                    }
                }
                Op::Scale(x, k) => {
                    let gx = g.scale(*k);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::MulConst(x, k) => {
                    let gx = g.zip_map(k, "mul_const", |a, b| a * b)?;
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::AddConst(x) => {
                    accumulate(&mut work[x.index()], g)?;
                }
                Op::Square(x) => {
                    let gx = g.zip_map(self.value(*x), "square", |a, b| 2.0 * a * b)?;
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::SumChannels(x) => {
                    let gx = ops::sum_channels_backward(self.value(*x).shape(), &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
                Op::Gather(x, index) => {
                    let gx = ops::gather_channels_backward(self.value(*x).shape(), index, &g);
                    accumulate(&mut work[x.index()], gx)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<(), Error> {
    match slot {
        Some(acc) => {
            acc.expect_same_shape(&g, "gradient accumulation")?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f64]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[1.0, -2.0, 3.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[1.5, -2.0, 0.25]));
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[2.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn foreign_variable_is_a_logic_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.parameter(t(&[1.0]));
        let loss = a.sum(x).unwrap();
        b.parameter(t(&[1.0]));
        b.parameter(t(&[1.0]));
        assert!(matches!(b.backward(loss), Err(Error::Logic(_))));
        assert!(matches!(b.relu(x), Err(Error::Logic(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.parameter(t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Logic(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[3.0]));
        let x = tape.parameter(t(&[2.0]));
        let y = tape.mul(c, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0]);
    }
}
