//! Executors that run the layer tables either eagerly or on a [`Tape`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::networks::{ModelParams, ParamGrads};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The operations a network forward pass needs, abstracted over whether the
/// computation is recorded for differentiation.
pub trait Exec {
    type Value: Clone;

    fn params(&self) -> &ModelParams;
    fn input(&mut self, t: Tensor) -> Self::Value;
    /// Applies layer `layer` of [`Exec::params`].
    fn conv(&mut self, x: &Self::Value, layer: usize) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn tanh(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softmax_channels(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, k: f64) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
}

/// Eager evaluation: intermediates are dropped as soon as they go out of scope.
#[derive(Debug, Clone, Copy)]
pub struct Eval<'p> {
    params: &'p ModelParams,
}

impl<'p> Eval<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self { params }
    }
}

impl Exec for Eval<'_> {
    type Value = Tensor;

    fn params(&self) -> &ModelParams {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn conv(&mut self, x: &Tensor, layer: usize) -> Result<Tensor> {
        let l = &self.params.layers[layer];
        ops::conv2d(x, &l.kernel, l.bias.data(), l.dilation)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }

    fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::tanh(x))
    }

    fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::softmax_channels(x))
    }

    fn scale(&mut self, x: &Tensor, k: f64) -> Result<Tensor> {
        Ok(x.scale(k))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn tensor<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
}

/// Records the forward pass on a tape, registering each layer's kernel and bias
/// as trainable leaves the first time the layer is used.
#[derive(Debug)]
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ModelParams,
    vars: Vec<Option<(Var, Var)>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            tape: Tape::new(),
            params,
            vars: vec![None; params.layers.len()],
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    fn layer_vars(&mut self, layer: usize) -> (Var, Var) {
        if let Some(v) = self.vars[layer] {
            return v;
        }
        let l = &self.params.layers[layer];
        let k = self.tape.parameter(l.kernel.clone());
        let b = self.tape.parameter(l.bias.clone());
        self.vars[layer] = Some((k, b));
        (k, b)
    }

    /// Leaf handles `(kernel, bias)` of a layer, if the forward pass used it.
    pub fn layer_var(&self, layer: usize) -> Option<(Var, Var)> {
        self.vars[layer]
    }

    /// Gradients accumulated on the parameter leaves so far; unused layers get zeros.
    pub fn param_grads(&self) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(self.params);
        for (i, slot) in self.vars.iter().enumerate() {
            let Some((k, b)) = slot else { continue };
            if let Some(g) = self.tape.grad(*k) {
                grads.kernels[i].data_mut().copy_from_slice(g.data());
            }
            if let Some(g) = self.tape.grad(*b) {
                grads.biases[i].data_mut().copy_from_slice(g.data());
            }
        }
        grads
    }
}

impl Exec for Graph<'_> {
    type Value = Var;

    fn params(&self) -> &ModelParams {
        self.params
    }

    fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    fn conv(&mut self, x: &Var, layer: usize) -> Result<Var> {
        let (k, b) = self.layer_vars(layer);
        let dilation = self.params.layers[layer].dilation;
        self.tape.conv2d(*x, k, b, dilation)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn tanh(&mut self, x: &Var) -> Result<Var> {
        self.tape.tanh(*x)
    }

    fn softmax_channels(&mut self, x: &Var) -> Result<Var> {
        self.tape.softmax_channels(*x)
    }

    fn scale(&mut self, x: &Var, k: f64) -> Result<Var> {
        self.tape.scale(*x, k)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.tape.value(*v)
    }
}
