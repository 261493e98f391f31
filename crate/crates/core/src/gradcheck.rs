//! Central finite-difference checks of the analytic gradients.
//!
//! A vector-valued output is reduced to a scalar with fixed pseudo-random
//! weights `w in [-1, 1]`, so one check covers every output element. Around a
//! ReLU kink the finite difference is meaningless; the network checker records
//! the activation pattern of every ReLU and skips coordinates whose `+h` and
//! `-h` evaluations disagree on it.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Exec, Graph};
use crate::networks::{encode, encode_pixels, init_params, policy_forward, r3n_forward, value_forward, ModelKind, ModelParams};
use crate::ops;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Both derivatives below this magnitude count as agreeing.
pub const ABS_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|)`, or 0 when both are below [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Worst disagreement found by a check.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Report {
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl Report {
    fn record(&mut self, tensor: usize, element: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((tensor, element, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &Report) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// `w . (plus - minus) / 2h`, differenced elementwise first so outputs the
/// perturbation does not reach cancel exactly.
fn central(plus: &[f64], minus: &[f64], w: &[f64], h: f64) -> f64 {
    plus.iter().zip(minus).zip(w).map(|((p, m), w)| (p - m) * w).sum::<f64>() / (2.0 * h)
}

/// Checks every element of every input of the tape computation `build`.
pub fn check_op(inputs: &[Tensor], h: f64, seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Report> {
    let run = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.parameter(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = run(inputs)?;
    let w = projection(tape.value(out).len(), seed);
    let weights = Tensor::from_vec(tape.value(out).shape(), w.clone())?;
    tape.backward_with_grad(out, weights)?;
    let mut report = Report::default();
    let mut xs = inputs.to_vec();
    for (t, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[t].shape()));
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            xs[t].data_mut()[i] = x0 + h;
            let (tp, _, op) = run(&xs)?;
            xs[t].data_mut()[i] = x0 - h;
            let (tm, _, om) = run(&xs)?;
            xs[t].data_mut()[i] = x0;
            let numeric = central(tp.value(op).data(), tm.value(om).data(), &w, h);
            report.record(t, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Eager executor that remembers the sign pattern of every ReLU input.
#[derive(Debug)]
pub struct Probe<'p> {
    params: &'p ModelParams,
    pub pattern: Vec<bool>,
}

impl<'p> Probe<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            pattern: Vec::new(),
        }
    }
}

impl Exec for Probe<'_> {
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
        self.pattern.extend(x.data().iter().map(|&v| v > 0.0));
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

/// A network output to differentiate, written once for both executors.
pub trait Objective {
    /// Returns the outputs to be projected; each is reduced with its own weights.
    fn outputs<E: Exec>(&self, exec: &mut E) -> Result<Vec<E::Value>>;
}

fn entry(p: &mut ModelParams, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    if bias {
        &mut l.bias.data_mut()[i]
    } else {
        &mut l.kernel.data_mut()[i]
    }
}

/// Checks up to `coords_per_layer` randomly drawn kernel entries and as many
/// bias entries of every layer of `params`.
pub fn check_params<O: Objective>(params: &ModelParams, objective: &O, coords_per_layer: usize, h: f64, seed: u64) -> Result<Report> {
    let mut graph = Graph::new(params);
    let outs = objective.outputs(&mut graph)?;
    let mut weights = Vec::with_capacity(outs.len());
    for (k, o) in outs.iter().enumerate() {
        let shape = graph.tape().value(*o).shape();
        let w = projection(shape.len(), rng::derive_seed(&[seed, k as u64]));
        let wt = Tensor::from_vec(shape, w.clone())?;
        graph.tape_mut().backward_with_grad(*o, wt)?;
        weights.push(w);
    }
    let grads = graph.param_grads();

    let run = |p: &ModelParams| -> Result<(Vec<Tensor>, Vec<bool>)> {
        let mut probe = Probe::new(p);
        let outs = objective.outputs(&mut probe)?;
        Ok((outs, probe.pattern))
    };

    let mut pick = rng::stream(rng::derive_seed(&[seed, 0x9c]));
    let mut report = Report::default();
    let mut p = params.clone();
    for layer in 0..params.layers.len() {
        for is_bias in [false, true] {
            let len = if is_bias {
                params.layers[layer].bias.len()
            } else {
                params.layers[layer].kernel.len()
            };
            for _ in 0..coords_per_layer.min(len) {
                let i = pick.random_range(0..len);
                                let x0 = *entry(&mut p, layer, is_bias, i);
                *entry(&mut p, layer, is_bias, i) = x0 + h;
                let (op, mp) = run(&p)?;
                *entry(&mut p, layer, is_bias, i) = x0 - h;
                let (om, mm) = run(&p)?;
                *entry(&mut p, layer, is_bias, i) = x0;
                if mp != mm {
                    report.skipped += 1;
                    continue;
                }
                let g = if is_bias { &grads.biases[layer] } else { &grads.kernels[layer] };
                let numeric = op
                    .iter()
                    .zip(&om)
                    .zip(&weights)
                    .map(|((a, b), w)| central(a.data(), b.data(), w, h))
                    .sum();
                report.record(2 * layer + usize::from(is_bias), i, g.data()[i], numeric);
            }
        }
    }
    Ok(report)
}

/// One named check and the largest relative error it tolerates.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: Report,
}

impl Case {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < self.tolerance
    }
}

/// Step used by every check.
pub const H: f64 = 1e-5;
/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for the composed networks.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

/// Uniform `[-1, 1]` entries.
pub fn uniform(shape: Shape, rng: &mut rng::Stream) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Uniform `[-1, 1]` entries kept at least `margin` away from 0.
fn away_from_zero(shape: Shape, margin: f64, rng: &mut rng::Stream) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(margin..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Every differentiable tape operation on random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<Case>> {
    let mut r = rng::stream(seed);
    let s = Shape::new(2, 3, 5, 4);
    let a = uniform(s, &mut r);
    let b = uniform(s, &mut r);
    let k = uniform(s, &mut r);
    let dil = r.random_range(1..=4);
    let conv_in = uniform(Shape::new(2, 3, 8, 8), &mut r);
    let kernel = uniform(Shape::new(4, 3, 3, 3), &mut r);
    let bias = uniform(Shape::new(1, 4, 1, 1), &mut r);
    let logits = uniform(Shape::new(2, 27, 3, 3), &mut r).scale(3.0);
    let index: Vec<usize> = (0..2 * 9).map(|_| r.random_range(0..27)).collect();
    let relu_in = away_from_zero(s, 1e-3, &mut r);
    let factor = r.random_range(-2.0..2.0);
    // enough channels for the padded-GEMM path
    let wide_in = uniform(Shape::new(1, 20, 6, 5), &mut r);
    let wide_kernel = uniform(Shape::new(3, 20, 3, 3), &mut r);
    let wide_bias = uniform(Shape::new(1, 3, 1, 1), &mut r);

    let mut cases = Vec::new();
    let mut push = |name, report| {
        cases.push(Case {
            name,
            tolerance: OP_TOLERANCE,
            report,
        })
    };
    push(
        "conv2d",
        check_op(&[conv_in.clone(), kernel.clone(), bias.clone()], H, seed, |t, v| t.conv2d(v[0], v[1], v[2], dil))?,
    );
    push(
        "conv2d dilation 3",
        check_op(&[conv_in, kernel, bias], H, seed, |t, v| t.conv2d(v[0], v[1], v[2], 3))?,
    );
    push(
        "conv2d wide",
        check_op(&[wide_in, wide_kernel, wide_bias], H, seed, |t, v| t.conv2d(v[0], v[1], v[2], dil))?,
    );
    push("relu", check_op(&[relu_in], H, seed, |t, v| t.relu(v[0]))?);
    push("tanh", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.tanh(v[0]))?);
    push("softmax_channels", check_op(core::slice::from_ref(&logits), H, seed, |t, v| t.softmax_channels(v[0]))?);
    push(
        "log_softmax_channels",
        check_op(core::slice::from_ref(&logits), H, seed, |t, v| t.log_softmax_channels(v[0]))?,
    );
    push(
        "gather_channels",
        check_op(&[logits], H, seed, |t, v| t.gather_channels(v[0], index.clone()))?,
    );
    push("sum_channels", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.sum_channels(v[0]))?);
    push("scale", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.scale(v[0], factor))?);
    push("square", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.square(v[0]))?);
    push("sum", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.sum(v[0]))?);
    push("mean", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.mean(v[0]))?);
    push("add", check_op(&[a.clone(), b.clone()], H, seed, |t, v| t.add(v[0], v[1]))?);
    push("sub", check_op(&[a.clone(), b.clone()], H, seed, |t, v| t.sub(v[0], v[1]))?);
    push("mul", check_op(&[a.clone(), b.clone()], H, seed, |t, v| t.mul(v[0], v[1]))?);
    push("mul_const", check_op(core::slice::from_ref(&a), H, seed, |t, v| t.mul_const(v[0], k.clone()))?);
    push("add_const", check_op(&[a], H, seed, |t, v| t.add_const(v[0], &k))?);
    Ok(cases)
}

/// Policy probabilities and values of the actor-critic network on an input in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ActorCritic(pub Tensor);

impl Objective for ActorCritic {
    fn outputs<E: Exec>(&self, exec: &mut E) -> Result<Vec<E::Value>> {
        let x = exec.input(self.0.clone());
        let s = encode(exec, &x)?;
        let p = policy_forward(exec, &s)?;
        let v = value_forward(exec, &s)?;
        Ok(vec![p, v])
    }
}

/// Final estimate of the residual twin unrolled for `.1` stages from a 0-255 image.
#[derive(Debug, Clone)]
pub struct Unrolled(pub Tensor, pub usize);

impl Objective for Unrolled {
    fn outputs<E: Exec>(&self, exec: &mut E) -> Result<Vec<E::Value>> {
        let mut x = exec.input(self.0.clone());
        for _ in 0..self.1 {
            let s = encode_pixels(exec, &x)?;
            let res = r3n_forward(exec, &s)?;
            x = exec.add(&x, &res)?;
        }
        Ok(vec![x])
    }
}

/// Freshly initialised parameters with small random biases.
pub fn random_params(kind: ModelKind, seed: u64) -> ModelParams {
    let mut p = init_params(kind, seed);
    let mut r = rng::stream(rng::derive_seed(&[seed, 0xb1a5]));
    for l in &mut p.layers {
        l.bias = uniform(l.bias.shape(), &mut r).scale(0.1);
    }
    p
}

/// Both full networks, `coords` sampled kernel and bias entries per layer.
pub fn network_suite(seed: u64, coords: usize) -> Result<Vec<Case>> {
    let mut r = rng::stream(rng::derive_seed(&[seed, 0x11e7]));
    let x = uniform(Shape::new(1, 1, 6, 6), &mut r);
    let img = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_, _, _, _| r.random_range(0.0..255.0));
    let r3l = random_params(ModelKind::R3L, seed);
    let r3n = random_params(ModelKind::R3N, seed);
    Ok(vec![
        Case {
            name: "actor-critic network",
            tolerance: NETWORK_TOLERANCE,
            report: check_params(&r3l, &ActorCritic(x), coords, H, seed)?,
        },
        Case {
            name: "residual network, 2 stages",
            tolerance: NETWORK_TOLERANCE,
            report: check_params(&r3n, &Unrolled(img, 2), coords, H, seed)?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-12, -1e-12), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| 0.3 + c as f64 - 0.2 * y as f64 + 0.1 * x as f64);
        let ok = check_op(core::slice::from_ref(&x), 1e-5, 1, |t, v| t.mul(v[0], v[0])).unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        // A constant path has zero analytic gradient but a nonzero numeric one.
        let bad = check_op(core::slice::from_ref(&x), 1e-5, 1, |t, v| {
            let c = t.constant(t.value(v[0]).map(|a| a * a));
            t.add(c, v[0])
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.5, "{bad:?}");
    }
}
