//! Layer tables for the shared encoder, the actor/critic heads and the
//! deterministic residual head.
//!
//! Every convolution is 3x3. The encoder uses dilations 1, 2, 3, 4 with 64
//! channels each; every head uses dilations 3, 2, 1 with 64, 64 and then a
//! head-specific number of output channels.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{ActionSet, MAX_RESIDUAL};
use crate::error::{invalid, logic, Result};
use crate::graph::Exec;
use crate::tensor::{Shape, Tensor};

pub const FEATURES: usize = 64;
pub const ENCODER_DILATIONS: [usize; 4] = [1, 2, 3, 4];
pub const HEAD_DILATIONS: [usize; 3] = [3, 2, 1];

/// Indices into [`ModelParams::layers`].
pub const ENCODER: core::ops::Range<usize> = 0..4;
pub const POLICY: core::ops::Range<usize> = 4..7;
pub const VALUE: core::ops::Range<usize> = 7..10;
pub const RESIDUAL: core::ops::Range<usize> = 4..7;

/// Which twin a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    /// Actor-critic: encoder + policy head + value head.
    R3L,
    /// Supervised twin: encoder + tanh residual head.
    R3N,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::R3L => "r3l",
            ModelKind::R3N => "r3n",
        }
    }
}

impl core::str::FromStr for ModelKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r3l" => Ok(ModelKind::R3L),
            "r3n" => Ok(ModelKind::R3N),
            other => Err(invalid!("unknown model kind {other:?} (expected r3l or r3n)")),
        }
    }
}

impl core::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub dilation: usize,
    /// `(out_channels, in_channels, 3, 3)`
    pub kernel: Tensor,
    /// `(1, out_channels, 1, 1)`
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn in_channels(&self) -> usize {
        self.kernel.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().batch
    }
}

/// One copy of every layer; the same weights serve every recurrent stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub num_actions: usize,
    pub layers: Vec<ConvLayer>,
}

/// `(name, dilation, in_channels, out_channels)` for every layer of a model.
pub fn layer_table(kind: ModelKind, num_actions: usize) -> Vec<(String, usize, usize, usize)> {
    let mut table = Vec::new();
    let mut in_ch = 1;
    for (i, &d) in ENCODER_DILATIONS.iter().enumerate() {
        table.push((format!("encoder.{i}"), d, in_ch, FEATURES));
        in_ch = FEATURES;
    }
    let heads: &[(&str, usize)] = match kind {
        ModelKind::R3L => &[("policy", num_actions), ("value", 1)],
        ModelKind::R3N => &[("residual", 1)],
    };
    for &(head, last) in heads {
        for (i, &d) in HEAD_DILATIONS.iter().enumerate() {
            let out = if i + 1 == HEAD_DILATIONS.len() { last } else { FEATURES };
            let inp = FEATURES;
            table.push((format!("{head}.{i}"), d, inp, out));
        }
    }
    table
}

/// Draws kernels from N(0, 2 / (9 * in_channels)) and zeroes biases; fully
/// determined by `seed`.
pub fn init_params(kind: ModelKind, seed: u64) -> ModelParams {
    init_params_with_actions(kind, ActionSet::default().len(), seed)
}

pub fn init_params_with_actions(kind: ModelKind, num_actions: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_table(kind, num_actions)
        .into_iter()
        .map(|(name, dilation, in_ch, out_ch)| {
            let std = libm::sqrt(2.0 / (in_ch * 9) as f64);
            let kshape = Shape::new(out_ch, in_ch, 3, 3);
            let kernel = Tensor::from_fn(kshape, |_, _, _, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            ConvLayer {
                name,
                dilation,
                kernel,
                bias: Tensor::zeros(Shape::new(1, out_ch, 1, 1)),
            }
        })
        .collect();
    ModelParams {
        kind,
        num_actions,
        layers,
    }
}

impl ModelParams {
    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// Checks the layer list against the table for `kind`.
    pub fn validate(&self) -> Result<()> {
        let table = layer_table(self.kind, self.num_actions);
        if table.len() != self.layers.len() {
            return Err(invalid!(
                "{} model needs {} layers, found {}",
                self.kind,
                table.len(),
                self.layers.len()
            ));
        }
        for ((name, d, i, o), layer) in table.iter().zip(&self.layers) {
            let ks = layer.kernel.shape();
            if &layer.name != name
                || layer.dilation != *d
                || ks != Shape::new(*o, *i, 3, 3)
                || layer.bias.shape() != Shape::new(1, *o, 1, 1)
            {
                return Err(invalid!(
                    "layer {} (dilation {}, kernel {}) does not match expected {name} (dilation {d}, kernel ({o}, {i}, 3, 3))",
                    layer.name,
                    layer.dilation,
                    ks
                ));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut ConvLayer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.kernel.all_finite() && l.bias.all_finite())
    }

    fn expect_kind(&self, kind: ModelKind, what: &str) -> Result<()> {
        if self.kind != kind {
            return Err(logic!("{what} needs {kind} parameters, got {}", self.kind));
        }
        Ok(())
    }
}

/// Encoder output `s^t`: `(B, 64, H, W)`. Only [`encode`] constructs it.
#[derive(Debug, Clone)]
pub struct StateFeatures<V>(V);

impl<V> StateFeatures<V> {
    pub fn value(&self) -> &V {
        &self.0
    }
}

/// Four Conv+ReLU layers over an image already scaled to `[0, 1]`.
pub fn encode<E: Exec>(exec: &mut E, image: &E::Value) -> Result<StateFeatures<E::Value>> {
    let shape = exec.tensor(image).shape();
    if shape.channels != 1 {
        return Err(invalid!("encoder expects a single-channel image, got {shape}"));
    }
    let mut x = image.clone();
    for layer in ENCODER {
        let y = exec.conv(&x, layer)?;
        x = exec.relu(&y)?;
    }
    Ok(StateFeatures(x))
}

/// Divides a 0-255 image by 255 and encodes it.
pub fn encode_pixels<E: Exec>(exec: &mut E, image: &E::Value) -> Result<StateFeatures<E::Value>> {
    let x = exec.scale(image, 1.0 / 255.0)?;
    encode(exec, &x)
}

fn head_trunk<E: Exec>(exec: &mut E, s: &StateFeatures<E::Value>, layers: core::ops::Range<usize>) -> Result<E::Value> {
    let mut x = s.0.clone();
    for layer in layers.start..layers.end - 1 {
        let y = exec.conv(&x, layer)?;
        x = exec.relu(&y)?;
    }
    exec.conv(&x, layers.end - 1)
}

/// Post-ReLU logits of the policy head, `(B, |A|, H, W)`.
pub fn policy_logits<E: Exec>(exec: &mut E, s: &StateFeatures<E::Value>) -> Result<E::Value> {
    exec.params().expect_kind(ModelKind::R3L, "policy head")?;
    let z = head_trunk(exec, s, POLICY)?;
    exec.relu(&z)
}

/// Per-pixel action probabilities, `(B, |A|, H, W)`.
pub fn policy_forward<E: Exec>(exec: &mut E, s: &StateFeatures<E::Value>) -> Result<E::Value> {
    let logits = policy_logits(exec, s)?;
    exec.softmax_channels(&logits)
}

/// Per-pixel value estimate, `(B, 1, H, W)`, no output activation.
pub fn value_forward<E: Exec>(exec: &mut E, s: &StateFeatures<E::Value>) -> Result<E::Value> {
    exec.params().expect_kind(ModelKind::R3L, "value head")?;
    head_trunk(exec, s, VALUE)
}

/// Residual in pixel units, `13 * tanh(conv)`, `(B, 1, H, W)`.
pub fn r3n_forward<E: Exec>(exec: &mut E, s: &StateFeatures<E::Value>) -> Result<E::Value> {
    exec.params().expect_kind(ModelKind::R3N, "residual head")?;
    let z = head_trunk(exec, s, RESIDUAL)?;
    let t = exec.tanh(&z)?;
    exec.scale(&t, MAX_RESIDUAL)
}

/// Gradient buffers laid out like [`ModelParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            kernels: params.layers.iter().map(|l| Tensor::zeros(l.kernel.shape())).collect(),
            biases: params.layers.iter().map(|l| Tensor::zeros(l.bias.shape())).collect(),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.kernels.iter().chain(&self.biases)
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.kernels.iter_mut().chain(self.biases.iter_mut())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.tensors().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>())
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Sum of squared entries restricted to a layer range.
    pub fn norm_sq(&self, layers: core::ops::Range<usize>) -> f64 {
        layers
            .flat_map(|i| self.kernels[i].data().iter().chain(self.biases[i].data()))
            .map(|v| v * v)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eval;

    fn zero_last(params: &mut ModelParams, layer: usize) {
        let l = &mut params.layers[layer];
        l.kernel.data_mut().fill(0.0);
        l.bias.data_mut().fill(0.0);
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(init_params(ModelKind::R3L, 3), init_params(ModelKind::R3L, 3));
        assert_ne!(init_params(ModelKind::R3L, 3), init_params(ModelKind::R3L, 4));
    }

    #[test]
    fn layer_tables_match_architecture() {
        let r3l = init_params(ModelKind::R3L, 0);
        r3l.validate().unwrap();
        assert_eq!(r3l.layers.len(), 10);
        assert_eq!(r3l.layers[POLICY.end - 1].out_channels(), 27);
        assert_eq!(r3l.layers[VALUE.end - 1].out_channels(), 1);
        assert!(r3l.layer("residual.0").is_none());
        let r3n = init_params(ModelKind::R3N, 0);
        r3n.validate().unwrap();
        assert_eq!(r3n.layers.len(), 7);
        assert!(r3n.layer("policy.0").is_none() && r3n.layer("value.0").is_none());
        let dil: Vec<_> = r3n.layers.iter().map(|l| l.dilation).collect();
        assert_eq!(dil, [1, 2, 3, 4, 3, 2, 1]);
        assert!(r3l.layers.iter().all(|l| l.kernel.shape().height == 3 && l.kernel.shape().width == 3));
        assert!(r3l.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_std_matches_fan_in() {
        let p = init_params(ModelKind::R3N, 9);
        let k = &p.layers[2].kernel;
        let var = k.data().iter().map(|v| v * v).sum::<f64>() / k.len() as f64;
        let expect = 2.0 / (64.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.02, "{var} vs {expect}");
    }

    #[test]
    fn shapes_through_all_heads() {
        let p = init_params(ModelKind::R3L, 1);
        let mut ex = Eval::new(&p);
        let img = Tensor::full(Shape::new(1, 1, 64, 64), 0.5);
        let s = encode(&mut ex, &img).unwrap();
        assert_eq!(s.value().shape(), Shape::new(1, 64, 64, 64));
        let probs = policy_forward(&mut ex, &s).unwrap();
        assert_eq!(probs.shape(), Shape::new(1, 27, 64, 64));
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(value_forward(&mut ex, &s).unwrap().shape(), Shape::new(1, 1, 64, 64));
        assert!(r3n_forward(&mut ex, &s).is_err());
        let bad = Tensor::zeros(Shape::new(1, 2, 8, 8));
        assert!(encode(&mut ex, &bad).is_err());
    }

    #[test]
    fn zero_input_zero_features() {
        let p = init_params(ModelKind::R3L, 2);
        let mut ex = Eval::new(&p);
        let s = encode(&mut ex, &Tensor::zeros(Shape::new(2, 1, 6, 6))).unwrap();
        assert!(s.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_final_layers() {
        let mut p = init_params(ModelKind::R3L, 5);
        zero_last(&mut p, POLICY.end - 1);
        zero_last(&mut p, VALUE.end - 1);
        let mut ex = Eval::new(&p);
        let img = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| ((y * 8 + x) % 7) as f64 / 7.0);
        let s = encode(&mut ex, &img).unwrap();
        let probs = policy_forward(&mut ex, &s).unwrap();
        assert!(probs.data().iter().all(|&v| (v - 1.0 / 27.0).abs() < 1e-15));
        assert!(value_forward(&mut ex, &s).unwrap().data().iter().all(|&v| v == 0.0));

        let mut q = init_params(ModelKind::R3N, 5);
        zero_last(&mut q, RESIDUAL.end - 1);
        let mut ex = Eval::new(&q);
        let s = encode(&mut ex, &img).unwrap();
        assert!(r3n_forward(&mut ex, &s).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(policy_forward(&mut ex, &s).is_err());
    }

    #[test]
    fn residual_is_bounded() {
        let mut p = init_params(ModelKind::R3N, 8);
        p.layers[RESIDUAL.end - 1].kernel.data_mut().iter_mut().for_each(|v| *v *= 1e3);
        let mut ex = Eval::new(&p);
        let img = Tensor::from_fn(Shape::new(1, 1, 12, 12), |_, _, y, x| ((y * 31 + x * 17) % 255) as f64);
        let s = encode_pixels(&mut ex, &img).unwrap();
        let r = r3n_forward(&mut ex, &s).unwrap();
        assert!(r.max_abs() <= 13.0);
        assert!(r.max_abs() > 12.0);
    }

    #[test]
    fn clip_bounds_norm() {
        let p = init_params(ModelKind::R3N, 1);
        let mut g = ParamGrads::zeros_like(&p);
        g.kernels[0].data_mut().fill(3.0);
        let before = g.clip_global_norm(1.5);
        assert!(before > 1.5);
        assert!(g.global_norm() <= 1.5 + 1e-12);
    }
}
