//! Recursive denoising: the same parameters are applied at every stage, so the
//! greedy actor-critic denoiser is an ordinary recurrent map `I -> f(I)`.

use alloc::vec::Vec;

use crate::env::{greedy_actions, ActionSet, EnvState};
use crate::error::{invalid, logic, Result};
use crate::graph::Eval;
use crate::networks::{encode_pixels, policy_forward, r3n_forward, ModelKind, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_STAGES: usize = 5;

#[derive(Debug, Clone)]
pub struct DenoiseRequest<'a> {
    /// `(B, 1, H, W)` on the 0-255 scale.
    pub noisy: &'a Tensor,
    pub params: &'a ModelParams,
    pub stages: usize,
    pub emit_intermediates: bool,
}

impl<'a> DenoiseRequest<'a> {
    pub fn new(noisy: &'a Tensor, params: &'a ModelParams) -> Self {
        Self {
            noisy,
            params,
            stages: DEFAULT_STAGES,
            emit_intermediates: false,
        }
    }

    pub fn stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn emit_intermediates(mut self, yes: bool) -> Self {
        self.emit_intermediates = yes;
        self
    }

    fn check(&self, kind: ModelKind) -> Result<()> {
        if self.stages == 0 {
            return Err(invalid!("denoising needs at least one stage"));
        }
        if self.params.kind != kind {
            return Err(logic!(
                "{} denoiser given {} parameters",
                kind,
                self.params.kind
            ));
        }
        Ok(())
    }
}

/// Final estimate (unclipped) and, on request, `I^1..I^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub image: Tensor,
    pub intermediates: Vec<Tensor>,
}

/// Greedy residual map `decode(argmax pi(E(I)))` for one stage.
pub fn r3l_residual(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut ex = Eval::new(params);
    let s = encode_pixels(&mut ex, image)?;
    let probs = policy_forward(&mut ex, &s)?;
    let actions = ActionSet::default();
    actions.residual_map(&greedy_actions(&probs), image.shape())
}

/// One application of the recurrent map `f(I) = I + Greedy(pi(E(I)))`.
pub fn r3l_step(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    image.add(&r3l_residual(params, image)?)
}

/// One application of `f(I) = I + RNN(E(I))`.
pub fn r3n_step(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut ex = Eval::new(params);
    let s = encode_pixels(&mut ex, image)?;
    image.add(&r3n_forward(&mut ex, &s)?)
}

pub fn denoise_r3l(req: &DenoiseRequest<'_>) -> Result<DenoiseOutput> {
    req.check(ModelKind::R3L)?;
    let mut state = EnvState::new(req.noisy.clone(), req.noisy.clone(), req.stages)?;
    let mut intermediates = Vec::new();
    while !state.is_done() {
        let residual = r3l_residual(req.params, state.estimate())?;
        state = state.apply_actions(&residual)?;
        if req.emit_intermediates {
            intermediates.push(state.estimate().clone());
        }
    }
    Ok(DenoiseOutput {
        image: state.estimate().clone(),
        intermediates,
    })
}

pub fn denoise_r3n(req: &DenoiseRequest<'_>) -> Result<DenoiseOutput> {
    req.check(ModelKind::R3N)?;
    let mut image = req.noisy.clone();
    let mut intermediates = Vec::new();
    for _ in 0..req.stages {
        let mut ex = Eval::new(req.params);
        let s = encode_pixels(&mut ex, &image)?;
        let residual = r3n_forward(&mut ex, &s)?;
        image = image.add(&residual)?;
        if req.emit_intermediates {
            intermediates.push(image.clone());
        }
    }
    Ok(DenoiseOutput { image, intermediates })
}

/// Dispatches on the parameter kind.
pub fn denoise(req: &DenoiseRequest<'_>) -> Result<DenoiseOutput> {
    match req.params.kind {
        ModelKind::R3L => denoise_r3l(req),
        ModelKind::R3N => denoise_r3n(req),
    }
}
