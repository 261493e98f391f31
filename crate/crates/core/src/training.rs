//! Gradient computation for both twins and the Adam optimizer.
//!
//! The actor-critic objective per stage `t` and pixel `i`, averaged over `N`
//! pixel-stages, is
//!
//! ```text
//! value  = (R - V(s))^2
//! policy = -log pi(a | s) * (R - V(s))      (advantage held constant)
//! loss   = policy + value_coef * value - entropy_coef * H(pi(. | s))
//! ```
//!
//! with `R^t = r^t + gamma V(s^{t+1})` and a zero bootstrap after the last stage,
//! or full discounted returns in [`ReturnMode::MonteCarlo`]. The supervised twin
//! unrolls all stages on one tape and minimises the terminal squared error.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::env::{add_awgn_with, discounted_return, reward, sample_actions, ActionSet, EnvState, StageRecord, TrajectoryBatch};
use crate::error::{invalid, logic, Error, Result};
use crate::graph::{Exec, Graph};
use crate::networks::{encode_pixels, policy_logits, r3n_forward, value_forward, ModelKind, ModelParams, ParamGrads};
use crate::rng::Stream;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnMode {
    /// `R^t = r^t + gamma V(s^{t+1})`, `V` after the last stage taken as 0.
    Bootstrap,
    /// `R^t = sum_k gamma^k r^{t+k}`.
    MonteCarlo,
}

impl core::str::FromStr for ReturnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" => Ok(ReturnMode::Bootstrap),
            "monte-carlo" => Ok(ReturnMode::MonteCarlo),
            other => Err(invalid!("unknown return mode {other:?} (expected bootstrap or monte-carlo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub sigma_train: f64,
    /// Recurrent stages per episode (`T`).
    pub stages: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub total_updates: usize,
    pub num_workers: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip_norm: f64,
    pub return_mode: ReturnMode,
    pub seed: u64,
    /// Patches per gradient chunk; gradients of the chunks are summed before a step.
    pub micro_batch: usize,
    /// Held-out evaluation period in updates; 0 evaluates only at the end.
    pub eval_every: usize,
    pub holdout_patches: usize,
    /// Factor applied to rewards before returns and value targets are built.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::R3L,
            sigma_train: 25.0,
            stages: 5,
            gamma: 0.95,
            learning_rate: 1e-3,
            batch_size: 16,
            patch_size: 64,
            total_updates: 5000,
            num_workers: 1,
            entropy_coef: 0.01,
            value_coef: 1.0,
            grad_clip_norm: 40.0,
            return_mode: ReturnMode::Bootstrap,
            seed: 0,
            micro_batch: 1,
            eval_every: 100,
            holdout_patches: 8,
            reward_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(invalid!("{field}: {why}"));
        if self.stages < 1 {
            return fail("T", "must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma", "must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be > 0");
        }
        if !(self.sigma_train >= 0.0 && self.sigma_train.is_finite()) {
            return fail("sigma", "must be >= 0");
        }
        if self.num_workers < 1 {
            return fail("num_workers", "must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size", "must be >= 1");
        }
        if self.patch_size < 1 {
            return fail("patch_size", "must be >= 1");
        }
        if self.micro_batch < 1 {
            return fail("micro_batch", "must be >= 1");
        }
        if self.entropy_coef.is_nan() || self.entropy_coef < 0.0 {
            return fail("entropy_coef", "must be >= 0");
        }
        if self.value_coef.is_nan() || self.value_coef < 0.0 {
            return fail("value_coef", "must be >= 0");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return fail("reward_scale", "must be > 0");
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return fail("grad_clip_norm", "must be > 0");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) {
        self.steps += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (i, layer) in params.layers.iter_mut().enumerate() {
            let groups = [
                (layer.kernel.data_mut(), &mut self.m.kernels[i], &mut self.v.kernels[i], &grads.kernels[i]),
                (layer.bias.data_mut(), &mut self.m.biases[i], &mut self.v.biases[i], &grads.biases[i]),
            ];
            for (w, m, v, g) in groups {
                for (((w, m), v), &g) in w
                    .iter_mut()
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                    .zip(g.data())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / (libm::sqrt(*v / c2) + eps);
                }
            }
        }
    }
}

/// Loss terms and diagnostics of one gradient computation. Loss fields are
/// already divided by the global normalizer, so chunk metrics add up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mse_loss: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn accumulate(&mut self, other: &StepMetrics) {
        self.policy_loss += other.policy_loss;
        self.value_loss += other.value_loss;
        self.entropy += other.entropy;
        self.mse_loss += other.mse_loss;
        self.mean_reward += other.mean_reward;
    }
}

/// Clips to `max_norm`, checks finiteness and takes one optimizer step.
/// Returns the pre-clip global norm.
pub fn apply_gradients(params: &mut ModelParams, adam: &mut Adam, grads: &mut ParamGrads, max_norm: f64) -> Result<f64> {
    if !grads.all_finite() {
        return Err(Error::Diverged(alloc::string::String::from("non-finite gradient")));
    }
    let norm = grads.clip_global_norm(max_norm);
    adam.step(params, grads);
    if !params.all_finite() {
        return Err(Error::Diverged(alloc::string::String::from("non-finite parameters after update")));
    }
    Ok(norm)
}

fn check_kind(params: &ModelParams, kind: ModelKind) -> Result<()> {
    if params.kind != kind {
        return Err(logic!("expected {kind} parameters, got {}", params.kind));
    }
    Ok(())
}

/// Tape handles of one actor-critic stage.
#[derive(Debug, Clone, Copy)]
struct StageVars {
    probs: Var,
    log_probs: Var,
    values: Var,
}

fn stage_forward(graph: &mut Graph<'_>, estimate: &Tensor) -> Result<StageVars> {
    let x = graph.input(estimate.clone());
    let s = encode_pixels(graph, &x)?;
    let logits = policy_logits(graph, &s)?;
    let probs = graph.softmax_channels(&logits)?;
    let log_probs = graph.tape_mut().log_softmax_channels(logits)?;
    let values = value_forward(graph, &s)?;
    Ok(StageVars {
        probs,
        log_probs,
        values,
    })
}

/// A sampled batch of episodes together with the tape that produced it.
#[derive(Debug)]
pub struct Rollout<'p> {
    pub traj: TrajectoryBatch,
    pub noisy: Tensor,
    pub clean: Tensor,
    graph: Graph<'p>,
    heads: Vec<StageVars>,
}

impl Rollout<'_> {
    /// Probabilities the policy assigned at stage `t`.
    pub fn stage_probs(&self, t: usize) -> Option<&Tensor> {
        self.heads.get(t).map(|h| self.graph.tape().value(h.probs))
    }

    /// Number of pixel-stages in the batch.
    pub fn pixel_stages(&self) -> usize {
        self.traj.stages.len() * self.clean.len()
    }
}

/// Corrupts `clean` with noise of level `config.sigma_train`, then runs
/// `config.stages` stochastic stages and computes rewards and returns.
pub fn rollout<'p>(params: &'p ModelParams, clean: &Tensor, config: &TrainConfig, rng: &mut Stream) -> Result<Rollout<'p>> {
    check_kind(params, ModelKind::R3L)?;
    let noisy = add_awgn_with(clean, config.sigma_train, rng)?;
    rollout_from(params, &noisy, clean, config, rng)
}

/// As [`rollout`] but starting from a given noisy observation.
pub fn rollout_from<'p>(
    params: &'p ModelParams,
    noisy: &Tensor,
    clean: &Tensor,
    config: &TrainConfig,
    rng: &mut Stream,
) -> Result<Rollout<'p>> {
    check_kind(params, ModelKind::R3L)?;
    let actions = ActionSet::default();
    let mut graph = Graph::new(params);
    let mut state = EnvState::new(noisy.clone(), clean.clone(), config.stages)?;
    let mut heads = Vec::with_capacity(config.stages);
    let mut stages = Vec::with_capacity(config.stages);
    let mut estimates = Vec::with_capacity(config.stages);
    while !state.is_done() {
        let h = stage_forward(&mut graph, state.estimate())?;
        let probs = graph.tape().value(h.probs);
        let (indices, _) = sample_actions(probs, rng)?;
        let log_probs = crate::ops::gather_channels(graph.tape().value(h.log_probs), &indices)?;
        let residual = actions.residual_map(&indices, state.estimate().shape())?;
        let next = state.apply_actions(&residual)?;
        let rewards = reward(clean, state.estimate(), next.estimate())?;
        estimates.push(state.estimate().clone());
        stages.push(StageRecord {
            action_indices: indices,
            log_probs,
            rewards,
            values: graph.tape().value(h.values).clone(),
            returns: Tensor::zeros(clean.shape()),
        });
        heads.push(h);
        state = next;
    }
    let mut traj = TrajectoryBatch { stages, estimates };
    fill_returns(&mut traj, config)?;
    Ok(Rollout {
        traj,
        noisy: noisy.clone(),
        clean: clean.clone(),
        graph,
        heads,
    })
}

fn fill_returns(traj: &mut TrajectoryBatch, config: &TrainConfig) -> Result<()> {
    match config.return_mode {
        ReturnMode::Bootstrap => {
            let n = traj.stages.len();
            for t in 0..n {
                let r = traj.stages[t].rewards.scale(config.reward_scale);
                traj.stages[t].returns = if t + 1 < n {
                    let next_v = &traj.stages[t + 1].values;
                    r.zip_map(next_v, "bootstrap", |r, v| r + config.gamma * v)?
                } else {
                    r
                };
            }
        }
        ReturnMode::MonteCarlo => {
            let rewards: Vec<Tensor> = traj.stages.iter().map(|s| s.rewards.scale(config.reward_scale)).collect();
            for (s, r) in traj.stages.iter_mut().zip(discounted_return(&rewards, config.gamma)?) {
                s.returns = r;
            }
        }
    }
    Ok(())
}

/// Builds the scalar actor-critic loss on `graph`. Advantages are computed from
/// the values recorded on this graph and held constant.
fn a3c_objective(
    graph: &mut Graph<'_>,
    heads: &[StageVars],
    traj: &TrajectoryBatch,
    config: &TrainConfig,
    normalizer: f64,
) -> Result<(Var, StepMetrics)> {
    if heads.len() != traj.stages.len() || heads.is_empty() {
        return Err(invalid!(
            "trajectory has {} stages, graph {}",
            traj.stages.len(),
            heads.len()
        ));
    }
    let inv_n = 1.0 / normalizer;
    let mut metrics = StepMetrics::default();
    let mut total: Option<Var> = None;
    for (h, rec) in heads.iter().zip(&traj.stages) {
        let tape = graph.tape_mut();
        let values = tape.value(h.values).clone();
        let advantage = rec.returns.sub(&values)?;

        let taken = tape.gather_channels(h.log_probs, rec.action_indices.clone())?;
        let weighted = tape.mul_const(taken, advantage)?;
        let pg_sum = tape.sum(weighted)?;
        let policy = tape.scale(pg_sum, -inv_n)?;

        let neg_target = tape.constant(rec.returns.scale(-1.0));
        let err = tape.add(h.values, neg_target)?;
        let sq = tape.square(err)?;
        let v_sum = tape.sum(sq)?;
        let value = tape.scale(v_sum, inv_n)?;

        // sum_c p log p = -H
        let plogp = tape.mul(h.probs, h.log_probs)?;
        let neg_h = tape.sum(plogp)?;
        let entropy = tape.scale(neg_h, -inv_n)?;

        metrics.policy_loss += tape.value(policy).item()?;
        metrics.value_loss += tape.value(value).item()?;
        metrics.entropy += tape.value(entropy).item()?;
        metrics.mean_reward += rec.rewards.sum() * inv_n;

        let weighted_value = tape.scale(value, config.value_coef)?;
        let weighted_entropy = tape.scale(entropy, -config.entropy_coef)?;
        let a = tape.add(policy, weighted_value)?;
        let stage_loss = tape.add(a, weighted_entropy)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, stage_loss)?,
            None => stage_loss,
        });
    }
    Ok((total.expect("at least one stage"), metrics))
}

/// Actor-critic gradients from a rollout's own tape. `normalizer` is the number
/// of pixel-stages in the whole update (defaults to this rollout's count).
pub fn a3c_gradients(mut rollout: Rollout<'_>, config: &TrainConfig, normalizer: Option<f64>) -> Result<(ParamGrads, StepMetrics)> {
    let n = normalizer.unwrap_or(rollout.pixel_stages() as f64);
    let (loss, metrics) = a3c_objective(&mut rollout.graph, &rollout.heads, &rollout.traj, config, n)?;
    if !rollout.graph.tape().value(loss).all_finite() {
        return Err(Error::Diverged(alloc::string::String::from("non-finite actor-critic loss")));
    }
    rollout.graph.tape_mut().backward(loss)?;
    Ok((rollout.graph.param_grads(), metrics))
}

/// Re-evaluates a recorded trajectory with `params` and returns the gradients of
/// the actor-critic loss with the trajectory's returns held fixed.
pub fn a3c_gradients_replay(
    params: &ModelParams,
    traj: &TrajectoryBatch,
    config: &TrainConfig,
    normalizer: Option<f64>,
) -> Result<(ParamGrads, StepMetrics)> {
    check_kind(params, ModelKind::R3L)?;
    if traj.estimates.len() != traj.stages.len() {
        return Err(invalid!("trajectory lacks per-stage estimates"));
    }
    let mut graph = Graph::new(params);
    let heads = traj
        .estimates
        .iter()
        .map(|e| stage_forward(&mut graph, e))
        .collect::<Result<Vec<_>>>()?;
    let pixels: usize = traj.stages.iter().map(|s| s.rewards.len()).sum();
    let n = normalizer.unwrap_or(pixels as f64);
    let (loss, metrics) = a3c_objective(&mut graph, &heads, traj, config, n)?;
    if !graph.tape().value(loss).all_finite() {
        return Err(Error::Diverged(alloc::string::String::from("non-finite actor-critic loss")));
    }
    graph.tape_mut().backward(loss)?;
    Ok((graph.param_grads(), metrics))
}

/// Unrolls `stages` applications of `I <- I + RNN(E(I))` on a tape and returns
/// the final estimate's handle.
fn r3n_unroll(graph: &mut Graph<'_>, noisy: &Tensor, stages: usize) -> Result<Var> {
    let mut x = graph.input(noisy.clone());
    for _ in 0..stages {
        let s = encode_pixels(graph, &x)?;
        let res = r3n_forward(graph, &s)?;
        x = graph.add(&x, &res)?;
    }
    Ok(x)
}

/// Gradient of `(1/N) sum (I^T - x)^2` through the whole unrolled chain for a
/// fixed noisy input.
pub fn r3n_gradients_from(
    params: &ModelParams,
    noisy: &Tensor,
    clean: &Tensor,
    stages: usize,
    normalizer: Option<f64>,
) -> Result<(ParamGrads, StepMetrics)> {
    check_kind(params, ModelKind::R3N)?;
    noisy.expect_same_shape(clean, "r3n batch")?;
    let n = normalizer.unwrap_or(clean.len() as f64);
    let mut graph = Graph::new(params);
    let out = r3n_unroll(&mut graph, noisy, stages)?;
    let tape = graph.tape_mut();
    let neg_clean = tape.constant(clean.scale(-1.0));
    let err = tape.add(out, neg_clean)?;
    let sq = tape.square(err)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / n)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Diverged(alloc::string::String::from("non-finite residual loss")));
    }
    tape.backward(loss)?;
    let metrics = StepMetrics {
        mse_loss: value,
        ..StepMetrics::default()
    };
    Ok((graph.param_grads(), metrics))
}

/// Draws noise from `rng` and computes [`r3n_gradients_from`].
pub fn r3n_gradients(
    params: &ModelParams,
    clean: &Tensor,
    config: &TrainConfig,
    rng: &mut Stream,
    normalizer: Option<f64>,
) -> Result<(ParamGrads, StepMetrics)> {
    let noisy = add_awgn_with(clean, config.sigma_train, rng)?;
    r3n_gradients_from(params, &noisy, clean, config.stages, normalizer)
}

/// Terminal mean squared error of the unrolled twin, without gradients.
pub fn r3n_loss(params: &ModelParams, noisy: &Tensor, clean: &Tensor, stages: usize) -> Result<f64> {
    let req = crate::inference::DenoiseRequest::new(noisy, params).stages(stages);
    let out = crate::inference::denoise_r3n(&req)?;
    crate::metrics::mse(clean, &out.image)
}

/// Single-process learner: parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: ModelParams,
    pub adam: Adam,
    pub config: TrainConfig,
}

impl Learner {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if params.kind != config.model_kind {
            return Err(invalid!(
                "model_kind {} does not match parameters of kind {}",
                config.model_kind,
                params.kind
            ));
        }
        let adam = Adam::new(&params, config.learning_rate);
        Ok(Self { params, adam, config })
    }

    pub fn apply(&mut self, grads: &mut ParamGrads) -> Result<f64> {
        apply_gradients(&mut self.params, &mut self.adam, grads, self.config.grad_clip_norm)
    }

    /// One actor-critic update on a batch of clean patches.
    pub fn a3c_update(&mut self, clean: &Tensor, rng: &mut Stream) -> Result<StepMetrics> {
        let (mut grads, mut metrics) = {
            let r = rollout(&self.params, clean, &self.config, rng)?;
            a3c_gradients(r, &self.config, None)?
        };
        metrics.grad_norm = self.apply(&mut grads)?;
        Ok(metrics)
    }

    /// One actor-critic update replaying a recorded trajectory.
    pub fn a3c_update_replay(&mut self, traj: &TrajectoryBatch) -> Result<StepMetrics> {
        let (mut grads, mut metrics) = a3c_gradients_replay(&self.params, traj, &self.config, None)?;
        metrics.grad_norm = self.apply(&mut grads)?;
        Ok(metrics)
    }

    /// One supervised update of the residual twin.
    pub fn r3n_update(&mut self, clean: &Tensor, rng: &mut Stream) -> Result<StepMetrics> {
        let (mut grads, mut metrics) = r3n_gradients(&self.params, clean, &self.config, rng, None)?;
        metrics.grad_norm = self.apply(&mut grads)?;
        Ok(metrics)
    }
}
