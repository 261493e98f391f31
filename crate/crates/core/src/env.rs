//! Residual-recovery decision process: every pixel picks an integer residual,
//! the estimate moves by that residual, and the reward is the decrease in the
//! pixel's squared error.
//!
//! Estimates stay unclipped floats on the 0-255 scale for the whole episode.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, logic, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Shape, Tensor};

/// Largest residual magnitude an action can apply in one stage.
pub const MAX_RESIDUAL: f64 = 13.0;

/// Unit-spaced residuals `-13..=13`; index 13 is the zero residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    values: Vec<f64>,
}

impl Default for ActionSet {
    fn default() -> Self {
        let m = MAX_RESIDUAL as i32;
        Self {
            values: (-m..=m).map(f64::from).collect(),
        }
    }
}

impl ActionSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the zero residual.
    pub fn zero_index(&self) -> usize {
        self.values.len() / 2
    }

    pub fn decode(&self, index: usize) -> Result<f64> {
        self.values
            .get(index)
            .copied()
            .ok_or_else(|| logic!("action index {index} outside 0..{}", self.values.len()))
    }

    /// Maps per-pixel action indices to a `(B, 1, H, W)` residual map.
    pub fn residual_map(&self, indices: &[usize], shape: Shape) -> Result<Tensor> {
        if indices.len() != shape.len() || shape.channels != 1 {
            return Err(invalid!(
                "{} action indices for residual map {shape}",
                indices.len()
            ));
        }
        let data = indices.iter().map(|&i| self.decode(i)).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(shape, data)
    }
}

pub fn decode_action(index: usize, actions: &ActionSet) -> Result<f64> {
    actions.decode(index)
}

/// `y = x + n`, `n ~ N(0, sigma^2)` i.i.d. per pixel, drawn with the ziggurat
/// sampler from a ChaCha8 stream seeded by `seed`. Not clipped.
pub fn add_awgn(clean: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    add_awgn_with(clean, sigma, &mut rng::stream(seed))
}

pub fn add_awgn_with(clean: &Tensor, sigma: f64, rng: &mut Stream) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(invalid!("noise sigma must be finite and >= 0, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    let data = clean
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

/// Current estimate, ground truth and stage counter of a batch of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    estimate: Tensor,
    clean: Tensor,
    t: usize,
    horizon: usize,
}

impl EnvState {
    pub fn new(noisy: Tensor, clean: Tensor, horizon: usize) -> Result<Self> {
        noisy.expect_same_shape(&clean, "env state")?;
        if horizon == 0 {
            return Err(invalid!("episode horizon must be >= 1"));
        }
        Ok(Self {
            estimate: noisy,
            clean,
            t: 0,
            horizon,
        })
    }

    pub fn estimate(&self) -> &Tensor {
        &self.estimate
    }

    pub fn clean(&self) -> &Tensor {
        &self.clean
    }

    pub fn stage(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.horizon
    }

    /// `I^{t+1} = I^t + a^t`, unclipped.
    pub fn apply_actions(&self, residual: &Tensor) -> Result<EnvState> {
        if self.is_done() {
            return Err(logic!("episode already finished at stage {}", self.t));
        }
        Ok(Self {
            estimate: self.estimate.add(residual)?,
            clean: self.clean.clone(),
            t: self.t + 1,
            horizon: self.horizon,
        })
    }
}

/// `r = (x - prev)^2 - (x - cur)^2` per pixel.
pub fn reward(clean: &Tensor, prev: &Tensor, cur: &Tensor) -> Result<Tensor> {
    clean.expect_same_shape(prev, "reward")?;
    clean.expect_same_shape(cur, "reward")?;
    let data = clean
        .data()
        .iter()
        .zip(prev.data())
        .zip(cur.data())
        .map(|((&x, &p), &c)| (x - p) * (x - p) - (x - c) * (x - c))
        .collect();
    Tensor::from_vec(clean.shape(), data)
}

/// `R^t = r^t + gamma * R^{t+1}` with `R^{n+1} = 0`.
pub fn discounted_return(rewards: &[Tensor], gamma: f64) -> Result<Vec<Tensor>> {
    let last = rewards
        .last()
        .ok_or_else(|| invalid!("discounted_return needs at least one reward map"))?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid!("discount factor must lie in (0, 1], got {gamma}"));
    }
    let mut out = Vec::with_capacity(rewards.len());
    let mut acc = Tensor::zeros(last.shape());
    for r in rewards.iter().rev() {
        acc = r.zip_map(&acc, "discounted_return", |r, next| r + gamma * next)?;
        out.push(acc.clone());
    }
    out.reverse();
    Ok(out)
}

/// Iterates the channel vector of every pixel of a `(B, C, H, W)` tensor.
fn for_each_pixel(probs: &Tensor, mut f: impl FnMut(usize, &dyn Fn(usize) -> f64) -> Result<()>) -> Result<()> {
    let s = probs.shape();
    let hw = s.plane();
    let data = probs.data();
    for b in 0..s.batch {
        for p in 0..hw {
            let base = b * s.channels * hw + p;
            f(b * hw + p, &|c| data[base + c * hw])?;
        }
    }
    Ok(())
}

/// Independent inverse-CDF categorical draw at each pixel. Returns the chosen
/// indices (row-major over `(B, H, W)`) and their log-probabilities as `(B, 1, H, W)`.
pub fn sample_actions(probs: &Tensor, rng: &mut Stream) -> Result<(Vec<usize>, Tensor)> {
    let s = probs.shape();
    if s.channels == 0 {
        return Err(invalid!("cannot sample from zero actions"));
    }
    let mut indices = Vec::with_capacity(s.batch * s.plane());
    let mut log_probs = Vec::with_capacity(s.batch * s.plane());
    for_each_pixel(probs, |pixel, p| {
        let total: f64 = (0..s.channels).map(p).sum();
        if !total.is_finite() || (total - 1.0).abs() > 1e-6 {
            return Err(invalid!("probabilities at pixel {pixel} sum to {total}, not 1"));
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut cdf = 0.0;
        let mut chosen = None;
        let mut last_positive = 0;
        for c in 0..s.channels {
            let pc = p(c);
            if pc < 0.0 {
                return Err(invalid!("negative probability {pc} at pixel {pixel}"));
            }
            if pc > 0.0 {
                last_positive = c;
            }
            cdf += pc;
            if u < cdf && pc > 0.0 {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.unwrap_or(last_positive);
        indices.push(c);
        log_probs.push(libm::log(p(c)));
        Ok(())
    })?;
    Ok((indices, Tensor::from_vec(s.with_channels(1), log_probs)?))
}

/// Per-pixel argmax over channels, ties resolved to the lowest index.
pub fn greedy_actions(probs: &Tensor) -> Vec<usize> {
    let s = probs.shape();
    let mut indices = Vec::with_capacity(s.batch * s.plane());
    for_each_pixel(probs, |_, p| {
        let mut best = 0;
        for c in 1..s.channels {
            if p(c) > p(best) {
                best = c;
            }
        }
        indices.push(best);
        Ok(())
    })
    .expect("argmax cannot fail");
    indices
}

/// Per-stage record of one batch of episodes. Every map is `(B, 1, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// Row-major over `(B, H, W)`.
    pub action_indices: Vec<usize>,
    pub log_probs: Tensor,
    pub rewards: Tensor,
    pub values: Tensor,
    pub returns: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub stages: Vec<StageRecord>,
    /// Input estimate `I^t` of each stage.
    pub estimates: Vec<Tensor>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Log-probability of each pixel's whole action sequence.
    pub fn trajectory_log_prob(&self) -> Option<Tensor> {
        let first = self.stages.first()?;
        let mut acc = first.log_probs.clone();
        for s in &self.stages[1..] {
            acc = acc.add(&s.log_probs).ok()?;
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn px(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn action_set_layout() {
        let a = ActionSet::default();
        assert_eq!(a.len(), 27);
        assert_eq!(a.zero_index(), 13);
        assert_eq!(decode_action(0, &a).unwrap(), -13.0);
        assert_eq!(decode_action(13, &a).unwrap(), 0.0);
        assert_eq!(decode_action(26, &a).unwrap(), 13.0);
        assert!(decode_action(27, &a).is_err());
        assert!(a.values().windows(2).all(|w| w[1] - w[0] == 1.0));
        assert!(a.values().iter().zip(a.values().iter().rev()).all(|(x, y)| x == &-y));
    }

    #[test]
    fn awgn_edge_cases() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64);
        assert_eq!(add_awgn(&x, 0.0, 1).unwrap(), x);
        assert!(add_awgn(&x, -1.0, 1).is_err());
        assert!(add_awgn(&x, f64::NAN, 1).is_err());
        assert_eq!(add_awgn(&x, 25.0, 9).unwrap(), add_awgn(&x, 25.0, 9).unwrap());
        assert_ne!(add_awgn(&x, 25.0, 9).unwrap(), add_awgn(&x, 25.0, 10).unwrap());
    }

    #[test]
    fn awgn_level_on_constant_image() {
        let x = Tensor::full(Shape::new(1, 1, 512, 512), 128.0);
        let y = add_awgn(&x, 25.0, 4).unwrap();
        let mse = y.sub(&x).unwrap().map(|v| v * v).mean();
        assert!((mse / 625.0 - 1.0).abs() < 0.03, "{mse}");
        let psnr = 10.0 * libm::log10(255.0 * 255.0 / mse);
        assert!((psnr - 20.17).abs() < 0.15, "{psnr}");
    }

    #[test]
    fn apply_actions_examples() {
        let s = EnvState::new(px(128.0), px(100.0), 2).unwrap();
        let s1 = s.apply_actions(&px(13.0)).unwrap();
        assert_eq!(s1.estimate().data(), &[141.0]);
        assert_eq!(s1.stage(), 1);
        let s2 = s1.apply_actions(&px(-13.0)).unwrap();
        assert_eq!(s2.estimate(), s.estimate());
        assert!(s2.is_done());
        assert!(s2.apply_actions(&px(0.0)).is_err());
        let z = s.apply_actions(&px(0.0)).unwrap();
        assert_eq!(z.estimate(), s.estimate());
        assert_eq!(z.stage(), 1);
        assert!(s.apply_actions(&Tensor::zeros(Shape::new(1, 1, 1, 2))).is_err());
        assert!(EnvState::new(px(1.0), px(1.0), 0).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&px(100.0), &px(110.0), &px(105.0)).unwrap().data(), &[75.0]);
        assert_eq!(reward(&px(100.0), &px(102.0), &px(95.0)).unwrap().data(), &[-21.0]);
        assert_eq!(reward(&px(100.0), &px(7.0), &px(7.0)).unwrap().data(), &[0.0]);
    }

    #[test]
    fn discounted_return_examples() {
        let r = vec![px(1.0), px(1.0), px(1.0)];
        let ret = discounted_return(&r, 0.5).unwrap();
        assert_eq!(ret[0].data(), &[1.75]);
        assert_eq!(ret[1].data(), &[1.5]);
        assert_eq!(ret[2].data(), &[1.0]);
        assert_eq!(discounted_return(&[px(4.0)], 0.9).unwrap()[0].data(), &[4.0]);
        assert!(discounted_return(&[], 0.9).is_err());
        assert!(discounted_return(&r, 0.0).is_err());
    }

    #[test]
    fn one_hot_sampling_is_certain() {
        let mut probs = Tensor::zeros(Shape::new(1, 27, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                *probs.at_mut(0, 20, y, x) = 1.0;
            }
        }
        let (idx, lp) = sample_actions(&probs, &mut rng::stream(0)).unwrap();
        assert!(idx.iter().all(|&i| i == 20));
        assert!(lp.data().iter().all(|&v| v == 0.0));
        assert_eq!(greedy_actions(&probs), vec![20; 4]);
    }

    #[test]
    fn sampler_rejects_unnormalized() {
        let probs = Tensor::full(Shape::new(1, 3, 1, 1), 0.5);
        assert!(sample_actions(&probs, &mut rng::stream(0)).is_err());
    }

    #[test]
    fn same_stream_same_samples() {
        let probs = Tensor::full(Shape::new(2, 27, 4, 4), 1.0 / 27.0);
        let a = sample_actions(&probs, &mut rng::stream(5)).unwrap();
        let b = sample_actions(&probs, &mut rng::stream(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_tie_break_and_invariance() {
        let uniform = Tensor::full(Shape::new(1, 27, 3, 3), 1.0 / 27.0);
        assert_eq!(greedy_actions(&uniform), vec![0; 9]);
        let mut p = Tensor::full(Shape::new(1, 5, 1, 1), 0.1);
        *p.at_mut(0, 3, 0, 0) = 0.6;
        assert_eq!(greedy_actions(&p), vec![3]);
        *p.at_mut(0, 0, 0, 0) = 0.05;
        *p.at_mut(0, 1, 0, 0) = 0.15;
        assert_eq!(greedy_actions(&p), vec![3]);
    }
}
