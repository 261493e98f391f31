//! Training loop: workers share a [`ParamStore`], sample patches, compute
//! gradients against a snapshot and apply them atomically. A fixed held-out
//! patch set is denoised greedily every `eval_every` updates.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use log::{debug, info};
use rayon::prelude::*;
use r3l_core::env::{add_awgn_with, TrajectoryBatch};
use r3l_core::image::{sample_patches, ImageBuffer};
use r3l_core::inference::{denoise, DenoiseRequest};
use r3l_core::metrics::{mse, psnr, psnr_from_mse, quantize};
use r3l_core::networks::{init_params, ModelKind, ModelParams, ParamGrads};
use r3l_core::rng::{self, Stream};
use r3l_core::training::{a3c_gradients, a3c_gradients_replay, r3n_gradients, rollout, StepMetrics, TrainConfig};
use r3l_core::Tensor;

use crate::checkpoint::{self, Checkpoint, TrainingInfo};
use crate::error::{Error, Result};
use crate::store::{Applied, ParamStore};

pub const METRICS_HEADER: &str = "update,policy_loss,value_loss,entropy,mse_loss,psnr_holdout";

const PATCH_STREAM: u64 = 1;
const CHUNK_STREAM: u64 = 2;
const HOLDOUT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub update: u64,
    pub metrics: StepMetrics,
    pub psnr_holdout: Option<f64>,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let m = &self.metrics;
        let psnr = self.psnr_holdout.map(fmt_db).unwrap_or_default();
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.update, m.policy_loss, m.value_loss, m.entropy, m.mse_loss, psnr
        )
    }
}

/// `inf` for a perfect reconstruction, fixed 4 decimals otherwise.
pub fn fmt_db(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_owned()
    } else {
        format!("{db:.4}")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

/// Fixed noisy/clean patches the run is scored on.
#[derive(Debug, Clone)]
pub struct Holdout {
    pub clean: Tensor,
    pub noisy: Tensor,
}

impl Holdout {
    /// Draws `count` patches of `patch` pixels from `images` and corrupts them
    /// with noise of level `sigma`; everything derives from `seed`.
    pub fn sample(images: &[ImageBuffer], patch: usize, count: usize, sigma: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(rng::derive_seed(&[seed, HOLDOUT_STREAM]));
        let batch = sample_patches(images, patch, count, &mut rng)?;
        let noisy = add_awgn_with(&batch.patches, sigma, &mut rng)?;
        Ok(Self {
            clean: batch.patches,
            noisy,
        })
    }

    /// Mean PSNR of the noisy input itself.
    pub fn baseline_psnr(&self) -> Result<f64> {
        mean_psnr(&self.clean, &self.noisy)
    }

    /// Mean PSNR of the clipped, rounded output of `params` over the patches.
    pub fn evaluate(&self, params: &ModelParams, stages: usize) -> Result<f64> {
        let n = self.clean.shape().batch;
        let scores = (0..n)
            .into_par_iter()
            .map(|i| {
                let noisy = self.noisy.batch_slice(i, 1)?;
                let out = denoise(&DenoiseRequest::new(&noisy, params).stages(stages))?;
                Ok(psnr(&self.clean.batch_slice(i, 1)?, &quantize(&out.image))?)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(scores.iter().sum::<f64>() / n as f64)
    }
}

fn mean_psnr(clean: &Tensor, estimate: &Tensor) -> Result<f64> {
    let n = clean.shape().batch;
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&clean.batch_slice(i, 1)?, &quantize(&estimate.batch_slice(i, 1)?))?;
    }
    Ok(total / n as f64)
}

/// Splits off the last `holdout_images` images for evaluation.
pub fn split_holdout(mut dataset: Vec<ImageBuffer>, holdout_images: usize) -> Result<(Vec<ImageBuffer>, Vec<ImageBuffer>)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    if holdout_images >= dataset.len() {
        return Err(Error::Config(format!(
            "holdout_images: {holdout_images} leaves no training images out of {}",
            dataset.len()
        )));
    }
    let held = dataset.split_off(dataset.len() - holdout_images);
    Ok((dataset, held))
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub rows: Vec<MetricsRow>,
    pub baseline_psnr: Option<f64>,
    pub final_psnr: Option<f64>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::new(
            self.params.clone(),
            TrainingInfo {
                seed: config.seed,
                sigma_train: config.sigma_train,
                stages: config.stages,
                updates: self.rows.last().map_or(0, |r| r.update),
                psnr_holdout: self.final_psnr,
                config: Some(config.clone()),
            },
        )
    }
}

/// Gradient of one update's worth of patches, split into `micro_batch` chunks
/// that are evaluated in parallel and summed in chunk order.
pub fn batch_gradients(params: &ModelParams, clean: &Tensor, config: &TrainConfig, seed: u64) -> Result<(ParamGrads, StepMetrics)> {
    let batch = clean.shape().batch;
    let pixels = clean.len() as f64;
    let normalizer = match params.kind {
        ModelKind::R3L => pixels * config.stages as f64,
        ModelKind::R3N => pixels,
    };
    let starts: Vec<usize> = (0..batch).step_by(config.micro_batch).collect();
    let parts = starts
        .par_iter()
        .enumerate()
        .map(|(chunk, &start)| -> Result<(ParamGrads, StepMetrics)> {
            let len = config.micro_batch.min(batch - start);
            let patches = clean.batch_slice(start, len)?;
            let mut rng = rng::stream(rng::derive_seed(&[seed, CHUNK_STREAM, chunk as u64]));
            match params.kind {
                ModelKind::R3L => {
                    let r = rollout(params, &patches, config, &mut rng)?;
                    let terminal = terminal_estimate(&r.traj)?;
                    let sq = mse(&patches, &terminal)? * patches.len() as f64;
                    let (g, mut m) = a3c_gradients(r, config, Some(normalizer))?;
                    m.mse_loss = sq / pixels;
                    Ok((g, m))
                }
                ModelKind::R3N => Ok(r3n_gradients(params, &patches, config, &mut rng, Some(normalizer))?),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut grads, mut metrics) = iter.next().expect("batch_size >= 1");
    for (g, m) in iter {
        grads.add_assign(&g);
        metrics.accumulate(&m);
    }
    Ok((grads, metrics))
}

fn terminal_estimate(traj: &TrajectoryBatch) -> Result<Tensor> {
    let last = traj.estimates.last().expect("at least one stage");
    let step = traj.stages.last().expect("at least one stage");
    let actions = r3l_core::env::ActionSet::default();
    Ok(last.add(&actions.residual_map(&step.action_indices, last.shape())?)?)
}

/// Replays `traj` against the store's current parameters and applies the
/// actor-critic gradient.
pub fn a3c_update(store: &ParamStore, traj: &TrajectoryBatch, config: &TrainConfig) -> Result<StepMetrics> {
    let (params, _) = store.snapshot();
    let (mut grads, mut metrics) = a3c_gradients_replay(&params, traj, config, None)?;
    metrics.grad_norm = applied_norm(store.apply(&mut grads, config.grad_clip_norm)?);
    Ok(metrics)
}

/// One supervised step of the residual twin on `clean`, noise drawn from `rng`.
pub fn r3n_update(store: &ParamStore, clean: &Tensor, config: &TrainConfig, rng: &mut Stream) -> Result<StepMetrics> {
    let (params, _) = store.snapshot();
    let (mut grads, mut metrics) = r3n_gradients(&params, clean, config, rng, None)?;
    metrics.grad_norm = applied_norm(store.apply(&mut grads, config.grad_clip_norm)?);
    Ok(metrics)
}

fn applied_norm(a: Applied) -> f64 {
    match a {
        Applied::Step { grad_norm, .. } => grad_norm,
        Applied::Exhausted => f64::NAN,
    }
}

struct Shared<'a> {
    store: ParamStore,
    config: &'a TrainConfig,
    images: &'a [ImageBuffer],
    holdout: Option<&'a Holdout>,
    rows: Mutex<Vec<MetricsRow>>,
}

impl Shared<'_> {
    fn worker(&self, worker: u64) -> Result<()> {
        let config = self.config;
        for episode in 0u64.. {
            let (params, seen) = self.store.snapshot();
            if seen >= self.store.limit() {
                return Ok(());
            }
            let seed = rng::derive_seed(&[config.seed, worker, episode]);
            let mut patch_rng = rng::stream(rng::derive_seed(&[seed, PATCH_STREAM]));
            let batch = sample_patches(self.images, config.patch_size, config.batch_size, &mut patch_rng)?;
            let (mut grads, mut metrics) = batch_gradients(&params, &batch.patches, config, seed)?;
            drop(params);
            let Applied::Step { update, grad_norm } = self.store.apply(&mut grads, config.grad_clip_norm)? else {
                return Ok(());
            };
            metrics.grad_norm = grad_norm;
            let due = config.eval_every > 0 && update % config.eval_every as u64 == 0 || update == self.store.limit();
            let psnr_holdout = match (self.holdout, due) {
                (Some(h), true) => {
                    let (now, _) = self.store.snapshot();
                    Some(h.evaluate(&now, config.stages)?)
                }
                _ => None,
            };
            debug!(
                "worker {worker} update {update}: policy {:.4e} value {:.4e} entropy {:.4} mse {:.3} |g| {:.3}",
                metrics.policy_loss, metrics.value_loss, metrics.entropy, metrics.mse_loss, grad_norm
            );
            if let Some(p) = psnr_holdout {
                info!("update {update}: held-out PSNR {p:.3} dB");
            }
            let row = MetricsRow {
                update,
                metrics,
                psnr_holdout,
            };
            let mut rows = self.rows.lock().expect("metrics lock poisoned");
            let at = rows.partition_point(|r| r.update < update);
            rows.insert(at, row);
        }
        Ok(())
    }
}

/// Trains from `init` on `images`, scoring on `holdout` if given.
pub fn train_from(init: ModelParams, config: &TrainConfig, images: &[ImageBuffer], holdout: Option<&Holdout>) -> Result<TrainOutcome> {
    config.validate()?;
    if init.kind != config.model_kind {
        return Err(Error::Config(format!(
            "model_kind: {} does not match initial parameters of kind {}",
            config.model_kind, init.kind
        )));
    }
    if images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    let shared = Shared {
        store: ParamStore::new(init, config.learning_rate, config.total_updates as u64),
        config,
        images,
        holdout,
        rows: Mutex::new(Vec::new()),
    };
    if config.num_workers == 1 {
        shared.worker(0)?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..config.num_workers as u64)
                .map(|w| {
                    let shared = &shared;
                    s.spawn(move || shared.worker(w))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect::<Result<Vec<()>>>()
        })?;
    }
    let rows = shared.rows.into_inner().expect("metrics lock poisoned");
    let params = shared.store.into_params();
    let final_psnr = rows.last().and_then(|r| r.psnr_holdout);
    Ok(TrainOutcome {
        params,
        rows,
        baseline_psnr: holdout.map(Holdout::baseline_psnr).transpose()?,
        final_psnr,
    })
}

/// Fresh initialization, hold-out split, training.
pub fn train(config: &TrainConfig, dataset: Vec<ImageBuffer>, holdout_images: usize) -> Result<TrainOutcome> {
    config.validate()?;
    let (images, held) = split_holdout(dataset, holdout_images)?;
    let holdout = if held.is_empty() || config.holdout_patches == 0 {
        None
    } else {
        Some(Holdout::sample(&held, config.patch_size, config.holdout_patches, config.sigma_train, config.seed)?)
    };
    let init = init_params(config.model_kind, config.seed);
    train_from(init, config, &images, holdout.as_ref())
}

/// Runs [`train`] and writes `checkpoint.json` and `metrics.csv` into `dir`.
pub fn train_to_dir(config: &TrainConfig, dataset: Vec<ImageBuffer>, holdout_images: usize, dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join("metrics.csv");
    std::fs::write(&probe, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&probe, e))?;
    let outcome = train(config, dataset, holdout_images)?;
    std::fs::write(&probe, metrics_csv(&outcome.rows)).map_err(|e| Error::io(&probe, e))?;
    checkpoint::save(dir.join("checkpoint.json"), &outcome.checkpoint(config))?;
    Ok(outcome)
}

/// `10 log10(255^2 / sigma^2)`, the expected PSNR of an input corrupted with `sigma` noise.
pub fn analytic_noisy_psnr(sigma: f64) -> f64 {
    psnr_from_mse(sigma * sigma)
}
