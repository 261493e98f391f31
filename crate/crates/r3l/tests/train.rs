use std::fs;

use r3l::checkpoint;
use r3l::store::ParamStore;
use r3l::synth::corpus;
use r3l::train::{a3c_update, r3n_update, train, train_to_dir, METRICS_HEADER};
use r3l::Error;
use r3l_core::inference::{denoise, DenoiseRequest};
use r3l_core::networks::{init_params, ModelKind};
use r3l_core::rng;
use r3l_core::training::{rollout, TrainConfig};
use r3l_core::{Shape, Tensor};

fn tiny(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model_kind: kind,
        stages: 2,
        batch_size: 3,
        patch_size: 12,
        total_updates: 4,
        micro_batch: 2,
        eval_every: 2,
        holdout_patches: 2,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_runs_write_identical_files() {
    for kind in [ModelKind::R3L, ModelKind::R3N] {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            train_to_dir(&tiny(kind), corpus(5, 20, 20, 3), 1, d.path()).unwrap();
        }
        for f in ["checkpoint.json", "metrics.csv"] {
            let a = fs::read(dirs[0].path().join(f)).unwrap();
            let b = fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(a, b, "{kind} {f}");
        }
    }
}

#[test]
fn different_seeds_diverge() {
    let a = train(&tiny(ModelKind::R3N), corpus(5, 20, 20, 3), 1).unwrap();
    let cfg = TrainConfig {
        seed: 18,
        ..tiny(ModelKind::R3N)
    };
    let b = train(&cfg, corpus(5, 20, 20, 3), 1).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn metrics_log_has_header_and_increasing_updates() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_to_dir(&tiny(ModelKind::R3L), corpus(5, 20, 20, 4), 1, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 6);
        assert_eq!(r[0].parse::<u64>().unwrap(), i as u64 + 1);
        for v in &r[1..5] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
        assert_eq!(!r[5].is_empty(), (i + 1) % 2 == 0, "row {i}");
    }
    let ckpt = checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.params, out.params);
    assert_eq!(ckpt.training.updates, 4);
    assert_eq!(ckpt.training.psnr_holdout, out.final_psnr);
}

#[test]
fn asynchronous_workers_apply_exactly_the_update_budget() {
    let cfg = TrainConfig {
        num_workers: 3,
        total_updates: 7,
        eval_every: 0,
        ..tiny(ModelKind::R3N)
    };
    let out = train(&cfg, corpus(4, 20, 20, 5), 1).unwrap();
    let updates: Vec<u64> = out.rows.iter().map(|r| r.update).collect();
    assert_eq!(updates, (1..=7).collect::<Vec<_>>());
    assert!(out.final_psnr.is_some());
    assert!(out.params.all_finite());
}

#[test]
fn empty_or_fully_held_out_datasets_are_rejected() {
    let cfg = tiny(ModelKind::R3N);
    assert!(matches!(train(&cfg, Vec::new(), 0), Err(Error::Dataset(_))));
    assert!(matches!(train(&cfg, corpus(2, 20, 20, 1), 2), Err(Error::Config(_))));
}

#[test]
fn unwritable_output_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let cfg = TrainConfig {
        total_updates: 1_000_000,
        ..tiny(ModelKind::R3N)
    };
    let err = train_to_dir(&cfg, corpus(3, 20, 20, 1), 1, &file).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn store_updates_count_and_stop_at_the_limit() {
    let cfg = TrainConfig {
        stages: 2,
        ..TrainConfig::default()
    };
    let params = init_params(ModelKind::R3L, 1);
    let store = ParamStore::new(params.clone(), cfg.learning_rate, 2);
    let clean = Tensor::full(Shape::new(1, 1, 6, 6), 120.0);
    let r = rollout(&params, &clean, &cfg, &mut rng::stream(2)).unwrap();
    let traj = r.traj.clone();
    drop(r);
    let m = a3c_update(&store, &traj, &cfg).unwrap();
    assert!(m.grad_norm > 0.0);
    assert_eq!(store.updates(), 1);
    a3c_update(&store, &traj, &cfg).unwrap();
    assert_eq!(store.updates(), 2);
    let m = a3c_update(&store, &traj, &cfg).unwrap();
    assert!(m.grad_norm.is_nan());
    assert_eq!(store.updates(), 2);

    let r3n = ParamStore::new(init_params(ModelKind::R3N, 1), 1e-3, 5);
    let cfg = TrainConfig {
        model_kind: ModelKind::R3N,
        ..cfg
    };
    let m = r3n_update(&r3n, &clean, &cfg, &mut rng::stream(3)).unwrap();
    assert!(m.mse_loss > 0.0);
    assert_eq!(r3n.updates(), 1);
}

#[test]
fn loaded_checkpoint_denoises_like_the_trained_params() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_to_dir(&tiny(ModelKind::R3L), corpus(4, 20, 20, 6), 1, dir.path()).unwrap();
    let ckpt = checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
    let x = corpus(1, 16, 16, 9)[0].to_tensor();
    let a = denoise(&DenoiseRequest::new(&x, &out.params).stages(3)).unwrap();
    let b = denoise(&DenoiseRequest::new(&x, &ckpt.params).stages(3)).unwrap();
    assert_eq!(a, b);
}
