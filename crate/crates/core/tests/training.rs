use r3l_core::env::{discounted_return, ActionSet, StageRecord, TrajectoryBatch};
use r3l_core::graph::Eval;
use r3l_core::networks::{encode_pixels, init_params, policy_forward, value_forward, ModelKind, ModelParams, ParamGrads, POLICY, RESIDUAL, VALUE};
use r3l_core::rng;
use r3l_core::tensor::{Shape, Tensor};
use r3l_core::training::{
    a3c_gradients, a3c_gradients_replay, apply_gradients, r3n_gradients_from, r3n_loss, rollout, rollout_from, Adam, Learner, ReturnMode,
    TrainConfig,
};
use r3l_core::Error;

fn image(shape: Shape, seed: u64) -> Tensor {
    let mut s = rng::stream(seed);
    Tensor::from_fn(shape, |_, _, _, _| rand::Rng::random_range(&mut s, 0.0..255.0))
}

fn r3l_config(stages: usize) -> TrainConfig {
    TrainConfig {
        stages,
        ..TrainConfig::default()
    }
}

fn r3n_config(stages: usize) -> TrainConfig {
    TrainConfig {
        model_kind: ModelKind::R3N,
        stages,
        ..TrainConfig::default()
    }
}

fn forward(params: &ModelParams, estimate: &Tensor) -> (Tensor, Tensor) {
    let mut e = Eval::new(params);
    let s = encode_pixels(&mut e, estimate).unwrap();
    (policy_forward(&mut e, &s).unwrap(), value_forward(&mut e, &s).unwrap())
}

/// Single-stage trajectory at a fixed estimate with returns `V + advantage`.
fn frozen(params: &ModelParams, estimate: &Tensor, actions: Vec<usize>, advantage: f64) -> TrajectoryBatch {
    let (_, values) = forward(params, estimate);
    let shape = values.shape();
    TrajectoryBatch {
        stages: vec![StageRecord {
            action_indices: actions,
            log_probs: Tensor::zeros(shape),
            rewards: Tensor::zeros(shape),
            returns: values.map(|v| v + advantage),
            values,
        }],
        estimates: vec![estimate.clone()],
    }
}

#[test]
fn exact_value_targets_give_zero_value_and_policy_gradients() {
    let params = init_params(ModelKind::R3L, 1);
    let x = image(Shape::new(2, 1, 6, 6), 2);
    let traj = frozen(&params, &x, vec![4; 72], 0.0);
    for entropy in [0.0, 0.05] {
        let config = TrainConfig {
            entropy_coef: entropy,
            ..r3l_config(1)
        };
        let (g, m) = a3c_gradients_replay(&params, &traj, &config, None).unwrap();
        assert_eq!(m.value_loss, 0.0);
        assert_eq!(g.norm_sq(VALUE), 0.0);
        if entropy == 0.0 {
            assert_eq!(m.policy_loss, 0.0);
            assert_eq!(g.norm_sq(POLICY), 0.0);
            assert_eq!(g.global_norm(), 0.0);
        } else {
            assert!(g.norm_sq(POLICY) > 0.0);
        }
    }
}

fn log_prob(params: &ModelParams, x: &Tensor, action: usize) -> f64 {
    forward(params, x).0.at(0, action, 0, 0).ln()
}

#[test]
fn single_pixel_update_follows_the_sign_of_the_advantage() {
    let config = TrainConfig {
        learning_rate: 1e-5,
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..r3l_config(1)
    };
    for seed in 0..4 {
        let params = init_params(ModelKind::R3L, seed);
        let x = Tensor::full(Shape::new(1, 1, 1, 1), 40.0 + 50.0 * seed as f64);
        for action in [0, 7, 13, 20, 26] {
            for advantage in [1.0, -1.0] {
                let traj = frozen(&params, &x, vec![action], advantage);
                let mut learner = Learner::new(params.clone(), config.clone()).unwrap();
                let before = log_prob(&learner.params, &x, action);
                let m = learner.a3c_update_replay(&traj).unwrap();
                assert!(m.grad_norm > 0.0);
                let after = log_prob(&learner.params, &x, action);
                if advantage > 0.0 {
                    assert!(after > before, "seed {seed} action {action}: {before} -> {after}");
                } else {
                    assert!(after < before, "seed {seed} action {action}: {before} -> {after}");
                }
            }
        }
    }
}

#[test]
fn recorded_log_probs_match_the_policy() {
    let params = init_params(ModelKind::R3L, 3);
    let clean = image(Shape::new(2, 1, 8, 8), 4);
    let r = rollout(&params, &clean, &r3l_config(3), &mut rng::stream(5)).unwrap();
    for (t, (rec, est)) in r.traj.stages.iter().zip(&r.traj.estimates).enumerate() {
        let (probs, values) = forward(&params, est);
        assert_eq!(r.stage_probs(t).unwrap(), &probs);
        assert_eq!(rec.values, values);
        let shape = est.shape();
        for b in 0..shape.batch {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let a = rec.action_indices[(b * shape.height + y) * shape.width + x];
                    let lp = rec.log_probs.at(b, 0, y, x);
                    assert!((lp - probs.at(b, a, y, x).ln()).abs() < 1e-12);
                    assert!(lp <= 0.0 && lp.exp() > 0.0);
                }
            }
        }
    }
}

#[test]
fn estimates_follow_the_sampled_residuals() {
    let params = init_params(ModelKind::R3L, 3);
    let clean = image(Shape::new(1, 1, 5, 5), 4);
    let r = rollout(&params, &clean, &r3l_config(4), &mut rng::stream(6)).unwrap();
    assert_eq!(r.traj.estimates[0], r.noisy);
    let actions = ActionSet::default();
    for t in 1..4 {
        let res = actions.residual_map(&r.traj.stages[t - 1].action_indices, clean.shape()).unwrap();
        assert_eq!(r.traj.estimates[t], r.traj.estimates[t - 1].add(&res).unwrap());
    }
}

#[test]
fn bootstrap_targets_use_the_next_value() {
    let params = init_params(ModelKind::R3L, 8);
    let clean = image(Shape::new(1, 1, 6, 6), 9);
    let config = TrainConfig {
        reward_scale: 0.25,
        gamma: 0.9,
        ..r3l_config(3)
    };
    let r = rollout(&params, &clean, &config, &mut rng::stream(1)).unwrap();
    let s = &r.traj.stages;
    for t in 0..3 {
        for i in 0..clean.len() {
            let next = if t + 1 < 3 { 0.9 * s[t + 1].values.data()[i] } else { 0.0 };
            let want = 0.25 * s[t].rewards.data()[i] + next;
            assert!((s[t].returns.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    let mc = TrainConfig {
        return_mode: ReturnMode::MonteCarlo,
        ..config
    };
    let r = rollout(&params, &clean, &mc, &mut rng::stream(1)).unwrap();
    let scaled: Vec<Tensor> = r.traj.stages.iter().map(|s| s.rewards.scale(0.25)).collect();
    let want = discounted_return(&scaled, 0.9).unwrap();
    for (s, w) in r.traj.stages.iter().zip(&want) {
        assert_eq!(&s.returns, w);
    }
}

#[test]
fn uniform_policy_on_clean_input_loses_reward() {
    // With the last policy layer zeroed every action is equally likely, so the
    // first-stage reward is -a^2 with E[a^2] = 2 * (1^2 + ... + 13^2) / 27.
    let mut params = init_params(ModelKind::R3L, 2);
    let last = POLICY.end - 1;
    params.layers[last].kernel.data_mut().fill(0.0);
    let clean = image(Shape::new(4, 1, 16, 16), 3);
    let config = TrainConfig {
        sigma_train: 0.0,
        ..r3l_config(5)
    };
    let r = rollout(&params, &clean, &config, &mut rng::stream(4)).unwrap();
    let expected = -2.0 * (1..=13).map(|k| (k * k) as f64).sum::<f64>() / 27.0;
    let first = r.traj.stages[0].rewards.mean();
    // 1024 draws, per-draw std of a^2 is about 51
    assert!((first - expected).abs() < 4.0 * 51.0 / 32.0, "{first} vs {expected}");
    let total = r.traj.stages.iter().fold(Tensor::zeros(clean.shape()), |acc, s| acc.add(&s.rewards).unwrap());
    assert!(total.data().iter().all(|&v| v <= 0.0));
}

#[test]
fn replayed_gradients_equal_the_rollout_tape() {
    let params = init_params(ModelKind::R3L, 11);
    let clean = image(Shape::new(2, 1, 7, 7), 12);
    let config = r3l_config(3);
    let r = rollout(&params, &clean, &config, &mut rng::stream(13)).unwrap();
    let traj = r.traj.clone();
    let (fused, fm) = a3c_gradients(r, &config, Some(500.0)).unwrap();
    let (replay, rm) = a3c_gradients_replay(&params, &traj, &config, Some(500.0)).unwrap();
    assert_eq!(fused, replay);
    assert_eq!(fm, rm);
}

#[test]
fn chunked_gradients_sum_to_the_full_batch() {
    let params = init_params(ModelKind::R3L, 14);
    let clean = image(Shape::new(4, 1, 6, 6), 15);
    let config = r3l_config(2);
    let r = rollout(&params, &clean, &config, &mut rng::stream(16)).unwrap();
    let n = r.pixel_stages() as f64;
    let traj = r.traj.clone();
    let (full, _) = a3c_gradients(r, &config, None).unwrap();
    let mut sum = ParamGrads::zeros_like(&params);
    for half in 0..2 {
        let part = TrajectoryBatch {
            stages: traj
                .stages
                .iter()
                .map(|s| StageRecord {
                    action_indices: s.action_indices[half * 72..(half + 1) * 72].to_vec(),
                    log_probs: s.log_probs.batch_slice(half * 2, 2).unwrap(),
                    rewards: s.rewards.batch_slice(half * 2, 2).unwrap(),
                    values: s.values.batch_slice(half * 2, 2).unwrap(),
                    returns: s.returns.batch_slice(half * 2, 2).unwrap(),
                })
                .collect(),
            estimates: traj.estimates.iter().map(|e| e.batch_slice(half * 2, 2).unwrap()).collect(),
        };
        let (g, _) = a3c_gradients_replay(&params, &part, &config, Some(n)).unwrap();
        sum.add_assign(&g);
    }
    let mut diff = full.clone();
    diff.scale(-1.0);
    diff.add_assign(&sum);
    assert!(diff.global_norm() <= 1e-10 * full.global_norm(), "{} vs {}", diff.global_norm(), full.global_norm());
}

#[test]
fn value_head_fits_frozen_targets() {
    let params = init_params(ModelKind::R3L, 21);
    let clean = image(Shape::new(1, 1, 4, 4), 22);
    let config = TrainConfig {
        reward_scale: 1.0 / 255.0,
        ..r3l_config(1)
    };
    let r = rollout(&params, &clean, &config, &mut rng::stream(23)).unwrap();
    let traj = r.traj.clone();
    drop(r);
    let mut learner = Learner::new(params, config).unwrap();
    let mut first = None;
    let mut last = f64::INFINITY;
    for i in 0..5000 {
        let m = learner.a3c_update_replay(&traj).unwrap();
        first.get_or_insert(m.value_loss);
        last = m.value_loss;
        if last < 1e-3 {
            eprintln!("value loss {last:e} after {i} iterations");
            break;
        }
    }
    assert!(last < 1e-3, "value loss {last} (started at {first:?})");
}

#[test]
fn r3n_step_descends_on_a_fixed_batch() {
    let params = init_params(ModelKind::R3N, 31);
    let clean = image(Shape::new(2, 1, 8, 8), 32);
    let noisy = r3l_core::env::add_awgn(&clean, 25.0, 33).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-4,
        ..r3n_config(3)
    };
    let mut learner = Learner::new(params, config).unwrap();
    let before = r3n_loss(&learner.params, &noisy, &clean, 3).unwrap();
    let (mut g, m) = r3n_gradients_from(&learner.params, &noisy, &clean, 3, None).unwrap();
    assert!((m.mse_loss - before).abs() <= 1e-9 * before);
    learner.apply(&mut g).unwrap();
    let after = r3n_loss(&learner.params, &noisy, &clean, 3).unwrap();
    assert!(after <= before, "{before} -> {after}");
}

#[test]
fn r3n_gradients_accumulate_over_stages() {
    let params = init_params(ModelKind::R3N, 41);
    let clean = image(Shape::new(1, 1, 8, 8), 42);
    let noisy = r3l_core::env::add_awgn(&clean, 25.0, 43).unwrap();
    let (g1, _) = r3n_gradients_from(&params, &noisy, &clean, 1, None).unwrap();
    let (g2, _) = r3n_gradients_from(&params, &noisy, &clean, 2, None).unwrap();
    assert_ne!(g1, g2);
    let mut d = g2.clone();
    d.scale(-1.0);
    d.add_assign(&g1);
    assert!(d.global_norm() > 1e-6 * g1.global_norm());
}

#[test]
fn zero_residual_twin_on_clean_input_has_zero_loss() {
    let mut params = init_params(ModelKind::R3N, 51);
    let last = RESIDUAL.end - 1;
    params.layers[last].kernel.data_mut().fill(0.0);
    params.layers[last].bias.data_mut().fill(0.0);
    let clean = image(Shape::new(2, 1, 6, 6), 52);
    let (g, m) = r3n_gradients_from(&params, &clean, &clean, 5, None).unwrap();
    assert_eq!(m.mse_loss, 0.0);
    assert_eq!(g.global_norm(), 0.0);
}

#[test]
fn clipping_bounds_the_step_norm() {
    let params = init_params(ModelKind::R3N, 61);
    let clean = image(Shape::new(1, 1, 6, 6), 62);
    let noisy = r3l_core::env::add_awgn(&clean, 50.0, 63).unwrap();
    let (g, _) = r3n_gradients_from(&params, &noisy, &clean, 2, None).unwrap();
    let norm = g.global_norm();
    for max in [norm * 0.01, norm * 0.5, norm * 2.0] {
        let mut c = g.clone();
        assert_eq!(c.clip_global_norm(max), norm);
        assert!(c.global_norm() <= max + 1e-9);
        if max >= norm {
            assert_eq!(c, g);
        }
    }
}

#[test]
fn first_adam_step_moves_each_weight_by_the_learning_rate() {
    let mut params = init_params(ModelKind::R3N, 71);
    let before = params.clone();
    let mut grads = ParamGrads::zeros_like(&params);
    let mut s = rng::stream(72);
    for t in grads.kernels.iter_mut().chain(grads.biases.iter_mut()) {
        for v in t.data_mut() {
            *v = rand::Rng::random_range(&mut s, -1.0..1.0);
        }
    }
    let mut adam = Adam::new(&params, 1e-3);
    adam.step(&mut params, &grads);
    assert_eq!(adam.steps(), 1);
    for (i, (a, b)) in params.layers.iter().zip(&before.layers).enumerate() {
        for ((w1, w0), g) in a.kernel.data().iter().zip(b.kernel.data()).zip(grads.kernels[i].data()) {
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w1 - w0 - want).abs() < 1e-15, "{} vs {want}", w1 - w0);
        }
    }
}

#[test]
fn non_finite_gradients_abort_the_update() {
    let mut params = init_params(ModelKind::R3N, 81);
    let before = params.clone();
    let mut adam = Adam::new(&params, 1e-3);
    let mut grads = ParamGrads::zeros_like(&params);
    grads.biases[0].data_mut()[0] = f64::NAN;
    let err = apply_gradients(&mut params, &mut adam, &mut grads, 40.0).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)));
    assert_eq!(params, before);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn config_validation_names_the_field() {
    let cases: [(&str, TrainConfig); 6] = [
        ("T", TrainConfig { stages: 0, ..TrainConfig::default() }),
        ("gamma", TrainConfig { gamma: 0.0, ..TrainConfig::default() }),
        ("gamma", TrainConfig { gamma: 1.5, ..TrainConfig::default() }),
        ("learning_rate", TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }),
        ("num_workers", TrainConfig { num_workers: 0, ..TrainConfig::default() }),
        ("reward_scale", TrainConfig { reward_scale: -1.0, ..TrainConfig::default() }),
    ];
    for (field, c) in cases {
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains(field), "{msg}");
    }
    assert!(TrainConfig { gamma: 1.0, ..TrainConfig::default() }.validate().is_ok());
}

#[test]
fn kinds_are_checked() {
    let r3n = init_params(ModelKind::R3N, 1);
    let r3l = init_params(ModelKind::R3L, 1);
    let x = image(Shape::new(1, 1, 4, 4), 1);
    assert!(rollout_from(&r3n, &x, &x, &r3l_config(1), &mut rng::stream(0)).is_err());
    assert!(r3n_gradients_from(&r3l, &x, &x, 1, None).is_err());
    assert!(Learner::new(r3n, r3l_config(1)).is_err());
}

#[test]
fn return_modes_parse() {
    assert_eq!("bootstrap".parse::<ReturnMode>().unwrap(), ReturnMode::Bootstrap);
    assert_eq!("monte-carlo".parse::<ReturnMode>().unwrap(), ReturnMode::MonteCarlo);
    assert!("td".parse::<ReturnMode>().is_err());
}
