use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::make_pairs;
use crate::encodeval::{ridge_solve, RidgeOptions};
use crate::minimmt::{forward, init_model};
use crate::synthworld::{generate_world, WorldConfig, TUNE_RUN};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        d_v: 3,
        d_a: 2,
        max_tokens: 8,
    }
}

fn random_window(rng: &mut ChaCha8Rng) -> Window {
    Window {
        run_id: "r".into(),
        target_tr: 0,
        window_start: 0,
        video: MatrixF64::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
        audio: MatrixF64::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0)),
    }
}

fn dataset(n: usize, m: usize, seed: u64) -> Vec<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PairedSample {
            window: random_window(&mut rng),
            y: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

#[test]
fn filter_voxels_examples() {
    let atlas = RoiAtlas::from_layout(&[("STS".into(), 3)]).unwrap();
    let sts = vec!["STS".to_string()];
    let m = filter_voxels("s", &[0.1, 0.3, 0.25], &atlas, &sts, 0.25).unwrap();
    assert_eq!(m.indices(), vec![1]);
    let all = filter_voxels("s", &[0.1, 0.3, 0.25], &atlas, &sts, 0.0).unwrap();
    assert_eq!(all.m(), 3);
    let err = filter_voxels("s", &[0.1, 0.2, 0.25], &atlas, &sts, 0.25).unwrap_err();
    assert!(matches!(err, Error::UntunableSubject { .. }));
}

#[test]
fn filter_voxels_ignores_non_target_rois() {
    let atlas = RoiAtlas::from_layout(&[("STS".into(), 2), ("LOC".into(), 2)]).unwrap();
    let m = filter_voxels("s", &[0.5, 0.1, 0.9, 0.9], &atlas, &["STS".into()], 0.25).unwrap();
    assert_eq!(m.indices(), vec![0]);
}

#[test]
fn zero_head_loss_is_squared_norm_of_y() {
    let s = init_model(tiny_config(), 1).unwrap();
    let mut sample = dataset(1, 2, 3).remove(0);
    sample.y = vec![1.0, 2.0];
    let head = ProjectionHead::zeros(2, 8, true);
    let (loss, _) = brain_tune_loss(&s, &head, &sample).unwrap();
    assert_eq!(loss, 5.0);
}

#[test]
fn exact_prediction_has_zero_loss_and_head_gradient() {
    let s = init_model(tiny_config(), 1).unwrap();
    let mut sample = dataset(1, 3, 4).remove(0);
    sample.y = vec![0.5, -1.0, 2.0];
    let mut head = ProjectionHead::zeros(3, 8, true);
    head.bias = MatrixF64::row_vector(&sample.y);
    let (loss, g) = brain_tune_loss(&s, &head, &sample).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.head.flatten().iter().all(|&v| v == 0.0));
    assert!(g.model.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn head_dimension_mismatch_rejected() {
    let s = init_model(tiny_config(), 1).unwrap();
    let sample = dataset(1, 3, 4).remove(0);
    assert!(brain_tune_loss(&s, &ProjectionHead::zeros(2, 8, true), &sample).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let s = init_model(tiny_config(), 2).unwrap();
    let sample = dataset(1, 3, 5).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut head = ProjectionHead::zeros(3, 8, true);
    for v in head.w.as_mut_slice().iter_mut().chain(head.bias.as_mut_slice()) {
        *v = rng.random_range(-1.0..1.0);
    }
    let (_, g) = brain_tune_loss(&s, &head, &sample).unwrap();
    let h = 1e-5;
    let analytic = g.head.flatten();
    for k in 0..analytic.len() {
        let mut hp = head.clone();
        if let Some(v) = hp
            .tensors_mut()
            .into_iter()
            .flat_map(|(_, m)| m.as_mut_slice().iter_mut())
            .nth(k)
        {
            *v += h;
        }
        let mut hm = head.clone();
        if let Some(v) = hm
            .tensors_mut()
            .into_iter()
            .flat_map(|(_, m)| m.as_mut_slice().iter_mut())
            .nth(k)
        {
            *v -= h;
        }
        let fd =
            (brain_tune_loss(&s, &hp, &sample).unwrap().0 - brain_tune_loss(&s, &hm, &sample).unwrap().0) / (2.0 * h);
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-8);
        assert!(rel < 1e-5, "head param {k}: {} vs {fd}", analytic[k]);
    }
    // a sample of transformer parameters
    let analytic = g.model.flatten();
    for k in (0..analytic.len()).step_by(37) {
        let bump = |d: f64| {
            let mut sp = s.clone();
            if let Some(v) = sp
                .tensors_mut()
                .into_iter()
                .flat_map(|(_, m)| m.as_mut_slice().iter_mut())
                .nth(k)
            {
                *v += d;
            }
            brain_tune_loss(&sp, &head, &sample).unwrap().0
        };
        let fd = (bump(1e-4) - bump(-1e-4)) / 2e-4;
        let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
        assert!(rel < 1e-4, "model param {k}: {} vs {fd}", analytic[k]);
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let init = init_model(tiny_config(), 3).unwrap();
    let data = dataset(20, 3, 7);
    let cfg = TuneConfig {
        lr: 0.0,
        epochs: 3,
        batch_size: 4,
        ..TuneConfig::default()
    };
    let out = train(&data, &cfg, &init).unwrap();
    assert_eq!(out.state, init);
    assert_eq!(out.loss_trace.len(), 3);
    assert!(out.loss_trace.iter().all(|&l| l == out.loss_trace[0]));
}

#[test]
fn training_is_deterministic() {
    let init = init_model(tiny_config(), 3).unwrap();
    let data = dataset(20, 3, 8);
    let cfg = TuneConfig {
        epochs: 3,
        seed: 11,
        ..TuneConfig::default()
    };
    let a = train(&data, &cfg, &init).unwrap();
    let b = train(&data, &cfg, &init).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.state, b.state);
    assert_eq!(a.head, b.head);
}

#[test]
fn full_batch_training_ignores_sample_order() {
    let init = init_model(tiny_config(), 3).unwrap();
    let data = dataset(12, 2, 9);
    let mut reversed = data.clone();
    reversed.reverse();
    let cfg = TuneConfig {
        epochs: 4,
        batch_size: 12,
        lr: 1e-2,
        ..TuneConfig::default()
    };
    let a = train(&data, &cfg, &init).unwrap().loss_trace;
    let b = train(&reversed, &cfg, &init).unwrap().loss_trace;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-10 * x.abs());
    }
}

#[test]
fn empty_dataset_and_bad_config_rejected() {
    let init = init_model(tiny_config(), 3).unwrap();
    assert!(matches!(
        train(&[], &TuneConfig::default(), &init),
        Err(Error::EmptyDataset(_))
    ));
    let cfg = TuneConfig {
        epochs: 0,
        ..TuneConfig::default()
    };
    assert!(matches!(train(&dataset(2, 1, 1), &cfg, &init), Err(Error::Config(_))));
}

#[test]
fn noiseless_world_loss_decreases_every_epoch() {
    let wc = WorldConfig {
        n_subjects: 2,
        tune_trs: 120,
        eval_trs: 20,
        shared_noise_sigma: 0.0,
        subject_noise_sigma: 0.0,
        seed: 4,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc).unwrap();
    let bold = &world.subject_runs(TUNE_RUN)[0];
    let mask = VoxelMask::new(world.atlas.membership(&wc.target_rois).unwrap());
    let pairs = make_pairs(bold, world.stimulus(TUNE_RUN).unwrap(), &mask, wc.window_trs).unwrap();
    let l = wc.layout;
    let init = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 1).unwrap();
    let out = train(&pairs, &TuneConfig::default(), &init).unwrap();
    assert_eq!(out.loss_trace.len(), 10);
    for w in out.loss_trace.windows(2) {
        assert!(w[1] < w[0], "{:?}", out.loss_trace);
    }
}

#[test]
fn frozen_backbone_matches_closed_form_regression() {
    let init = init_model(tiny_config(), 5).unwrap();
    let data = dataset(40, 3, 10);
    let cfg = TuneConfig {
        epochs: 1500,
        batch_size: 40,
        lr: 2e-2,
        freeze_backbone: true,
        ..TuneConfig::default()
    };
    let out = train(&data, &cfg, &init).unwrap();
    assert_eq!(out.state, init);
    let pooled: Vec<Vec<f64>> = data
        .iter()
        .map(|s| mean_pool(&forward(&init, &s.window.video, &s.window.audio).unwrap()).unwrap())
        .collect();
    let x = MatrixF64::from_rows(&pooled).unwrap();
    let y = MatrixF64::from_rows(&data.iter().map(|s| s.y.clone()).collect::<Vec<_>>()).unwrap();
    let opts = RidgeOptions {
        standardize: false,
        fit_intercept: true,
        cv_folds: 5,
    };
    let ridge = ridge_solve(&x, &y, 1e-9, &opts).unwrap();
    let pred = ridge.predict(&x).unwrap();
    let closed: f64 = (0..40)
        .map(|i| (0..3).map(|j| (pred.get(i, j) - y.get(i, j)).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 40.0;
    let trained: f64 = data
        .iter()
        .zip(&pooled)
        .map(|(s, o)| {
            let p = out.head.predict(o);
            p.iter().zip(&s.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / 40.0;
    assert!(trained >= closed * (1.0 - 1e-9), "{trained} < {closed}");
    assert!(trained <= closed * 1.05, "{trained} vs closed form {closed}");
}

#[test]
fn stimulus_mask_fraction_must_be_open_interval() {
    let init = init_model(tiny_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = vec![random_window(&mut rng)];
    for p in [0.0, 1.0, -0.1] {
        let cfg = TuneConfig {
            mask_fraction: p,
            ..TuneConfig::default()
        };
        assert!(matches!(stimulus_tune(&w, &cfg, &init), Err(Error::Validation(_))));
    }
}

#[test]
fn token_mask_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(sample_token_mask(17, 0.15, &mut rng).iter().filter(|&&b| b).count(), 3);
    assert_eq!(sample_token_mask(7, 0.01, &mut rng).iter().filter(|&&b| b).count(), 1);
    assert_eq!(sample_token_mask(4, 0.99, &mut rng).iter().filter(|&&b| b).count(), 3);
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let s = init_model(tiny_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_window(&mut rng);
    let head = ReconHead::init(&s.config, 4);
    let positions = [true, false, false, true, false, true, false];
    let (_, gm, gh) = reconstruction_loss(&s, &head, &w, &positions).unwrap();
    let analytic = gh.flatten();
    let h = 1e-5;
    for k in 0..analytic.len() {
        let bump = |d: f64| {
            let mut hp = head.clone();
            if let Some(v) = hp
                .tensors_mut()
                .into_iter()
                .flat_map(|(_, m)| m.as_mut_slice().iter_mut())
                .nth(k)
            {
                *v += d;
            }
            reconstruction_loss(&s, &hp, &w, &positions).unwrap().0
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!(
            (fd - analytic[k]).abs() < 1e-7 + 1e-5 * fd.abs(),
            "head {k}: {} vs {fd}",
            analytic[k]
        );
    }
    let analytic = gm.flatten();
    for k in (0..analytic.len()).step_by(23) {
        let bump = |d: f64| {
            let mut sp = s.clone();
            if let Some(v) = sp
                .tensors_mut()
                .into_iter()
                .flat_map(|(_, m)| m.as_mut_slice().iter_mut())
                .nth(k)
            {
                *v += d;
            }
            reconstruction_loss(&sp, &head, &w, &positions).unwrap().0
        };
        let fd = (bump(1e-4) - bump(-1e-4)) / 2e-4;
        assert!(
            (fd - analytic[k]).abs() < 1e-7 + 1e-4 * fd.abs(),
            "model {k}: {} vs {fd}",
            analytic[k]
        );
    }
}

#[test]
fn stimulus_tuning_memorizes_a_single_window() {
    let init = init_model(tiny_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = vec![random_window(&mut rng)];
    let cfg = TuneConfig {
        epochs: 200,
        batch_size: 1,
        lr: 1e-2,
        ..TuneConfig::default()
    };
    let out = stimulus_tune(&w, &cfg, &init).unwrap();
    let start_head = ReconHead::init(&init.config, cfg.seed);
    let mut mrng = ChaCha8Rng::seed_from_u64(99);
    let (mut before, mut after) = (0.0, 0.0);
    for _ in 0..20 {
        let mask = sample_token_mask(7, cfg.mask_fraction, &mut mrng);
        before += reconstruction_loss(&init, &start_head, &w[0], &mask).unwrap().0;
        after += reconstruction_loss(&out.state, &out.head, &w[0], &mask).unwrap().0;
    }
    assert!(after < 0.1 * before, "{after} vs {before}");
}

#[test]
fn stimulus_tuning_is_deterministic() {
    let init = init_model(tiny_config(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w: Vec<Window> = (0..6).map(|_| random_window(&mut rng)).collect();
    let cfg = TuneConfig {
        epochs: 2,
        batch_size: 3,
        ..TuneConfig::default()
    };
    let a = stimulus_tune(&w, &cfg, &init).unwrap();
    let b = stimulus_tune(&w, &cfg, &init).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let init = init_model(tiny_config(), 3).unwrap();
    let out = train(
        &dataset(8, 2, 1),
        &TuneConfig {
            epochs: 1,
            ..TuneConfig::default()
        },
        &init,
    )
    .unwrap();
    save_checkpoint(dir.path(), &out.state, Some(&out.head)).unwrap();
    let (state, head) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(state, out.state);
    assert_eq!(head.unwrap(), out.head);
    let bare = dir.path().join("bare");
    save_checkpoint(&bare, &init, None).unwrap();
    let (state, head) = load_checkpoint(&bare).unwrap();
    assert_eq!(state, init);
    assert!(head.is_none());
}
