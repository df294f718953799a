use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::TokenLayout;
use crate::minimmt::{cls_token, forward, init_model, mean_pool, ModelConfig};
use crate::synthworld::{generate_world, RoiSpec, WorldConfig};

fn dummy_window() -> Window {
    Window {
        run_id: "r".into(),
        target_tr: 0,
        window_start: 0,
        video: MatrixF64::zeros(1, 1),
        audio: MatrixF64::zeros(1, 1),
    }
}

fn binary_ds(labels: &[bool], folds: usize) -> ProbeDataset {
    ProbeDataset {
        task: "t".into(),
        schema: LabelSchema::Binary,
        split: ProbeSplit::CrossValidation { folds },
        clips: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ProbeClip {
                sample_id: format!("s{i}"),
                window: dummy_window(),
                labels: vec![l],
            })
            .collect(),
    }
}

fn small_world() -> SyntheticWorld {
    generate_world(&WorldConfig {
        n_subjects: 2,
        tune_trs: 30,
        eval_trs: 30,
        n_voxels: 20,
        roi_layout: vec![
            RoiSpec {
                name: "aSTS".into(),
                voxels: 10,
            },
            RoiSpec {
                name: "other".into(),
                voxels: 10,
            },
        ],
        target_rois: vec!["aSTS".into()],
        latent_dim: 3,
        independent_latent_dim: 4,
        layout: TokenLayout {
            frames_per_window: 4,
            patches_per_frame: 1,
            audio_tokens_per_window: 4,
            d_v: 6,
            d_a: 6,
        },
        window_trs: 4,
        seed: 2,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn separable_pair_is_fit_exactly() {
    let x = MatrixF64::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
    let p = train_linear_probe(&x, &[false, true], DEFAULT_PROBE_L2).unwrap();
    assert_eq!(p.predict(&x), vec![false, true]);
}

#[test]
fn single_class_training_is_degenerate() {
    let x = MatrixF64::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
    assert!(matches!(
        train_linear_probe(&x, &[true, true], 0.1),
        Err(Error::DegenerateProbe(_))
    ));
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = MatrixF64::from_fn(400, 5, |_, _| rng.sample(StandardNormal));
        let mut y: Vec<bool> = (0..400).map(|i| i % 2 == 0).collect();
        rand::seq::SliceRandom::shuffle(y.as_mut_slice(), &mut rng);
        let train: Vec<usize> = (0..200).collect();
        let test: Vec<usize> = (200..400).collect();
        let p = train_linear_probe(&x.select_rows(&train), &y[..200], DEFAULT_PROBE_L2).unwrap();
        let acc = binary_metrics(&p.predict(&x.select_rows(&test)), &y[200..])
            .unwrap()
            .accuracy;
        assert!((0.4..=0.6).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn huge_penalty_shrinks_to_base_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = MatrixF64::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<bool> = (0..40).map(|i| x.get(i, 0) > 0.0).collect();
    let balanced: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let p = train_linear_probe(&x, &balanced, 1e9).unwrap();
    assert!(p.weights.iter().all(|w| w.abs() < 1e-8));
    assert!(p.predict_proba(&x).iter().all(|q| (q - 0.5).abs() < 1e-6));
    let fitted = train_linear_probe(&x, &y, 1e9).unwrap();
    assert!(fitted.weights.iter().all(|w| w.abs() < 1e-8));
}

#[test]
fn confusion_arithmetic() {
    let truth: Vec<bool> = (0..10).map(|i| i < 5).collect();
    let m = binary_metrics(&[true; 10], &truth).unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    let none = binary_metrics(&[false; 4], &[false; 4]).unwrap();
    assert_eq!(none.f1, 0.0);
    assert_eq!(none.accuracy, 1.0);
    assert_eq!(none.support, 0);
}

#[test]
fn weighted_metrics_are_support_weighted() {
    // supports 60/20/10/5/3/2 out of 100 test clips
    let supports = [60usize, 20, 10, 5, 3, 2];
    let mut per_class = Vec::new();
    let mut expected = (0.0, 0.0);
    for (c, &s) in supports.iter().enumerate() {
        let truth: Vec<bool> = (0..100).map(|i| i < s).collect();
        // miss min(c, s) positives and raise c false alarms
        let pred: Vec<bool> = (0..100).map(|i| i < s - c.min(s) || (i >= s && i < s + c)).collect();
        let m = binary_metrics(&pred, &truth).unwrap();
        let tp = (s - c.min(s)) as f64;
        let (prec, rec) = (tp / (tp + c as f64), tp / s as f64);
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        let acc = (100.0 - (c.min(s) + c) as f64) / 100.0;
        assert!((m.f1 - f1).abs() < 1e-12 && (m.accuracy - acc).abs() < 1e-12);
        expected.0 += s as f64 * acc / 100.0;
        expected.1 += s as f64 * f1 / 100.0;
        per_class.push(m);
    }
    let (wa, wf) = weighted_metrics(&per_class).unwrap();
    assert!((wa - expected.0).abs() < 1e-12);
    assert!((wf - expected.1).abs() < 1e-12);
    // a class with no positives in the labels carries no weight
    per_class.push(binary_metrics(&[false; 100], &[false; 100]).unwrap());
    assert_eq!(weighted_metrics(&per_class).unwrap(), (wa, wf));
}

#[test]
fn hash_folds_are_balanced_and_stable() {
    let ids: Vec<String> = (0..100).map(|i| format!("clip-{i}")).collect();
    let f = assign_folds(&ids, 10, 0);
    for k in 0..10 {
        assert_eq!(f.iter().filter(|&&g| g == k).count(), 10);
    }
    assert_eq!(f, assign_folds(&ids, 10, 0));
    let mut rev = ids.clone();
    rev.reverse();
    let fr = assign_folds(&rev, 10, 0);
    for (i, id) in ids.iter().enumerate() {
        assert_eq!(f[i], fr[rev.iter().position(|r| r == id).unwrap()]);
    }
    assert_eq!(stable_hash("a"), 0xaf63dc4c8601ec8c);
}

#[test]
fn perfect_features_give_perfect_scores() {
    let labels: Vec<bool> = (0..60).map(|i| (i * 7) % 3 == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = MatrixF64::from_fn(60, 3, |i, j| {
        if j == 0 {
            labels[i] as u8 as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let r = run_cv_probe(&binary_ds(&labels, 10), &x, 10, DEFAULT_PROBE_L2).unwrap();
    assert_eq!(r.a2_accuracy, 1.0);
    assert_eq!(r.f1, 1.0);
    assert_eq!(r.per_fold.len(), 10);
}

#[test]
fn leave_one_out_is_the_mean_of_single_holdouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = MatrixF64::from_fn(20, 2, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<bool> = (0..20)
        .map(|i| x.get(i, 0) + 0.5 * x.get(i, 1) > 0.1 * (i % 3) as f64)
        .collect();
    let ds = binary_ds(&labels, 20);
    let r = run_cv_probe(&ds, &x, 20, DEFAULT_PROBE_L2).unwrap();
    let manual: f64 = (0..20)
        .map(|i| {
            let train: Vec<usize> = (0..20).filter(|&j| j != i).collect();
            let ytr: Vec<bool> = train.iter().map(|&j| labels[j]).collect();
            let p = train_linear_probe(&x.select_rows(&train), &ytr, DEFAULT_PROBE_L2).unwrap();
            (p.predict(&x.select_rows(&[i]))[0] == labels[i]) as u8 as f64
        })
        .sum::<f64>()
        / 20.0;
    assert!((r.a2_accuracy - manual).abs() < 1e-12);
}

#[test]
fn cv_metrics_ignore_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = MatrixF64::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<bool> = (0..50)
        .map(|i| x.get(i, 0) - x.get(i, 2) + 0.3 * rng.random_range(-1.0..1.0) > 0.0)
        .collect();
    let ds = binary_ds(&labels, 10);
    let a = run_cv_probe(&ds, &x, 10, DEFAULT_PROBE_L2).unwrap();
    let order: Vec<usize> = (0..50).rev().collect();
    let mut rds = ds.clone();
    rds.clips = order.iter().map(|&i| ds.clips[i].clone()).collect();
    let b = run_cv_probe(&rds, &x.select_rows(&order), 10, DEFAULT_PROBE_L2).unwrap();
    assert!((a.a2_accuracy - b.a2_accuracy).abs() < 1e-12);
    assert!((a.f1 - b.f1).abs() < 1e-12);
}

#[test]
fn cv_rejects_impossible_folds_and_bad_sizes() {
    let labels = [true, true, true, false, true, true];
    let x = MatrixF64::from_fn(6, 1, |i, _| i as f64);
    // the lone negative always ends up alone in some fold's held-out part
    assert!(matches!(
        run_cv_probe(&binary_ds(&labels, 6), &x, 6, 0.1),
        Err(Error::DegenerateProbe(_))
    ));
    assert!(run_cv_probe(&binary_ds(&labels, 10), &x, 10, 0.1).is_err());
}

#[test]
fn fixed_split_validation() {
    let mut ds = binary_ds(&[true, false, true, false], 2);
    ds.split = ProbeSplit::Fixed {
        train_ids: vec!["s0".into(), "s1".into()],
        test_ids: vec!["s2".into()],
    };
    assert!(ds.validate().is_err());
    ds.split = ProbeSplit::Fixed {
        train_ids: vec!["s0".into(), "s1".into(), "s2".into(), "s3".into()],
        test_ids: vec![],
    };
    let x = MatrixF64::from_fn(4, 1, |i, _| i as f64);
    assert!(run_fixed_split_probe(&ds, &x, 0.1).is_err());
}

#[test]
fn features_match_direct_forward() {
    let world = small_world();
    let ds = latent_probe_task(&world, 30, 1, LatentSource::Target, 10).unwrap();
    let l = world.config.layout;
    let state = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 3).unwrap();
    let x = probe_features(&state, &ds).unwrap();
    assert_eq!(x.shape(), (30, 64));
    let out = forward(&state, &ds.clips[4].window.video, &ds.clips[4].window.audio).unwrap();
    let mut row = cls_token(&out).to_vec();
    row.extend(mean_pool(&out).unwrap());
    assert_eq!(x.row(4), row.as_slice());
    assert_eq!(x, probe_features(&state, &ds).unwrap());
}

#[test]
fn synthetic_tasks_have_declared_balance_and_split() {
    let world = small_world();
    for source in [LatentSource::Target, LatentSource::Independent] {
        let ds = latent_probe_task(&world, 100, 2, source, 10).unwrap();
        assert_eq!(ds.clips.iter().filter(|c| c.labels[0]).count(), 50);
        ds.validate().unwrap();
    }
    let em = emotion_like_task(&world, 200, 3).unwrap();
    em.validate().unwrap();
    let rates: Vec<usize> = (0..6)
        .map(|c| em.clips.iter().filter(|cl| cl.labels[c]).count())
        .collect();
    assert_eq!(rates, vec![120, 40, 20, 10, 6, 4]);
    let ProbeSplit::Fixed { train_ids, test_ids } = &em.split else {
        panic!()
    };
    assert_eq!((train_ids.len(), test_ids.len()), (152, 48));
}

#[test]
fn fixed_split_multilabel_reports_weighted_metrics() {
    let world = small_world();
    let em = emotion_like_task(&world, 200, 3).unwrap();
    let l = world.config.layout;
    let state = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 3).unwrap();
    let x = probe_features(&state, &em).unwrap();
    let r = run_probe(&em, &x, DEFAULT_PROBE_L2).unwrap();
    assert_eq!(r.per_fold[0].per_class.len(), 6);
    let (wa, wf) = (r.weighted_a2.unwrap(), r.weighted_f1.unwrap());
    for v in [r.a2_accuracy, r.f1, wa, wf] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn fixed_split_moves_rare_positives_into_train() {
    // class 1's only positives sit at the end, past the train cut
    let labels = vec![
        vec![true, false, true, false, true, false, true, false],
        vec![false, false, false, false, false, false, true, true],
    ];
    let order = trainable_order(&labels, 5);
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    for c in &labels {
        let train: Vec<bool> = order[..5].iter().map(|&i| c[i]).collect();
        assert!(train.contains(&true) && train.contains(&false), "{train:?}");
    }
    // already trainable orders are left alone
    assert_eq!(trainable_order(&labels[..1], 5), (0..8).collect::<Vec<_>>());
}

#[test]
fn small_emotion_task_trains_every_class() {
    let world = small_world();
    let em = emotion_like_task(&world, 40, 3).unwrap();
    em.validate().unwrap();
    let ProbeSplit::Fixed { train_ids, .. } = &em.split else {
        panic!()
    };
    for c in 0..6 {
        let pos = em
            .clips
            .iter()
            .filter(|cl| train_ids.contains(&cl.sample_id) && cl.labels[c])
            .count();
        assert!(pos > 0, "class {c}");
    }
    let l = world.config.layout;
    let state = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 3).unwrap();
    let x = probe_features(&state, &em).unwrap();
    run_probe(&em, &x, DEFAULT_PROBE_L2).unwrap();
}
