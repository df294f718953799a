//! The eight acceptance criteria. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stderr (visible without `--nocapture`) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use neurotune::braintune::{brain_tune_loss, ProjectionHead, TuneConfig};
use neurotune::data::{PairedSample, Window};
use neurotune::encodeval::{ridge_fit, RidgeOptions};
use neurotune::minimmt::{init_model, ModelConfig};
use neurotune::noiseceil::{estimate_ceilings, sweep_threshold, DEFAULT_CEILING_LAMBDAS};
use neurotune::params::{check_gradients, ParamSet};
use neurotune::pipeline::{
    brain_tune_subject, ceiling_stage, run_pipeline, synth_stage, CeilingParams, Dataset, PipelineConfig, Summary,
    BRAIN, NON_TARGET_SET, PRETRAINED, STIMULUS, TARGET_SET,
};
use neurotune::probes::{INDEPENDENT_TASK, TARGET_TASK};
use neurotune::stats::{one_sample_ttest_onesided, wilcoxon_signed_rank, Alternative};
use neurotune::synthworld::{generate_world, WorldConfig, TUNE_RUN};
use neurotune::{Error, MatrixF64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} - {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..20u64 {
        let n_tokens = rng.random_range(2..=8);
        let nv = rng.random_range(1..n_tokens);
        let na = n_tokens - nv;
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: [1, 2, 4][rng.random_range(0..3)],
            d_ff: rng.random_range(4..=16),
            d_v: rng.random_range(1..=6),
            d_a: rng.random_range(1..=6),
            max_tokens: n_tokens + 1,
        };
        let m = rng.random_range(1..=4);
        // evaluated at a random point around init: at the 0.02-scale init the
        // pre-LayerNorm spread is so small that h = 1e-4 differences carry
        // O(h^2) truncation error above the tolerance themselves
        let mut state = init_model(cfg, trial).unwrap();
        for (_, t) in state.tensors_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let mut rand_mat = |r, c| MatrixF64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let sample = PairedSample {
            window: Window {
                run_id: "r".into(),
                target_tr: 0,
                window_start: 0,
                video: rand_mat(nv, cfg.d_v),
                audio: rand_mat(na, cfg.d_a),
            },
            y: rand_mat(1, m).into_vec(),
        };
        let mut head = ProjectionHead::zeros(m, cfg.d_model, true);
        head.w = rand_mat(m, cfg.d_model);
        head.bias = rand_mat(1, m);
        let (loss, grads) = brain_tune_loss(&state, &head, &sample).unwrap();
        // structurally zero gradients (key biases) compare against the
        // difference quotient's rounding floor, which scales with the loss
        let floor = 1e-6 * (1.0 + loss.abs());
        let model = check_gradients(&state, &grads.model, 1e-4, floor, |s| {
            brain_tune_loss(s, &head, &sample).unwrap().0
        });
        let head_check = check_gradients(&head, &grads.head, 1e-4, floor, |h| {
            brain_tune_loss(&state, h, &sample).unwrap().0
        });
        worst = worst.max(model.max_rel_error).max(head_check.max_rel_error);
        checked += model.n_checked + head_check.n_checked;
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        &format!("20 configs, {checked} gradients, max rel err {worst:.2e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_2_ridge_matches_normal_equations() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = RidgeOptions {
        standardize: false,
        fit_intercept: false,
        ..RidgeOptions::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = MatrixF64::from_fn(20, 5, |_, _| rng.random_range(-2.0..2.0));
        let y = MatrixF64::from_fn(20, 1, |_, _| rng.random_range(-2.0..2.0));
        let xn = DMatrix::from_row_slice(20, 5, x.as_slice());
        let yn = DVector::from_column_slice(y.as_slice());
        for lambda in [0.0, 0.1, 10.0] {
            let fit = ridge_fit(&x, &y, &[lambda], &raw).unwrap();
            let lhs = xn.transpose() * &xn + DMatrix::identity(5, 5) * lambda;
            let w = lhs.lu().solve(&(xn.transpose() * &yn)).unwrap();
            for j in 0..5 {
                worst = worst.max((fit.weights.get(j, 0) - w[j]).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        worst < 1e-8 && elapsed < Duration::from_secs(5),
        &format!("150 solves, max abs diff {worst:.2e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_3_exact_statistics() {
    let a = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Alternative::Greater)
        .unwrap()
        .p;
    let b = wilcoxon_signed_rank(&[3.0, 5.0, -1.0, 7.0, 9.0, 11.0], Alternative::Greater)
        .unwrap()
        .p;
    let t = one_sample_ttest_onesided(&[2.0, -1.0, 3.0, 0.0, 1.0, 1.0]).unwrap().p;
    verdict(
        3,
        a == 0.015625 && b == 0.03125 && (t - 0.0718).abs() < 1e-3,
        &format!("wilcoxon {a}, {b}; t-test {t:.5}"),
    );
}

#[test]
fn criterion_4_noise_ceiling_oracle() {
    let start = Instant::now();
    // 1 / (1 + 0.75^2) = 0.64
    let cfg = WorldConfig {
        tune_trs: 4000,
        eval_trs: 20,
        shared_noise_sigma: 0.0,
        subject_noise_sigma: 0.75,
        seed: 4,
        ..WorldConfig::default()
    };
    let world = generate_world(&cfg).unwrap();
    let (train, test) = CeilingParams::default().split(cfg.tune_trs);
    let est = estimate_ceilings(&world.subject_runs(TUNE_RUN), train, test, &DEFAULT_CEILING_LAMBDAS).unwrap();
    let target = world.atlas.membership(&cfg.target_rois).unwrap();
    let single = est.by_subset_size.row(0);
    let v: Vec<f64> = single
        .iter()
        .zip(&target)
        .filter(|(_, &t)| t)
        .map(|(c, _)| *c)
        .collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let elapsed = start.elapsed();
    verdict(
        4,
        (mean - 0.64).abs() <= 0.05 && elapsed < Duration::from_secs(120),
        &format!(
            "single-subject ceiling over {} target voxels {mean:.4} (expect 0.64), {elapsed:.1?}",
            v.len()
        ),
    );
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Runs {
    summaries: Vec<Summary>,
    first_bytes: Vec<u8>,
    rerun_bytes: Vec<u8>,
    slowest: Duration,
}

/// Five default-config pipelines plus a rerun of the first, shared by
/// criteria 5-7.
fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut summaries = Vec::new();
        let mut bytes = Vec::new();
        let mut slowest = Duration::ZERO;
        for seed in SEEDS.iter().copied().chain([SEEDS[0]]) {
            let dir = tempfile::tempdir().unwrap();
            let cfg = PipelineConfig {
                seed,
                output_dir: dir.path().to_path_buf(),
                ..PipelineConfig::default()
            };
            let start = Instant::now();
            summaries.push(run_pipeline(&cfg).unwrap());
            slowest = slowest.max(start.elapsed());
            bytes.push(std::fs::read(dir.path().join("summary.json")).unwrap());
        }
        summaries.pop();
        Runs {
            summaries,
            first_bytes: bytes[0].clone(),
            rerun_bytes: bytes[SEEDS.len()].clone(),
            slowest,
        }
    })
}

fn alignment(s: &Summary, model: &str, key: &str) -> f64 {
    s.alignment[model][key].mean.unwrap()
}

fn wilcoxon_p(s: &Summary, comparison: &str, key: &str) -> f64 {
    s.stats
        .iter()
        .find(|r| r.family == "alignment" && r.comparison == comparison && r.metric == key)
        .and_then(|r| r.p)
        .unwrap_or(1.0)
}

#[test]
fn criterion_5_alignment_gain_is_localized() {
    let r = runs();
    let (mut gains, mut significant, mut localized) = (0, 0, 0);
    let mut detail = Vec::new();
    for s in &r.summaries {
        let b = alignment(s, BRAIN, TARGET_SET);
        let gp = b - alignment(s, PRETRAINED, TARGET_SET);
        let gs = b - alignment(s, STIMULUS, TARGET_SET);
        let p = wilcoxon_p(s, "brain_vs_pretrained", TARGET_SET).max(wilcoxon_p(s, "brain_vs_stimulus", TARGET_SET));
        let nb = alignment(s, BRAIN, NON_TARGET_SET);
        let non = (nb - alignment(s, PRETRAINED, NON_TARGET_SET)).max(nb - alignment(s, STIMULUS, NON_TARGET_SET));
        gains += usize::from(gp >= 0.05 && gs >= 0.05);
        significant += usize::from(p < 0.05 && s.tuned_subjects.len() == 6);
        localized += usize::from(non < 0.05);
        detail.push(format!(
            "seed {}: +{gp:.3}/+{gs:.3} p {p:.4} non-target {non:+.3}",
            s.seed
        ));
    }
    let budget = Duration::from_secs(15 * 60);
    verdict(
        5,
        gains >= 4 && significant >= 3 && localized >= 4 && r.slowest < budget,
        &format!(
            "gain>=0.05 in {gains}/5, p<0.05 in {significant}/5, non-target gain<0.05 in {localized}/5, slowest run {:.0?} [{}]",
            r.slowest,
            detail.join("; ")
        ),
    );
}

fn probe_gains(task: &str) -> Vec<f64> {
    runs()
        .summaries
        .iter()
        .map(|s| s.probes[BRAIN][task].a2 - s.probes[PRETRAINED][task].a2)
        .collect()
}

#[test]
fn criterion_6_probe_transfer_and_non_transfer() {
    let target = probe_gains(TARGET_TASK);
    let independent = probe_gains(INDEPENDENT_TASK);
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let p_target = one_sample_ttest_onesided(&target).map_or(1.0, |t| t.p);
    let p_independent = match one_sample_ttest_onesided(&independent) {
        Ok(t) => t.p,
        Err(Error::UndefinedTest(_)) => 1.0,
        Err(e) => panic!("{e}"),
    };
    verdict(
        6,
        mean > 0.03 && p_target < 0.05 && p_independent >= 0.05,
        &format!(
            "target A2 gain {mean:.3} (p {p_target:.2e}), independent gains {independent:.3?} (p {p_independent:.3})"
        ),
    );
}

#[test]
fn criterion_7_pipeline_is_deterministic() {
    let r = runs();
    verdict(
        7,
        !r.first_bytes.is_empty() && r.first_bytes == r.rerun_bytes,
        &format!(
            "seed {} summary.json {} bytes, rerun identical: {}",
            SEEDS[0],
            r.first_bytes.len(),
            r.first_bytes == r.rerun_bytes
        ),
    );
}

#[test]
fn criterion_8_threshold_sweep_and_untunable_subject() {
    let dir = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        subject_noise_overrides: vec![None, None, None, None, None, Some(5.0)],
        eval_trs: 20,
        seed: 8,
        ..WorldConfig::default()
    };
    let manifest = synth_stage(&world, &dir.path().join("data")).unwrap();
    let ds = Dataset::load(&manifest).unwrap();
    let params = CeilingParams::default();
    let est = ceiling_stage(&ds, &params, None, &dir.path().join("ceilings")).unwrap();
    let rows = sweep_threshold(
        &est,
        &ds.manifest.atlas,
        &ds.manifest.target_rois,
        &params.sweep_thresholds,
    )
    .unwrap();
    let monotone = est.subject_ids.iter().all(|s| {
        let counts: Vec<usize> = rows.iter().filter(|r| &r.subject == s).map(|r| r.count).collect();
        counts.windows(2).all(|w| w[1] <= w[0])
    });
    let noisy = &est.subject_ids[5];
    let zero_at = rows
        .iter()
        .find(|r| &r.subject == noisy && r.count == 0)
        .map(|r| r.threshold);
    let threshold = zero_at.unwrap_or(1.0);
    let init = init_model(PipelineConfig::default().model.model_config(&ds.manifest.layout), 1).unwrap();
    let cfg = TuneConfig {
        ceiling_threshold: threshold,
        epochs: 1,
        ..TuneConfig::default()
    };
    let err = brain_tune_subject(&ds, &est, noisy, &cfg, &init, &dir.path().join("m")).unwrap_err();
    let untunable = matches!(err, Error::UntunableSubject { .. });
    verdict(
        8,
        monotone && threshold < 0.4 && untunable,
        &format!(
            "counts non-increasing: {monotone}; {noisy} reaches 0 voxels at {:?}; tuning there: {err}",
            zero_at.map(|t| format!("{t:.2}"))
        ),
    );
}
