//! Linear probes on frozen `[CLS, mean-pool]` features: cross-validated
//! binary tasks and fixed-split multi-label tasks, plus synthetic tasks whose
//! labels come from a world's latents.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::encodeval::extract_features;
use crate::error::{validation, Error, Result};
use crate::matrix::{dot, MatrixF64};
use crate::minimmt::ModelState;
use crate::synthworld::{sample_clips, SyntheticWorld};

pub const DEFAULT_PROBE_L2: f64 = 1e-2;
pub const DEFAULT_CV_FOLDS: usize = 10;
pub const MAX_PROBE_ITERATIONS: usize = 10_000;
pub const PROBE_GRAD_TOL: f64 = 1e-6;
/// Train/test sizes of the reference emotion/sentiment split.
pub const REFERENCE_FIXED_SPLIT: (usize, usize) = (15_288, 4_830);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSchema {
    Binary,
    MultiLabel { classes: usize },
}

impl LabelSchema {
    pub fn n_classes(&self) -> usize {
        match self {
            LabelSchema::Binary => 1,
            LabelSchema::MultiLabel { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSplit {
    CrossValidation {
        folds: usize,
    },
    Fixed {
        train_ids: Vec<String>,
        test_ids: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClip {
    pub sample_id: String,
    pub window: Window,
    /// One flag for binary tasks, `k` for multi-label tasks.
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub task: String,
    pub schema: LabelSchema,
    pub split: ProbeSplit,
    pub clips: Vec<ProbeClip>,
}

impl ProbeDataset {
    pub fn validate(&self) -> Result<()> {
        if self.clips.is_empty() {
            return Err(Error::EmptyDataset(format!("probe task {} has no clips", self.task)));
        }
        let k = self.schema.n_classes();
        if k == 0 {
            return Err(validation("multi-label schema needs at least one class"));
        }
        if let Some(c) = self.clips.iter().find(|c| c.labels.len() != k) {
            return Err(validation(format!(
                "clip {} has {} labels, expected {k}",
                c.sample_id,
                c.labels.len()
            )));
        }
        let ids: BTreeSet<&str> = self.clips.iter().map(|c| c.sample_id.as_str()).collect();
        if ids.len() != self.clips.len() {
            return Err(validation("sample ids are not unique"));
        }
        if let ProbeSplit::Fixed { train_ids, test_ids } = &self.split {
            let tr: BTreeSet<&str> = train_ids.iter().map(String::as_str).collect();
            let te: BTreeSet<&str> = test_ids.iter().map(String::as_str).collect();
            let partitions = tr.is_disjoint(&te)
                && tr.len() == train_ids.len()
                && te.len() == test_ids.len()
                && tr.union(&te).copied().collect::<BTreeSet<_>>() == ids;
            if !partitions {
                return Err(validation("fixed split ids do not partition the dataset"));
            }
        }
        Ok(())
    }

    fn label_column(&self, class: usize) -> Vec<bool> {
        self.clips.iter().map(|c| c.labels[class]).collect()
    }
}

/// `[CLS, mean-pool]` features of every clip, one row per clip.
pub fn probe_features(state: &ModelState, ds: &ProbeDataset) -> Result<MatrixF64> {
    let windows: Vec<Window> = ds.clips.iter().map(|c| c.window.clone()).collect();
    Ok(extract_features(state, &windows)?.features)
}

/// L2-regularized logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict_proba(&self, x: &MatrixF64) -> Vec<f64> {
        (0..x.rows())
            .map(|r| sigmoid(dot(&self.weights, &self.standardize(x.row(r))) + self.bias))
            .collect()
    }

    pub fn predict(&self, x: &MatrixF64) -> Vec<bool> {
        self.predict_proba(x).into_iter().map(|p| p > 0.5).collect()
    }
}

/// Full-batch gradient descent on mean log-loss `+ l2/2 |w|^2` (bias not
/// penalized) from a zero start, step `1/L` with `L` the exact smoothness
/// constant, until the gradient norm drops below [`PROBE_GRAD_TOL`] or
/// [`MAX_PROBE_ITERATIONS`] is reached.
pub fn train_linear_probe(x: &MatrixF64, y: &[bool], l2: f64) -> Result<LogisticProbe> {
    if x.rows() != y.len() {
        return Err(validation(format!("{} feature rows for {} labels", x.rows(), y.len())));
    }
    if x.rows() < 2 {
        return Err(validation("probe needs at least 2 samples"));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(validation("l2 must be finite and >= 0"));
    }
    x.require_finite("probe features")?;
    let pos = y.iter().filter(|&&b| b).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateProbe(format!(
            "training labels are single-class ({pos} of {} positive)",
            y.len()
        )));
    }
    let (n, d) = (x.rows(), x.cols());
    let feature_mean = x.col_means();
    let feature_scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..n).map(|r| (x.get(r, j) - feature_mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    // design with a trailing intercept column
    let z = MatrixF64::from_fn(n, d + 1, |r, j| {
        if j == d {
            1.0
        } else {
            (x.get(r, j) - feature_mean[j]) / feature_scale[j]
        }
    });
    let gram = z.t_matmul(&z);
    let lmax = SymmetricEigen::new(DMatrix::from_row_slice(d + 1, d + 1, gram.as_slice()))
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * lmax / n as f64 + l2);
    let targets: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut theta = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_PROBE_ITERATIONS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for r in 0..n {
            let row = z.row(r);
            let err = sigmoid(dot(row, &theta)) - targets[r];
            for (g, v) in grad.iter_mut().zip(row) {
                *g += err * v;
            }
        }
        for (j, g) in grad.iter_mut().enumerate() {
            *g /= n as f64;
            if j < d {
                *g += l2 * theta[j];
            }
        }
        if dot(&grad, &grad).sqrt() < PROBE_GRAD_TOL {
            converged = true;
            break;
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= step * g;
        }
        iterations += 1;
    }
    let bias = theta.pop().unwrap_or(0.0);
    Ok(LogisticProbe {
        weights: theta,
        bias,
        feature_mean,
        feature_scale,
        iterations,
        converged,
    })
}

/// Accuracy and positive-class F1 (`2PR/(P+R)`, 0 when `P+R = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// Positives among the true labels.
    pub support: usize,
    pub n: usize,
}

pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> Result<BinaryMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(validation(
            "prediction and label vectors must be nonempty and equal length",
        ));
    }
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
        if p == t {
            correct += 1;
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 {
        tp as f64 / (tp + fneg) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: correct as f64 / pred.len() as f64,
        f1,
        support: tp + fneg,
        n: pred.len(),
    })
}

/// Support-weighted mean of per-class accuracy and F1; classes without
/// positives in the evaluation labels carry zero weight. `None` when no
/// class has support.
pub fn weighted_metrics(per_class: &[BinaryMetrics]) -> Option<(f64, f64)> {
    let total: usize = per_class.iter().map(|m| m.support).sum();
    if total == 0 {
        return None;
    }
    let w =
        |f: fn(&BinaryMetrics) -> f64| per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64;
    Some((w(|m| m.accuracy), w(|m| m.f1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n_train: usize,
    pub n_test: usize,
    /// Macro average over classes (the single class for binary tasks).
    pub a2: f64,
    pub f1: f64,
    pub weighted_a2: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub per_class: Vec<BinaryMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub a2_accuracy: f64,
    pub f1: f64,
    pub weighted_a2: Option<f64>,
    pub weighted_f1: Option<f64>,
    /// One entry per CV fold, or a single entry for a fixed split.
    pub per_fold: Vec<SplitMetrics>,
}

fn evaluate_split(ds: &ProbeDataset, x: &MatrixF64, train: &[usize], test: &[usize], l2: f64) -> Result<SplitMetrics> {
    if test.is_empty() {
        return Err(validation("empty test split"));
    }
    let xtr = x.select_rows(train);
    let xte = x.select_rows(test);
    let per_class = (0..ds.schema.n_classes())
        .map(|c| {
            let labels = ds.label_column(c);
            let ytr: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let yte: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
            let probe = train_linear_probe(&xtr, &ytr, l2)?;
            binary_metrics(&probe.predict(&xte), &yte)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = per_class.len() as f64;
    let weighted = match ds.schema {
        LabelSchema::Binary => None,
        LabelSchema::MultiLabel { .. } => weighted_metrics(&per_class),
    };
    Ok(SplitMetrics {
        n_train: train.len(),
        n_test: test.len(),
        a2: per_class.iter().map(|m| m.accuracy).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        weighted_a2: weighted.map(|w| w.0),
        weighted_f1: weighted.map(|w| w.1),
        per_class,
    })
}

/// 64-bit FNV-1a, stable across platforms and runs.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Fold of every sample: samples are ordered by the hash of their id (salted
/// by `rotation`) and dealt round-robin, so fold sizes differ by at most one.
pub fn assign_folds(sample_ids: &[String], folds: usize, rotation: usize) -> Vec<usize> {
    let mut order: Vec<(u64, &str, usize)> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let key = if rotation == 0 {
                stable_hash(id)
            } else {
                stable_hash(&format!("{rotation}:{id}"))
            };
            (key, id.as_str(), i)
        })
        .collect();
    order.sort();
    let mut fold = vec![0; sample_ids.len()];
    for (rank, (_, _, i)) in order.iter().enumerate() {
        fold[*i] = rank % folds;
    }
    fold
}

fn folds_are_trainable(ds: &ProbeDataset, fold: &[usize], folds: usize) -> bool {
    (0..folds).all(|f| {
        (0..ds.schema.n_classes()).all(|c| {
            let train: Vec<bool> = ds
                .clips
                .iter()
                .zip(fold)
                .filter(|(_, &g)| g != f)
                .map(|(cl, _)| cl.labels[c])
                .collect();
            train.iter().any(|&b| b) && train.iter().any(|&b| !b)
        })
    })
}

fn mean_of(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_option(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| mean_of(present.into_iter()))
}

/// `folds`-fold cross-validation; metrics are averaged over folds. If some
/// fold's training part is single-class for a label, the assignment is
/// re-drawn with the next hash salt.
pub fn run_cv_probe(ds: &ProbeDataset, features: &MatrixF64, folds: usize, l2: f64) -> Result<ProbeResult> {
    ds.validate()?;
    let n = ds.clips.len();
    if features.rows() != n {
        return Err(validation(format!("{} feature rows for {n} clips", features.rows())));
    }
    if folds < 2 || n < folds {
        return Err(validation(format!("need 2 <= folds <= N (folds {folds}, N {n})")));
    }
    let ids: Vec<String> = ds.clips.iter().map(|c| c.sample_id.clone()).collect();
    let fold = (0..=folds)
        .map(|r| assign_folds(&ids, folds, r))
        .find(|f| folds_are_trainable(ds, f, folds))
        .ok_or_else(|| {
            Error::DegenerateProbe("no fold assignment leaves both classes in every training split".into())
        })?;
    let per_fold = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            evaluate_split(ds, features, &train, &test, l2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeResult {
        task: ds.task.clone(),
        a2_accuracy: mean_of(per_fold.iter().map(|m| m.a2)),
        f1: mean_of(per_fold.iter().map(|m| m.f1)),
        weighted_a2: mean_option(&per_fold.iter().map(|m| m.weighted_a2).collect::<Vec<_>>()),
        weighted_f1: mean_option(&per_fold.iter().map(|m| m.weighted_f1).collect::<Vec<_>>()),
        per_fold,
    })
}

pub fn run_fixed_split_probe(ds: &ProbeDataset, features: &MatrixF64, l2: f64) -> Result<ProbeResult> {
    ds.validate()?;
    let ProbeSplit::Fixed { train_ids, test_ids } = &ds.split else {
        return Err(validation(format!("task {} has no fixed split", ds.task)));
    };
    if features.rows() != ds.clips.len() {
        return Err(validation("feature rows do not match clips"));
    }
    if test_ids.is_empty() {
        return Err(validation("empty test split"));
    }
    let index = |ids: &[String]| -> Vec<usize> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        (0..ds.clips.len())
            .filter(|&i| set.contains(ds.clips[i].sample_id.as_str()))
            .collect()
    };
    let m = evaluate_split(ds, features, &index(train_ids), &index(test_ids), l2)?;
    Ok(ProbeResult {
        task: ds.task.clone(),
        a2_accuracy: m.a2,
        f1: m.f1,
        weighted_a2: m.weighted_a2,
        weighted_f1: m.weighted_f1,
        per_fold: vec![m],
    })
}

/// Runs the task's own split protocol.
pub fn run_probe(ds: &ProbeDataset, features: &MatrixF64, l2: f64) -> Result<ProbeResult> {
    match ds.split {
        ProbeSplit::CrossValidation { folds } => run_cv_probe(ds, features, folds, l2),
        ProbeSplit::Fixed { .. } => run_fixed_split_probe(ds, features, l2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// The latent read out by the tuning ROIs.
    Target,
    /// The latent read out only by non-target ROIs.
    Independent,
}

pub const TARGET_TASK: &str = "target_latent";
pub const INDEPENDENT_TASK: &str = "independent_latent";
pub const EMOTION_TASK: &str = "emotion_like";
/// Positive rates of the six emotion-like classes.
pub const EMOTION_POSITIVE_RATES: [f64; 6] = [0.6, 0.2, 0.1, 0.05, 0.03, 0.02];

fn latent_scores(latent: &MatrixF64, n_dirs: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n_dirs)
        .map(|_| {
            let dir: Vec<f64> = (0..latent.cols()).map(|_| rng.sample(StandardNormal)).collect();
            (0..latent.rows()).map(|r| dot(latent.row(r), &dir)).collect()
        })
        .collect()
}

/// Labels `score > q`-quantile so that `rate` of the clips are positive.
fn threshold_at_rate(scores: &[f64], rate: f64) -> Vec<bool> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n_pos = ((rate * scores.len() as f64).round() as usize).clamp(1, scores.len() - 1);
    let cut = sorted[scores.len() - n_pos - 1];
    scores.iter().map(|&s| s > cut).collect()
}

fn clip_id(i: usize) -> String {
    format!("clip-{i:05}")
}

/// Balanced binary task: fresh clips labelled by the sign of a random
/// linear functional of the chosen latent (relative to its median).
pub fn latent_probe_task(
    world: &SyntheticWorld,
    n: usize,
    seed: u64,
    source: LatentSource,
    folds: usize,
) -> Result<ProbeDataset> {
    if n < 2 {
        return Err(validation("probe task needs at least 2 clips"));
    }
    let clips = sample_clips(world, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let (latent, task) = match source {
        LatentSource::Target => (&clips.target_mean, TARGET_TASK),
        LatentSource::Independent => (&clips.independent_mean, INDEPENDENT_TASK),
    };
    let labels = threshold_at_rate(&latent_scores(latent, 1, &mut rng)[0], 0.5);
    Ok(ProbeDataset {
        task: task.to_string(),
        schema: LabelSchema::Binary,
        split: ProbeSplit::CrossValidation { folds },
        clips: clips
            .windows
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (window, l))| ProbeClip {
                sample_id: clip_id(i),
                window,
                labels: vec![l],
            })
            .collect(),
    })
}

/// Six-class multi-label task on the target latent with imbalanced class
/// rates and a fixed split in the reference train/test proportion.
/// Clip order whose first `n_train` entries hold a positive and a negative
/// of every class where the labels allow it: a class missing one in train
/// swaps its first test clip of that kind with the last train clip that is
/// not the sole representative of anything.
fn trainable_order(labels: &[Vec<bool>], n_train: usize) -> Vec<usize> {
    let n = labels.first().map_or(0, Vec::len);
    let mut order: Vec<usize> = (0..n).collect();
    let count = |order: &[usize], c: usize, v: bool| order[..n_train].iter().filter(|&&i| labels[c][i] == v).count();
    for c in 0..labels.len() {
        for v in [true, false] {
            if count(&order, c, v) > 0 {
                continue;
            }
            let Some(j) = (n_train..n).find(|&j| labels[c][order[j]] == v) else {
                continue;
            };
            let swappable = (0..n_train).rev().find(|&i| {
                (0..labels.len())
                    .all(|k| count(&order, k, labels[k][order[i]]) > 1 || labels[k][order[i]] == labels[k][order[j]])
            });
            if let Some(i) = swappable {
                order.swap(i, j);
            }
        }
    }
    order
}

pub fn emotion_like_task(world: &SyntheticWorld, n: usize, seed: u64) -> Result<ProbeDataset> {
    if n < 10 {
        return Err(validation("emotion-like task needs at least 10 clips"));
    }
    let clips = sample_clips(world, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6);
    let scores = latent_scores(&clips.target_mean, EMOTION_POSITIVE_RATES.len(), &mut rng);
    let labels: Vec<Vec<bool>> = scores
        .iter()
        .zip(EMOTION_POSITIVE_RATES)
        .map(|(s, rate)| threshold_at_rate(s, rate))
        .collect();
    let (rt, re) = REFERENCE_FIXED_SPLIT;
    let n_train = (n as f64 * rt as f64 / (rt + re) as f64).round() as usize;
    let order = trainable_order(&labels, n_train);
    let ids: Vec<String> = (0..n).map(clip_id).collect();
    let pick = |r: std::ops::Range<usize>| -> Vec<String> { order[r].iter().map(|&i| ids[i].clone()).collect() };
    Ok(ProbeDataset {
        task: EMOTION_TASK.to_string(),
        schema: LabelSchema::MultiLabel {
            classes: EMOTION_POSITIVE_RATES.len(),
        },
        split: ProbeSplit::Fixed {
            train_ids: pick(0..n_train),
            test_ids: pick(n_train..n),
        },
        clips: clips
            .windows
            .into_iter()
            .enumerate()
            .map(|(i, window)| ProbeClip {
                sample_id: ids[i].clone(),
                window,
                labels: labels.iter().map(|l| l[i]).collect(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests;
