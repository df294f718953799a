//! Voxel-wise ridge encoding models and ceiling-normalized ROI alignment.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BoldRun, RoiAtlas, Window};
use crate::error::{validation, Result};
use crate::matrix::MatrixF64;
use crate::minimmt::{cls_token, forward, mean_pool, ModelState};

/// Train/test TR counts of the reference evaluation split.
pub const REFERENCE_SPLIT: (usize, usize) = (8298, 2630);
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_CEILING_FLOOR: f64 = 0.05;

/// Sample Pearson correlation. Zero variance on either side gives `r = 0`
/// with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(validation(format!(
            "pearson length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(validation("pearson needs at least two samples"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        r: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Column-by-column Pearson between two equally shaped matrices.
pub fn pearson_columns(pred: &MatrixF64, actual: &MatrixF64) -> Result<Vec<Correlation>> {
    if pred.shape() != actual.shape() {
        return Err(validation("pearson_columns shape mismatch"));
    }
    let pt = pred.transpose();
    let at = actual.transpose();
    (0..pt.rows()).map(|c| pearson(pt.row(c), at.row(c))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeOptions {
    /// Standardize features with training statistics.
    pub standardize: bool,
    /// Center features and targets (intercept = target mean).
    pub fit_intercept: bool,
    pub cv_folds: usize,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions {
            standardize: true,
            fit_intercept: true,
            cv_folds: 5,
        }
    }
}

/// Fitted voxel-wise ridge model.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `D x V` coefficients on the transformed (centered / standardized) features.
    /// Rows of dropped features are zero.
    pub weights: MatrixF64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub target_mean: Vec<f64>,
    /// Chosen penalty per voxel.
    pub lambdas: Vec<f64>,
    /// Zero-variance feature columns that were excluded.
    pub dropped: Vec<usize>,
}

impl RidgeModel {
    pub fn predict(&self, x: &MatrixF64) -> Result<MatrixF64> {
        if x.cols() != self.feature_mean.len() {
            return Err(validation("predict: feature count mismatch"));
        }
        let xt = transform(x, &self.feature_mean, &self.feature_scale);
        let mut y = xt.matmul(&self.weights);
        for r in 0..y.rows() {
            for (v, m) in y.row_mut(r).iter_mut().zip(&self.target_mean) {
                *v += m;
            }
        }
        Ok(y)
    }
}

fn transform(x: &MatrixF64, mean: &[f64], scale: &[f64]) -> MatrixF64 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(scale) {
            *v = if *s == 0.0 { 0.0 } else { (*v - m) / s };
        }
    }
    out
}

struct Prepared {
    x: MatrixF64,
    y: MatrixF64,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
    target_mean: Vec<f64>,
    dropped: Vec<usize>,
}

fn prepare(x: &MatrixF64, y: &MatrixF64, opts: &RidgeOptions, warn_dropped: bool) -> Prepared {
    let d = x.cols();
    let n = x.rows() as f64;
    let center = opts.fit_intercept || opts.standardize;
    let feature_mean = if center { x.col_means() } else { vec![0.0; d] };
    let mut feature_scale = vec![1.0; d];
    let mut dropped = Vec::new();
    if opts.standardize {
        for j in 0..d {
            let var = (0..x.rows())
                .map(|r| (x.get(r, j) - feature_mean[j]).powi(2))
                .sum::<f64>()
                / n;
            if var <= 1e-24 {
                dropped.push(j);
                feature_scale[j] = 0.0;
            } else {
                feature_scale[j] = var.sqrt();
            }
        }
    }
    if warn_dropped && !dropped.is_empty() {
        warn!(
            "ridge: dropping {} zero-variance feature column(s): {:?}",
            dropped.len(),
            dropped
        );
    }
    let target_mean = if opts.fit_intercept {
        y.col_means()
    } else {
        vec![0.0; y.cols()]
    };
    let xt = transform(x, &feature_mean, &feature_scale);
    let mut yt = y.clone();
    for r in 0..yt.rows() {
        for (v, m) in yt.row_mut(r).iter_mut().zip(&target_mean) {
            *v -= m;
        }
    }
    Prepared {
        x: xt,
        y: yt,
        feature_mean,
        feature_scale,
        target_mean,
        dropped,
    }
}

/// Eigen-decomposed normal equations: `w(lambda) = Q (L + lambda)^-1 Q^T X^T Y`.
struct Spectral {
    q: MatrixF64,
    eig: Vec<f64>,
    /// `Q^T X^T Y`, `D x V`.
    proj: MatrixF64,
}

impl Spectral {
    fn new(x: &MatrixF64, y: &MatrixF64) -> Spectral {
        let g = x.t_matmul(x);
        let d = g.rows();
        let se = SymmetricEigen::new(DMatrix::from_row_slice(d, d, g.as_slice()));
        let q = MatrixF64::from_fn(d, d, |i, j| se.eigenvectors[(i, j)]);
        let eig = se.eigenvalues.iter().copied().collect();
        let proj = q.t_matmul(&x.t_matmul(y));
        Spectral { q, eig, proj }
    }

    fn inverse_eig(&self, lambda: f64) -> Vec<f64> {
        let max = self.eig.iter().copied().fold(0.0f64, f64::max);
        let tol = max * 1e-12 * self.eig.len() as f64;
        self.eig
            .iter()
            .map(|&e| {
                let s = e + lambda;
                // pseudo-inverse on the null space when unpenalized
                if lambda == 0.0 && e.abs() <= tol {
                    0.0
                } else {
                    1.0 / s
                }
            })
            .collect()
    }

    fn weights(&self, lambda: f64) -> MatrixF64 {
        let inv = self.inverse_eig(lambda);
        let mut scaled = self.proj.clone();
        for (i, s) in inv.iter().enumerate() {
            scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.q.matmul(&scaled)
    }

    fn weights_per_voxel(&self, lambdas: &[f64]) -> MatrixF64 {
        let d = self.q.rows();
        let v = lambdas.len();
        let mut scaled = MatrixF64::zeros(d, v);
        let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (c, &lam) in lambdas.iter().enumerate() {
            let inv = cache.entry(lam.to_bits()).or_insert_with(|| self.inverse_eig(lam));
            for i in 0..d {
                scaled.set(i, c, self.proj.get(i, c) * inv[i]);
            }
        }
        self.q.matmul(&scaled)
    }
}

/// Dropped columns carry exactly zero weight.
fn zero_rows(mut w: MatrixF64, rows: &[usize]) -> MatrixF64 {
    for &r in rows {
        w.row_mut(r).fill(0.0);
    }
    w
}

fn check_ridge_inputs(x: &MatrixF64, y: &MatrixF64, grid: &[f64]) -> Result<()> {
    x.require_nonempty("ridge X")?;
    y.require_nonempty("ridge Y")?;
    x.require_finite("ridge X")?;
    y.require_finite("ridge Y")?;
    if x.rows() != y.rows() {
        return Err(validation(format!("X has {} rows, Y has {}", x.rows(), y.rows())));
    }
    if grid.is_empty() {
        return Err(validation("empty lambda grid"));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(validation("lambda values must be finite and >= 0"));
    }
    Ok(())
}

/// Ridge with one penalty for every voxel.
pub fn ridge_solve(x: &MatrixF64, y: &MatrixF64, lambda: f64, opts: &RidgeOptions) -> Result<RidgeModel> {
    check_ridge_inputs(x, y, &[lambda])?;
    let p = prepare(x, y, opts, true);
    let sp = Spectral::new(&p.x, &p.y);
    Ok(RidgeModel {
        weights: zero_rows(sp.weights(lambda), &p.dropped),
        feature_mean: p.feature_mean,
        feature_scale: p.feature_scale,
        target_mean: p.target_mean,
        lambdas: vec![lambda; y.cols()],
        dropped: p.dropped,
    })
}

/// Contiguous, near-equal folds over `n` samples.
pub fn contiguous_folds(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    (0..k).map(|f| (f * n / k)..((f + 1) * n / k)).collect()
}

/// Mean held-out Pearson per (lambda, voxel) over contiguous CV folds.
/// Entries are `None` when every fold was degenerate.
fn cv_scores(x: &MatrixF64, y: &MatrixF64, grid: &[f64], opts: &RidgeOptions) -> Result<Vec<Vec<Option<f64>>>> {
    let n = x.rows();
    let v = y.cols();
    let folds = contiguous_folds(n, opts.cv_folds);
    let per_fold: Vec<Vec<Vec<Correlation>>> = folds
        .par_iter()
        .map(|held| {
            let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
            let test: Vec<usize> = held.clone().collect();
            let xtr = x.select_rows(&train);
            let ytr = y.select_rows(&train);
            let p = prepare(&xtr, &ytr, opts, false);
            let sp = Spectral::new(&p.x, &p.y);
            let xte = transform(&x.select_rows(&test), &p.feature_mean, &p.feature_scale);
            let yte = y.select_rows(&test);
            grid.iter()
                .map(|&lam| {
                    let pred = xte.matmul(&sp.weights(lam));
                    pearson_columns(&pred, &yte)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scores = vec![vec![None; v]; grid.len()];
    for (li, row) in scores.iter_mut().enumerate() {
        for (vi, slot) in row.iter_mut().enumerate() {
            let ok: Vec<f64> = per_fold
                .iter()
                .map(|f| f[li][vi])
                .filter(|c| !c.degenerate)
                .map(|c| c.r)
                .collect();
            if !ok.is_empty() {
                *slot = Some(ok.iter().sum::<f64>() / ok.len() as f64);
            }
        }
    }
    Ok(scores)
}

/// Voxel-wise ridge with the penalty for each voxel picked from `grid` by
/// cross-validated Pearson. A one-element grid skips cross-validation.
pub fn ridge_fit(x: &MatrixF64, y: &MatrixF64, grid: &[f64], opts: &RidgeOptions) -> Result<RidgeModel> {
    check_ridge_inputs(x, y, grid)?;
    if grid.len() == 1 {
        return ridge_solve(x, y, grid[0], opts);
    }
    if opts.cv_folds < 2 || x.rows() < opts.cv_folds {
        return Err(validation(format!(
            "need N >= cv_folds >= 2 (N = {}, folds = {})",
            x.rows(),
            opts.cv_folds
        )));
    }
    let scores = cv_scores(x, y, grid, opts)?;
    let largest = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lambdas: Vec<f64> = (0..y.cols())
        .map(|vi| {
            let mut best: Option<(f64, f64)> = None;
            for (li, &lam) in grid.iter().enumerate() {
                if let Some(s) = scores[li][vi] {
                    if best.is_none_or(|(bs, _)| s > bs) {
                        best = Some((s, lam));
                    }
                }
            }
            best.map_or(largest, |(_, lam)| lam)
        })
        .collect();
    let p = prepare(x, y, opts, true);
    let sp = Spectral::new(&p.x, &p.y);
    Ok(RidgeModel {
        weights: zero_rows(sp.weights_per_voxel(&lambdas), &p.dropped),
        feature_mean: p.feature_mean,
        feature_scale: p.feature_scale,
        target_mean: p.target_mean,
        lambdas,
        dropped: p.dropped,
    })
}

/// Model features for a set of windows: `[CLS output, mean-pooled output]` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub features: MatrixF64,
    pub sample_tr_index: Vec<usize>,
}

pub fn extract_features(state: &ModelState, windows: &[Window]) -> Result<FeatureTable> {
    if windows.is_empty() {
        return Err(crate::error::Error::EmptyDataset("no windows to featurize".into()));
    }
    let d = state.config.d_model;
    let rows = windows
        .par_iter()
        .map(|w| {
            let out = forward(state, &w.video, &w.audio)?;
            let mut row = cls_token(&out).to_vec();
            row.extend(mean_pool(&out)?);
            Ok(row)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut features = MatrixF64::zeros(rows.len(), 2 * d);
    for (i, r) in rows.iter().enumerate() {
        features.row_mut(i).copy_from_slice(r);
    }
    Ok(FeatureTable {
        features,
        sample_tr_index: windows.iter().map(|w| w.target_tr).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiAlignment {
    /// `None` when no voxel of the ROI passes the ceiling floor.
    pub mean_normalized: Option<f64>,
    pub n_voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub raw_r: Vec<f64>,
    /// `raw / ceiling` for voxels whose ceiling exceeds the floor.
    pub normalized: Vec<Option<f64>>,
    pub per_roi: BTreeMap<String, RoiAlignment>,
    pub degenerate_voxels: usize,
}

impl AlignmentReport {
    /// Mean normalized alignment over the union of the named ROIs.
    pub fn roi_set(&self, atlas: &RoiAtlas, rois: &[String]) -> Result<RoiAlignment> {
        let member = atlas.membership(rois)?;
        let vals: Vec<f64> = self
            .normalized
            .iter()
            .zip(&member)
            .filter_map(|(n, &m)| if m { *n } else { None })
            .collect();
        Ok(RoiAlignment {
            mean_normalized: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            n_voxels: vals.len(),
        })
    }

    pub fn roi_set_mean(&self, atlas: &RoiAtlas, rois: &[String]) -> Result<Option<f64>> {
        Ok(self.roi_set(atlas, rois)?.mean_normalized)
    }
}

pub fn normalized_alignment(raw_r: &[f64], ceilings: &[f64], atlas: &RoiAtlas, floor: f64) -> Result<AlignmentReport> {
    if raw_r.len() != ceilings.len() || raw_r.len() != atlas.n_voxels() {
        return Err(validation(format!(
            "length mismatch: raw {}, ceilings {}, atlas {}",
            raw_r.len(),
            ceilings.len(),
            atlas.n_voxels()
        )));
    }
    let normalized: Vec<Option<f64>> = raw_r
        .iter()
        .zip(ceilings)
        .map(|(&r, &c)| (c > floor).then(|| r / c))
        .collect();
    let mut sums = vec![(0.0, 0usize); atlas.roi_names.len()];
    for (v, n) in normalized.iter().enumerate() {
        if let Some(x) = n {
            let s = &mut sums[atlas.labels[v]];
            s.0 += x;
            s.1 += 1;
        }
    }
    let per_roi = atlas
        .roi_names
        .iter()
        .zip(&sums)
        .map(|(name, &(s, c))| {
            (
                name.clone(),
                RoiAlignment {
                    mean_normalized: (c > 0).then(|| s / c as f64),
                    n_voxels: c,
                },
            )
        })
        .collect();
    Ok(AlignmentReport {
        raw_r: raw_r.to_vec(),
        normalized,
        per_roi,
        degenerate_voxels: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeOptions {
    pub lambda_grid: Vec<f64>,
    pub ridge: RidgeOptions,
    pub ceiling_floor: f64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            ridge: RidgeOptions::default(),
            ceiling_floor: DEFAULT_CEILING_FLOOR,
        }
    }
}

/// Temporal split of `n` samples in the reference train:test ratio.
pub fn default_split(n: usize) -> (usize, usize) {
    let (a, b) = REFERENCE_SPLIT;
    let train = ((n as f64) * a as f64 / (a + b) as f64).round() as usize;
    (train, n - train)
}

/// Ridge on the first `train_n` rows, Pearson on the next `test_n`, then
/// ceiling normalization. Rows of `features` are matched to BOLD TRs through
/// `sample_tr_index`.
pub fn evaluate_features(
    features: &FeatureTable,
    bold: &BoldRun,
    ceilings: &[f64],
    atlas: &RoiAtlas,
    split: (usize, usize),
    opts: &EncodeOptions,
) -> Result<AlignmentReport> {
    let (train_n, test_n) = split;
    let n = features.features.rows();
    if features.sample_tr_index.len() != n {
        return Err(validation("feature table index length mismatch"));
    }
    if train_n + test_n > n || train_n == 0 || test_n < 2 {
        return Err(validation(format!(
            "split ({train_n}, {test_n}) does not fit {n} samples"
        )));
    }
    if let Some(&bad) = features.sample_tr_index.iter().find(|&&t| t >= bold.n_trs()) {
        return Err(validation(format!("sample TR {bad} beyond BOLD run")));
    }
    let y = bold.responses.select_rows(&features.sample_tr_index);
    let x_train = features.features.row_range(0, train_n);
    let y_train = y.row_range(0, train_n);
    let x_test = features.features.row_range(train_n, train_n + test_n);
    let y_test = y.row_range(train_n, train_n + test_n);
    let model = ridge_fit(&x_train, &y_train, &opts.lambda_grid, &opts.ridge)?;
    let pred = model.predict(&x_test)?;
    let corr = pearson_columns(&pred, &y_test)?;
    let raw: Vec<f64> = corr.iter().map(|c| c.r).collect();
    let mut report = normalized_alignment(&raw, ceilings, atlas, opts.ceiling_floor)?;
    report.degenerate_voxels = corr.iter().filter(|c| c.degenerate).count();
    Ok(report)
}

pub fn evaluate_model(
    state: &ModelState,
    windows: &[Window],
    bold: &BoldRun,
    ceilings: &[f64],
    atlas: &RoiAtlas,
    split: (usize, usize),
    opts: &EncodeOptions,
) -> Result<AlignmentReport> {
    let table = extract_features(state, windows)?;
    evaluate_features(&table, bold, ceilings, atlas, split, opts)
}

/// On-disk encode report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub model_id: String,
    pub subject_id: String,
    pub per_roi: BTreeMap<String, RoiAlignment>,
    /// Named ROI unions, e.g. the tuning target and everything else.
    pub roi_sets: BTreeMap<String, RoiAlignment>,
    pub floor: f64,
    pub split: (usize, usize),
    pub degenerate_voxels: usize,
}

impl EncodeReport {
    pub fn new(
        model_id: &str,
        subject_id: &str,
        report: &AlignmentReport,
        atlas: &RoiAtlas,
        roi_sets: &[(String, Vec<String>)],
        opts: &EncodeOptions,
        split: (usize, usize),
    ) -> Result<Self> {
        let sets = roi_sets
            .iter()
            .map(|(name, rois)| Ok((name.clone(), report.roi_set(atlas, rois)?)))
            .collect::<Result<_>>()?;
        Ok(EncodeReport {
            model_id: model_id.to_string(),
            subject_id: subject_id.to_string(),
            per_roi: report.per_roi.clone(),
            roi_sets: sets,
            floor: opts.ceiling_floor,
            split,
            degenerate_voxels: report.degenerate_voxels,
        })
    }
}
