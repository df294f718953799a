//! Cross-subject prediction accuracy per voxel.
//!
//! For every target subject and every nonempty subset of the remaining
//! subjects, the same voxel averaged over the subset predicts the target
//! subject's voxel through a scalar ridge fit on the training TRs. The
//! held-out Pearson correlation is averaged over subsets (per subject) and
//! then over subjects (group level).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BoldRun, RoiAtlas};
use crate::encodeval::{contiguous_folds, pearson};
use crate::error::{validation, Result};
use crate::matrix::{compensated_sum, MatrixF64};

pub const DEFAULT_CEILING_LAMBDAS: [f64; 5] = [0.0, 0.01, 0.1, 1.0, 10.0];
pub const CEILING_CV_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CeilingEstimate {
    /// Group-level ceiling per voxel (mean over subjects). Unclipped.
    pub ceilings: Vec<f64>,
    /// `n_subjects x V`, each subject's subset-averaged ceiling.
    pub per_subject: MatrixF64,
    /// `(n_subjects - 1) x V`: row `q - 1` averages subsets of size `q`
    /// over all target subjects.
    pub by_subset_size: MatrixF64,
    pub subject_ids: Vec<String>,
    pub train_trs: usize,
    pub test_trs: usize,
}

impl CeilingEstimate {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn subject_ceilings(&self, subject_id: &str) -> Option<&[f64]> {
        let i = self.subject_ids.iter().position(|s| s == subject_id)?;
        Some(self.per_subject.row(i))
    }
}

/// Sufficient statistics of one contiguous block of TRs.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

impl Moments {
    fn of(x: &[f64], y: &[f64]) -> Moments {
        let mut m = Moments::default();
        for (&a, &b) in x.iter().zip(y) {
            m.n += 1.0;
            m.sx += a;
            m.sy += b;
            m.sxx += a * a;
            m.sxy += a * b;
            m.syy += b * b;
        }
        m
    }

    fn minus(self, o: Moments) -> Moments {
        Moments {
            n: self.n - o.n,
            sx: self.sx - o.sx,
            sy: self.sy - o.sy,
            sxx: self.sxx - o.sxx,
            sxy: self.sxy - o.sxy,
            syy: self.syy - o.syy,
        }
    }

    /// Centered scalar ridge: `(slope, x_mean, y_mean)`.
    fn fit(&self, lambda: f64) -> (f64, f64, f64) {
        let xm = self.sx / self.n;
        let ym = self.sy / self.n;
        let cxx = self.sxx - self.n * xm * xm;
        let cxy = self.sxy - self.n * xm * ym;
        let denom = cxx + lambda;
        let w = if denom > 0.0 { cxy / denom } else { 0.0 };
        (w, xm, ym)
    }

    /// Squared error of `y_hat = a + w (x - b)` over this block.
    fn sse(&self, w: f64, b: f64, a: f64) -> f64 {
        // sum (y - a - w x + w b)^2 with c = a - w b
        let c = a - w * b;
        self.syy + self.n * c * c + w * w * self.sxx - 2.0 * c * self.sy - 2.0 * w * self.sxy + 2.0 * c * w * self.sx
    }
}

/// Scalar ridge on `x[..train] -> y[..train]` with the penalty chosen by
/// contiguous-fold CV error, then Pearson on the next `test` TRs.
fn scalar_ceiling(x: &[f64], y: &[f64], train: usize, test: usize, lambdas: &[f64]) -> f64 {
    let folds = contiguous_folds(train, CEILING_CV_FOLDS);
    let blocks: Vec<Moments> = folds
        .iter()
        .map(|f| Moments::of(&x[f.clone()], &y[f.clone()]))
        .collect();
    let total = blocks.iter().fold(Moments::default(), |acc, b| Moments {
        n: acc.n + b.n,
        sx: acc.sx + b.sx,
        sy: acc.sy + b.sy,
        sxx: acc.sxx + b.sxx,
        sxy: acc.sxy + b.sxy,
        syy: acc.syy + b.syy,
    });
    let mut best = (f64::INFINITY, lambdas[0]);
    for &lam in lambdas {
        let err: f64 = blocks
            .iter()
            .map(|held| {
                let (w, xm, ym) = total.minus(*held).fit(lam);
                held.sse(w, xm, ym)
            })
            .sum();
        if err < best.0 {
            best = (err, lam);
        }
    }
    let (w, xm, ym) = total.fit(best.1);
    let pred: Vec<f64> = x[train..train + test].iter().map(|&v| ym + w * (v - xm)).collect();
    pearson(&pred, &y[train..train + test]).map(|c| c.r).unwrap_or(0.0)
}

pub fn estimate_ceilings(
    runs: &[BoldRun],
    train_trs: usize,
    test_trs: usize,
    lambdas: &[f64],
) -> Result<CeilingEstimate> {
    let n_sub = runs.len();
    if n_sub < 2 {
        return Err(validation(format!("need at least 2 subjects, got {n_sub}")));
    }
    if n_sub > 16 {
        return Err(validation("subset enumeration is limited to 16 subjects"));
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(validation("lambda grid must be nonempty, finite and >= 0"));
    }
    let v = runs[0].n_voxels();
    let t = runs[0].n_trs();
    if runs.iter().any(|r| r.n_voxels() != v || r.n_trs() != t) {
        return Err(validation("runs are not voxel/TR aligned"));
    }
    if train_trs < CEILING_CV_FOLDS || test_trs < 2 || train_trs + test_trs > t {
        return Err(validation(format!(
            "train {train_trs} + test {test_trs} does not fit {t} TRs (train >= {CEILING_CV_FOLDS}, test >= 2)"
        )));
    }
    let used = train_trs + test_trs;
    // voxel-major copies of the used TRs
    let cols: Vec<MatrixF64> = runs
        .iter()
        .map(|r| r.responses.row_range(0, used).transpose())
        .collect();

    let jobs: Vec<(usize, u32)> = (0..n_sub)
        .flat_map(|s| (1u32..(1 << (n_sub - 1))).map(move |mask| (s, mask)))
        .collect();
    let results: Vec<Vec<f64>> = jobs
        .par_iter()
        .map(|&(s, mask)| {
            let others: Vec<usize> = (0..n_sub).filter(|&o| o != s).collect();
            let members: Vec<usize> = (0..n_sub - 1)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| others[b])
                .collect();
            let mut x = vec![0.0; used];
            (0..v)
                .map(|vox| {
                    x.iter_mut().for_each(|e| *e = 0.0);
                    for &q in &members {
                        for (e, val) in x.iter_mut().zip(cols[q].row(vox)) {
                            *e += val;
                        }
                    }
                    let k = members.len() as f64;
                    x.iter_mut().for_each(|e| *e /= k);
                    scalar_ceiling(&x, cols[s].row(vox), train_trs, test_trs, lambdas)
                })
                .collect()
        })
        .collect();

    let n_subsets = (1usize << (n_sub - 1)) - 1;
    let mut per_subject = MatrixF64::zeros(n_sub, v);
    let mut by_size = MatrixF64::zeros(n_sub - 1, v);
    for vox in 0..v {
        for s in 0..n_sub {
            let rs = &results[s * n_subsets..(s + 1) * n_subsets];
            per_subject.set(s, vox, compensated_sum(rs.iter().map(|r| r[vox])) / n_subsets as f64);
        }
        for size in 1..n_sub {
            let picked: Vec<f64> = jobs
                .iter()
                .zip(&results)
                .filter(|((_, mask), _)| mask.count_ones() as usize == size)
                .map(|(_, r)| r[vox])
                .collect();
            by_size.set(
                size - 1,
                vox,
                compensated_sum(picked.iter().copied()) / picked.len() as f64,
            );
        }
    }
    let ceilings = (0..v)
        .map(|vox| compensated_sum((0..n_sub).map(|s| per_subject.get(s, vox))) / n_sub as f64)
        .collect();
    Ok(CeilingEstimate {
        ceilings,
        per_subject,
        by_subset_size: by_size,
        subject_ids: runs.iter().map(|r| r.subject_id.clone()).collect(),
        train_trs,
        test_trs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub subject: String,
    pub count: usize,
}

/// Surviving voxel count (ceiling strictly above threshold, ROI in `rois`)
/// for every subject at every threshold.
pub fn sweep_threshold(
    ceil: &CeilingEstimate,
    atlas: &RoiAtlas,
    rois: &[String],
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(validation("thresholds must be sorted ascending"));
    }
    if atlas.n_voxels() != ceil.per_subject.cols() {
        return Err(validation("atlas and ceilings cover different voxel counts"));
    }
    let member = atlas.membership(rois)?;
    let mut rows = Vec::new();
    for &th in thresholds {
        for (s, id) in ceil.subject_ids.iter().enumerate() {
            let count = ceil
                .per_subject
                .row(s)
                .iter()
                .zip(&member)
                .filter(|(&c, &m)| m && c > th)
                .count();
            rows.push(SweepRow {
                threshold: th,
                subject: id.clone(),
                count,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn world(n_sub: usize, t: usize, v: usize, sigma: f64, seed: u64) -> Vec<BoldRun> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let signal = MatrixF64::from_fn(t, v, |_, _| StandardNormal.sample(&mut rng));
        (0..n_sub)
            .map(|s| {
                let mut r = signal.clone();
                for x in r.as_mut_slice() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *x += sigma * e;
                }
                BoldRun::new(format!("s{s}"), "run", r, 1.49).unwrap()
            })
            .collect()
    }

    #[test]
    fn six_subjects_use_31_subsets() {
        let runs = world(6, 60, 2, 0.5, 1);
        let est = estimate_ceilings(&runs, 40, 20, &DEFAULT_CEILING_LAMBDAS).unwrap();
        assert_eq!(est.per_subject.shape(), (6, 2));
        assert_eq!(est.by_subset_size.rows(), 5);
        // binomial(5, q) subsets per size, total 31
        let sizes: usize = (1..6).map(|q| (1u32..32).filter(|m| m.count_ones() == q).count()).sum();
        assert_eq!(sizes, 31);
    }

    #[test]
    fn fewer_than_two_subjects_rejected() {
        let runs = world(1, 60, 2, 0.5, 1);
        assert!(estimate_ceilings(&runs, 40, 20, &DEFAULT_CEILING_LAMBDAS).is_err());
        let runs = world(3, 60, 2, 0.5, 1);
        assert!(estimate_ceilings(&runs, 50, 20, &DEFAULT_CEILING_LAMBDAS).is_err());
    }

    #[test]
    fn noiseless_subjects_have_unit_ceiling() {
        let runs = world(3, 400, 3, 0.0, 2);
        let est = estimate_ceilings(&runs, 300, 100, &DEFAULT_CEILING_LAMBDAS).unwrap();
        for c in &est.ceilings {
            assert!((c - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_ridge_matches_closed_form() {
        let x = [1.0, 2.0, 3.0, 4.0, 6.0];
        let y = [2.0, 4.5, 5.5, 8.0, 12.0];
        let m = Moments::of(&x, &y);
        let (w, xm, ym) = m.fit(0.5);
        let xc: Vec<f64> = x.iter().map(|v| v - 3.2).collect();
        let yc: Vec<f64> = y.iter().map(|v| v - 6.4).collect();
        let expected =
            xc.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>() / (xc.iter().map(|a| a * a).sum::<f64>() + 0.5);
        assert!((w - expected).abs() < 1e-12);
        let sse: f64 = x.iter().zip(&y).map(|(a, b)| (b - ym - w * (a - xm)).powi(2)).sum();
        assert!((m.sse(w, xm, ym) - sse).abs() < 1e-9);
    }

    #[test]
    fn relabeling_subjects_leaves_group_ceilings_unchanged() {
        let runs = world(4, 120, 5, 0.8, 3);
        let a = estimate_ceilings(&runs, 80, 40, &DEFAULT_CEILING_LAMBDAS).unwrap();
        let permuted: Vec<BoldRun> = [2, 0, 3, 1].iter().map(|&i| runs[i].clone()).collect();
        let b = estimate_ceilings(&permuted, 80, 40, &DEFAULT_CEILING_LAMBDAS).unwrap();
        for (x, y) in a.ceilings.iter().zip(&b.ceilings) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (j, &i) in [2usize, 0, 3, 1].iter().enumerate() {
            for (x, y) in a.per_subject.row(i).iter().zip(b.per_subject.row(j)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sweep_counts_strictly_above_threshold() {
        let est = CeilingEstimate {
            ceilings: vec![0.0; 4],
            per_subject: MatrixF64::from_rows(&[vec![0.1, 0.3, 0.25, 0.9], vec![-0.2, 0.0, 0.5, 0.9]]).unwrap(),
            by_subset_size: MatrixF64::zeros(1, 4),
            subject_ids: vec!["a".into(), "b".into()],
            train_trs: 1,
            test_trs: 1,
        };
        let atlas = RoiAtlas::from_layout(&[("STS".into(), 3), ("other".into(), 1)]).unwrap();
        let rows = sweep_threshold(&est, &atlas, &["STS".into()], &[0.0, 0.25, 0.3, 1.0]).unwrap();
        let counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![3, 1, 1, 1, 0, 1, 0, 0]);
        assert!(sweep_threshold(&est, &atlas, &["STS".into()], &[0.3, 0.1]).is_err());
    }
}
