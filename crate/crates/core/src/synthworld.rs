//! Synthetic multi-subject worlds with a known stimulus -> latent -> voxel model.
//!
//! Two independent latent streams drive the world: a target latent `z` read out
//! by the target ROIs, and an independent latent `u` read out by every other
//! ROI. Both are rendered into the audio and video tokens. A voxel's response
//! at TR `t` is a linear readout of the latent averaged over the preceding
//! window, plus noise shared across subjects and noise private to each
//! subject. Readout columns are scaled so every voxel's stimulus-driven signal
//! has unit variance.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{window_at, BoldRun, RoiAtlas, StimulusStream, TokenLayout, Window};
use crate::error::{validation, Result};
use crate::matrix::MatrixF64;

pub const TUNE_RUN: &str = "tune";
pub const EVAL_RUN: &str = "eval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub name: String,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_subjects: usize,
    /// TRs in the tuning run (ceilings and brain-tuning use this run).
    pub tune_trs: usize,
    /// TRs in the held-out evaluation run.
    pub eval_trs: usize,
    pub n_voxels: usize,
    pub roi_layout: Vec<RoiSpec>,
    pub target_rois: Vec<String>,
    pub latent_dim: usize,
    pub independent_latent_dim: usize,
    pub shared_noise_sigma: f64,
    pub subject_noise_sigma: f64,
    /// Optional per-subject replacement for `subject_noise_sigma`.
    pub subject_noise_overrides: Vec<Option<f64>>,
    pub token_noise_frac: f64,
    pub window_trs: usize,
    pub tr_seconds: f64,
    pub layout: TokenLayout,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let roi = |name: &str, voxels| RoiSpec {
            name: name.to_string(),
            voxels,
        };
        WorldConfig {
            n_subjects: 6,
            tune_trs: 1000,
            eval_trs: 900,
            n_voxels: 500,
            roi_layout: vec![
                roi("aSTS", 40),
                roi("pSTS", 60),
                roi("LOC", 50),
                roi("EBA", 50),
                roi("other", 300),
            ],
            target_rois: vec!["aSTS".into(), "pSTS".into()],
            latent_dim: 8,
            independent_latent_dim: 56,
            shared_noise_sigma: 0.25,
            subject_noise_sigma: 0.75,
            subject_noise_overrides: Vec::new(),
            token_noise_frac: 0.01,
            window_trs: crate::data::DEFAULT_WINDOW_TRS,
            tr_seconds: crate::data::DEFAULT_TR_SECONDS,
            layout: TokenLayout {
                frames_per_window: 8,
                patches_per_frame: 1,
                audio_tokens_per_window: 8,
                d_v: 64,
                d_a: 64,
            },
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.n_subjects == 0 {
            return Err(validation("n_subjects must be >= 1"));
        }
        let total: usize = self.roi_layout.iter().map(|r| r.voxels).sum();
        if total != self.n_voxels {
            return Err(validation(format!(
                "roi_layout covers {total} voxels but n_voxels = {}",
                self.n_voxels
            )));
        }
        if self.target_rois.is_empty() {
            return Err(validation("target_rois is empty"));
        }
        for t in &self.target_rois {
            if !self.roi_layout.iter().any(|r| &r.name == t) {
                return Err(validation(format!("target ROI {t} not in roi_layout")));
            }
        }
        if self.latent_dim == 0 || self.independent_latent_dim == 0 {
            return Err(validation("latent dims must be >= 1"));
        }
        let m_target = self.target_voxel_count();
        if m_target < self.latent_dim {
            return Err(validation(format!(
                "target ROIs hold {m_target} voxels, fewer than latent_dim {}",
                self.latent_dim
            )));
        }
        if self.window_trs == 0 {
            return Err(validation("window_trs must be >= 1"));
        }
        if self.tune_trs <= self.window_trs || self.eval_trs <= self.window_trs {
            return Err(validation("runs must be longer than the window"));
        }
        let sigmas = [self.shared_noise_sigma, self.subject_noise_sigma, self.token_noise_frac];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(validation("noise parameters must be finite and >= 0"));
        }
        if self.subject_noise_overrides.len() > self.n_subjects {
            return Err(validation("more noise overrides than subjects"));
        }
        if self
            .subject_noise_overrides
            .iter()
            .flatten()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(validation("noise overrides must be finite and >= 0"));
        }
        if !(self.tr_seconds > 0.0) {
            return Err(validation("tr_seconds must be > 0"));
        }
        Ok(())
    }

    pub fn target_voxel_count(&self) -> usize {
        self.roi_layout
            .iter()
            .filter(|r| self.target_rois.contains(&r.name))
            .map(|r| r.voxels)
            .sum()
    }

    pub fn subject_noise(&self, subject: usize) -> f64 {
        self.subject_noise_overrides
            .get(subject)
            .copied()
            .flatten()
            .unwrap_or(self.subject_noise_sigma)
    }

    pub fn subject_id(subject: usize) -> String {
        format!("sub-{:02}", subject + 1)
    }

    pub fn non_target_rois(&self) -> Vec<String> {
        self.roi_layout
            .iter()
            .filter(|r| !self.target_rois.contains(&r.name))
            .map(|r| r.name.clone())
            .collect()
    }
}

/// Latents of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLatents {
    pub run_id: String,
    /// `(window_trs + T) x k`; row `window_trs + t` is TR `t`, earlier rows are pre-roll.
    pub target: MatrixF64,
    pub independent: MatrixF64,
    /// `T x k` mean of `target` over each TR's preceding window.
    pub target_window_mean: MatrixF64,
    pub independent_window_mean: MatrixF64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldTruth {
    pub runs: Vec<RunLatents>,
    /// `k x m_target`, full row rank.
    pub readout_target: MatrixF64,
    /// `k_o x m_other`.
    pub readout_independent: MatrixF64,
    /// One `(k + k_o) x d_v` map per patch position.
    pub embed_video: Vec<MatrixF64>,
    /// `(k + k_o) x d_a`.
    pub embed_audio: MatrixF64,
    pub video_noise_sigma: f64,
    pub audio_noise_sigma: f64,
}

impl WorldTruth {
    pub fn run(&self, run_id: &str) -> Option<&RunLatents> {
        self.runs.iter().find(|r| r.run_id == run_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub atlas: RoiAtlas,
    /// One stream per run, `[tune, eval]`.
    pub stimuli: Vec<StimulusStream>,
    /// `bold[subject][run]`, runs in the same order as `stimuli`.
    pub bold: Vec<Vec<BoldRun>>,
    pub truth: WorldTruth,
}

impl SyntheticWorld {
    pub fn stimulus(&self, run_id: &str) -> Option<&StimulusStream> {
        self.stimuli.iter().find(|s| s.run_id == run_id)
    }

    pub fn subject_runs(&self, run_id: &str) -> Vec<BoldRun> {
        self.bold
            .iter()
            .map(|runs| runs.iter().find(|r| r.run_id == run_id).unwrap().clone())
            .collect()
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> MatrixF64 {
    MatrixF64::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn window_means(latent: &MatrixF64, window_trs: usize) -> MatrixF64 {
    let n = latent.rows() - window_trs;
    let k = latent.cols();
    let mut out = MatrixF64::zeros(n, k);
    for t in 0..n {
        let row = out.row_mut(t);
        // TR t sits at latent row window_trs + t; its window is rows t..t+window_trs
        for w in t..t + window_trs {
            for (o, v) in row.iter_mut().zip(latent.row(w)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= window_trs as f64);
    }
    out
}

fn matrix_rank(m: &MatrixF64) -> usize {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    dm.rank(1e-10)
}

/// Readout with columns scaled so `column . window_mean` has unit variance.
fn readout(rng: &mut impl Rng, k: usize, m: usize, window_trs: usize, require_full_rank: bool) -> MatrixF64 {
    loop {
        let mut a = normal_matrix(rng, k, m, 1.0);
        for c in 0..m {
            let norm = (0..k).map(|r| a.get(r, c).powi(2)).sum::<f64>().sqrt();
            let s = (window_trs as f64).sqrt() / norm;
            for r in 0..k {
                a.set(r, c, a.get(r, c) * s);
            }
        }
        if !require_full_rank || matrix_rank(&a) == k {
            return a;
        }
    }
}

fn feature_std(map: &MatrixF64) -> f64 {
    // latents have unit variance, so feature j has variance sum_i map[i][j]^2
    let total: f64 = map.as_slice().iter().map(|v| v * v).sum();
    (total / map.cols() as f64).sqrt()
}

fn joint_latent_row(z: &[f64], u: &[f64]) -> Vec<f64> {
    z.iter().chain(u).copied().collect()
}

/// Renders per-TR tokens for latent rows `offset..offset + n_trs`.
fn render_tokens(
    truth: &WorldTruth,
    layout: &TokenLayout,
    target: &MatrixF64,
    independent: &MatrixF64,
    offset: usize,
    n_trs: usize,
    rng: &mut impl Rng,
) -> (MatrixF64, MatrixF64) {
    let mut video = MatrixF64::zeros(n_trs, layout.video_cols());
    let mut audio = MatrixF64::zeros(n_trs, layout.audio_cols());
    let d_v = layout.d_v;
    let d_a = layout.d_a;
    for t in 0..n_trs {
        let lat = MatrixF64::row_vector(&joint_latent_row(target.row(offset + t), independent.row(offset + t)));
        let patches: Vec<MatrixF64> = truth.embed_video.iter().map(|m| lat.matmul(m)).collect();
        let sound = lat.matmul(&truth.embed_audio);
        let vrow = video.row_mut(t);
        for f in 0..layout.frames_per_window {
            for (p, clean) in patches.iter().enumerate() {
                let off = (f * layout.patches_per_frame + p) * d_v;
                for (j, v) in vrow[off..off + d_v].iter_mut().enumerate() {
                    *v = clean.as_slice()[j] + truth.video_noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let arow = audio.row_mut(t);
        for a in 0..layout.audio_tokens_per_window {
            for (j, v) in arow[a * d_a..(a + 1) * d_a].iter_mut().enumerate() {
                *v = sound.as_slice()[j] + truth.audio_noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    (video, audio)
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ subject as u64);
    rng.set_stream(1);
    rng
}

pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = cfg.layout;
    let k = cfg.latent_dim;
    let ko = cfg.independent_latent_dim;
    let tw = cfg.window_trs;

    let layout_pairs: Vec<(String, usize)> = cfg.roi_layout.iter().map(|r| (r.name.clone(), r.voxels)).collect();
    let atlas = RoiAtlas::from_layout(&layout_pairs)?;
    let is_target = atlas.membership(&cfg.target_rois)?;
    let target_idx: Vec<usize> = (0..cfg.n_voxels).filter(|&v| is_target[v]).collect();
    let other_idx: Vec<usize> = (0..cfg.n_voxels).filter(|&v| !is_target[v]).collect();

    let embed_std = 1.0 / ((k + ko) as f64).sqrt();
    let embed_video: Vec<MatrixF64> = (0..layout.patches_per_frame)
        .map(|_| normal_matrix(&mut rng, k + ko, layout.d_v, embed_std))
        .collect();
    let embed_audio = normal_matrix(&mut rng, k + ko, layout.d_a, embed_std);
    let readout_target = readout(&mut rng, k, target_idx.len(), tw, true);
    let readout_independent = readout(&mut rng, ko, other_idx.len(), tw, false);
    let video_std = embed_video.iter().map(feature_std).sum::<f64>() / embed_video.len() as f64;
    let mut truth = WorldTruth {
        runs: Vec::new(),
        readout_target,
        readout_independent,
        video_noise_sigma: cfg.token_noise_frac * video_std,
        audio_noise_sigma: cfg.token_noise_frac * feature_std(&embed_audio),
        embed_video,
        embed_audio,
    };

    let mut stimuli = Vec::new();
    let mut signals = Vec::new();
    let mut shared_noise = Vec::new();
    for (run_id, n_trs) in [(TUNE_RUN, cfg.tune_trs), (EVAL_RUN, cfg.eval_trs)] {
        let target = normal_matrix(&mut rng, tw + n_trs, k, 1.0);
        let independent = normal_matrix(&mut rng, tw + n_trs, ko, 1.0);
        let (video, audio) = render_tokens(&truth, &layout, &target, &independent, tw, n_trs, &mut rng);
        stimuli.push(StimulusStream::new(run_id, video, audio, layout)?);
        let target_window_mean = window_means(&target, tw);
        let independent_window_mean = window_means(&independent, tw);

        let sig_t = target_window_mean.matmul(&truth.readout_target);
        let sig_o = independent_window_mean.matmul(&truth.readout_independent);
        let mut signal = MatrixF64::zeros(n_trs, cfg.n_voxels);
        for t in 0..n_trs {
            for (j, &v) in target_idx.iter().enumerate() {
                signal.set(t, v, sig_t.get(t, j));
            }
            for (j, &v) in other_idx.iter().enumerate() {
                signal.set(t, v, sig_o.get(t, j));
            }
        }
        signals.push(signal);
        shared_noise.push(normal_matrix(&mut rng, n_trs, cfg.n_voxels, cfg.shared_noise_sigma));
        truth.runs.push(RunLatents {
            run_id: run_id.to_string(),
            target,
            independent,
            target_window_mean,
            independent_window_mean,
        });
    }

    let bold = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|s| {
            let mut srng = subject_rng(cfg.seed, s);
            let sigma = cfg.subject_noise(s);
            stimuli
                .iter()
                .enumerate()
                .map(|(r, stim)| {
                    let mut resp = signals[r].clone();
                    resp.add_assign(&shared_noise[r]);
                    let noise = normal_matrix(&mut srng, resp.rows(), resp.cols(), sigma);
                    resp.add_assign(&noise);
                    BoldRun::new(WorldConfig::subject_id(s), stim.run_id.clone(), resp, cfg.tr_seconds)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticWorld {
        config: cfg.clone(),
        atlas,
        stimuli,
        bold,
        truth,
    })
}

/// Fresh stimulus clips drawn from the world's generative model.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub windows: Vec<Window>,
    /// `n x k` target latent averaged over each clip's window.
    pub target_mean: MatrixF64,
    /// `n x k_o`.
    pub independent_mean: MatrixF64,
}

/// Draws `n` independent one-window clips rendered with the world's token maps.
pub fn sample_clips(world: &SyntheticWorld, n: usize, seed: u64) -> Result<ClipSample> {
    let cfg = &world.config;
    let tw = cfg.window_trs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut windows = Vec::with_capacity(n);
    let mut zt = MatrixF64::zeros(n, cfg.latent_dim);
    let mut ut = MatrixF64::zeros(n, cfg.independent_latent_dim);
    for i in 0..n {
        let target = normal_matrix(&mut rng, tw, cfg.latent_dim, 1.0);
        let independent = normal_matrix(&mut rng, tw, cfg.independent_latent_dim, 1.0);
        let (video, audio) = render_tokens(&world.truth, &cfg.layout, &target, &independent, 0, tw, &mut rng);
        // one extra TR so the window [0, tw) precedes target TR tw
        let pad = |m: &MatrixF64| MatrixF64::vstack(&[m, &MatrixF64::zeros(1, m.cols())]);
        let stream = StimulusStream::new(format!("clip-{i:05}"), pad(&video)?, pad(&audio)?, cfg.layout)?;
        windows.push(window_at(&stream, tw, tw));
        zt.row_mut(i).copy_from_slice(&target.col_means());
        ut.row_mut(i).copy_from_slice(&independent.col_means());
    }
    Ok(ClipSample {
        windows,
        target_mean: zt,
        independent_mean: ut,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodeval::pearson;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            n_subjects: 3,
            tune_trs: 120,
            eval_trs: 60,
            n_voxels: 40,
            roi_layout: vec![
                RoiSpec {
                    name: "aSTS".into(),
                    voxels: 10,
                },
                RoiSpec {
                    name: "pSTS".into(),
                    voxels: 10,
                },
                RoiSpec {
                    name: "other".into(),
                    voxels: 20,
                },
            ],
            latent_dim: 4,
            independent_latent_dim: 6,
            layout: TokenLayout {
                frames_per_window: 8,
                patches_per_frame: 2,
                audio_tokens_per_window: 8,
                d_v: 5,
                d_a: 3,
            },
            seed: 11,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut cfg = small_cfg();
        cfg.seed = 12;
        assert_ne!(generate_world(&cfg).unwrap().bold, a.bold);
    }

    #[test]
    fn default_layout_counts() {
        let w = generate_world(&WorldConfig {
            tune_trs: 20,
            eval_trs: 20,
            ..WorldConfig::default()
        })
        .unwrap();
        let counts = w.atlas.counts();
        assert_eq!(counts["aSTS"], 40);
        assert_eq!(counts["pSTS"], 60);
        assert_eq!(counts["LOC"], 50);
        assert_eq!(counts["EBA"], 50);
        assert_eq!(counts["other"], 300);
        assert_eq!(w.atlas.n_voxels(), 500);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small_cfg();
        c.n_voxels = 41;
        assert!(generate_world(&c).is_err());
        let mut c = small_cfg();
        c.target_rois = vec!["V1".into()];
        assert!(generate_world(&c).is_err());
        let mut c = small_cfg();
        c.subject_noise_sigma = -1.0;
        assert!(generate_world(&c).is_err());
    }

    #[test]
    fn shapes_and_readout_rank() {
        let w = generate_world(&small_cfg()).unwrap();
        assert_eq!(w.bold.len(), 3);
        assert_eq!(w.bold[0][0].responses.shape(), (120, 40));
        assert_eq!(w.bold[0][1].responses.shape(), (60, 40));
        assert_eq!(w.stimuli[0].video_tokens.shape(), (120, 8 * 2 * 5));
        assert_eq!(w.truth.readout_target.shape(), (4, 20));
        assert_eq!(matrix_rank(&w.truth.readout_target), 4);
    }

    #[test]
    fn noiseless_target_voxels_are_linear_in_window_mean_latent() {
        let mut cfg = small_cfg();
        cfg.shared_noise_sigma = 0.0;
        cfg.subject_noise_sigma = 0.0;
        let w = generate_world(&cfg).unwrap();
        let lat = &w.truth.runs[0].target_window_mean;
        let x = DMatrix::from_row_slice(lat.rows(), lat.cols(), lat.as_slice());
        let y = &w.bold[1][0].responses;
        for v in 0..20 {
            let col = nalgebra::DVector::from_vec(y.column(v));
            let coef = x.clone().svd(true, true).solve(&col, 1e-12).unwrap();
            let resid = &col - &x * coef;
            let tss: f64 = col.iter().map(|c| (c - col.mean()).powi(2)).sum();
            let r2 = 1.0 - resid.norm_squared() / tss;
            assert!((r2 - 1.0).abs() < 1e-10, "voxel {v}: R2 = {r2}");
        }
    }

    #[test]
    fn cross_subject_correlation_matches_noise_model() {
        let mut cfg = small_cfg();
        cfg.tune_trs = 4000;
        cfg.shared_noise_sigma = 0.0;
        cfg.subject_noise_sigma = 0.75; // 1 / (1 + 0.5625) = 0.64
        cfg.n_subjects = 2;
        let w = generate_world(&cfg).unwrap();
        let a = &w.bold[0][0].responses;
        let b = &w.bold[1][0].responses;
        let mean_r: f64 = (0..20)
            .map(|v| pearson(&a.column(v), &b.column(v)).unwrap().r)
            .sum::<f64>()
            / 20.0;
        assert!((mean_r - 0.64).abs() < 0.05, "mean r {mean_r}");
    }

    #[test]
    fn noise_override_applies_to_one_subject() {
        let mut cfg = small_cfg();
        cfg.subject_noise_overrides = vec![None, Some(0.0)];
        cfg.shared_noise_sigma = 0.0;
        let w = generate_world(&cfg).unwrap();
        // subject 1 is noiseless: target voxels exactly equal the readout signal
        let sig = w.truth.runs[0].target_window_mean.matmul(&w.truth.readout_target);
        assert!((w.bold[1][0].responses.get(7, 3) - sig.get(7, 3)).abs() < 1e-12);
        assert!((w.bold[0][0].responses.get(7, 3) - sig.get(7, 3)).abs() > 1e-6);
    }

    #[test]
    fn clips_are_deterministic_and_shaped() {
        let w = generate_world(&small_cfg()).unwrap();
        let a = sample_clips(&w, 5, 3).unwrap();
        let b = sample_clips(&w, 5, 3).unwrap();
        assert_eq!(a.windows, b.windows);
        assert_eq!(a.windows[0].video.shape(), (16, 5));
        assert_eq!(a.windows[0].audio.shape(), (8, 3));
        assert_eq!(a.target_mean.shape(), (5, 4));
    }
}
