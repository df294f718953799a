//! fMRI and stimulus data model, and TR-window pairing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::matrix::MatrixF64;

pub const DEFAULT_TR_SECONDS: f64 = 1.49;
pub const DEFAULT_WINDOW_TRS: usize = 8;

/// Voxel responses of one subject for one run, `T_trs x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldRun {
    pub subject_id: String,
    pub run_id: String,
    pub responses: MatrixF64,
    pub tr_seconds: f64,
}

impl BoldRun {
    pub fn new(
        subject_id: impl Into<String>,
        run_id: impl Into<String>,
        responses: MatrixF64,
        tr_seconds: f64,
    ) -> Result<Self> {
        if !(tr_seconds > 0.0) || !tr_seconds.is_finite() {
            return Err(validation(format!("tr_seconds must be > 0, got {tr_seconds}")));
        }
        responses.require_finite("BOLD responses")?;
        Ok(BoldRun {
            subject_id: subject_id.into(),
            run_id: run_id.into(),
            responses,
            tr_seconds,
        })
    }

    pub fn n_trs(&self) -> usize {
        self.responses.rows()
    }

    pub fn n_voxels(&self) -> usize {
        self.responses.cols()
    }
}

/// Token geometry of a stimulus stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    /// Video frames sampled per window (also stored per TR).
    pub frames_per_window: usize,
    pub patches_per_frame: usize,
    /// Audio tokens sampled per window (also stored per TR).
    pub audio_tokens_per_window: usize,
    pub d_v: usize,
    pub d_a: usize,
}

impl TokenLayout {
    pub fn validate(&self) -> Result<()> {
        let TokenLayout {
            frames_per_window,
            patches_per_frame,
            audio_tokens_per_window,
            d_v,
            d_a,
        } = *self;
        if [frames_per_window, patches_per_frame, audio_tokens_per_window, d_v, d_a].contains(&0) {
            return Err(validation(format!("token layout dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn video_cols(&self) -> usize {
        self.frames_per_window * self.patches_per_frame * self.d_v
    }

    pub fn audio_cols(&self) -> usize {
        self.audio_tokens_per_window * self.d_a
    }

    pub fn video_tokens(&self) -> usize {
        self.frames_per_window * self.patches_per_frame
    }

    pub fn n_tokens(&self) -> usize {
        self.video_tokens() + self.audio_tokens_per_window
    }
}

/// Per-TR synchronized audio and video token features.
///
/// Row `t` of `video_tokens` holds `F` frames of `P` patches of `d_v` features
/// recorded during TR `t`; row `t` of `audio_tokens` holds `A` tokens of `d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusStream {
    pub run_id: String,
    pub video_tokens: MatrixF64,
    pub audio_tokens: MatrixF64,
    pub layout: TokenLayout,
}

impl StimulusStream {
    pub fn new(
        run_id: impl Into<String>,
        video_tokens: MatrixF64,
        audio_tokens: MatrixF64,
        layout: TokenLayout,
    ) -> Result<Self> {
        layout.validate()?;
        if video_tokens.rows() != audio_tokens.rows() {
            return Err(validation(format!(
                "video has {} TRs but audio has {}",
                video_tokens.rows(),
                audio_tokens.rows()
            )));
        }
        if video_tokens.cols() != layout.video_cols() || audio_tokens.cols() != layout.audio_cols() {
            return Err(validation("stimulus column counts do not match token layout"));
        }
        video_tokens.require_finite("video tokens")?;
        audio_tokens.require_finite("audio tokens")?;
        Ok(StimulusStream {
            run_id: run_id.into(),
            video_tokens,
            audio_tokens,
            layout,
        })
    }

    pub fn n_trs(&self) -> usize {
        self.video_tokens.rows()
    }
}

/// Voxel to ROI labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiAtlas {
    pub roi_names: Vec<String>,
    /// Index into `roi_names` for every voxel.
    pub labels: Vec<usize>,
}

impl RoiAtlas {
    pub fn new(roi_names: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        let atlas = RoiAtlas { roi_names, labels };
        atlas.validate()?;
        Ok(atlas)
    }

    /// Contiguous layout, one block of voxels per ROI in the given order.
    pub fn from_layout(layout: &[(String, usize)]) -> Result<Self> {
        let mut labels = Vec::new();
        for (i, (_, n)) in layout.iter().enumerate() {
            labels.extend(std::iter::repeat_n(i, *n));
        }
        RoiAtlas::new(layout.iter().map(|(n, _)| n.clone()).collect(), labels)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for n in &self.roi_names {
            if !seen.insert(n) {
                return Err(validation(format!("duplicate ROI name {n}")));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.roi_names.len()) {
            return Err(validation(format!("voxel label {bad} has no ROI name")));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.labels.len()
    }

    pub fn roi_index(&self, name: &str) -> Option<usize> {
        self.roi_names.iter().position(|n| n == name)
    }

    pub fn roi_of(&self, voxel: usize) -> &str {
        &self.roi_names[self.labels[voxel]]
    }

    /// Membership flags for a set of ROI names; unknown names are an error.
    pub fn membership(&self, rois: &[String]) -> Result<Vec<bool>> {
        let mut wanted = vec![false; self.roi_names.len()];
        for r in rois {
            let i = self
                .roi_index(r)
                .ok_or_else(|| validation(format!("unknown ROI {r}")))?;
            wanted[i] = true;
        }
        Ok(self.labels.iter().map(|&l| wanted[l]).collect())
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut c: BTreeMap<String, usize> = self.roi_names.iter().map(|n| (n.clone(), 0)).collect();
        for &l in &self.labels {
            *c.get_mut(&self.roi_names[l]).unwrap() += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    pub selected: Vec<bool>,
}

impl VoxelMask {
    pub fn new(selected: Vec<bool>) -> Self {
        VoxelMask { selected }
    }

    pub fn all(n: usize) -> Self {
        VoxelMask {
            selected: vec![true; n],
        }
    }

    pub fn m(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Model input for one target TR: the tokens sampled from the preceding window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub run_id: String,
    pub target_tr: usize,
    /// First TR of the window; the window is `[window_start, target_tr)`.
    pub window_start: usize,
    /// `F*P x d_v`.
    pub video: MatrixF64,
    /// `A x d_a`.
    pub audio: MatrixF64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub window: Window,
    /// Mask-selected voxel responses at the target TR.
    pub y: Vec<f64>,
}

/// Evenly spaced indices into a grid of `grid` slots, `count` of them: the
/// center of each of `count` equal segments.
pub fn even_sample_indices(grid: usize, count: usize) -> Vec<usize> {
    (0..count)
        .map(|i| {
            let pos = ((2 * i + 1) * grid) / (2 * count);
            pos.min(grid - 1)
        })
        .collect()
}

/// Seconds covered by a window of `window_trs` TRs.
pub fn window_seconds(window_trs: usize, tr_seconds: f64) -> f64 {
    window_trs as f64 * tr_seconds
}

/// Extracts the input window preceding target TR `t`.
pub fn window_at(stim: &StimulusStream, t: usize, window_trs: usize) -> Window {
    let lay = stim.layout;
    let start = t - window_trs;
    let frame_grid = window_trs * lay.frames_per_window;
    let frames = even_sample_indices(frame_grid, lay.frames_per_window);
    let mut video = MatrixF64::zeros(lay.video_tokens(), lay.d_v);
    for (fi, &g) in frames.iter().enumerate() {
        let tr = start + g / lay.frames_per_window;
        let frame = g % lay.frames_per_window;
        let row = stim.video_tokens.row(tr);
        for p in 0..lay.patches_per_frame {
            let off = (frame * lay.patches_per_frame + p) * lay.d_v;
            video
                .row_mut(fi * lay.patches_per_frame + p)
                .copy_from_slice(&row[off..off + lay.d_v]);
        }
    }
    let audio_grid = window_trs * lay.audio_tokens_per_window;
    let slots = even_sample_indices(audio_grid, lay.audio_tokens_per_window);
    let mut audio = MatrixF64::zeros(lay.audio_tokens_per_window, lay.d_a);
    for (ai, &g) in slots.iter().enumerate() {
        let tr = start + g / lay.audio_tokens_per_window;
        let tok = g % lay.audio_tokens_per_window;
        let row = stim.audio_tokens.row(tr);
        audio
            .row_mut(ai)
            .copy_from_slice(&row[tok * lay.d_a..(tok + 1) * lay.d_a]);
    }
    Window {
        run_id: stim.run_id.clone(),
        target_tr: t,
        window_start: start,
        video,
        audio,
    }
}

/// One window per target TR in `[window_trs, T_trs)`.
pub fn make_windows(stim: &StimulusStream, window_trs: usize) -> Result<Vec<Window>> {
    if window_trs == 0 {
        return Err(validation("window_trs must be >= 1"));
    }
    if stim.n_trs() <= window_trs {
        return Err(Error::EmptyDataset(format!(
            "run {} has {} TRs, need more than the {window_trs}-TR window",
            stim.run_id,
            stim.n_trs()
        )));
    }
    Ok((window_trs..stim.n_trs())
        .map(|t| window_at(stim, t, window_trs))
        .collect())
}

pub fn make_pairs(
    bold: &BoldRun,
    stim: &StimulusStream,
    mask: &VoxelMask,
    window_trs: usize,
) -> Result<Vec<PairedSample>> {
    if bold.n_trs() != stim.n_trs() {
        return Err(validation(format!(
            "BOLD run has {} TRs but stimulus has {}",
            bold.n_trs(),
            stim.n_trs()
        )));
    }
    if mask.selected.len() != bold.n_voxels() {
        return Err(validation(format!(
            "mask covers {} voxels, run has {}",
            mask.selected.len(),
            bold.n_voxels()
        )));
    }
    if mask.m() == 0 {
        return Err(validation("voxel mask selects no voxels"));
    }
    let idx = mask.indices();
    let windows = make_windows(stim, window_trs)?;
    Ok(windows
        .into_iter()
        .map(|w| {
            let row = bold.responses.row(w.target_tr);
            let y = idx.iter().map(|&v| row[v]).collect();
            PairedSample { window: w, y }
        })
        .collect())
}

/// Pairs several runs, concatenated in `run_id` order; windows never cross runs.
pub fn make_pairs_multi(
    runs: &[(&BoldRun, &StimulusStream)],
    mask: &VoxelMask,
    window_trs: usize,
) -> Result<Vec<PairedSample>> {
    let mut ordered: Vec<_> = runs.to_vec();
    ordered.sort_by(|a, b| a.0.run_id.cmp(&b.0.run_id));
    let mut out = Vec::new();
    for (bold, stim) in ordered {
        if bold.run_id != stim.run_id {
            return Err(validation(format!(
                "run id mismatch: BOLD {} vs stimulus {}",
                bold.run_id, stim.run_id
            )));
        }
        out.extend(make_pairs(bold, stim, mask, window_trs)?);
    }
    Ok(out)
}
