//! Brain-tuning: fit the transformer plus a linear head to one subject's
//! masked voxel responses, and the masked-reconstruction stimulus-tuning
//! baseline. Also checkpoint I/O.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairedSample, RoiAtlas, VoxelMask, Window};
use crate::error::{validation, Error, Result};
use crate::matrix::{compensated_sum, dot, read_matrix, write_matrix, MatrixF64};
use crate::minimmt::{backward, backward_pooled, forward_cached, mean_pool, ModelConfig, ModelState, TokenMask};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{accumulate, Joint, ParamSet};

/// `y_hat = W o + bias`, `W` is `m x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w: MatrixF64,
    /// `1 x m`; stays zero when `use_bias` is false.
    pub bias: MatrixF64,
    pub use_bias: bool,
}

impl ProjectionHead {
    pub fn zeros(m: usize, d_model: usize, use_bias: bool) -> Self {
        ProjectionHead {
            w: MatrixF64::zeros(m, d_model),
            bias: MatrixF64::zeros(1, m),
            use_bias,
        }
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn predict(&self, pooled: &[f64]) -> Vec<f64> {
        (0..self.m())
            .map(|i| dot(self.w.row(i), pooled) + self.bias.as_slice()[i])
            .collect()
    }
}

impl ParamSet for ProjectionHead {
    fn tensors(&self) -> Vec<(String, &MatrixF64)> {
        vec![("w".into(), &self.w), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)> {
        vec![("w".into(), &mut self.w), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Brain,
    Stimulus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub window_trs: usize,
    pub ceiling_threshold: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Fraction of tokens masked by the stimulus objective.
    pub mask_fraction: f64,
    pub use_bias: bool,
    /// Train only the head (brain objective).
    pub freeze_backbone: bool,
    pub adam: AdamConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            epochs: 10,
            lr: 1e-3,
            batch_size: 8,
            window_trs: crate::data::DEFAULT_WINDOW_TRS,
            ceiling_threshold: 0.25,
            seed: 0,
            objective: Objective::Brain,
            mask_fraction: 0.15,
            use_bias: true,
            freeze_backbone: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ceiling_threshold) {
            return Err(Error::Config("ceiling_threshold must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Target-ROI voxels whose ceiling is strictly above `threshold`.
pub fn filter_voxels(
    subject: &str,
    ceilings: &[f64],
    atlas: &RoiAtlas,
    target_rois: &[String],
    threshold: f64,
) -> Result<VoxelMask> {
    if ceilings.len() != atlas.n_voxels() {
        return Err(validation(format!(
            "{} ceilings for {} atlas voxels",
            ceilings.len(),
            atlas.n_voxels()
        )));
    }
    let member = atlas.membership(target_rois)?;
    let selected: Vec<bool> = ceilings
        .iter()
        .zip(&member)
        .map(|(&c, &m)| m && c > threshold)
        .collect();
    if !selected.iter().any(|&s| s) {
        return Err(Error::UntunableSubject {
            subject: subject.to_string(),
            rois: target_rois.join(","),
            threshold,
        });
    }
    Ok(VoxelMask::new(selected))
}

/// Gradients of the brain-tune loss for one sample.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub model: ModelState,
    pub head: ProjectionHead,
}

/// `||W o + b - y||^2` with `o` the mean-pooled output, and its gradients
/// with respect to the head and every transformer parameter.
pub fn brain_tune_loss(state: &ModelState, head: &ProjectionHead, sample: &PairedSample) -> Result<(f64, LossGrads)> {
    if head.m() != sample.y.len() {
        return Err(validation(format!(
            "head predicts {} voxels, sample has {}",
            head.m(),
            sample.y.len()
        )));
    }
    if head.w.cols() != state.config.d_model {
        return Err(validation("head width != d_model"));
    }
    let (out, cache) = forward_cached(state, &sample.window.video, &sample.window.audio, None)?;
    let pooled = mean_pool(&out)?;
    let (loss, hg) = head_loss(head, &pooled, &sample.y);
    // d loss / d o = 2 W^T r
    let two_r: Vec<f64> = head
        .predict(&pooled)
        .iter()
        .zip(&sample.y)
        .map(|(p, y)| 2.0 * (p - y))
        .collect();
    let d_pooled: Vec<f64> = (0..pooled.len())
        .map(|j| (0..head.m()).map(|i| two_r[i] * head.w.get(i, j)).sum())
        .collect();
    let bp = backward_pooled(state, &cache, &d_pooled)?;
    Ok((
        loss,
        LossGrads {
            model: bp.grads,
            head: hg,
        },
    ))
}

/// Result of a tuning run.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub state: ModelState,
    pub head: ProjectionHead,
    /// Mean per-sample training loss in each epoch.
    pub loss_trace: Vec<f64>,
}

/// Per-epoch shuffled batches, reproducible from `(seed, epoch)`.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn numerical(epoch: usize, batch: usize, what: &str) -> Error {
    Error::Numerical(format!("{what} at epoch {epoch}, batch {batch}"))
}

/// Mini-batch Adam on the brain-tune loss. Per-sample gradients are computed
/// in parallel and reduced serially in batch order.
pub fn train(dataset: &[PairedSample], cfg: &TuneConfig, init: &ModelState) -> Result<TuneOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("brain-tuning dataset is empty".into()));
    }
    let m = dataset[0].y.len();
    if dataset.iter().any(|s| s.y.len() != m) {
        return Err(validation("samples have differing voxel counts"));
    }
    let mut state = init.clone();
    let mut head = ProjectionHead::zeros(m, init.config.d_model, cfg.use_bias);
    let mut adam = if cfg.freeze_backbone {
        AdamState::new(&head, cfg.adam)
    } else {
        AdamState::new(&Joint(&mut state.clone(), &mut head.clone()), cfg.adam)
    };
    // with a frozen backbone the pooled features never change
    let frozen: Option<Vec<Vec<f64>>> = if cfg.freeze_backbone {
        Some(
            dataset
                .par_iter()
                .map(|s| {
                    let (out, _) = forward_cached(&state, &s.window.video, &s.window.audio, None)?;
                    mean_pool(&out)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut losses = vec![0.0; dataset.len()];
        for (bi, batch) in epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let scale = 1.0 / batch.len() as f64;
            if let Some(pooled) = &frozen {
                let mut hg = ProjectionHead::zeros(m, head.w.cols(), cfg.use_bias);
                for &i in batch {
                    let (loss, g) = head_loss(&head, &pooled[i], &dataset[i].y);
                    losses[i] = loss;
                    accumulate(&mut hg, &g, scale);
                }
                if !losses.iter().all(|l| l.is_finite()) {
                    return Err(numerical(epoch, bi, "non-finite loss"));
                }
                adam_step(&mut head, &hg, &mut adam, cfg.lr)
                    .map_err(|_| numerical(epoch, bi, "non-finite gradient"))?;
                continue;
            }
            let per_sample: Vec<(f64, LossGrads)> = batch
                .par_iter()
                .map(|&i| brain_tune_loss(&state, &head, &dataset[i]))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::Numerical(_) => numerical(epoch, bi, "non-finite activations"),
                    other => other,
                })?;
            let mut mg = state.zeros_like();
            let mut hg = ProjectionHead::zeros(m, head.w.cols(), cfg.use_bias);
            for (&i, (loss, g)) in batch.iter().zip(&per_sample) {
                if !loss.is_finite() {
                    return Err(numerical(epoch, bi, "non-finite loss"));
                }
                losses[i] = *loss;
                accumulate(&mut mg, &g.model, scale);
                accumulate(&mut hg, &g.head, scale);
            }
            adam_step(
                &mut Joint(&mut state, &mut head),
                &Joint(&mut mg, &mut hg),
                &mut adam,
                cfg.lr,
            )
            .map_err(|_| numerical(epoch, bi, "non-finite gradient"))?;
        }
        let mean = compensated_sum(losses.iter().copied()) / dataset.len() as f64;
        log::debug!("brain-tune epoch {epoch}: mean loss {mean:.6}");
        trace.push(mean);
    }
    Ok(TuneOutcome {
        state,
        head,
        loss_trace: trace,
    })
}

/// Loss and head gradients for fixed pooled features.
fn head_loss(head: &ProjectionHead, pooled: &[f64], y: &[f64]) -> (f64, ProjectionHead) {
    let resid: Vec<f64> = head.predict(pooled).iter().zip(y).map(|(p, t)| p - t).collect();
    let mut g = ProjectionHead::zeros(head.m(), head.w.cols(), head.use_bias);
    for (i, &r) in resid.iter().enumerate() {
        for (dw, &o) in g.w.row_mut(i).iter_mut().zip(pooled) {
            *dw = 2.0 * r * o;
        }
        if head.use_bias {
            g.bias.as_mut_slice()[i] = 2.0 * r;
        }
    }
    (dot(&resid, &resid), g)
}

/// Decoders and mask embedding for masked-token reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconHead {
    pub mask_embedding: MatrixF64,
    pub dec_video: MatrixF64,
    pub b_video: MatrixF64,
    pub dec_audio: MatrixF64,
    pub b_audio: MatrixF64,
}

impl ReconHead {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ReconHead {
            mask_embedding: MatrixF64::zeros(1, cfg.d_model),
            dec_video: MatrixF64::zeros(cfg.d_model, cfg.d_v),
            b_video: MatrixF64::zeros(1, cfg.d_v),
            dec_audio: MatrixF64::zeros(cfg.d_model, cfg.d_a),
            b_audio: MatrixF64::zeros(1, cfg.d_a),
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut h = ReconHead::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        for m in [&mut h.dec_video, &mut h.dec_audio] {
            for v in m.as_mut_slice() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for v in h.mask_embedding.as_mut_slice() {
            *v = crate::minimmt::EMBEDDING_INIT_STD * rng.sample::<f64, _>(StandardNormal);
        }
        h
    }
}

impl ParamSet for ReconHead {
    fn tensors(&self) -> Vec<(String, &MatrixF64)> {
        vec![
            ("mask_embedding".into(), &self.mask_embedding),
            ("dec_video".into(), &self.dec_video),
            ("b_video".into(), &self.b_video),
            ("dec_audio".into(), &self.dec_audio),
            ("b_audio".into(), &self.b_audio),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)> {
        vec![
            ("mask_embedding".into(), &mut self.mask_embedding),
            ("dec_video".into(), &mut self.dec_video),
            ("b_video".into(), &mut self.b_video),
            ("dec_audio".into(), &mut self.dec_audio),
            ("b_audio".into(), &mut self.b_audio),
        ]
    }
}

/// Chooses `max(1, round(p n))` of `n` token positions (at most `n - 1`
/// when `n > 1`).
pub fn sample_token_mask(n: usize, p: f64, rng: &mut impl Rng) -> Vec<bool> {
    let k = ((p * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Mean squared error over the masked tokens' features, with gradients.
pub fn reconstruction_loss(
    state: &ModelState,
    head: &ReconHead,
    window: &Window,
    positions: &[bool],
) -> Result<(f64, ModelState, ReconHead)> {
    let mask = TokenMask {
        positions,
        embedding: head.mask_embedding.as_slice(),
    };
    let (out, cache) = forward_cached(state, &window.video, &window.audio, Some(&mask))?;
    let nv = window.video.rows();
    let (dv, da) = (window.video.cols(), window.audio.cols());
    let masked: Vec<usize> = (0..positions.len()).filter(|&i| positions[i]).collect();
    let n_entries: usize = masked.iter().map(|&i| if i < nv { dv } else { da }).sum();
    if n_entries == 0 {
        return Err(validation("no masked token features to reconstruct"));
    }
    let norm = 1.0 / n_entries as f64;
    let mut g = ReconHead::zeros(&state.config);
    let mut d_tokens = MatrixF64::zeros(out.tokens.rows(), out.tokens.cols());
    let mut sse = 0.0;
    for &i in &masked {
        let o = out.tokens.row(i + 1);
        let (dec, bias, target, dec_g, bias_g) = if i < nv {
            (
                &head.dec_video,
                &head.b_video,
                window.video.row(i),
                &mut g.dec_video,
                &mut g.b_video,
            )
        } else {
            (
                &head.dec_audio,
                &head.b_audio,
                window.audio.row(i - nv),
                &mut g.dec_audio,
                &mut g.b_audio,
            )
        };
        for c in 0..target.len() {
            let pred: f64 = (0..o.len()).map(|j| o[j] * dec.get(j, c)).sum::<f64>() + bias.as_slice()[c];
            let r = pred - target[c];
            sse += r * r;
            let gr = 2.0 * r * norm;
            bias_g.as_mut_slice()[c] += gr;
            for j in 0..o.len() {
                dec_g.set(j, c, dec_g.get(j, c) + gr * o[j]);
                d_tokens.set(i + 1, j, d_tokens.get(i + 1, j) + gr * dec.get(j, c));
            }
        }
    }
    let bp = backward(state, &cache, &d_tokens)?;
    g.mask_embedding.as_mut_slice().copy_from_slice(&bp.d_mask_embedding);
    Ok((sse * norm, bp.grads, g))
}

/// Stimulus-tuning outcome: tuned encoder, decoder head, per-epoch loss.
#[derive(Debug, Clone)]
pub struct StimulusOutcome {
    pub state: ModelState,
    pub head: ReconHead,
    pub loss_trace: Vec<f64>,
}

/// Masked-token reconstruction on windows alone, optimized like [`train`].
/// Masks are drawn per epoch from `(seed, epoch)` in dataset order.
pub fn stimulus_tune(windows: &[Window], cfg: &TuneConfig, init: &ModelState) -> Result<StimulusOutcome> {
    cfg.validate()?;
    if !(cfg.mask_fraction > 0.0 && cfg.mask_fraction < 1.0) {
        return Err(validation(format!(
            "mask fraction {} outside (0, 1)",
            cfg.mask_fraction
        )));
    }
    if windows.is_empty() {
        return Err(Error::EmptyDataset("stimulus-tuning dataset is empty".into()));
    }
    let mut state = init.clone();
    let mut head = ReconHead::init(&init.config, cfg.seed);
    let mut adam = AdamState::new(&Joint(&mut state.clone(), &mut head.clone()), cfg.adam);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        rng.set_stream(3);
        let masks: Vec<Vec<bool>> = windows
            .iter()
            .map(|w| sample_token_mask(w.video.rows() + w.audio.rows(), cfg.mask_fraction, &mut rng))
            .collect();
        let mut losses = vec![0.0; windows.len()];
        for (bi, batch) in epoch_batches(windows.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let per_sample: Vec<(f64, ModelState, ReconHead)> = batch
                .par_iter()
                .map(|&i| reconstruction_loss(&state, &head, &windows[i], &masks[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut mg = state.zeros_like();
            let mut hg = ReconHead::zeros(&state.config);
            for (&i, (loss, gm, gh)) in batch.iter().zip(&per_sample) {
                if !loss.is_finite() {
                    return Err(numerical(epoch, bi, "non-finite reconstruction loss"));
                }
                losses[i] = *loss;
                accumulate(&mut mg, gm, scale);
                accumulate(&mut hg, gh, scale);
            }
            adam_step(
                &mut Joint(&mut state, &mut head),
                &Joint(&mut mg, &mut hg),
                &mut adam,
                cfg.lr,
            )
            .map_err(|_| numerical(epoch, bi, "non-finite gradient"))?;
        }
        let mean = compensated_sum(losses.iter().copied()) / windows.len() as f64;
        log::debug!("stimulus-tune epoch {epoch}: mean loss {mean:.6}");
        trace.push(mean);
    }
    Ok(StimulusOutcome {
        state,
        head,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    head_use_bias: Option<bool>,
}

fn tensor_file(dir: &Path, prefix: &str, name: &str) -> std::path::PathBuf {
    dir.join(format!("{prefix}{name}.mmbt"))
}

/// Writes `config.json` and one matrix file per tensor into `dir`.
pub fn save_checkpoint(dir: &Path, state: &ModelState, head: Option<&ProjectionHead>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        model: state.config,
        head_use_bias: head.map(|h| h.use_bias),
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    for (name, m) in state.tensors() {
        write_matrix(m, tensor_file(dir, "", &name))?;
    }
    if let Some(h) = head {
        for (name, m) in h.tensors() {
            write_matrix(m, tensor_file(dir, "head.", &name))?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, Option<ProjectionHead>)> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.model.validate()?;
    let mut state = ModelState::zeros(meta.model);
    for (name, m) in state.tensors_mut() {
        let loaded = read_matrix(tensor_file(dir, "", &name))?;
        if loaded.shape() != m.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?}, expected {:?}",
                loaded.shape(),
                m.shape()
            )));
        }
        *m = loaded;
    }
    let head = match meta.head_use_bias {
        None => None,
        Some(use_bias) => {
            let w = read_matrix(tensor_file(dir, "head.", "w"))?;
            let bias = read_matrix(tensor_file(dir, "head.", "bias"))?;
            if w.cols() != meta.model.d_model || bias.shape() != (1, w.rows()) {
                return Err(Error::Format("projection head shapes do not match the model".into()));
            }
            Some(ProjectionHead { w, bias, use_bias })
        }
    };
    Ok((state, head))
}

#[cfg(test)]
mod tests;
