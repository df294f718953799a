//! End-to-end orchestration: configuration, on-disk artifacts, the stage
//! sequence, `summary.json` and the plotting tables derived from it.
//!
//! Every stage reads what earlier stages wrote, so each is also reachable
//! on its own from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::braintune::{
    filter_voxels, load_checkpoint, save_checkpoint, stimulus_tune, train, Objective, TuneConfig, TuneOutcome,
};
use crate::data::{make_pairs, make_windows, BoldRun, RoiAtlas, StimulusStream, TokenLayout};
use crate::encodeval::{
    default_split, evaluate_features, extract_features, AlignmentReport, EncodeOptions, EncodeReport, FeatureTable,
};
use crate::error::{validation, Error, Result};
use crate::matrix::{read_matrix, write_matrix, MatrixF64};
use crate::minimmt::{init_model, ModelConfig, ModelState};
use crate::noiseceil::{estimate_ceilings, sweep_threshold, CeilingEstimate, SweepRow, DEFAULT_CEILING_LAMBDAS};
use crate::probes::{
    emotion_like_task, latent_probe_task, probe_features, run_probe, LatentSource, ProbeDataset, ProbeResult,
    SplitMetrics, EMOTION_TASK, INDEPENDENT_TASK, TARGET_TASK,
};
use crate::stats::{
    flag_significance, one_sample_ttest_onesided, sem, wilcoxon_signed_rank, Alternative, Significance,
};
use crate::synthworld::{generate_world, SyntheticWorld, WorldConfig, EVAL_RUN, TUNE_RUN};

pub const PRETRAINED: &str = "pretrained";
pub const STIMULUS: &str = "stimulus";
pub const BRAIN: &str = "brain";
pub const MODELS: [&str; 3] = [PRETRAINED, STIMULUS, BRAIN];
/// ROI-union keys reported next to the atlas ROIs.
pub const TARGET_SET: &str = "target";
pub const NON_TARGET_SET: &str = "non_target";
pub const STAGES: [&str; 8] = [
    "synth",
    "ceiling",
    "pretrained",
    "stimulus_tune",
    "brain_tune",
    "encode",
    "probes",
    "stats",
];
pub const FAILED_MARKER: &str = "FAILED";
/// Fraction of ceiling TRs used for fitting, from the reference 7700/2872 split.
pub const DEFAULT_CEILING_TRAIN_FRACTION: f64 = 7700.0 / (7700.0 + 2872.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1, 2);
        ModelSpec {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
        }
    }
}

impl ModelSpec {
    /// Input widths and token budget follow the stimulus layout (+1 for CLS).
    pub fn model_config(&self, layout: &TokenLayout) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            d_v: layout.d_v,
            d_a: layout.d_a,
            max_tokens: layout.n_tokens() + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CeilingParams {
    pub train_fraction: f64,
    pub lambdas: Vec<f64>,
    pub sweep_thresholds: Vec<f64>,
}

impl Default for CeilingParams {
    fn default() -> Self {
        CeilingParams {
            train_fraction: DEFAULT_CEILING_TRAIN_FRACTION,
            lambdas: DEFAULT_CEILING_LAMBDAS.to_vec(),
            sweep_thresholds: (0..=18).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

impl CeilingParams {
    pub fn split(&self, n_trs: usize) -> (usize, usize) {
        let train = (n_trs as f64 * self.train_fraction).round() as usize;
        (train, n_trs - train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeParams {
    pub n_clips: usize,
    pub folds: usize,
    pub l2: f64,
    pub tasks: Vec<String>,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            n_clips: 400,
            folds: crate::probes::DEFAULT_CV_FOLDS,
            l2: crate::probes::DEFAULT_PROBE_L2,
            tasks: vec![TARGET_TASK.into(), INDEPENDENT_TASK.into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsParams {
    /// Sidedness of the alignment comparisons; probe comparisons are always
    /// one-sided t-tests.
    pub wilcoxon_alternative: Alternative,
}

impl Default for StatsParams {
    fn default() -> Self {
        StatsParams {
            wilcoxon_alternative: Alternative::TwoSided,
        }
    }
}

/// Everything a pipeline run needs. All randomness derives from `seed`:
/// the world uses `seed`, model init `seed + 1`, tuning `seed + 2`, probe
/// clips `seed + 3 + task index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub model: ModelSpec,
    pub tune: TuneConfig,
    pub ceiling: CeilingParams,
    pub encode: EncodeOptions,
    pub probe: ProbeParams,
    pub stats: StatsParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: PathBuf::from("neurotune-out"),
            world: WorldConfig::default(),
            model: ModelSpec::default(),
            tune: TuneConfig::default(),
            ceiling: CeilingParams::default(),
            encode: EncodeOptions::default(),
            probe: ProbeParams::default(),
            stats: StatsParams::default(),
        }
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Validation(m) | Error::Format(m) => Error::Config(m),
        other => other,
    }
}

impl PipelineConfig {
    /// A reduced world and model that runs end to end in about a second;
    /// for smoke tests and trying out the command line.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> PipelineConfig {
        let roi = |name: &str| crate::synthworld::RoiSpec {
            name: name.to_string(),
            voxels: 10,
        };
        PipelineConfig {
            output_dir: output_dir.into(),
            world: WorldConfig {
                n_subjects: 3,
                tune_trs: 80,
                eval_trs: 60,
                n_voxels: 40,
                roi_layout: vec![roi("aSTS"), roi("pSTS"), roi("LOC"), roi("other")],
                latent_dim: 3,
                independent_latent_dim: 4,
                layout: TokenLayout {
                    frames_per_window: 2,
                    patches_per_frame: 1,
                    audio_tokens_per_window: 2,
                    d_v: 8,
                    d_a: 8,
                },
                ..WorldConfig::default()
            },
            model: ModelSpec {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
            },
            tune: TuneConfig {
                epochs: 2,
                ..TuneConfig::default()
            },
            probe: ProbeParams {
                n_clips: 40,
                folds: 4,
                ..ProbeParams::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn probe_seed(&self, task_index: usize) -> u64 {
        self.seed.wrapping_add(3 + task_index as u64)
    }

    /// Copies the top-level seed into the sub-configs that carry one.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.world.seed = self.seed;
        c.tune.seed = self.seed.wrapping_add(2);
        c.tune.window_trs = c.world.window_trs;
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config(&self.world.layout)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(config_error)?;
        self.tune.validate()?;
        self.model_config().validate().map_err(config_error)?;
        let c = &self.ceiling;
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return Err(Error::Config("ceiling.train_fraction must be in (0, 1)".into()));
        }
        if c.lambdas.is_empty() || c.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(
                "ceiling.lambdas must be nonempty, finite and >= 0".into(),
            ));
        }
        if c.sweep_thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("ceiling.sweep_thresholds must be ascending".into()));
        }
        if self.encode.lambda_grid.is_empty() || self.encode.ridge.cv_folds < 2 {
            return Err(Error::Config(
                "encode needs a nonempty lambda grid and cv_folds >= 2".into(),
            ));
        }
        let p = &self.probe;
        if p.folds < 2 || p.n_clips < p.folds {
            return Err(Error::Config("probe needs folds >= 2 and n_clips >= folds".into()));
        }
        for t in &p.tasks {
            task_kind(t).map_err(config_error)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_mat(m: &MatrixF64, path: PathBuf) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_matrix(m, path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusFiles {
    pub run_id: String,
    pub video: String,
    pub audio: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFiles {
    pub subject_id: String,
    /// run id -> BOLD matrix file (TR x voxel).
    pub runs: BTreeMap<String, String>,
}

/// Index of a dataset on disk; file names are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Generating config of a synthetic dataset; needed to draw probe clips.
    pub world: Option<WorldConfig>,
    pub layout: TokenLayout,
    pub window_trs: usize,
    pub tr_seconds: f64,
    pub atlas: RoiAtlas,
    pub target_rois: Vec<String>,
    pub stimuli: Vec<StimulusFiles>,
    pub subjects: Vec<SubjectFiles>,
}

/// A manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest: Manifest = read_json(manifest_path)?;
        manifest.atlas.validate()?;
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Dataset { manifest, base })
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.manifest.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn stimulus(&self, run_id: &str) -> Result<StimulusStream> {
        let f = self
            .manifest
            .stimuli
            .iter()
            .find(|s| s.run_id == run_id)
            .ok_or_else(|| validation(format!("manifest has no stimulus for run {run_id}")))?;
        StimulusStream::new(
            run_id,
            read_matrix(self.base.join(&f.video))?,
            read_matrix(self.base.join(&f.audio))?,
            self.manifest.layout,
        )
    }

    pub fn bold(&self, subject_id: &str, run_id: &str) -> Result<BoldRun> {
        let s = self
            .manifest
            .subjects
            .iter()
            .find(|s| s.subject_id == subject_id)
            .ok_or_else(|| validation(format!("manifest has no subject {subject_id}")))?;
        let file = s
            .runs
            .get(run_id)
            .ok_or_else(|| validation(format!("subject {subject_id} has no run {run_id}")))?;
        let responses = read_matrix(self.base.join(file))?;
        if responses.cols() != self.manifest.atlas.n_voxels() {
            return Err(validation(format!(
                "{file}: {} voxels, atlas has {}",
                responses.cols(),
                self.manifest.atlas.n_voxels()
            )));
        }
        BoldRun::new(subject_id, run_id, responses, self.manifest.tr_seconds)
    }

    pub fn bold_all(&self, run_id: &str) -> Result<Vec<BoldRun>> {
        self.subject_ids().iter().map(|s| self.bold(s, run_id)).collect()
    }

    /// Regenerates the synthetic world the data came from.
    pub fn world(&self) -> Result<SyntheticWorld> {
        let cfg = self
            .manifest
            .world
            .as_ref()
            .ok_or_else(|| validation("manifest does not describe a synthetic world"))?;
        generate_world(cfg)
    }

    /// `target` and `non_target` ROI unions.
    pub fn roi_sets(&self) -> Vec<(String, Vec<String>)> {
        let others: Vec<String> = self
            .manifest
            .atlas
            .roi_names
            .iter()
            .filter(|r| !self.manifest.target_rois.contains(r))
            .cloned()
            .collect();
        vec![
            (TARGET_SET.to_string(), self.manifest.target_rois.clone()),
            (NON_TARGET_SET.to_string(), others),
        ]
    }
}

/// Writes stimuli, BOLD runs and `manifest.json` into `dir`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<PathBuf> {
    let mut stimuli = Vec::new();
    for s in &world.stimuli {
        let video = format!("stimuli/{}_video.mmbt", s.run_id);
        let audio = format!("stimuli/{}_audio.mmbt", s.run_id);
        write_mat(&s.video_tokens, dir.join(&video))?;
        write_mat(&s.audio_tokens, dir.join(&audio))?;
        stimuli.push(StimulusFiles {
            run_id: s.run_id.clone(),
            video,
            audio,
        });
    }
    let mut subjects = Vec::new();
    for runs in &world.bold {
        let mut files = BTreeMap::new();
        for r in runs {
            let f = format!("bold/{}_{}.mmbt", r.subject_id, r.run_id);
            write_mat(&r.responses, dir.join(&f))?;
            files.insert(r.run_id.clone(), f);
        }
        subjects.push(SubjectFiles {
            subject_id: runs[0].subject_id.clone(),
            runs: files,
        });
    }
    let manifest = Manifest {
        world: Some(world.config.clone()),
        layout: world.config.layout,
        window_trs: world.config.window_trs,
        tr_seconds: world.config.tr_seconds,
        atlas: world.atlas.clone(),
        target_rois: world.config.target_rois.clone(),
        stimuli,
        subjects,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Generates the synthetic world and writes it as a dataset.
pub fn synth_stage(cfg: &WorldConfig, dir: &Path) -> Result<PathBuf> {
    let world = generate_world(cfg)?;
    write_world(&world, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CeilingMeta {
    run_id: String,
    subject_ids: Vec<String>,
    train_trs: usize,
    test_trs: usize,
}

pub fn save_ceilings(dir: &Path, est: &CeilingEstimate, run_id: &str) -> Result<()> {
    write_mat(&MatrixF64::row_vector(&est.ceilings), dir.join("ceilings.mmbt"))?;
    write_mat(&est.per_subject, dir.join("per_subject.mmbt"))?;
    write_mat(&est.by_subset_size, dir.join("by_subset_size.mmbt"))?;
    write_json(
        &dir.join("ceilings.json"),
        &CeilingMeta {
            run_id: run_id.to_string(),
            subject_ids: est.subject_ids.clone(),
            train_trs: est.train_trs,
            test_trs: est.test_trs,
        },
    )
}

/// Accepts the ceiling directory or any file inside it.
pub fn load_ceilings(path: &Path) -> Result<CeilingEstimate> {
    let dir = if path.is_file() {
        path.parent().unwrap_or(Path::new("."))
    } else {
        path
    };
    let meta: CeilingMeta = read_json(&dir.join("ceilings.json"))?;
    let group = read_matrix(dir.join("ceilings.mmbt"))?;
    let per_subject = read_matrix(dir.join("per_subject.mmbt"))?;
    let by_subset_size = read_matrix(dir.join("by_subset_size.mmbt"))?;
    if per_subject.rows() != meta.subject_ids.len() || per_subject.cols() != group.cols() {
        return Err(Error::Format("ceiling files disagree on shape".into()));
    }
    Ok(CeilingEstimate {
        ceilings: group.into_vec(),
        per_subject,
        by_subset_size,
        subject_ids: meta.subject_ids,
        train_trs: meta.train_trs,
        test_trs: meta.test_trs,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,subject,count\n");
    for r in rows {
        out += &format!("{},{},{}\n", r.threshold, r.subject, r.count);
    }
    out
}

/// Cross-subject ceilings on the tuning run written into `out`, plus
/// the threshold sweep over the target ROIs. `split` overrides the
/// configured train fraction with explicit (train, test) TR counts.
pub fn ceiling_stage(
    ds: &Dataset,
    params: &CeilingParams,
    split: Option<(usize, usize)>,
    out: &Path,
) -> Result<CeilingEstimate> {
    let runs = ds.bold_all(TUNE_RUN)?;
    let n_trs = runs.first().map_or(0, |r| r.n_trs());
    let (train, test) = split.unwrap_or_else(|| params.split(n_trs));
    let est = estimate_ceilings(&runs, train, test, &params.lambdas)?;
    save_ceilings(out, &est, TUNE_RUN)?;
    let rows = sweep_threshold(
        &est,
        &ds.manifest.atlas,
        &ds.manifest.target_rois,
        &params.sweep_thresholds,
    )?;
    write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok(est)
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        out += &format!("{e},{l}\n");
    }
    out
}

/// Brain-tunes one subject on the tuning run and writes its checkpoint,
/// `loss_trace.csv` and the selected voxel indices.
pub fn brain_tune_subject(
    ds: &Dataset,
    ceilings: &CeilingEstimate,
    subject_id: &str,
    cfg: &TuneConfig,
    init: &ModelState,
    out: &Path,
) -> Result<TuneOutcome> {
    let subject_ceilings = ceilings
        .subject_ceilings(subject_id)
        .ok_or_else(|| validation(format!("no ceilings for subject {subject_id}")))?;
    let mask = filter_voxels(
        subject_id,
        subject_ceilings,
        &ds.manifest.atlas,
        &ds.manifest.target_rois,
        cfg.ceiling_threshold,
    )?;
    let pairs = make_pairs(
        &ds.bold(subject_id, TUNE_RUN)?,
        &ds.stimulus(TUNE_RUN)?,
        &mask,
        cfg.window_trs,
    )?;
    let outcome = train(&pairs, cfg, init)?;
    save_checkpoint(out, &outcome.state, Some(&outcome.head))?;
    write_text(&out.join("loss_trace.csv"), &loss_trace_csv(&outcome.loss_trace))?;
    write_json(&out.join("voxels.json"), &mask.indices())?;
    Ok(outcome)
}

/// Masked-reconstruction tuning on the tuning run's windows.
pub fn stimulus_tune_stage(ds: &Dataset, cfg: &TuneConfig, init: &ModelState, out: &Path) -> Result<ModelState> {
    let windows = make_windows(&ds.stimulus(TUNE_RUN)?, cfg.window_trs)?;
    let outcome = stimulus_tune(&windows, cfg, init)?;
    save_checkpoint(out, &outcome.state, None)?;
    write_text(&out.join("loss_trace.csv"), &loss_trace_csv(&outcome.loss_trace))?;
    Ok(outcome.state)
}

/// Features of a model on the evaluation run.
pub fn eval_features(ds: &Dataset, state: &ModelState) -> Result<FeatureTable> {
    let windows = make_windows(&ds.stimulus(EVAL_RUN)?, ds.manifest.window_trs)?;
    extract_features(state, &windows)
}

/// Voxel-wise encoding of one subject's evaluation run from precomputed
/// features, normalized by that subject's ceilings. Returns the ROI report
/// and the per-voxel detail behind it.
pub fn encode_subject(
    ds: &Dataset,
    features: &FeatureTable,
    model_id: &str,
    subject_id: &str,
    ceilings: &CeilingEstimate,
    opts: &EncodeOptions,
) -> Result<(EncodeReport, AlignmentReport)> {
    let c = ceilings
        .subject_ceilings(subject_id)
        .ok_or_else(|| validation(format!("no ceilings for subject {subject_id}")))?;
    let split = default_split(features.features.rows());
    let bold = ds.bold(subject_id, EVAL_RUN)?;
    let report = evaluate_features(features, &bold, c, &ds.manifest.atlas, split, opts)?;
    let summary = EncodeReport::new(
        model_id,
        subject_id,
        &report,
        &ds.manifest.atlas,
        &ds.roi_sets(),
        opts,
        split,
    )?;
    Ok((summary, report))
}

/// `voxel,roi,ceiling,raw_r,normalized`; normalized is empty below the floor.
pub fn voxel_csv(report: &AlignmentReport, atlas: &RoiAtlas, ceilings: &[f64]) -> String {
    let mut out = String::from("voxel,roi,ceiling,raw_r,normalized\n");
    for (v, (r, n)) in report.raw_r.iter().zip(&report.normalized).enumerate() {
        let roi = &atlas.roi_names[atlas.labels[v]];
        out += &format!("{v},{roi},{},{r},{}\n", ceilings[v], fmt_opt(*n));
    }
    out
}

/// Writes `<stem>.json` and `<stem>_voxels.csv`.
pub fn write_encode(
    out_json: &Path,
    report: &(EncodeReport, AlignmentReport),
    ds: &Dataset,
    ceilings: &CeilingEstimate,
) -> Result<()> {
    write_json(out_json, &report.0)?;
    let c = ceilings
        .subject_ceilings(&report.0.subject_id)
        .unwrap_or(&ceilings.ceilings);
    let stem = out_json
        .file_stem()
        .map_or_else(|| "encode".into(), |s| s.to_string_lossy().into_owned());
    write_text(
        &out_json.with_file_name(format!("{stem}_voxels.csv")),
        &voxel_csv(&report.1, &ds.manifest.atlas, c),
    )
}

enum TaskKind {
    Latent(LatentSource),
    Emotion,
}

fn task_kind(name: &str) -> Result<TaskKind> {
    match name {
        TARGET_TASK | "sarcasm_like" => Ok(TaskKind::Latent(LatentSource::Target)),
        INDEPENDENT_TASK => Ok(TaskKind::Latent(LatentSource::Independent)),
        EMOTION_TASK => Ok(TaskKind::Emotion),
        other => Err(validation(format!(
            "unknown probe task {other} (expected {TARGET_TASK}, sarcasm_like, {INDEPENDENT_TASK} or {EMOTION_TASK})"
        ))),
    }
}

/// Builds a named synthetic probe task from fresh clips of the world.
pub fn build_probe_task(world: &SyntheticWorld, task: &str, params: &ProbeParams, seed: u64) -> Result<ProbeDataset> {
    match task_kind(task)? {
        TaskKind::Latent(source) => latent_probe_task(world, params.n_clips, seed, source, params.folds),
        TaskKind::Emotion => emotion_like_task(world, params.n_clips, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub a2_accuracy: f64,
    pub f1: f64,
    pub weighted_a2: Option<f64>,
    pub weighted_f1: Option<f64>,
}

/// On-disk probe result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model_id: String,
    pub task: String,
    pub metrics: ProbeMetrics,
    pub per_fold: Vec<SplitMetrics>,
}

impl ProbeReport {
    pub fn new(model_id: &str, r: ProbeResult) -> ProbeReport {
        ProbeReport {
            model_id: model_id.to_string(),
            task: r.task,
            metrics: ProbeMetrics {
                a2_accuracy: r.a2_accuracy,
                f1: r.f1,
                weighted_a2: r.weighted_a2,
                weighted_f1: r.weighted_f1,
            },
            per_fold: r.per_fold,
        }
    }
}

pub fn probe_model(
    state: &ModelState,
    task: &ProbeDataset,
    model_id: &str,
    params: &ProbeParams,
) -> Result<ProbeReport> {
    let x = probe_features(state, task)?;
    Ok(ProbeReport::new(model_id, run_probe(task, &x, params.l2)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCell {
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    /// Aligned with `Summary::tuned_subjects`.
    pub per_subject: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub a2: f64,
    pub f1: f64,
    /// SEM across per-subject models (brain-tuned only).
    pub a2_sem: Option<f64>,
    pub f1_sem: Option<f64>,
    pub per_model_a2: Vec<f64>,
    pub per_model_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    /// `alignment` or `probe`.
    pub family: String,
    /// e.g. `brain_vs_pretrained`.
    pub comparison: String,
    /// ROI key, or `task.metric` for probes.
    pub metric: String,
    /// `wilcoxon` or `ttest`.
    pub test: String,
    pub n: usize,
    pub statistic: Option<f64>,
    pub p: Option<f64>,
    pub flag: Significance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub subjects: Vec<String>,
    pub tuned_subjects: Vec<String>,
    pub untunable_subjects: Vec<String>,
    pub models: Vec<String>,
    /// Mean group ceiling per ROI key.
    pub ceilings: BTreeMap<String, f64>,
    pub tune_loss: BTreeMap<String, Vec<f64>>,
    pub stimulus_loss: Vec<f64>,
    /// model -> ROI key -> cell.
    pub alignment: BTreeMap<String, BTreeMap<String, AlignmentCell>>,
    /// model -> task -> cell.
    #[serde(default)]
    pub probes: BTreeMap<String, BTreeMap<String, ProbeCell>>,
    #[serde(default)]
    pub stats: Vec<StatRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn alignment_cell(per_subject: Vec<Option<f64>>) -> AlignmentCell {
    let present: Vec<f64> = per_subject.iter().flatten().copied().collect();
    AlignmentCell {
        mean: mean(&present),
        sem: sem(&present).ok(),
        per_subject,
    }
}

pub fn probe_cell(reports: &[ProbeMetrics]) -> ProbeCell {
    let a2: Vec<f64> = reports.iter().map(|r| r.a2_accuracy).collect();
    let f1: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    ProbeCell {
        a2: mean(&a2).unwrap_or(f64::NAN),
        f1: mean(&f1).unwrap_or(f64::NAN),
        a2_sem: sem(&a2).ok(),
        f1_sem: sem(&f1).ok(),
        per_model_a2: a2,
        per_model_f1: f1,
    }
}

const COMPARISONS: [(&str, &str); 3] = [(BRAIN, PRETRAINED), (BRAIN, STIMULUS), (STIMULUS, PRETRAINED)];

fn test_row(
    family: &str,
    a: &str,
    b: &str,
    metric: &str,
    test: &str,
    diffs: &[f64],
    alt: Alternative,
) -> Option<StatRow> {
    let (statistic, p) = match test {
        "wilcoxon" => match wilcoxon_signed_rank(diffs, alt) {
            Ok(r) => (Some(r.w_plus), Some(r.p)),
            Err(Error::UndefinedTest(_)) => (None, None),
            Err(_) => return None,
        },
        _ => match one_sample_ttest_onesided(diffs) {
            Ok(r) => (Some(r.t), Some(r.p)),
            Err(Error::UndefinedTest(_)) => (None, None),
            Err(_) => return None,
        },
    };
    Some(StatRow {
        family: family.to_string(),
        comparison: format!("{a}_vs_{b}"),
        metric: metric.to_string(),
        test: test.to_string(),
        n: diffs.len(),
        statistic,
        p,
        flag: p.map_or(Significance::NotSignificant, flag_significance),
    })
}

/// Paired Wilcoxon tests over subjects for every ROI key, and one-sided
/// t-tests of brain-tuned probe metrics against each single baseline model.
pub fn compute_stats(
    alignment: &BTreeMap<String, BTreeMap<String, AlignmentCell>>,
    probes: &BTreeMap<String, BTreeMap<String, ProbeCell>>,
    params: &StatsParams,
) -> Vec<StatRow> {
    let mut rows = Vec::new();
    for (a, b) in COMPARISONS {
        let (Some(ma), Some(mb)) = (alignment.get(a), alignment.get(b)) else {
            continue;
        };
        for (roi, ca) in ma {
            let Some(cb) = mb.get(roi) else { continue };
            let diffs: Vec<f64> = ca
                .per_subject
                .iter()
                .zip(&cb.per_subject)
                .filter_map(|(x, y)| Some((*x)? - (*y)?))
                .collect();
            if diffs.is_empty() {
                continue;
            }
            rows.extend(test_row(
                "alignment",
                a,
                b,
                roi,
                "wilcoxon",
                &diffs,
                params.wilcoxon_alternative,
            ));
        }
    }
    for (a, b) in COMPARISONS {
        let (Some(pa), Some(pb)) = (probes.get(a), probes.get(b)) else {
            continue;
        };
        for (task, ca) in pa {
            let Some(cb) = pb.get(task) else { continue };
            for (metric, va, vb) in [("a2", &ca.per_model_a2, cb.a2), ("f1", &ca.per_model_f1, cb.f1)] {
                if va.len() < 2 || pb[task].per_model_a2.len() != 1 {
                    continue;
                }
                let diffs: Vec<f64> = va.iter().map(|x| x - vb).collect();
                rows.extend(test_row(
                    "probe",
                    a,
                    b,
                    &format!("{task}.{metric}"),
                    "ttest",
                    &diffs,
                    Alternative::Greater,
                ));
            }
        }
    }
    rows
}

/// Stage names and their output locations, as printed by `--dry-run`.
pub fn plan(cfg: &PipelineConfig) -> Vec<String> {
    let out = &cfg.output_dir;
    let n = cfg.world.n_subjects;
    vec![
        format!("synth          -> {}", out.join("data/manifest.json").display()),
        format!("ceiling        -> {}", out.join("ceilings").display()),
        format!("pretrained     -> {}", out.join("models/pretrained").display()),
        format!("stimulus_tune  -> {}", out.join("models/stimulus").display()),
        format!(
            "brain_tune     -> {} ({n} subjects)",
            out.join("models/brain").display()
        ),
        format!("encode         -> {}", out.join("encode").display()),
        format!(
            "probes         -> {} ({})",
            out.join("probes").display(),
            cfg.probe.tasks.join(", ")
        ),
        format!("stats          -> {}", out.join("summary.json").display()),
    ]
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    info!("stage {name}: start");
    let r = f().map_err(|e| e.in_stage(name));
    if r.is_ok() {
        info!("stage {name}: done");
    }
    r
}

/// Runs every stage in order into `cfg.output_dir` and writes
/// `summary.json`. On failure a `FAILED` marker naming the stage is left
/// next to the partial outputs.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Summary> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run_stages(&cfg, &out);
    if let Err(e) = &result {
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn run_stages(cfg: &PipelineConfig, out: &Path) -> Result<Summary> {
    cfg.save(&out.join("config.json"))?;
    let manifest = stage("synth", || synth_stage(&cfg.world, &out.join("data")))?;
    let ds = Dataset::load(&manifest)?;
    let ceilings = stage("ceiling", || {
        ceiling_stage(&ds, &cfg.ceiling, None, &out.join("ceilings"))
    })?;
    let pretrained = stage("pretrained", || {
        let s = init_model(cfg.model_config(), cfg.init_seed())?;
        save_checkpoint(&out.join("models").join(PRETRAINED), &s, None)?;
        Ok(s)
    })?;
    let stim_cfg = TuneConfig {
        objective: Objective::Stimulus,
        ..cfg.tune.clone()
    };
    let stimulus = stage("stimulus_tune", || {
        stimulus_tune_stage(&ds, &stim_cfg, &pretrained, &out.join("models").join(STIMULUS))
    })?;
    let brain_cfg = TuneConfig {
        objective: Objective::Brain,
        ..cfg.tune.clone()
    };
    let subjects = ds.subject_ids();
    let mut tuned: Vec<(String, TuneOutcome)> = Vec::new();
    let mut untunable = Vec::new();
    stage("brain_tune", || {
        for s in &subjects {
            match brain_tune_subject(
                &ds,
                &ceilings,
                s,
                &brain_cfg,
                &pretrained,
                &out.join("models").join(BRAIN).join(s),
            ) {
                Ok(o) => tuned.push((s.clone(), o)),
                Err(Error::UntunableSubject { .. }) => {
                    warn!("subject {s} has no voxels above the ceiling threshold; skipped");
                    untunable.push(s.clone());
                }
                Err(e) => return Err(e),
            }
        }
        if tuned.is_empty() {
            return Err(validation("no subject is tunable at this ceiling threshold"));
        }
        Ok(())
    })?;
    let tuned_ids: Vec<String> = tuned.iter().map(|(s, _)| s.clone()).collect();

    let alignment = stage("encode", || {
        let mut per_model: BTreeMap<String, Vec<EncodeReport>> = BTreeMap::new();
        let shared = [
            (PRETRAINED, eval_features(&ds, &pretrained)?),
            (STIMULUS, eval_features(&ds, &stimulus)?),
        ];
        for (model, feats) in &shared {
            for s in &tuned_ids {
                let r = encode_subject(&ds, feats, model, s, &ceilings, &cfg.encode)?;
                write_encode(
                    &out.join("encode").join(format!("{model}_{s}.json")),
                    &r,
                    &ds,
                    &ceilings,
                )?;
                per_model.entry(model.to_string()).or_default().push(r.0);
            }
        }
        for (s, o) in &tuned {
            let feats = eval_features(&ds, &o.state)?;
            let r = encode_subject(&ds, &feats, BRAIN, s, &ceilings, &cfg.encode)?;
            write_encode(
                &out.join("encode").join(format!("{BRAIN}_{s}.json")),
                &r,
                &ds,
                &ceilings,
            )?;
            per_model.entry(BRAIN.to_string()).or_default().push(r.0);
        }
        let mut table: BTreeMap<String, BTreeMap<String, AlignmentCell>> = BTreeMap::new();
        for (model, reports) in &per_model {
            let keys: Vec<String> = reports[0]
                .per_roi
                .keys()
                .chain(reports[0].roi_sets.keys())
                .cloned()
                .collect();
            let cells = keys
                .into_iter()
                .map(|k| {
                    let vals = reports
                        .iter()
                        .map(|r| {
                            r.per_roi
                                .get(&k)
                                .or_else(|| r.roi_sets.get(&k))
                                .and_then(|a| a.mean_normalized)
                        })
                        .collect();
                    (k, alignment_cell(vals))
                })
                .collect();
            table.insert(model.clone(), cells);
        }
        Ok(table)
    })?;

    let probes = stage("probes", || {
        let mut table: BTreeMap<String, BTreeMap<String, ProbeCell>> = BTreeMap::new();
        if cfg.probe.tasks.is_empty() {
            return Ok(table);
        }
        let world = ds.world()?;
        for (ti, task_name) in cfg.probe.tasks.iter().enumerate() {
            let task = build_probe_task(&world, task_name, &cfg.probe, cfg.probe_seed(ti))?;
            let mut models: Vec<(String, String, &ModelState)> = vec![
                (PRETRAINED.into(), PRETRAINED.into(), &pretrained),
                (STIMULUS.into(), STIMULUS.into(), &stimulus),
            ];
            models.extend(
                tuned
                    .iter()
                    .map(|(s, o)| (BRAIN.to_string(), format!("{BRAIN}_{s}"), &o.state)),
            );
            let mut results: BTreeMap<String, Vec<ProbeMetrics>> = BTreeMap::new();
            for (class, id, state) in models {
                let rep = probe_model(state, &task, &id, &cfg.probe)?;
                write_json(&out.join("probes").join(format!("{id}_{}.json", task.task)), &rep)?;
                results.entry(class).or_default().push(rep.metrics);
            }
            for (class, rs) in results {
                table
                    .entry(class)
                    .or_default()
                    .insert(task.task.clone(), probe_cell(&rs));
            }
        }
        Ok(table)
    })?;

    stage("stats", || {
        let atlas = &ds.manifest.atlas;
        let mut ceiling_means = BTreeMap::new();
        let mut keys: Vec<(String, Vec<String>)> =
            atlas.roi_names.iter().map(|r| (r.clone(), vec![r.clone()])).collect();
        keys.extend(ds.roi_sets());
        for (k, rois) in keys {
            let m = atlas.membership(&rois)?;
            let v: Vec<f64> = ceilings
                .ceilings
                .iter()
                .zip(&m)
                .filter(|(_, &b)| b)
                .map(|(c, _)| *c)
                .collect();
            if let Some(x) = mean(&v) {
                ceiling_means.insert(k, x);
            }
        }
        let summary = Summary {
            seed: cfg.seed,
            subjects: subjects.clone(),
            tuned_subjects: tuned_ids.clone(),
            untunable_subjects: untunable.clone(),
            models: MODELS.iter().map(|m| m.to_string()).collect(),
            ceilings: ceiling_means,
            tune_loss: tuned.iter().map(|(s, o)| (s.clone(), o.loss_trace.clone())).collect(),
            stimulus_loss: read_loss_trace(&out.join("models").join(STIMULUS).join("loss_trace.csv"))?,
            stats: compute_stats(&alignment, &probes, &cfg.stats),
            alignment: alignment.clone(),
            probes: probes.clone(),
        };
        write_json(&out.join("summary.json"), &summary)?;
        Ok(summary)
    })
}

fn read_loss_trace(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad line {l:?}", path.display())))
        })
        .collect()
}

/// Reads a checkpoint directory's model (the projection head is ignored).
pub fn load_model(dir: &Path) -> Result<ModelState> {
    Ok(load_checkpoint(dir)?.0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn vs_pretrained_flag(summary: &Summary, family: &str, model: &str, metric: &str) -> Significance {
    let comparison = format!("{model}_vs_{PRETRAINED}");
    summary
        .stats
        .iter()
        .find(|r| r.family == family && r.comparison == comparison && r.metric == metric)
        .map_or(Significance::NotSignificant, |r| r.flag)
}

/// `alignment_by_roi.csv`: `model,roi,mean,flag`, flag against the
/// pretrained baseline.
pub fn alignment_csv(summary: &Summary) -> String {
    let mut out = String::from("model,roi,mean,flag\n");
    for (model, cells) in &summary.alignment {
        for (roi, cell) in cells {
            let flag = vs_pretrained_flag(summary, "alignment", model, roi);
            out += &format!("{model},{roi},{},{flag}\n", fmt_opt(cell.mean));
        }
    }
    out
}

/// `probes.csv`: `model,task,metric,value,sem,flag`.
pub fn probes_csv(summary: &Summary) -> String {
    let mut out = String::from("model,task,metric,value,sem,flag\n");
    for (model, tasks) in &summary.probes {
        for (task, cell) in tasks {
            for (metric, value, s) in [("a2", cell.a2, cell.a2_sem), ("f1", cell.f1, cell.f1_sem)] {
                let flag = vs_pretrained_flag(summary, "probe", model, &format!("{task}.{metric}"));
                out += &format!("{model},{task},{metric},{value},{},{flag}\n", fmt_opt(s));
            }
        }
    }
    out
}

/// Writes both plotting tables next to each other in `out_dir`.
pub fn report(summary_path: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let summary: Summary = read_json(summary_path)?;
    let a = out_dir.join("alignment_by_roi.csv");
    let p = out_dir.join("probes.csv");
    write_text(&a, &alignment_csv(&summary))?;
    write_text(&p, &probes_csv(&summary))?;
    Ok((a, p))
}
