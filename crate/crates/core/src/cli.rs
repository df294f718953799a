//! The `neurotune` command line. Each subcommand runs one pipeline stage
//! from artifacts on disk; `pipeline` runs them all.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::braintune::{Objective, TuneConfig};
use crate::error::{validation, Error, Result};
use crate::minimmt::{init_model, ModelState};
use crate::pipeline::{
    brain_tune_subject, build_probe_task, ceiling_stage, encode_subject, eval_features, load_ceilings, load_model,
    plan, probe_model, read_json, report, run_pipeline, stimulus_tune_stage, synth_stage, write_encode, write_json,
    Dataset, PipelineConfig,
};
use crate::stats::{flag_significance, one_sample_ttest_onesided, wilcoxon_signed_rank, Alternative};

#[derive(Debug, Parser)]
#[command(
    name = "neurotune",
    version,
    about = "Brain-tuning and fMRI alignment evaluation on synthetic data"
)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "NEUROTUNE_SEED")]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TestKind {
    Wilcoxon,
    Ttest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlternativeArg {
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    Brain,
    Stimulus,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a config file with every default filled in.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Use the reduced smoke-test world and model.
        #[arg(long)]
        smoke: bool,
    },
    /// Generate a synthetic world and write it as a dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate cross-subject noise ceilings on the tuning run.
    Ceiling {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset manifest.
        #[arg(long, alias = "manifest")]
        data: PathBuf,
        /// Explicit fitting TRs; with --test-trs, overrides the config fraction.
        #[arg(long, requires = "test_trs")]
        train_trs: Option<usize>,
        #[arg(long, requires = "train_trs")]
        test_trs: Option<usize>,
        /// Output directory (a path ending in .mmbt writes into its parent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a model with the brain or stimulus objective.
    Tune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, alias = "manifest")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "brain")]
        objective: ObjectiveArg,
        /// Subject to tune on (brain objective).
        #[arg(long)]
        subject: Option<String>,
        /// Ceiling directory (brain objective).
        #[arg(long)]
        ceilings: Option<PathBuf>,
        /// Starting checkpoint; a fresh model from the config seed otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated target ROIs, overriding the manifest's.
        #[arg(long, value_delimiter = ',')]
        roi: Option<Vec<String>>,
        /// Ceiling threshold for voxel selection.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit voxel-wise encoding models on the evaluation run.
    Encode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, alias = "manifest")]
        data: PathBuf,
        /// Model checkpoint directory.
        #[arg(long, alias = "checkpoint")]
        model: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        ceilings: PathBuf,
        /// Name recorded in the report; the checkpoint directory name otherwise.
        #[arg(long)]
        model_id: Option<String>,
        /// Report JSON; per-voxel detail goes to <stem>_voxels.csv beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen features.
    Probe {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, alias = "manifest")]
        data: PathBuf,
        #[arg(long, alias = "checkpoint")]
        model: PathBuf,
        /// target_latent (alias sarcasm_like), independent_latent or emotion_like.
        #[arg(long)]
        task: String,
        #[arg(long)]
        model_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired test of one metric, condition a minus condition b.
    Stats {
        /// Two files, each one report or a JSON array of reports.
        #[arg(long, num_args = 2, conflicts_with_all = ["a", "b"], required_unless_present_all = ["a", "b"])]
        reports: Vec<PathBuf>,
        /// Condition a as one report file per pair.
        #[arg(long, num_args = 1.., requires = "b")]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., requires = "a")]
        b: Vec<PathBuf>,
        /// Dotted path into each JSON file, e.g. roi_sets.target.mean_normalized.
        #[arg(long)]
        metric: String,
        #[arg(long, value_enum, default_value = "wilcoxon")]
        test: TestKind,
        /// Wilcoxon sidedness; the t-test is always one-sided.
        #[arg(long, value_enum, default_value = "two-sided")]
        alternative: AlternativeArg,
    },
    /// Write alignment_by_roi.csv and probes.csv from a summary.
    Report {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage into the config's output directory.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the stage plan without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match &arg.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| "model".to_string(), |n| n.to_string_lossy().into_owned())
}

/// The metric at a dotted path in each report of a file holding one
/// report or an array of them.
fn metric_values(path: &Path, metric: &str) -> Result<Vec<f64>> {
    let v: serde_json::Value = read_json(path)?;
    let pointer = format!("/{}", metric.replace('.', "/"));
    let items = match &v {
        serde_json::Value::Array(items) => items.iter().collect(),
        single => vec![single],
    };
    items
        .into_iter()
        .map(|item| {
            item.pointer(&pointer)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| validation(format!("{}: no numeric value at {metric}", path.display())))
        })
        .collect()
}

fn collect_values(paths: &[PathBuf], metric: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(metric_values(p, metric)?);
    }
    Ok(out)
}

fn ceiling_dir(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "mmbt") {
        out.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        out.to_path_buf()
    }
}

/// `metric,n,statistic,p,flag` for a paired test of `a - b`.
pub fn stats_line(a: &[f64], b: &[f64], metric: &str, test: TestKind, alternative: Alternative) -> Result<String> {
    if a.len() != b.len() {
        return Err(validation(format!(
            "condition a has {} values, b has {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (statistic, p) = match test {
        TestKind::Wilcoxon => {
            let r = wilcoxon_signed_rank(&diffs, alternative)?;
            (r.w_plus, r.p)
        }
        TestKind::Ttest => {
            let r = one_sample_ttest_onesided(&diffs)?;
            (r.t, r.p)
        }
    };
    Ok(format!(
        "{metric},{},{statistic},{p},{}",
        diffs.len(),
        flag_significance(p)
    ))
}

fn start_model(cfg: &PipelineConfig, ds: &Dataset, init: Option<&Path>) -> Result<ModelState> {
    match init {
        Some(dir) => load_model(dir),
        None => init_model(cfg.model.model_config(&ds.manifest.layout), cfg.init_seed()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::InitConfig { out, smoke } => {
            let mut cfg = if smoke {
                PipelineConfig::smoke("neurotune-out")
            } else {
                PipelineConfig::default()
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.resolved().save(&out)
        }
        Command::Synth { config, out } => {
            let cfg = load_config(&config, seed)?;
            let manifest = synth_stage(&cfg.world, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Ceiling {
            config,
            data,
            train_trs,
            test_trs,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ds = Dataset::load(&data)?;
            let out = ceiling_dir(&out);
            let est = ceiling_stage(&ds, &cfg.ceiling, train_trs.zip(test_trs), &out)?;
            println!(
                "{} subjects, {} voxels -> {}",
                est.n_subjects(),
                est.ceilings.len(),
                out.display()
            );
            Ok(())
        }
        Command::Tune {
            config,
            data,
            objective,
            subject,
            ceilings,
            init,
            roi,
            threshold,
            epochs,
            lr,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let mut ds = Dataset::load(&data)?;
            if let Some(rois) = roi {
                ds.manifest.atlas.membership(&rois)?;
                ds.manifest.target_rois = rois;
            }
            let init = start_model(&cfg, &ds, init.as_deref())?;
            let mut tune = TuneConfig {
                window_trs: ds.manifest.window_trs,
                ..cfg.tune.clone()
            };
            tune.ceiling_threshold = threshold.unwrap_or(tune.ceiling_threshold);
            tune.epochs = epochs.unwrap_or(tune.epochs);
            tune.lr = lr.unwrap_or(tune.lr);
            tune.validate()?;
            match objective {
                ObjectiveArg::Brain => {
                    let (subject, ceilings) = match (subject, ceilings) {
                        (Some(s), Some(c)) => (s, c),
                        _ => return Err(Error::Config("brain tuning needs --subject and --ceilings".into())),
                    };
                    let est = load_ceilings(&ceilings)?;
                    let cfg = TuneConfig {
                        objective: Objective::Brain,
                        ..tune
                    };
                    let o = brain_tune_subject(&ds, &est, &subject, &cfg, &init, &out)?;
                    println!("final loss {}", o.loss_trace.last().copied().unwrap_or(f64::NAN));
                }
                ObjectiveArg::Stimulus => {
                    let cfg = TuneConfig {
                        objective: Objective::Stimulus,
                        ..tune
                    };
                    stimulus_tune_stage(&ds, &cfg, &init, &out)?;
                }
            }
            Ok(())
        }
        Command::Encode {
            config,
            data,
            model,
            subject,
            ceilings,
            model_id,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ds = Dataset::load(&data)?;
            let state = load_model(&model)?;
            let est = load_ceilings(&ceilings)?;
            let id = model_id.unwrap_or_else(|| checkpoint_name(&model));
            let feats = eval_features(&ds, &state)?;
            let rep = encode_subject(&ds, &feats, &id, &subject, &est, &cfg.encode)?;
            write_encode(&out, &rep, &ds, &est)
        }
        Command::Probe {
            config,
            data,
            model,
            task,
            model_id,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let ds = Dataset::load(&data)?;
            let state = load_model(&model)?;
            let index = cfg.probe.tasks.iter().position(|t| *t == task).unwrap_or(0);
            let ds_task = build_probe_task(&ds.world()?, &task, &cfg.probe, cfg.probe_seed(index))?;
            let id = model_id.unwrap_or_else(|| checkpoint_name(&model));
            let rep = probe_model(&state, &ds_task, &id, &cfg.probe)?;
            write_json(&out, &rep)
        }
        Command::Stats {
            reports,
            a,
            b,
            metric,
            test,
            alternative,
        } => {
            let (a, b) = match reports.as_slice() {
                [ra, rb] => (vec![ra.clone()], vec![rb.clone()]),
                _ => (a, b),
            };
            let va = collect_values(&a, &metric)?;
            let vb = collect_values(&b, &metric)?;
            let alt = match alternative {
                AlternativeArg::Greater => Alternative::Greater,
                AlternativeArg::TwoSided => Alternative::TwoSided,
            };
            let line = stats_line(&va, &vb, &metric, test, alt)?;
            println!("metric,n,statistic,p,flag\n{line}");
            Ok(())
        }
        Command::Report { summary, out } => {
            let (a, p) = report(&summary, &out)?;
            println!("{}\n{}", a.display(), p.display());
            Ok(())
        }
        Command::Pipeline { config, out, dry_run } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if dry_run {
                for line in plan(&cfg) {
                    println!("{line}");
                }
                return Ok(());
            }
            run_pipeline(&cfg)?;
            println!("{}", cfg.output_dir.join("summary.json").display());
            Ok(())
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return 2;
        }
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
