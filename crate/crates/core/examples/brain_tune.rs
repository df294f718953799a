//! Brain-tune one subject on a reduced world and compare the loss trace with
//! stimulus tuning on the same windows.
//!
//!     cargo run --release --example brain_tune

use neurotune::braintune::{filter_voxels, stimulus_tune, train, Objective, TuneConfig};
use neurotune::data::{make_pairs, make_windows};
use neurotune::minimmt::{init_model, ModelConfig};
use neurotune::noiseceil::{estimate_ceilings, DEFAULT_CEILING_LAMBDAS};
use neurotune::synthworld::{generate_world, WorldConfig, TUNE_RUN};

fn main() -> neurotune::Result<()> {
    let wc = WorldConfig {
        tune_trs: 300,
        eval_trs: 100,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc)?;
    let runs = world.subject_runs(TUNE_RUN);
    let ceilings = estimate_ceilings(&runs, 220, 80, &DEFAULT_CEILING_LAMBDAS)?;
    let mask = filter_voxels(
        "sub-01",
        ceilings.per_subject.row(0),
        &world.atlas,
        &wc.target_rois,
        0.25,
    )?;
    println!(
        "sub-01: {} of {} target voxels above threshold",
        mask.m(),
        wc.target_voxel_count()
    );

    let stim = world.stimulus(TUNE_RUN).unwrap();
    let pairs = make_pairs(&runs[0], stim, &mask, wc.window_trs)?;
    let l = wc.layout;
    let init = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 1)?;
    let cfg = TuneConfig {
        epochs: 5,
        ..TuneConfig::default()
    };
    let brain = train(&pairs, &cfg, &init)?;
    println!(
        "brain loss    {:?}",
        brain.loss_trace.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
    );

    let windows = make_windows(stim, wc.window_trs)?;
    let stim_cfg = TuneConfig {
        objective: Objective::Stimulus,
        ..cfg
    };
    let recon = stimulus_tune(&windows, &stim_cfg, &init)?;
    println!(
        "stimulus loss {:?}",
        recon.loss_trace.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    Ok(())
}
