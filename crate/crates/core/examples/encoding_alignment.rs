//! Ceiling-normalized encoding alignment per ROI for an untuned and a
//! brain-tuned model of one subject.
//!
//!     cargo run --release --example encoding_alignment

use neurotune::braintune::{filter_voxels, train, TuneConfig};
use neurotune::data::{make_pairs, make_windows};
use neurotune::encodeval::{default_split, evaluate_features, extract_features, EncodeOptions};
use neurotune::minimmt::{init_model, ModelConfig};
use neurotune::noiseceil::{estimate_ceilings, DEFAULT_CEILING_LAMBDAS};
use neurotune::synthworld::{generate_world, WorldConfig, EVAL_RUN, TUNE_RUN};

fn main() -> neurotune::Result<()> {
    let wc = WorldConfig {
        tune_trs: 400,
        eval_trs: 400,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc)?;
    let runs = world.subject_runs(TUNE_RUN);
    let ceilings = estimate_ceilings(&runs, 290, 110, &DEFAULT_CEILING_LAMBDAS)?;
    let own = ceilings.per_subject.row(0);
    let l = wc.layout;
    let init = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 1)?;
    let mask = filter_voxels("sub-01", own, &world.atlas, &wc.target_rois, 0.25)?;
    let pairs = make_pairs(&runs[0], world.stimulus(TUNE_RUN).unwrap(), &mask, wc.window_trs)?;
    let tuned = train(&pairs, &TuneConfig::default(), &init)?.state;

    let windows = make_windows(world.stimulus(EVAL_RUN).unwrap(), wc.window_trs)?;
    let bold = &world.subject_runs(EVAL_RUN)[0];
    let opts = EncodeOptions::default();
    println!("{:<8}{:>10}{:>10}", "roi", "untuned", "tuned");
    let mut reports = Vec::new();
    for state in [&init, &tuned] {
        let feats = extract_features(state, &windows)?;
        let split = default_split(feats.features.rows());
        reports.push(evaluate_features(&feats, bold, own, &world.atlas, split, &opts)?);
    }
    for roi in &world.atlas.roi_names {
        let v: Vec<String> = reports
            .iter()
            .map(|r| r.per_roi[roi].mean_normalized.map_or("-".into(), |x| format!("{x:.3}")))
            .collect();
        println!("{roi:<8}{:>10}{:>10}", v[0], v[1]);
    }
    Ok(())
}
