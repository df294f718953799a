//! Cross-subject noise ceilings: per-ROI means, the subset-size trend and the
//! voxel-threshold sweep.
//!
//!     cargo run --release --example noise_ceiling

use neurotune::noiseceil::{estimate_ceilings, sweep_threshold, DEFAULT_CEILING_LAMBDAS};
use neurotune::synthworld::{generate_world, WorldConfig, TUNE_RUN};

fn main() -> neurotune::Result<()> {
    let cfg = WorldConfig::default();
    let world = generate_world(&cfg)?;
    let runs = world.subject_runs(TUNE_RUN);
    let est = estimate_ceilings(&runs, 728, 272, &DEFAULT_CEILING_LAMBDAS)?;
    for roi in &world.atlas.roi_names {
        let m = world.atlas.membership(std::slice::from_ref(roi))?;
        let v: Vec<f64> = est
            .ceilings
            .iter()
            .zip(&m)
            .filter(|(_, &b)| b)
            .map(|(c, _)| *c)
            .collect();
        println!("{roi:<6} mean ceiling {:.3}", v.iter().sum::<f64>() / v.len() as f64);
    }
    for k in 0..est.by_subset_size.rows() {
        let row = est.by_subset_size.row(k);
        println!(
            "predictor subset size {}: {:.3}",
            k + 1,
            row.iter().sum::<f64>() / row.len() as f64
        );
    }
    let thresholds = [0.0, 0.2, 0.4, 0.6, 0.8];
    for row in sweep_threshold(&est, &world.atlas, &cfg.target_rois, &thresholds)? {
        if row.subject == est.subject_ids[0] {
            println!(
                "threshold {:.1}: {} of {} target voxels",
                row.threshold,
                row.count,
                cfg.target_voxel_count()
            );
        }
    }
    Ok(())
}
