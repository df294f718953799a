//! Generate the default synthetic world and optionally write it as a dataset.
//!
//!     cargo run --release --example synth_world [-- <out_dir>]

use neurotune::pipeline::write_world;
use neurotune::synthworld::{generate_world, WorldConfig, EVAL_RUN, TUNE_RUN};

fn main() -> neurotune::Result<()> {
    let cfg = WorldConfig::default();
    let world = generate_world(&cfg)?;
    println!("subjects {}  voxels {}", cfg.n_subjects, world.atlas.n_voxels());
    for (name, n) in world.atlas.counts() {
        println!("  {name:<6} {n}");
    }
    for run in [TUNE_RUN, EVAL_RUN] {
        let s = world.stimulus(run).unwrap();
        let b = &world.subject_runs(run)[0];
        println!(
            "{run}: {} TRs, video {:?}, audio {:?}, bold {:?}",
            s.n_trs(),
            s.video_tokens.shape(),
            s.audio_tokens.shape(),
            b.responses.shape()
        );
    }
    if let Some(dir) = std::env::args().nth(1) {
        let manifest = write_world(&world, dir.as_ref())?;
        println!("wrote {}", manifest.display());
    }
    Ok(())
}
