//! Every stage on the reduced smoke world, then the plotting tables.
//!
//!     cargo run --release --example full_pipeline [-- <out_dir>]

use neurotune::pipeline::{alignment_csv, probes_csv, run_pipeline, PipelineConfig};

fn main() -> neurotune::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("neurotune-smoke"), Into::into);
    let summary = run_pipeline(&PipelineConfig::smoke(&out))?;
    println!(
        "tuned {:?}, untunable {:?}",
        summary.tuned_subjects, summary.untunable_subjects
    );
    print!("{}", alignment_csv(&summary));
    print!("{}", probes_csv(&summary));
    println!("artifacts in {}", out.display());
    Ok(())
}
