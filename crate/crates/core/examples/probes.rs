//! Linear probes on frozen features: the latent the tuning ROIs read out,
//! a latent they do not, and a rare-label multi-label task.
//!
//!     cargo run --release --example probes

use neurotune::minimmt::{init_model, ModelConfig};
use neurotune::probes::{
    emotion_like_task, latent_probe_task, probe_features, run_probe, LatentSource, DEFAULT_PROBE_L2,
};
use neurotune::synthworld::{generate_world, WorldConfig};

fn main() -> neurotune::Result<()> {
    let wc = WorldConfig {
        tune_trs: 200,
        eval_trs: 200,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc)?;
    let l = wc.layout;
    let state = init_model(ModelConfig::new(l.d_v, l.d_a, l.n_tokens() + 1), 1)?;
    let tasks = [
        latent_probe_task(&world, 300, 3, LatentSource::Target, 10)?,
        latent_probe_task(&world, 300, 4, LatentSource::Independent, 10)?,
        emotion_like_task(&world, 300, 5)?,
    ];
    for task in &tasks {
        let x = probe_features(&state, task)?;
        let r = run_probe(task, &x, DEFAULT_PROBE_L2)?;
        print!("{:<20} A2 {:.3}  F1 {:.3}", r.task, r.a2_accuracy, r.f1);
        if let (Some(wa), Some(wf)) = (r.weighted_a2, r.weighted_f1) {
            print!("  weighted A2 {wa:.3}  weighted F1 {wf:.3}");
        }
        println!("  ({} splits)", r.per_fold.len());
    }
    Ok(())
}
