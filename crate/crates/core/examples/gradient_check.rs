//! Central finite differences against the hand-written backward pass of the
//! brain-tuning loss, on a few random mini transformers.
//!
//!     cargo run --release --example gradient_check

use neurotune::braintune::{brain_tune_loss, ProjectionHead};
use neurotune::data::{PairedSample, Window};
use neurotune::minimmt::{init_model, ModelConfig};
use neurotune::params::{check_gradients, ParamSet};
use neurotune::MatrixF64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> neurotune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for trial in 0..5 {
        let (nv, na) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            d_v: rng.random_range(1..=5),
            d_a: rng.random_range(1..=5),
            max_tokens: nv + na + 1,
        };
        // a random point around init keeps LayerNorm inputs well spread, so
        // h = 1e-4 differences are accurate references
        let mut state = init_model(cfg, trial)?;
        for (_, t) in state.tensors_mut() {
            for v in t.as_mut_slice() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let mut rand_mat = |r, c| MatrixF64::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let sample = PairedSample {
            window: Window {
                run_id: "demo".into(),
                target_tr: 0,
                window_start: 0,
                video: rand_mat(nv, cfg.d_v),
                audio: rand_mat(na, cfg.d_a),
            },
            y: rand_mat(1, 3).into_vec(),
        };
        let mut head = ProjectionHead::zeros(3, cfg.d_model, true);
        head.w = rand_mat(3, cfg.d_model);
        head.bias = rand_mat(1, 3);
        let (value, grads) = brain_tune_loss(&state, &head, &sample)?;
        let floor = 1e-6 * (1.0 + value.abs());
        let loss = |s: &_| brain_tune_loss(s, &head, &sample).unwrap().0;
        let m = check_gradients(&state, &grads.model, 1e-4, floor, loss);
        let loss = |h: &_| brain_tune_loss(&state, h, &sample).unwrap().0;
        let h = check_gradients(&head, &grads.head, 1e-4, floor, loss);
        println!(
            "trial {trial}: {} tokens, {} params, max rel err {:.2e} (worst {}[{}])",
            nv + na,
            m.n_checked + h.n_checked,
            m.max_rel_error.max(h.max_rel_error),
            m.worst.0,
            m.worst.1
        );
    }
    Ok(())
}
