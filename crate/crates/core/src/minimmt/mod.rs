//! Minimal joint audio-video transformer with exact reverse-mode gradients.
//!
//! Token layout fed to the encoder: `[CLS, video_0..video_{Nv-1}, audio_0..audio_{Na-1}]`.
//! Blocks are pre-norm (`x + MHSA(LN(x))`, then `x + MLP(LN(x))`, GELU MLP),
//! followed by a final LayerNorm.

mod layers;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::matrix::MatrixF64;
use crate::params::ParamSet;

pub use transformer::{
    backward, backward_pooled, cls_token, forward, forward_cached, mean_pool, Backprop, ForwardCache, TokenMask,
    TokenOutputs,
};

/// Std of the learned embedding tables (modality, position, CLS) at init.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub max_tokens: usize,
}

impl ModelConfig {
    pub fn new(d_v: usize, d_a: usize, max_tokens: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            d_v,
            d_a,
            max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(validation(format!("model dims must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_v == 0 || self.d_a == 0 || self.max_tokens < 2 {
            return Err(validation("input dims must be >= 1 and max_tokens >= 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: MatrixF64,
    pub ln1_bias: MatrixF64,
    pub w_q: MatrixF64,
    pub b_q: MatrixF64,
    pub w_k: MatrixF64,
    pub b_k: MatrixF64,
    pub w_v: MatrixF64,
    pub b_v: MatrixF64,
    pub w_o: MatrixF64,
    pub b_o: MatrixF64,
    pub ln2_gain: MatrixF64,
    pub ln2_bias: MatrixF64,
    pub w_ff1: MatrixF64,
    pub b_ff1: MatrixF64,
    pub w_ff2: MatrixF64,
    pub b_ff2: MatrixF64,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |r, c| MatrixF64::zeros(r, c);
        LayerParams {
            ln1_gain: z(1, d),
            ln1_bias: z(1, d),
            w_q: z(d, d),
            b_q: z(1, d),
            w_k: z(d, d),
            b_k: z(1, d),
            w_v: z(d, d),
            b_v: z(1, d),
            w_o: z(d, d),
            b_o: z(1, d),
            ln2_gain: z(1, d),
            ln2_bias: z(1, d),
            w_ff1: z(d, cfg.d_ff),
            b_ff1: z(1, cfg.d_ff),
            w_ff2: z(cfg.d_ff, d),
            b_ff2: z(1, d),
        }
    }

    fn named(&self) -> [(&'static str, &MatrixF64); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_ff1", &self.w_ff1),
            ("b_ff1", &self.b_ff1),
            ("w_ff2", &self.w_ff2),
            ("b_ff2", &self.b_ff2),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut MatrixF64); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_ff1", &mut self.w_ff1),
            ("b_ff1", &mut self.b_ff1),
            ("w_ff2", &mut self.w_ff2),
            ("b_ff2", &mut self.b_ff2),
        ]
    }
}

/// All transformer parameters. Also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embed_video: MatrixF64,
    pub embed_audio: MatrixF64,
    /// Row 0 video, row 1 audio.
    pub modality: MatrixF64,
    pub positional: MatrixF64,
    pub cls: MatrixF64,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: MatrixF64,
    pub final_ln_bias: MatrixF64,
}

impl ModelState {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        ModelState {
            config,
            embed_video: MatrixF64::zeros(config.d_v, d),
            embed_audio: MatrixF64::zeros(config.d_a, d),
            modality: MatrixF64::zeros(2, d),
            positional: MatrixF64::zeros(config.max_tokens, d),
            cls: MatrixF64::zeros(1, d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(&config)).collect(),
            final_ln_gain: MatrixF64::zeros(1, d),
            final_ln_bias: MatrixF64::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelState::zeros(self.config)
    }
}

impl ParamSet for ModelState {
    fn tensors(&self) -> Vec<(String, &MatrixF64)> {
        let mut out: Vec<(String, &MatrixF64)> = vec![
            ("embed_video".into(), &self.embed_video),
            ("embed_audio".into(), &self.embed_audio),
            ("modality".into(), &self.modality),
            ("positional".into(), &self.positional),
            ("cls".into(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, m)| (format!("layer{i}.{n}"), m)));
        }
        out.push(("final_ln_gain".into(), &self.final_ln_gain));
        out.push(("final_ln_bias".into(), &self.final_ln_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut MatrixF64)> {
        let mut out: Vec<(String, &mut MatrixF64)> = vec![
            ("embed_video".into(), &mut self.embed_video),
            ("embed_audio".into(), &mut self.embed_audio),
            ("modality".into(), &mut self.modality),
            ("positional".into(), &mut self.positional),
            ("cls".into(), &mut self.cls),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, m)| (format!("layer{i}.{n}"), m)));
        }
        out.push(("final_ln_gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln_bias".into(), &mut self.final_ln_bias));
        out
    }
}

fn fill_normal(m: &mut MatrixF64, rng: &mut impl Rng, std: f64) {
    for v in m.as_mut_slice() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Linear maps ~ N(0, 1/fan_in), LayerNorm gains 1, biases 0.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ModelState::zeros(config);
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    fill_normal(&mut s.embed_video, &mut rng, fan(config.d_v));
    fill_normal(&mut s.embed_audio, &mut rng, fan(config.d_a));
    fill_normal(&mut s.modality, &mut rng, EMBEDDING_INIT_STD);
    fill_normal(&mut s.positional, &mut rng, EMBEDDING_INIT_STD);
    fill_normal(&mut s.cls, &mut rng, EMBEDDING_INIT_STD);
    for l in &mut s.layers {
        l.ln1_gain.fill(1.0);
        l.ln2_gain.fill(1.0);
        for w in [&mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.w_o, &mut l.w_ff1] {
            fill_normal(w, &mut rng, fan(config.d_model));
        }
        fill_normal(&mut l.w_ff2, &mut rng, fan(config.d_ff));
    }
    s.final_ln_gain.fill(1.0);
    Ok(s)
}
