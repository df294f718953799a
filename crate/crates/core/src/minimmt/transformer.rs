use super::layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, LnCache,
};
use super::ModelState;
use crate::error::{validation, Result};
use crate::matrix::MatrixF64;

/// Encoder outputs, `(1 + n) x d_model`; row 0 is the CLS output.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutputs {
    pub tokens: MatrixF64,
}

impl TokenOutputs {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows().saturating_sub(1)
    }
}

/// Replaces the content embedding of selected tokens with a learned vector.
/// Modality and positional embeddings are still added.
#[derive(Debug, Clone)]
pub struct TokenMask<'a> {
    /// One flag per non-CLS token, video tokens first.
    pub positions: &'a [bool],
    pub embedding: &'a [f64],
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: MatrixF64,
    q: MatrixF64,
    k: MatrixF64,
    v: MatrixF64,
    /// Per head, `N x N` attention probabilities.
    probs: Vec<MatrixF64>,
    ctx: MatrixF64,
    ln2: LnCache,
    b: MatrixF64,
    h_pre: MatrixF64,
    h_act: MatrixF64,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    video: MatrixF64,
    audio: MatrixF64,
    masked: Vec<bool>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: ModelState,
    /// Gradient w.r.t. the summed input embeddings, `(1 + n) x d_model`.
    pub d_embedded: MatrixF64,
    /// Gradient w.r.t. the mask embedding (zero when no mask was applied).
    pub d_mask_embedding: Vec<f64>,
    pub d_video: MatrixF64,
    pub d_audio: MatrixF64,
}

fn check_inputs(state: &ModelState, video: &MatrixF64, audio: &MatrixF64) -> Result<()> {
    let cfg = &state.config;
    if video.cols() != cfg.d_v || audio.cols() != cfg.d_a {
        return Err(validation(format!(
            "token dims ({}, {}) do not match model ({}, {})",
            video.cols(),
            audio.cols(),
            cfg.d_v,
            cfg.d_a
        )));
    }
    let n = video.rows() + audio.rows();
    if n == 0 {
        return Err(validation("no input tokens"));
    }
    if n + 1 > cfg.max_tokens {
        return Err(validation(format!(
            "{} tokens plus CLS exceed max_tokens {}",
            n, cfg.max_tokens
        )));
    }
    Ok(())
}

fn embed(
    state: &ModelState,
    video: &MatrixF64,
    audio: &MatrixF64,
    mask: Option<&TokenMask>,
) -> Result<(MatrixF64, Vec<bool>)> {
    let d = state.config.d_model;
    let nv = video.rows();
    let n = nv + audio.rows();
    let masked = match mask {
        Some(m) => {
            if m.positions.len() != n || m.embedding.len() != d {
                return Err(validation("token mask does not match token count / d_model"));
            }
            m.positions.to_vec()
        }
        None => vec![false; n],
    };
    let ev = video.matmul(&state.embed_video);
    let ea = audio.matmul(&state.embed_audio);
    let mut x = MatrixF64::zeros(n + 1, d);
    for r in 0..=n {
        let content: &[f64] = if r == 0 {
            state.cls.as_slice()
        } else if masked[r - 1] {
            mask.unwrap().embedding
        } else if r <= nv {
            ev.row(r - 1)
        } else {
            ea.row(r - 1 - nv)
        };
        let modality: Option<&[f64]> = match r {
            0 => None,
            _ if r <= nv => Some(state.modality.row(0)),
            _ => Some(state.modality.row(1)),
        };
        let pos = state.positional.row(r);
        let row = x.row_mut(r);
        for j in 0..d {
            row[j] = content[j] + pos[j] + modality.map_or(0.0, |m| m[j]);
        }
    }
    Ok((x, masked))
}

fn block_forward(layer: &super::LayerParams, x: &MatrixF64, n_heads: usize) -> (MatrixF64, LayerCache) {
    let (n, d) = x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, &layer.ln1_gain, &layer.ln1_bias);
    let q = linear(&a, &layer.w_q, &layer.b_q);
    let k = linear(&a, &layer.w_k, &layer.b_k);
    let v = linear(&a, &layer.w_v, &layer.b_v);
    let mut ctx = MatrixF64::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = MatrixF64::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let prow = p.row_mut(i);
            for j in 0..n {
                let kj = &k.row(j)[cols.clone()];
                prow[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(prow);
        }
        for i in 0..n {
            for j in 0..n {
                let pij = p.get(i, j);
                let vj = &v.row(j)[cols.clone()];
                let ci = &mut ctx.row_mut(i)[cols.clone()];
                for (c, vv) in ci.iter_mut().zip(vj) {
                    *c += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    let attn = linear(&ctx, &layer.w_o, &layer.b_o);
    let mut x_mid = x.clone();
    x_mid.add_assign(&attn);
    let (b, ln2) = layer_norm(&x_mid, &layer.ln2_gain, &layer.ln2_bias);
    let h_pre = linear(&b, &layer.w_ff1, &layer.b_ff1);
    let mut h_act = h_pre.clone();
    h_act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let mlp = linear(&h_act, &layer.w_ff2, &layer.b_ff2);
    let mut out = x_mid;
    out.add_assign(&mlp);
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b,
        h_pre,
        h_act,
    };
    (out, cache)
}

pub fn forward_cached(
    state: &ModelState,
    video: &MatrixF64,
    audio: &MatrixF64,
    mask: Option<&TokenMask>,
) -> Result<(TokenOutputs, ForwardCache)> {
    check_inputs(state, video, audio)?;
    let (mut x, masked) = embed(state, video, audio, mask)?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for layer in &state.layers {
        let (next, cache) = block_forward(layer, &x, state.config.n_heads);
        layers.push(cache);
        x = next;
    }
    let (out, final_ln) = layer_norm(&x, &state.final_ln_gain, &state.final_ln_bias);
    if !out.is_finite() {
        return Err(crate::error::Error::Numerical("non-finite transformer output".into()));
    }
    let cache = ForwardCache {
        video: video.clone(),
        audio: audio.clone(),
        masked,
        layers,
        final_ln,
    };
    Ok((TokenOutputs { tokens: out }, cache))
}

pub fn forward(state: &ModelState, video: &MatrixF64, audio: &MatrixF64) -> Result<TokenOutputs> {
    forward_cached(state, video, audio, None).map(|(o, _)| o)
}

/// Mean over the non-CLS output rows.
pub fn mean_pool(out: &TokenOutputs) -> Result<Vec<f64>> {
    let n = out.n_tokens();
    if n == 0 {
        return Err(validation("mean_pool needs at least one non-CLS token"));
    }
    let d = out.tokens.cols();
    let mut pooled = vec![0.0; d];
    for r in 1..=n {
        for (p, v) in pooled.iter_mut().zip(out.tokens.row(r)) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= n as f64);
    Ok(pooled)
}

pub fn cls_token(out: &TokenOutputs) -> &[f64] {
    out.tokens.row(0)
}

fn block_backward(
    layer: &super::LayerParams,
    grad: &mut super::LayerParams,
    cache: &LayerCache,
    dout: &MatrixF64,
    n_heads: usize,
) -> MatrixF64 {
    let (n, d) = dout.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP residual
    let d_act = linear_backward(dout, &cache.h_act, &layer.w_ff2, &mut grad.w_ff2, &mut grad.b_ff2);
    let mut d_pre = d_act;
    for (g, &x) in d_pre.as_mut_slice().iter_mut().zip(cache.h_pre.as_slice()) {
        *g *= gelu_grad(x);
    }
    let d_b = linear_backward(&d_pre, &cache.b, &layer.w_ff1, &mut grad.w_ff1, &mut grad.b_ff1);
    let mut d_mid = layer_norm_backward(
        &d_b,
        &cache.ln2,
        &layer.ln2_gain,
        &mut grad.ln2_gain,
        &mut grad.ln2_bias,
    );
    d_mid.add_assign(dout);

    // attention residual
    let d_ctx = linear_backward(&d_mid, &cache.ctx, &layer.w_o, &mut grad.w_o, &mut grad.b_o);
    let mut dq = MatrixF64::zeros(n, d);
    let mut dk = MatrixF64::zeros(n, d);
    let mut dv = MatrixF64::zeros(n, d);
    let mut dp = vec![0.0; n];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        for i in 0..n {
            let dci = &d_ctx.row(i)[cols.clone()];
            for j in 0..n {
                let vj = &cache.v.row(j)[cols.clone()];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                let pij = p.get(i, j);
                let dvj = &mut dv.row_mut(j)[cols.clone()];
                for (acc, g) in dvj.iter_mut().zip(dci) {
                    *acc += pij * g;
                }
            }
            let prow = p.row(i);
            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = cache.k.row(j)[cols.clone()].to_vec();
                let qi: Vec<f64> = cache.q.row(i)[cols.clone()].to_vec();
                for (acc, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                    *acc += ds * kv;
                }
                for (acc, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *acc += ds * qv;
                }
            }
        }
    }
    let mut d_a = linear_backward(&dq, &cache.a, &layer.w_q, &mut grad.w_q, &mut grad.b_q);
    d_a.add_assign(&linear_backward(
        &dk,
        &cache.a,
        &layer.w_k,
        &mut grad.w_k,
        &mut grad.b_k,
    ));
    d_a.add_assign(&linear_backward(
        &dv,
        &cache.a,
        &layer.w_v,
        &mut grad.w_v,
        &mut grad.b_v,
    ));
    let mut dx = layer_norm_backward(
        &d_a,
        &cache.ln1,
        &layer.ln1_gain,
        &mut grad.ln1_gain,
        &mut grad.ln1_bias,
    );
    dx.add_assign(&d_mid);
    dx
}

/// Reverse-mode gradients of a scalar whose gradient w.r.t. the output tokens is `d_tokens`.
pub fn backward(state: &ModelState, cache: &ForwardCache, d_tokens: &MatrixF64) -> Result<Backprop> {
    let d = state.config.d_model;
    let n_rows = cache.masked.len() + 1;
    if d_tokens.shape() != (n_rows, d) {
        return Err(validation(format!(
            "upstream gradient is {:?}, expected ({n_rows}, {d})",
            d_tokens.shape()
        )));
    }
    let mut grads = state.zeros_like();
    let mut dx = layer_norm_backward(
        d_tokens,
        &cache.final_ln,
        &state.final_ln_gain,
        &mut grads.final_ln_gain,
        &mut grads.final_ln_bias,
    );
    for (i, layer) in state.layers.iter().enumerate().rev() {
        dx = block_backward(layer, &mut grads.layers[i], &cache.layers[i], &dx, state.config.n_heads);
    }

    // embedding
    let nv = cache.video.rows();
    let n = n_rows - 1;
    let mut d_mask = vec![0.0; d];
    let mut dvid_rows = MatrixF64::zeros(nv, d);
    let mut daud_rows = MatrixF64::zeros(n - nv, d);
    for r in 0..n_rows {
        let g = dx.row(r).to_vec();
        for (acc, v) in grads.positional.row_mut(r).iter_mut().zip(&g) {
            *acc += v;
        }
        if r == 0 {
            for (acc, v) in grads.cls.as_mut_slice().iter_mut().zip(&g) {
                *acc += v;
            }
            continue;
        }
        let modality = if r <= nv { 0 } else { 1 };
        for (acc, v) in grads.modality.row_mut(modality).iter_mut().zip(&g) {
            *acc += v;
        }
        if cache.masked[r - 1] {
            for (acc, v) in d_mask.iter_mut().zip(&g) {
                *acc += v;
            }
        } else if r <= nv {
            dvid_rows.row_mut(r - 1).copy_from_slice(&g);
        } else {
            daud_rows.row_mut(r - 1 - nv).copy_from_slice(&g);
        }
    }
    grads.embed_video.add_assign(&cache.video.t_matmul(&dvid_rows));
    grads.embed_audio.add_assign(&cache.audio.t_matmul(&daud_rows));
    let d_video = dvid_rows.matmul_t(&state.embed_video);
    let d_audio = daud_rows.matmul_t(&state.embed_audio);
    Ok(Backprop {
        grads,
        d_embedded: dx,
        d_mask_embedding: d_mask,
        d_video,
        d_audio,
    })
}

/// Backward from a gradient on the mean-pooled output (CLS excluded).
pub fn backward_pooled(state: &ModelState, cache: &ForwardCache, d_pooled: &[f64]) -> Result<Backprop> {
    let d = state.config.d_model;
    if d_pooled.len() != d {
        return Err(validation("pooled gradient length != d_model"));
    }
    let n = cache.masked.len();
    let mut dt = MatrixF64::zeros(n + 1, d);
    for r in 1..=n {
        for (o, g) in dt.row_mut(r).iter_mut().zip(d_pooled) {
            *o = g / n as f64;
        }
    }
    backward(state, cache, &dt)
}
