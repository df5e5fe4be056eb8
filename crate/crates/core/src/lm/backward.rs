//! Exact analytic gradients for the next-token cross-entropy objective.
//!
//! The backward pass consumes the activation caches captured by a
//! `Mode::Train` forward pass and accumulates parameter gradients in the
//! canonical tensor order, layer-major, so identical inputs always produce
//! bit-identical gradients.

use rand_chacha::ChaCha8Rng;

use super::forward::{forward, Batch, Cache, ForwardOpts, Mode, RopeTable, NORM_EPS};
use super::LMParams;
use crate::error::{Error, Result};
use crate::linalg::{gemm, softmax_in_place, Real, Trans};

pub struct LossOutput<T> {
    /// Mean next-token cross-entropy over the predicted positions.
    pub loss: f64,
    pub grads: LMParams<T>,
    /// Number of target positions that entered the mean.
    pub n_predicted: usize,
}

/// Mean next-token cross-entropy and exact gradients for one batch.
///
/// `target_mask`, when given, is laid out like the token buffer and gates
/// which *target* positions contribute (position 0 of each sequence is
/// never a target). Masked positions contribute exactly zero loss and
/// gradient. The `rng` drives dropout when the config enables it.
pub fn loss_and_grads<T: Real>(
    params: &LMParams<T>,
    batch: Batch,
    target_mask: Option<&[bool]>,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput<T>> {
    if batch.seq < 2 {
        return Err(Error::data("loss needs sequences of length >= 2"));
    }
    if let Some(mask) = target_mask {
        if mask.len() != batch.tokens.len() {
            return Err(Error::data("target mask length does not match batch"));
        }
    }
    let opts = ForwardOpts {
        mode: Mode::Train,
        causal: true,
        valid_len: None,
    };
    let mut fwd = forward(params, batch, opts, Some(rng))?;
    let cache = fwd.cache.take().expect("train forward keeps cache");

    let (b_n, seq, v_dim) = (fwd.batch, fwd.seq, fwd.vocab);
    let included = |b: usize, t: usize| target_mask.map_or(true, |m| m[b * seq + t]);
    let mut n_predicted = 0usize;
    for b in 0..b_n {
        for t in 1..seq {
            if included(b, t) {
                n_predicted += 1;
            }
        }
    }
    if n_predicted == 0 {
        return Err(Error::data("target mask excludes every position"));
    }

    // dlogits = (softmax - onehot) / n_predicted at predicting positions
    let mut dlogits = vec![T::ZERO; b_n * seq * v_dim];
    let mut loss_sum = 0.0f64;
    let inv_n = T::ONE / T::from_f64(n_predicted as f64);
    for b in 0..b_n {
        for t in 0..seq - 1 {
            if !included(b, t + 1) {
                continue;
            }
            let target = batch.tokens[b * seq + t + 1] as usize;
            let row_off = (b * seq + t) * v_dim;
            let mut probs = fwd.logits[row_off..row_off + v_dim].to_vec();
            softmax_in_place(&mut probs);
            let nll = -probs[target].to_f64().ln();
            if !nll.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at batch index {b}, position {t}"
                )));
            }
            loss_sum += nll;
            let drow = &mut dlogits[row_off..row_off + v_dim];
            for (dst, &p) in drow.iter_mut().zip(&probs) {
                *dst = p * inv_n;
            }
            drow[target] -= inv_n;
        }
    }
    let loss = loss_sum / n_predicted as f64;

    let mut grads = LMParams::zeros(&params.config);
    let rows = b_n * seq;
    let d = params.config.d_model;

    // head: logits = final_normed . head
    gemm(
        Trans::Yes,
        Trans::No,
        d,
        v_dim,
        rows,
        T::ONE,
        &fwd.final_normed,
        &dlogits,
        T::ZERO,
        &mut grads.head,
    );
    let mut d_final_normed = vec![T::ZERO; rows * d];
    gemm(
        Trans::No,
        Trans::Yes,
        rows,
        d,
        v_dim,
        T::ONE,
        &dlogits,
        &params.head,
        T::ZERO,
        &mut d_final_normed,
    );

    backward_from_final_normed(params, &cache, &d_final_normed, &mut grads);
    Ok(LossOutput {
        loss,
        grads,
        n_predicted,
    })
}

/// Backpropagate from a gradient on the final normalized hidden states all
/// the way to embeddings, accumulating into `grads`. Shared by the LM loss
/// and by the encoder classifier head.
pub(crate) fn backward_from_final_normed<T: Real>(
    params: &LMParams<T>,
    cache: &Cache<T>,
    d_final_normed: &[T],
    grads: &mut LMParams<T>,
) {
    let cfg = &params.config;
    let (b_n, seq) = (cache.batch, cache.seq);
    let rows = b_n * seq;
    let d = cfg.d_model;
    let f_dim = cfg.d_ffn;
    let h_n = cfg.n_heads;
    let hd = cfg.head_dim();
    let kv_dim = cfg.kv_dim();
    let group = h_n / cfg.n_kv_heads;
    let inv_sqrt_hd = T::from_f64(1.0 / (hd as f64).sqrt());
    let rope = RopeTable::<T>::new(seq, hd);

    // final norm
    let mut dx = vec![T::ZERO; rows * d];
    rms_norm_backward(
        &cache.final_norm_in,
        &params.final_norm,
        d_final_normed,
        &mut dx,
        &mut grads.final_norm,
    );

    for (layer_idx, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[layer_idx];
        let lg = &mut grads.layers[layer_idx];

        // ---- FFN block: x_out = x_in + drop(swiglu . w_down) ----
        let mut d_ffn_out = dx.clone();
        if let Some(scales) = &lc.ffn_drop {
            for (g, &m) in d_ffn_out.iter_mut().zip(scales) {
                *g *= m;
            }
        }
        gemm(Trans::Yes, Trans::No, f_dim, d, rows, T::ONE, &lc.swiglu, &d_ffn_out, T::ONE, &mut lg.w_down);
        let mut d_swiglu = vec![T::ZERO; rows * f_dim];
        gemm(Trans::No, Trans::Yes, rows, f_dim, d, T::ONE, &d_ffn_out, &layer.w_down, T::ZERO, &mut d_swiglu);

        let mut d_gate_pre = vec![T::ZERO; rows * f_dim];
        let mut d_up = vec![T::ZERO; rows * f_dim];
        for i in 0..rows * f_dim {
            let g = lc.gate_pre[i];
            let sig = T::ONE / (T::ONE + (-g).exp());
            let silu = g * sig;
            d_up[i] = d_swiglu[i] * silu;
            // d silu(g)/dg = sig * (1 + g * (1 - sig))
            d_gate_pre[i] = d_swiglu[i] * lc.up[i] * sig * (T::ONE + g * (T::ONE - sig));
        }
        gemm(Trans::Yes, Trans::No, d, f_dim, rows, T::ONE, &lc.ffn_normed, &d_gate_pre, T::ONE, &mut lg.w_gate);
        gemm(Trans::Yes, Trans::No, d, f_dim, rows, T::ONE, &lc.ffn_normed, &d_up, T::ONE, &mut lg.w_up);
        let mut d_ffn_normed = vec![T::ZERO; rows * d];
        gemm(Trans::No, Trans::Yes, rows, d, f_dim, T::ONE, &d_gate_pre, &layer.w_gate, T::ZERO, &mut d_ffn_normed);
        gemm(Trans::No, Trans::Yes, rows, d, f_dim, T::ONE, &d_up, &layer.w_up, T::ONE, &mut d_ffn_normed);
        rms_norm_backward(
            &lc.ffn_norm_in,
            &layer.ffn_norm,
            &d_ffn_normed,
            &mut dx,
            &mut lg.ffn_norm,
        );

        // ---- attention block: x_mid = x_in + attn_concat . wo ----
        let d_attn_out = dx.clone();
        gemm(Trans::Yes, Trans::No, d, d, rows, T::ONE, &lc.attn_concat, &d_attn_out, T::ONE, &mut lg.wo);
        let mut d_attn_concat = vec![T::ZERO; rows * d];
        gemm(Trans::No, Trans::Yes, rows, d, d, T::ONE, &d_attn_out, &layer.wo, T::ZERO, &mut d_attn_concat);

        let mut dq = vec![T::ZERO; rows * d];
        let mut dk = vec![T::ZERO; rows * kv_dim];
        let mut dv = vec![T::ZERO; rows * kv_dim];
        let mut qh = vec![T::ZERO; seq * hd];
        let mut kh = vec![T::ZERO; seq * hd];
        let mut vh = vec![T::ZERO; seq * hd];
        let mut d_out_h = vec![T::ZERO; seq * hd];
        let mut probs_eff = vec![T::ZERO; seq * seq];
        let mut d_probs = vec![T::ZERO; seq * seq];
        let mut d_scores = vec![T::ZERO; seq * seq];
        let mut dqh = vec![T::ZERO; seq * hd];
        let mut dkh = vec![T::ZERO; seq * hd];
        let mut dvh = vec![T::ZERO; seq * hd];
        for b in 0..b_n {
            for h in 0..h_n {
                let kvh = h / group;
                for t in 0..seq {
                    let q_off = (b * seq + t) * d + h * hd;
                    qh[t * hd..(t + 1) * hd].copy_from_slice(&lc.q_rot[q_off..q_off + hd]);
                    let k_off = (b * seq + t) * kv_dim + kvh * hd;
                    kh[t * hd..(t + 1) * hd].copy_from_slice(&lc.k_rot[k_off..k_off + hd]);
                    vh[t * hd..(t + 1) * hd].copy_from_slice(&lc.v[k_off..k_off + hd]);
                    let c_off = (b * seq + t) * d + h * hd;
                    d_out_h[t * hd..(t + 1) * hd]
                        .copy_from_slice(&d_attn_concat[c_off..c_off + hd]);
                }
                let p_off = (b * h_n + h) * seq * seq;
                let probs = &lc.probs[p_off..p_off + seq * seq];
                // probs actually used in the forward matmul (post-dropout)
                match &lc.attn_drop {
                    Some(scales) => {
                        let sc = &scales[p_off..p_off + seq * seq];
                        for i in 0..seq * seq {
                            probs_eff[i] = probs[i] * sc[i];
                        }
                    }
                    None => probs_eff.copy_from_slice(probs),
                }
                // dvh = probs_eff^T . d_out_h
                gemm(Trans::Yes, Trans::No, seq, hd, seq, T::ONE, &probs_eff, &d_out_h, T::ZERO, &mut dvh);
                // d_probs(dropped) = d_out_h . vh^T
                gemm(Trans::No, Trans::Yes, seq, seq, hd, T::ONE, &d_out_h, &vh, T::ZERO, &mut d_probs);
                if let Some(scales) = &lc.attn_drop {
                    let sc = &scales[p_off..p_off + seq * seq];
                    for i in 0..seq * seq {
                        d_probs[i] *= sc[i];
                    }
                }
                // softmax backward row-wise; masked entries have p = 0
                for t in 0..seq {
                    let p_row = &probs[t * seq..(t + 1) * seq];
                    let dp_row = &d_probs[t * seq..(t + 1) * seq];
                    let inner: T = p_row.iter().zip(dp_row).map(|(&p, &dp)| p * dp).sum();
                    let ds_row = &mut d_scores[t * seq..(t + 1) * seq];
                    for s in 0..seq {
                        ds_row[s] = p_row[s] * (dp_row[s] - inner) * inv_sqrt_hd;
                    }
                }
                // dqh = d_scores . kh ; dkh = d_scores^T . qh
                gemm(Trans::No, Trans::No, seq, hd, seq, T::ONE, &d_scores, &kh, T::ZERO, &mut dqh);
                gemm(Trans::Yes, Trans::No, seq, hd, seq, T::ONE, &d_scores, &qh, T::ZERO, &mut dkh);
                for t in 0..seq {
                    let q_off = (b * seq + t) * d + h * hd;
                    dq[q_off..q_off + hd].copy_from_slice(&dqh[t * hd..(t + 1) * hd]);
                    let k_off = (b * seq + t) * kv_dim + kvh * hd;
                    for (dst, &src) in dk[k_off..k_off + hd].iter_mut().zip(&dkh[t * hd..(t + 1) * hd]) {
                        *dst += src;
                    }
                    for (dst, &src) in dv[k_off..k_off + hd].iter_mut().zip(&dvh[t * hd..(t + 1) * hd]) {
                        *dst += src;
                    }
                }
            }
        }
        // undo the rotary transform on the gradients
        for b in 0..b_n {
            for t in 0..seq {
                rope.apply(&mut dq[(b * seq + t) * d..(b * seq + t + 1) * d], t, true);
                rope.apply(
                    &mut dk[(b * seq + t) * kv_dim..(b * seq + t + 1) * kv_dim],
                    t,
                    true,
                );
            }
        }
        gemm(Trans::Yes, Trans::No, d, d, rows, T::ONE, &lc.attn_normed, &dq, T::ONE, &mut lg.wq);
        gemm(Trans::Yes, Trans::No, d, kv_dim, rows, T::ONE, &lc.attn_normed, &dk, T::ONE, &mut lg.wk);
        gemm(Trans::Yes, Trans::No, d, kv_dim, rows, T::ONE, &lc.attn_normed, &dv, T::ONE, &mut lg.wv);
        let mut d_attn_normed = vec![T::ZERO; rows * d];
        gemm(Trans::No, Trans::Yes, rows, d, d, T::ONE, &dq, &layer.wq, T::ZERO, &mut d_attn_normed);
        gemm(Trans::No, Trans::Yes, rows, d, kv_dim, T::ONE, &dk, &layer.wk, T::ONE, &mut d_attn_normed);
        gemm(Trans::No, Trans::Yes, rows, d, kv_dim, T::ONE, &dv, &layer.wv, T::ONE, &mut d_attn_normed);
        rms_norm_backward(
            &lc.attn_norm_in,
            &layer.attn_norm,
            &d_attn_normed,
            &mut dx,
            &mut lg.attn_norm,
        );
    }

    // embedding rows, accumulated in (b, t) order
    let scale = if cfg.scaled_embed {
        T::from_f64((cfg.d_model as f64).sqrt())
    } else {
        T::ONE
    };
    for (pos, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[pos * d..(pos + 1) * d];
        let dst = &mut grads.embed[tok as usize * d..(tok as usize + 1) * d];
        for (g, &v) in dst.iter_mut().zip(row) {
            *g += v * scale;
        }
    }
}

/// RMS-norm backward: accumulates dgain and *adds* the input gradient into
/// `dx_accum` (callers carry the residual-stream gradient there).
fn rms_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    dy: &[T],
    dx_accum: &mut [T],
    dgain: &mut [T],
) {
    let d = gain.len();
    let d_t = T::from_f64(d as f64);
    for ((x_row, dy_row), dx_row) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx_accum.chunks_exact_mut(d))
    {
        let ms: T = x_row.iter().map(|&v| v * v).sum::<T>() / d_t;
        let inv = T::ONE / (ms + T::from_f64(NORM_EPS)).sqrt();
        let mut inner = T::ZERO;
        for i in 0..d {
            dgain[i] += dy_row[i] * x_row[i] * inv;
            inner += dy_row[i] * gain[i] * x_row[i];
        }
        let inv3_over_d = inv * inv * inv / d_t;
        for i in 0..d {
            dx_row[i] += gain[i] * dy_row[i] * inv - x_row[i] * inner * inv3_over_d;
        }
    }
}

/// Per-target-position next-token loss in eval mode (no dropout).
///
/// Returns a buffer shaped like the token batch: entry (b, t) holds the
/// cross-entropy of predicting token t from position t-1, and is exactly
/// zero for t = 0 and for masked-off targets.
pub fn per_position_loss<T: Real>(
    params: &LMParams<T>,
    batch: Batch,
    target_mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let fwd = forward(params, batch, ForwardOpts::default(), None)?;
    let (b_n, seq) = (fwd.batch, fwd.seq);
    let included = |b: usize, t: usize| target_mask.map_or(true, |m| m[b * seq + t]);
    let mut out = vec![0.0f64; b_n * seq];
    for b in 0..b_n {
        for t in 1..seq {
            if !included(b, t) {
                continue;
            }
            let target = batch.tokens[b * seq + t] as usize;
            let mut probs = fwd.logit_row(b, t - 1).to_vec();
            softmax_in_place(&mut probs);
            out[b * seq + t] = -probs[target].to_f64().ln();
        }
    }
    Ok(out)
}
