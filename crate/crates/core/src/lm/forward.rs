//! Forward pass: batched scoring (with activation caches for the backward
//! pass) and incremental single-token generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::LMParams;
use crate::error::{Error, Result};
use crate::linalg::{gemm, softmax_in_place, Real, Trans};

pub(crate) const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Flat row-major token batch: `tokens[b * seq + t]`.
#[derive(Clone, Copy)]
pub struct Batch<'a> {
    pub tokens: &'a [u32],
    pub batch: usize,
    pub seq: usize,
}

impl<'a> Batch<'a> {
    pub fn single(tokens: &'a [u32]) -> Self {
        Batch {
            tokens,
            batch: 1,
            seq: tokens.len(),
        }
    }
}

#[derive(Clone, Copy)]
pub struct ForwardOpts<'a> {
    pub mode: Mode,
    /// Causal masking for language modeling; `false` gives the
    /// bidirectional variant used by the encoder classifier.
    pub causal: bool,
    /// Per-sequence count of real (non padding) positions. Padding keys are
    /// masked out of bidirectional attention; padded positions still flow
    /// through position-wise blocks but carry no information into others.
    pub valid_len: Option<&'a [usize]>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            mode: Mode::Eval,
            causal: true,
            valid_len: None,
        }
    }
}

pub(crate) struct LayerCache<T> {
    pub attn_norm_in: Vec<T>, // B*T*D
    pub attn_normed: Vec<T>,  // B*T*D
    pub q_rot: Vec<T>,        // B*T*D
    pub k_rot: Vec<T>,        // B*T*KV
    pub v: Vec<T>,            // B*T*KV
    pub probs: Vec<T>,        // B*H*T*T, post-softmax pre-dropout
    pub attn_drop: Option<Vec<T>>, // B*H*T*T dropout scales
    pub attn_concat: Vec<T>,  // B*T*D
    pub ffn_norm_in: Vec<T>,  // B*T*D
    pub ffn_normed: Vec<T>,   // B*T*D
    pub gate_pre: Vec<T>,     // B*T*F
    pub up: Vec<T>,           // B*T*F
    pub swiglu: Vec<T>,       // B*T*F
    pub ffn_drop: Option<Vec<T>>, // B*T*D dropout scales
}

pub(crate) struct Cache<T> {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    pub causal: bool,
    pub valid_len: Vec<usize>,
    pub layers: Vec<LayerCache<T>>,
    pub final_norm_in: Vec<T>,
}

/// Result of a batched forward pass. `logits[(b*seq + t) * vocab + w]`.
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    /// Final normalized hidden states (batch*seq*d_model); the encoder
    /// classifier pools these.
    pub(crate) final_normed: Vec<T>,
    pub(crate) cache: Option<Cache<T>>,
}

impl<T: Real> Forward<T> {
    pub fn logit_row(&self, b: usize, t: usize) -> &[T] {
        let start = (b * self.seq + t) * self.vocab;
        &self.logits[start..start + self.vocab]
    }
}

fn validate_batch<T: Real>(params: &LMParams<T>, batch: Batch, opts: &ForwardOpts) -> Result<()> {
    let cfg = &params.config;
    if batch.batch == 0 || batch.seq == 0 {
        return Err(Error::data("empty batch"));
    }
    if batch.tokens.len() != batch.batch * batch.seq {
        return Err(Error::data(format!(
            "token buffer length {} does not match {}x{}",
            batch.tokens.len(),
            batch.batch,
            batch.seq
        )));
    }
    if batch.seq > cfg.max_seq_len {
        return Err(Error::data(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq, cfg.max_seq_len
        )));
    }
    for (i, &tok) in batch.tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::data(format!(
                "token id {tok} out of range at batch {} position {}",
                i / batch.seq,
                i % batch.seq
            )));
        }
    }
    if let Some(lens) = opts.valid_len {
        if lens.len() != batch.batch {
            return Err(Error::data("valid_len length does not match batch"));
        }
        for &l in lens {
            if l == 0 || l > batch.seq {
                return Err(Error::data(format!("valid_len {l} out of range")));
            }
        }
    }
    Ok(())
}

/// Token embedding lookup, including the optional sqrt(d_model) scaling.
pub(crate) fn embed_batch<T: Real>(params: &LMParams<T>, tokens: &[u32]) -> Vec<T> {
    let d = params.config.d_model;
    let scale = if params.config.scaled_embed {
        T::from_f64((params.config.d_model as f64).sqrt())
    } else {
        T::ONE
    };
    let mut x = vec![T::ZERO; tokens.len() * d];
    for (pos, &tok) in tokens.iter().enumerate() {
        let src = &params.embed[tok as usize * d..(tok as usize + 1) * d];
        let dst = &mut x[pos * d..(pos + 1) * d];
        for (o, &e) in dst.iter_mut().zip(src) {
            *o = e * scale;
        }
    }
    x
}

pub(crate) fn rms_norm_rows<T: Real>(x: &[T], gain: &[T], out: &mut [T]) {
    let d = gain.len();
    for (row_in, row_out) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms: T = row_in.iter().map(|&v| v * v).sum::<T>() / T::from_f64(d as f64);
        let inv = T::ONE / (ms + T::from_f64(NORM_EPS)).sqrt();
        for ((o, &v), &g) in row_out.iter_mut().zip(row_in).zip(gain) {
            *o = v * inv * g;
        }
    }
}

/// cos/sin tables: entry `(pos, i)` holds the rotation for dimension pair
/// (2i, 2i+1) at position `pos`.
pub(crate) struct RopeTable<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
    pub half: usize,
}

impl<T: Real> RopeTable<T> {
    pub fn new(seq: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        RopeTable { cos, sin, half }
    }

    /// Rotate every head-dim pair of `row` (one position, several heads).
    /// `invert` applies the inverse rotation (used by the backward pass).
    pub fn apply(&self, row: &mut [T], pos: usize, invert: bool) {
        let half = self.half;
        for pair in row.chunks_exact_mut(2 * half) {
            for i in 0..half {
                let c = self.cos[pos * half + i];
                let s = if invert {
                    -self.sin[pos * half + i]
                } else {
                    self.sin[pos * half + i]
                };
                let a = pair[2 * i];
                let b = pair[2 * i + 1];
                pair[2 * i] = a * c - b * s;
                pair[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

fn draw_dropout_scales<T: Real>(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| {
            if rng.gen_range(0.0..1.0f64) < rate {
                T::ZERO
            } else {
                keep
            }
        })
        .collect()
}

/// Causal (or bidirectional) scoring pass over a fixed-length batch.
///
/// In `Mode::Train` the returned [`Forward`] retains the activation caches
/// consumed by [`loss_and_grads`](super::loss_and_grads), and `rng` drives
/// dropout when `dropout_rate > 0`. `Mode::Eval` disables dropout and is
/// bit-deterministic in its inputs.
pub fn forward<T: Real>(
    params: &LMParams<T>,
    batch: Batch,
    opts: ForwardOpts,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward<T>> {
    validate_batch(params, batch, &opts)?;
    let cfg = &params.config;
    let (b_n, seq) = (batch.batch, batch.seq);
    let rows = b_n * seq;
    let d = cfg.d_model;
    let v_dim = cfg.vocab_size;
    let h_n = cfg.n_heads;
    let hd = cfg.head_dim();
    let kv_dim = cfg.kv_dim();
    let group = h_n / cfg.n_kv_heads;
    let f_dim = cfg.d_ffn;
    let keep_cache = opts.mode == Mode::Train;
    let dropout = if opts.mode == Mode::Train {
        cfg.dropout_rate
    } else {
        0.0
    };
    if dropout > 0.0 && rng.is_none() {
        return Err(Error::config("training forward with dropout needs an rng"));
    }
    let valid: Vec<usize> = match opts.valid_len {
        Some(lens) => lens.to_vec(),
        None => vec![seq; b_n],
    };
    let rope = RopeTable::<T>::new(seq, hd);
    let inv_sqrt_hd = T::from_f64(1.0 / (hd as f64).sqrt());
    let neg_inf = T::from_f64(f64::NEG_INFINITY);

    let mut x = embed_batch(params, batch.tokens);
    let mut layer_caches: Vec<LayerCache<T>> = Vec::new();

    for layer in &params.layers {
        let attn_norm_in = x.clone();
        let mut normed = vec![T::ZERO; rows * d];
        rms_norm_rows(&x, &layer.attn_norm, &mut normed);

        let mut q = vec![T::ZERO; rows * d];
        let mut k = vec![T::ZERO; rows * kv_dim];
        let mut v = vec![T::ZERO; rows * kv_dim];
        gemm(Trans::No, Trans::No, rows, d, d, T::ONE, &normed, &layer.wq, T::ZERO, &mut q);
        gemm(Trans::No, Trans::No, rows, kv_dim, d, T::ONE, &normed, &layer.wk, T::ZERO, &mut k);
        gemm(Trans::No, Trans::No, rows, kv_dim, d, T::ONE, &normed, &layer.wv, T::ZERO, &mut v);
        for b in 0..b_n {
            for t in 0..seq {
                rope.apply(&mut q[(b * seq + t) * d..(b * seq + t + 1) * d], t, false);
                rope.apply(&mut k[(b * seq + t) * kv_dim..(b * seq + t + 1) * kv_dim], t, false);
            }
        }

        let mut probs = vec![T::ZERO; b_n * h_n * seq * seq];
        let mut attn_concat = vec![T::ZERO; rows * d];
        let mut qh = vec![T::ZERO; seq * hd];
        let mut kh = vec![T::ZERO; seq * hd];
        let mut vh = vec![T::ZERO; seq * hd];
        let mut scores = vec![T::ZERO; seq * seq];
        let mut out_h = vec![T::ZERO; seq * hd];
        let mut attn_drop: Option<Vec<T>> = None;
        for b in 0..b_n {
            for h in 0..h_n {
                let kvh = h / group;
                for t in 0..seq {
                    let q_off = (b * seq + t) * d + h * hd;
                    qh[t * hd..(t + 1) * hd].copy_from_slice(&q[q_off..q_off + hd]);
                    let k_off = (b * seq + t) * kv_dim + kvh * hd;
                    kh[t * hd..(t + 1) * hd].copy_from_slice(&k[k_off..k_off + hd]);
                    vh[t * hd..(t + 1) * hd].copy_from_slice(&v[k_off..k_off + hd]);
                }
                gemm(Trans::No, Trans::Yes, seq, seq, hd, inv_sqrt_hd, &qh, &kh, T::ZERO, &mut scores);
                for t in 0..seq {
                    // causal rows keep the diagonal so no row is empty;
                    // padding is handled by the loss mask in causal mode
                    let limit = if opts.causal { t + 1 } else { valid[b] };
                    let row = &mut scores[t * seq..(t + 1) * seq];
                    for (s, val) in row.iter_mut().enumerate() {
                        if s >= limit {
                            *val = neg_inf;
                        }
                    }
                    softmax_in_place(row);
                }
                let p_off = (b * h_n + h) * seq * seq;
                probs[p_off..p_off + seq * seq].copy_from_slice(&scores);
                if dropout > 0.0 {
                    let rng = rng.as_deref_mut().expect("rng checked above");
                    let scales: Vec<T> = draw_dropout_scales(seq * seq, dropout, rng);
                    for (sc, &m) in scores.iter_mut().zip(&scales) {
                        *sc *= m;
                    }
                    attn_drop
                        .get_or_insert_with(|| vec![T::ZERO; b_n * h_n * seq * seq])
                        [p_off..p_off + seq * seq]
                        .copy_from_slice(&scales);
                }
                gemm(Trans::No, Trans::No, seq, hd, seq, T::ONE, &scores, &vh, T::ZERO, &mut out_h);
                for t in 0..seq {
                    let dst = (b * seq + t) * d + h * hd;
                    attn_concat[dst..dst + hd].copy_from_slice(&out_h[t * hd..(t + 1) * hd]);
                }
            }
        }

        // attention output projection + residual
        gemm(Trans::No, Trans::No, rows, d, d, T::ONE, &attn_concat, &layer.wo, T::ONE, &mut x);

        let ffn_norm_in = x.clone();
        let mut normed2 = vec![T::ZERO; rows * d];
        rms_norm_rows(&x, &layer.ffn_norm, &mut normed2);
        let mut gate_pre = vec![T::ZERO; rows * f_dim];
        let mut up = vec![T::ZERO; rows * f_dim];
        gemm(Trans::No, Trans::No, rows, f_dim, d, T::ONE, &normed2, &layer.w_gate, T::ZERO, &mut gate_pre);
        gemm(Trans::No, Trans::No, rows, f_dim, d, T::ONE, &normed2, &layer.w_up, T::ZERO, &mut up);
        let mut swiglu = vec![T::ZERO; rows * f_dim];
        for i in 0..rows * f_dim {
            let g = gate_pre[i];
            let sig = T::ONE / (T::ONE + (-g).exp());
            swiglu[i] = g * sig * up[i];
        }
        let mut ffn_out = vec![T::ZERO; rows * d];
        gemm(Trans::No, Trans::No, rows, d, f_dim, T::ONE, &swiglu, &layer.w_down, T::ZERO, &mut ffn_out);
        let ffn_drop = if dropout > 0.0 {
            let rng = rng.as_deref_mut().expect("rng checked above");
            let scales: Vec<T> = draw_dropout_scales(rows * d, dropout, rng);
            for (o, &m) in ffn_out.iter_mut().zip(&scales) {
                *o *= m;
            }
            Some(scales)
        } else {
            None
        };
        for (xi, &o) in x.iter_mut().zip(&ffn_out) {
            *xi += o;
        }

        if keep_cache {
            layer_caches.push(LayerCache {
                attn_norm_in,
                attn_normed: normed,
                q_rot: q,
                k_rot: k,
                v,
                probs,
                attn_drop,
                attn_concat,
                ffn_norm_in,
                ffn_normed: normed2,
                gate_pre,
                up,
                swiglu,
                ffn_drop,
            });
        }
    }

    let final_norm_in = x;
    let mut final_normed = vec![T::ZERO; rows * d];
    rms_norm_rows(&final_norm_in, &params.final_norm, &mut final_normed);
    let mut logits = vec![T::ZERO; rows * v_dim];
    gemm(Trans::No, Trans::No, rows, v_dim, d, T::ONE, &final_normed, &params.head, T::ZERO, &mut logits);

    let cache = keep_cache.then(|| Cache {
        tokens: batch.tokens.to_vec(),
        batch: b_n,
        seq,
        causal: opts.causal,
        valid_len: valid,
        layers: layer_caches,
        final_norm_in,
    });

    Ok(Forward {
        logits,
        batch: b_n,
        seq,
        vocab: v_dim,
        final_normed,
        cache,
    })
}

// ---------------------------------------------------------------------------
// Incremental generation
// ---------------------------------------------------------------------------

/// Per-sequence key/value history for sampling. Appending one token costs
/// one position's worth of compute; logits match the batched forward pass.
pub struct GenState<T> {
    k: Vec<Vec<T>>, // per layer, len * kv_dim
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> GenState<T> {
    pub fn new(params: &LMParams<T>) -> Self {
        let layers = params.config.n_layers;
        GenState {
            k: (0..layers).map(|_| Vec::new()).collect(),
            v: (0..layers).map(|_| Vec::new()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Advance one position: append `token`, return next-token logits.
pub fn gen_step<T: Real>(
    params: &LMParams<T>,
    state: &mut GenState<T>,
    token: u32,
) -> Result<Vec<T>> {
    let cfg = &params.config;
    if token as usize >= cfg.vocab_size {
        return Err(Error::data(format!("token id {token} out of range")));
    }
    if state.len >= cfg.max_seq_len {
        return Err(Error::data(format!(
            "generation state full at max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let pos = state.len;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let kv_dim = cfg.kv_dim();
    let h_n = cfg.n_heads;
    let group = h_n / cfg.n_kv_heads;
    let rope = RopeTable::<T>::new(pos + 1, hd);
    let inv_sqrt_hd = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = embed_batch(params, &[token]);
    for (layer_idx, layer) in params.layers.iter().enumerate() {
        let mut normed = vec![T::ZERO; d];
        rms_norm_rows(&x, &layer.attn_norm, &mut normed);
        let mut q = vec![T::ZERO; d];
        let mut k_new = vec![T::ZERO; kv_dim];
        let mut v_new = vec![T::ZERO; kv_dim];
        gemm(Trans::No, Trans::No, 1, d, d, T::ONE, &normed, &layer.wq, T::ZERO, &mut q);
        gemm(Trans::No, Trans::No, 1, kv_dim, d, T::ONE, &normed, &layer.wk, T::ZERO, &mut k_new);
        gemm(Trans::No, Trans::No, 1, kv_dim, d, T::ONE, &normed, &layer.wv, T::ZERO, &mut v_new);
        rope.apply(&mut q, pos, false);
        rope.apply(&mut k_new, pos, false);
        state.k[layer_idx].extend_from_slice(&k_new);
        state.v[layer_idx].extend_from_slice(&v_new);
        let keys = &state.k[layer_idx];
        let vals = &state.v[layer_idx];

        let mut attn_concat = vec![T::ZERO; d];
        let mut scores = vec![T::ZERO; pos + 1];
        for h in 0..h_n {
            let kvh = h / group;
            let q_h = &q[h * hd..(h + 1) * hd];
            for (s, sc) in scores.iter_mut().enumerate() {
                let k_off = s * kv_dim + kvh * hd;
                *sc = crate::linalg::dot(q_h, &keys[k_off..k_off + hd]) * inv_sqrt_hd;
            }
            softmax_in_place(&mut scores);
            let out = &mut attn_concat[h * hd..(h + 1) * hd];
            for (s, &p) in scores.iter().enumerate() {
                let v_off = s * kv_dim + kvh * hd;
                for (o, &vv) in out.iter_mut().zip(&vals[v_off..v_off + hd]) {
                    *o += p * vv;
                }
            }
        }
        gemm(Trans::No, Trans::No, 1, d, d, T::ONE, &attn_concat, &layer.wo, T::ONE, &mut x);

        let mut normed2 = vec![T::ZERO; d];
        rms_norm_rows(&x, &layer.ffn_norm, &mut normed2);
        let f_dim = cfg.d_ffn;
        let mut gate_pre = vec![T::ZERO; f_dim];
        let mut up = vec![T::ZERO; f_dim];
        gemm(Trans::No, Trans::No, 1, f_dim, d, T::ONE, &normed2, &layer.w_gate, T::ZERO, &mut gate_pre);
        gemm(Trans::No, Trans::No, 1, f_dim, d, T::ONE, &normed2, &layer.w_up, T::ZERO, &mut up);
        let mut swiglu = vec![T::ZERO; f_dim];
        for i in 0..f_dim {
            let g = gate_pre[i];
            let sig = T::ONE / (T::ONE + (-g).exp());
            swiglu[i] = g * sig * up[i];
        }
        gemm(Trans::No, Trans::No, 1, d, f_dim, T::ONE, &swiglu, &layer.w_down, T::ONE, &mut x);
    }
    let mut final_normed = vec![T::ZERO; d];
    rms_norm_rows(&x, &params.final_norm, &mut final_normed);
    let mut logits = vec![T::ZERO; cfg.vocab_size];
    gemm(Trans::No, Trans::No, 1, cfg.vocab_size, d, T::ONE, &final_normed, &params.head, T::ZERO, &mut logits);
    state.len += 1;
    Ok(logits)
}
