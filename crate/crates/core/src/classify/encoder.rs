//! From-scratch transformer-encoder attributor.
//!
//! Reuses the LM blocks with bidirectional attention; the classification
//! path mean-pools the final normalized hidden states over non-padding
//! positions and applies a linear head. Trained with Adam, a linear
//! warmup over the first 10% of steps followed by linear decay to zero,
//! and early stopping on validation accuracy at a fixed cadence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, softmax_in_place, Trans};
use crate::lm::{backward_from_final_normed, forward, Batch, ForwardOpts, LMConfig, LMParams, Mode};
use crate::rng::StreamKey;
use crate::tokenizer::TokenizerModel;
use crate::trainer::{lr_at_with, AdamW, OrderStream, Schedule};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Texts are truncated to this many tokens.
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub epochs: f64,
    /// Validation cadence as a fraction of an epoch.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            d_model: 256,
            d_ffn: 512,
            n_heads: 4,
            n_kv_heads: 2,
            max_seq_len: 128,
            dropout_rate: 0.1,
            batch_size: 64,
            peak_lr: 2e-5,
            warmup_frac: 0.10,
            epochs: 1.0,
            eval_fraction: 0.10,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn lm_config(&self, vocab_size: usize) -> LMConfig {
        LMConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
            scaled_embed: false,
        }
    }
}

/// Encoder weights plus the classification head.
#[derive(Clone)]
pub struct EncoderAttributor {
    pub params: LMParams<f32>,
    pub cls_w: Vec<f32>, // D x m
    pub cls_b: Vec<f32>, // m
    pub classes: Vec<String>,
}

pub struct EncoderTrainOutput {
    pub attributor: EncoderAttributor,
    pub best_val_accuracy: f64,
    /// True when validation accuracy never improved over the untrained
    /// state; the final checkpoint is returned in that case.
    pub no_improvement_warning: bool,
    pub steps: u64,
}

/// Tokenize and truncate one text for the encoder. Empty tokenizations
/// become a single EOS so every row has at least one valid position.
fn encode_row(text: &str, tokenizer: &TokenizerModel, max_len: usize) -> Vec<u32> {
    let mut ids = tokenizer.encode_str(text);
    if ids.is_empty() {
        ids.push(tokenizer.eos_id());
    }
    ids.truncate(max_len);
    ids
}

fn pad_batch(rows: &[&Vec<u32>], pad_id: u32) -> (Vec<u32>, Vec<usize>, usize) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(1);
    let mut tokens = vec![pad_id; rows.len() * width];
    let mut valid = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        tokens[r * width..r * width + row.len()].copy_from_slice(row);
        valid.push(row.len());
    }
    (tokens, valid, width)
}

/// Mean-pooled final hidden states -> class logits for one padded batch.
fn batch_logits(
    att: &EncoderAttributor,
    tokens: &[u32],
    valid: &[usize],
    width: usize,
) -> Result<Vec<f32>> {
    let b_n = valid.len();
    let d = att.params.config.d_model;
    let m = att.classes.len();
    let fwd = forward(
        &att.params,
        Batch {
            tokens,
            batch: b_n,
            seq: width,
        },
        ForwardOpts {
            mode: Mode::Eval,
            causal: false,
            valid_len: Some(valid),
        },
        None,
    )?;
    let pooled = pool_rows(&fwd.final_normed, valid, width, d);
    let mut logits = vec![0.0f32; b_n * m];
    gemm(
        Trans::No,
        Trans::No,
        b_n,
        m,
        d,
        1.0,
        &pooled,
        &att.cls_w,
        0.0,
        &mut logits,
    );
    for row in logits.chunks_exact_mut(m) {
        for (l, &b) in row.iter_mut().zip(&att.cls_b) {
            *l += b;
        }
    }
    Ok(logits)
}

fn pool_rows(final_normed: &[f32], valid: &[usize], width: usize, d: usize) -> Vec<f32> {
    let b_n = valid.len();
    let mut pooled = vec![0.0f32; b_n * d];
    for b in 0..b_n {
        let inv = 1.0 / valid[b] as f32;
        for t in 0..valid[b] {
            let src = &final_normed[(b * width + t) * d..(b * width + t + 1) * d];
            for (p, &v) in pooled[b * d..(b + 1) * d].iter_mut().zip(src) {
                *p += v * inv;
            }
        }
    }
    pooled
}

impl EncoderAttributor {
    pub fn predict(&self, texts: &[String], tokenizer: &TokenizerModel) -> Result<Vec<usize>> {
        let max_len = self.params.config.max_seq_len;
        let rows: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| encode_row(t, tokenizer, max_len))
            .collect();
        let m = self.classes.len();
        let mut out = Vec::with_capacity(texts.len());
        for chunk in rows.chunks(64) {
            let refs: Vec<&Vec<u32>> = chunk.iter().collect();
            let (tokens, valid, width) = pad_batch(&refs, tokenizer.eos_id());
            let logits = batch_logits(self, &tokens, &valid, width)?;
            for row in logits.chunks_exact(m) {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Train the encoder attributor with early stopping on validation
/// accuracy.
pub fn train_encoder(
    train_texts: &[String],
    train_labels: &[usize],
    val_texts: &[String],
    val_labels: &[usize],
    classes: &[String],
    tokenizer: &TokenizerModel,
    cfg: &EncoderConfig,
) -> Result<EncoderTrainOutput> {
    if val_texts.is_empty() {
        return Err(Error::config("encoder training needs a validation split"));
    }
    if train_texts.len() != train_labels.len() || train_texts.is_empty() {
        return Err(Error::data("bad training inputs"));
    }
    let m = classes.len();
    if m < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    let lm_cfg = cfg.lm_config(tokenizer.total_vocab_size());
    lm_cfg.validate()?;
    let d = lm_cfg.d_model;

    let rows: Vec<Vec<u32>> = train_texts
        .iter()
        .map(|t| encode_row(t, tokenizer, lm_cfg.max_seq_len))
        .collect();

    let mut params: LMParams<f32> = crate::lm::init_params(&lm_cfg, cfg.seed)?;
    let mut head_rng = StreamKey::new("encoder-head").push_u64(cfg.seed).rng();
    let mut cls_w = vec![0.0f32; d * m];
    for w in cls_w.iter_mut() {
        *w = (head_rng.gen_range(-1.0f64..1.0) * 0.02) as f32;
    }
    let mut cls_b = vec![0.0f32; m];

    let batch_size = cfg.batch_size.min(rows.len()).max(1);
    let steps_per_epoch = rows.len().div_ceil(batch_size) as u64;
    let total_steps = ((steps_per_epoch as f64) * cfg.epochs).ceil() as u64;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as u64;
    let cadence = ((steps_per_epoch as f64 * cfg.eval_fraction).round() as u64).max(1);

    let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0, params.param_count());
    let (mut head_m, mut head_v) = (vec![0.0f32; d * m + m], vec![0.0f32; d * m + m]);
    let mut order = OrderStream::new(cfg.seed, rows.len());
    let mut dropout_rng = StreamKey::new("encoder-dropout").push_u64(cfg.seed).rng();

    let eval_acc = |params: &LMParams<f32>, cls_w: &[f32], cls_b: &[f32]| -> Result<f64> {
        let att = EncoderAttributor {
            params: params.clone(),
            cls_w: cls_w.to_vec(),
            cls_b: cls_b.to_vec(),
            classes: classes.to_vec(),
        };
        let preds = att.predict(val_texts, tokenizer)?;
        let correct = preds
            .iter()
            .zip(val_labels)
            .filter(|(p, l)| *p == *l)
            .count();
        Ok(correct as f64 / val_labels.len() as f64)
    };

    let initial_acc = eval_acc(&params, &cls_w, &cls_b)?;
    let mut best_acc = initial_acc;
    let mut best: Option<(LMParams<f32>, Vec<f32>, Vec<f32>)> = None;

    for step in 1..=total_steps {
        let idx = order.next_batch(batch_size);
        let batch_rows: Vec<&Vec<u32>> = idx.iter().map(|&i| &rows[i]).collect();
        let (tokens, valid, width) = pad_batch(&batch_rows, tokenizer.eos_id());
        let b_n = valid.len();

        // training forward with cache
        let mut fwd = forward(
            &params,
            Batch {
                tokens: &tokens,
                batch: b_n,
                seq: width,
            },
            ForwardOpts {
                mode: Mode::Train,
                causal: false,
                valid_len: Some(&valid),
            },
            Some(&mut dropout_rng),
        )?;
        let cache = fwd.cache.take().expect("train forward keeps cache");
        let pooled = pool_rows(&fwd.final_normed, &valid, width, d);

        let mut logits = vec![0.0f32; b_n * m];
        gemm(Trans::No, Trans::No, b_n, m, d, 1.0, &pooled, &cls_w, 0.0, &mut logits);
        for row in logits.chunks_exact_mut(m) {
            for (l, &bias) in row.iter_mut().zip(&cls_b) {
                *l += bias;
            }
        }
        let mut dlogits = vec![0.0f32; b_n * m];
        for b in 0..b_n {
            let row = &mut logits[b * m..(b + 1) * m];
            softmax_in_place(row);
            let target = train_labels[idx[b]];
            for j in 0..m {
                dlogits[b * m + j] = (row[j] - if j == target { 1.0 } else { 0.0 }) / b_n as f32;
            }
        }

        // head gradients
        let mut d_cls_w = vec![0.0f32; d * m];
        gemm(Trans::Yes, Trans::No, d, m, b_n, 1.0, &pooled, &dlogits, 0.0, &mut d_cls_w);
        let mut d_cls_b = vec![0.0f32; m];
        for b in 0..b_n {
            for j in 0..m {
                d_cls_b[j] += dlogits[b * m + j];
            }
        }
        // gradient into the pooled representation, spread over positions
        let mut d_pooled = vec![0.0f32; b_n * d];
        gemm(Trans::No, Trans::Yes, b_n, d, m, 1.0, &dlogits, &cls_w, 0.0, &mut d_pooled);
        let mut d_final_normed = vec![0.0f32; b_n * width * d];
        for b in 0..b_n {
            let inv = 1.0 / valid[b] as f32;
            for t in 0..valid[b] {
                let dst =
                    &mut d_final_normed[(b * width + t) * d..(b * width + t + 1) * d];
                for (o, &g) in dst.iter_mut().zip(&d_pooled[b * d..(b + 1) * d]) {
                    *o = g * inv;
                }
            }
        }
        let mut grads = LMParams::<f32>::zeros(&lm_cfg);
        backward_from_final_normed(&params, &cache, &d_final_normed, &mut grads);

        let lr = lr_at_with(
            Schedule::WarmupLinear,
            cfg.peak_lr,
            warmup,
            total_steps,
            step,
        );
        opt.step(&mut params, &grads, lr);
        adam_flat(
            &mut cls_w,
            &mut cls_b,
            &d_cls_w,
            &d_cls_b,
            &mut head_m,
            &mut head_v,
            step,
            lr,
        );

        if step % cadence == 0 || step == total_steps {
            let acc = eval_acc(&params, &cls_w, &cls_b)?;
            if acc > best_acc {
                best_acc = acc;
                best = Some((params.clone(), cls_w.clone(), cls_b.clone()));
            }
        }
    }

    let no_improvement_warning = best.is_none();
    let (final_params, final_w, final_b) = match best {
        Some(b) => b,
        None => (params, cls_w, cls_b),
    };
    Ok(EncoderTrainOutput {
        attributor: EncoderAttributor {
            params: final_params,
            cls_w: final_w,
            cls_b: final_b,
            classes: classes.to_vec(),
        },
        best_val_accuracy: best_acc,
        no_improvement_warning,
        steps: total_steps,
    })
}

#[allow(clippy::too_many_arguments)]
fn adam_flat(
    cls_w: &mut [f32],
    cls_b: &mut [f32],
    d_w: &[f32],
    d_b: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
) {
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f64);
    let bc1 = 1.0 - 0.9f64.powi(step as i32);
    let bc2 = 1.0 - 0.999f64.powi(step as i32);
    let n_w = cls_w.len();
    for (i, g) in d_w.iter().chain(d_b.iter()).enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let update = ((m[i] as f64 / bc1) / ((v[i] as f64 / bc2).sqrt() + eps)) as f32;
        let target = if i < n_w {
            &mut cls_w[i]
        } else {
            &mut cls_b[i - n_w]
        };
        *target -= lr as f32 * update;
    }
}
