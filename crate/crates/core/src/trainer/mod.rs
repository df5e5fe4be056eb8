//! Pretraining and fine-tuning with strictly separated randomness sources.
//!
//! A [`TrainRun`] carries two independent seeds: `init_seed` determines the
//! initial weights and nothing else; `order_seed` determines the data
//! order (and the dropout stream, which is part of the optimization path).
//! Varying one while holding the other produces bit-identical
//! counterfactuals for the untouched source, which is what the
//! order/init experiments rely on.

mod adamw;

pub use adamw::{clip_global_norm, AdamW};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    init_params, loss_and_grads, per_position_loss, Batch, Checkpoint, CheckpointMeta, LMConfig,
    LMParams,
};
use crate::rng::StreamKey;

// ---------------------------------------------------------------------------
// TrainRun
// ---------------------------------------------------------------------------

/// Full training recipe. Serializes to TOML; see `run_dir` layout notes on
/// [`pretrain`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub lm_config: LMConfig,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Cosine decay floor as a fraction of `peak_lr`.
    pub min_lr_ratio: f64,
    pub init_seed: u64,
    pub order_seed: u64,
    pub checkpoint_steps: Vec<u64>,
    /// Train SFT on the whole sequence instead of masking prompt tokens.
    #[serde(default)]
    pub sft_full_sequence_loss: bool,
}

impl TrainRun {
    pub fn validate(&self) -> Result<()> {
        self.lm_config.validate()?;
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio outside [0, 1]"));
        }
        for &s in &self.checkpoint_steps {
            if s > self.total_steps {
                return Err(Error::config(format!(
                    "checkpoint step {s} beyond total_steps {}",
                    self.total_steps
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let run: TrainRun = toml::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        run.validate()?;
        Ok(run)
    }
}

/// Checkpoint cadence at fractional milestones of the total step budget:
/// 1%, 5%, 10%, 20%, 50% and 100%, deduplicated, each at least step 1.
pub fn milestone_steps(total_steps: u64) -> Vec<u64> {
    let fractions = [0.01, 0.05, 0.10, 0.20, 0.50, 1.0];
    let set: BTreeSet<u64> = fractions
        .iter()
        .map(|f| ((total_steps as f64 * f).round() as u64).clamp(1, total_steps))
        .collect();
    set.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Linear warmup to peak, cosine decay to `min_ratio * peak`.
    WarmupCosine { min_ratio: f64 },
    /// Linear warmup to peak, linear decay to zero (classifier variant).
    WarmupLinear,
}

/// Learning rate at `step` (0 ..= total). Panics on out-of-range steps:
/// that is a caller bug, not a runtime condition.
pub fn lr_at_with(schedule: Schedule, peak: f64, warmup: u64, total: u64, step: u64) -> f64 {
    assert!(step <= total, "lr_at: step {step} beyond total {total}");
    assert!(warmup <= total, "lr_at: warmup beyond total");
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = if total == warmup {
        1.0
    } else {
        (step - warmup) as f64 / span
    };
    match schedule {
        Schedule::WarmupCosine { min_ratio } => {
            let floor = peak * min_ratio;
            floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        Schedule::WarmupLinear => peak * (1.0 - progress),
    }
}

/// The pretraining schedule of a run.
pub fn lr_at(run: &TrainRun, step: u64) -> f64 {
    lr_at_with(
        Schedule::WarmupCosine {
            min_ratio: run.min_lr_ratio,
        },
        run.peak_lr,
        run.warmup_steps,
        run.total_steps,
        step,
    )
}

// ---------------------------------------------------------------------------
// Data order
// ---------------------------------------------------------------------------

/// One epoch's permutation of training-item indices.
#[derive(Clone, Debug, PartialEq)]
pub struct DataOrder {
    pub indices: Vec<u32>,
}

impl DataOrder {
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for &i in &self.indices {
            hasher.update(i.to_le_bytes());
        }
        crate::lm::hex(&hasher.finalize())
    }
}

/// Fisher-Yates permutation from a stream keyed by (order_seed, epoch).
pub fn make_order(order_seed: u64, n_items: usize, epoch: u64) -> DataOrder {
    let mut rng = StreamKey::new("data-order")
        .push_u64(order_seed)
        .push_u64(epoch)
        .rng();
    let mut indices: Vec<u32> = (0..n_items as u32).collect();
    for i in (1..n_items).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    DataOrder { indices }
}

/// Epoch-major stream of item indices; batches may straddle epochs.
pub struct OrderStream {
    order_seed: u64,
    n_items: usize,
    epoch: u64,
    order: DataOrder,
    pos: usize,
}

impl OrderStream {
    pub fn new(order_seed: u64, n_items: usize) -> Self {
        OrderStream {
            order_seed,
            n_items,
            epoch: 0,
            order: make_order(order_seed, n_items, 0),
            pos: 0,
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n_items {
            self.epoch += 1;
            self.order = make_order(self.order_seed, self.n_items, self.epoch);
            self.pos = 0;
        }
        let idx = self.order.indices[self.pos] as usize;
        self.pos += 1;
        idx
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }
}

// ---------------------------------------------------------------------------
// Packed corpus
// ---------------------------------------------------------------------------

/// Fixed-length training sequences packed from tokenized documents.
/// Documents are concatenated with one EOS separator after each; the tail
/// shorter than `seq_len` is dropped.
#[derive(Clone, Debug)]
pub struct PackedCorpus {
    pub tokens: Vec<u32>,
    pub n_seqs: usize,
    pub seq_len: usize,
}

impl PackedCorpus {
    pub fn pack(doc_ids: &[Vec<u32>], eos_id: u32, seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        let mut stream = Vec::new();
        for doc in doc_ids {
            stream.extend_from_slice(doc);
            stream.push(eos_id);
        }
        let n_seqs = stream.len() / seq_len;
        if n_seqs == 0 {
            return Err(Error::data(format!(
                "corpus too small: {} tokens cannot fill one sequence of {}",
                stream.len(),
                seq_len
            )));
        }
        stream.truncate(n_seqs * seq_len);
        Ok(PackedCorpus {
            tokens: stream,
            n_seqs,
            seq_len,
        })
    }

    pub fn seq(&self, idx: usize) -> &[u32] {
        &self.tokens[idx * self.seq_len..(idx + 1) * self.seq_len]
    }

    /// Content hash, used for cache keys and provenance.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.seq_len as u64).to_le_bytes());
        for &t in &self.tokens {
            hasher.update(t.to_le_bytes());
        }
        crate::lm::hex(&hasher.finalize())
    }
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct PretrainOutput {
    pub final_checkpoint: Checkpoint,
    /// Snapshots at the run's `checkpoint_steps` (step 0 means the initial
    /// weights before any update).
    pub milestones: Vec<(u64, Checkpoint)>,
    pub log: Vec<StepLog>,
}

/// Train from scratch. The entire run is a pure function of
/// `(run, corpus)`; rerunning reproduces bit-identical checkpoints.
///
/// When `run_dir` is given the layout is:
///
/// ```text
/// run_dir/config.toml          copy of the TrainRun
/// run_dir/checkpoints/step-NNNNNNN.ckpt
/// run_dir/train_log.csv        step,loss,lr,grad_norm
/// ```
///
/// Checkpoints written so far are retained if the run aborts on a
/// non-finite loss.
pub fn pretrain(
    run: &TrainRun,
    corpus: &PackedCorpus,
    run_dir: Option<&Path>,
) -> Result<PretrainOutput> {
    run.validate()?;
    if corpus.seq_len != run.lm_config.max_seq_len {
        return Err(Error::config(format!(
            "corpus sequences of {} do not match max_seq_len {}",
            corpus.seq_len, run.lm_config.max_seq_len
        )));
    }
    if let Some(dir) = run_dir {
        crate::labctl::atomic_write(&dir.join("config.toml"), run.to_toml_string()?.as_bytes())?;
    }

    let mut params: LMParams<f32> = init_params(&run.lm_config, run.init_seed)?;
    let mut optimizer = AdamW::new(
        run.adam_beta1,
        run.adam_beta2,
        run.adam_eps,
        run.weight_decay,
        params.param_count(),
    );
    let mut order = OrderStream::new(run.order_seed, corpus.n_seqs);
    let mut dropout_rng = StreamKey::new("trainer-dropout")
        .push_u64(run.order_seed)
        .rng();

    let snapshot = |params: &LMParams<f32>, step: u64| Checkpoint {
        params: params.clone(),
        meta: CheckpointMeta {
            init_seed: run.init_seed,
            step,
        },
    };
    let milestones_wanted: BTreeSet<u64> = run.checkpoint_steps.iter().copied().collect();
    let mut milestones = Vec::new();
    let mut log = Vec::new();

    let save = |ck: &Checkpoint| -> Result<()> {
        if let Some(dir) = run_dir {
            ck.save(&dir.join("checkpoints").join(format!("step-{:07}.ckpt", ck.meta.step)))?;
        }
        Ok(())
    };

    if milestones_wanted.contains(&0) {
        let ck = snapshot(&params, 0);
        save(&ck)?;
        milestones.push((0, ck));
    }

    let seq = corpus.seq_len;
    let mut batch_tokens = vec![0u32; run.batch_size * seq];
    for step in 1..=run.total_steps {
        let batch_idx = order.next_batch(run.batch_size);
        for (row, &idx) in batch_idx.iter().enumerate() {
            batch_tokens[row * seq..(row + 1) * seq].copy_from_slice(corpus.seq(idx));
        }
        let lr = lr_at(run, step);
        let out = loss_and_grads(
            &params,
            Batch {
                tokens: &batch_tokens,
                batch: run.batch_size,
                seq,
            },
            None,
            &mut dropout_rng,
        );
        let mut out = match out {
            Ok(o) if o.grads.all_finite() => o,
            Ok(_) => {
                flush_log(run_dir, &log)?;
                return Err(Error::numeric(format!(
                    "aborted at step {step}: non-finite gradients; last checkpoint retained"
                )));
            }
            Err(Error::Numeric(msg)) => {
                flush_log(run_dir, &log)?;
                return Err(Error::numeric(format!(
                    "aborted at step {step}: {msg}; last checkpoint retained"
                )));
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_global_norm(&mut out.grads, run.grad_clip);
        debug_assert!(
            clip_global_norm(&mut out.grads, f64::INFINITY) <= run.grad_clip + 1e-6,
            "post-clip gradient norm exceeds bound at step {step}"
        );
        optimizer.step(&mut params, &out.grads, lr);
        log.push(StepLog {
            step,
            loss: out.loss,
            lr,
            grad_norm,
        });
        if milestones_wanted.contains(&step) {
            let ck = snapshot(&params, step);
            save(&ck)?;
            milestones.push((step, ck));
        }
    }

    let final_checkpoint = match milestones.iter().find(|(s, _)| *s == run.total_steps) {
        Some((_, ck)) => ck.clone(),
        None => {
            let ck = snapshot(&params, run.total_steps);
            save(&ck)?;
            ck
        }
    };
    flush_log(run_dir, &log)?;
    Ok(PretrainOutput {
        final_checkpoint,
        milestones,
        log,
    })
}

fn flush_log(run_dir: Option<&Path>, log: &[StepLog]) -> Result<()> {
    let Some(dir) = run_dir else {
        return Ok(());
    };
    let mut csv = String::from("step,loss,lr,grad_norm\n");
    for entry in log {
        writeln!(
            csv,
            "{},{},{},{}",
            entry.step, entry.loss, entry.lr, entry.grad_norm
        )
        .expect("string write");
    }
    crate::labctl::atomic_write(&dir.join("train_log.csv"), csv.as_bytes())
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning
// ---------------------------------------------------------------------------

/// One instruction example, already tokenized.
#[derive(Clone, Debug)]
pub struct SftExample {
    pub prompt_ids: Vec<u32>,
    pub response_ids: Vec<u32>,
}

pub struct FinetuneOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Examples whose prompt was left-truncated to fit max_seq_len.
    pub truncated_examples: usize,
}

/// Supervised fine-tuning from a pretrained base.
///
/// Loss falls on response tokens (and the closing EOS) only, unless
/// `run.sft_full_sequence_loss` is set. `run.order_seed` drives the example
/// order and dropout; `run.init_seed` is ignored because the weights come
/// from `base`. With `total_steps` 0 the base checkpoint is returned
/// unchanged.
pub fn finetune(
    base: &Checkpoint,
    sft_data: &[SftExample],
    run: &TrainRun,
    eos_id: u32,
) -> Result<FinetuneOutput> {
    run.validate()?;
    if base.params.config != run.lm_config {
        return Err(Error::config(
            "base checkpoint config does not match run.lm_config",
        ));
    }
    if run.total_steps == 0 {
        return Ok(FinetuneOutput {
            checkpoint: base.clone(),
            log: Vec::new(),
            truncated_examples: 0,
        });
    }
    if sft_data.is_empty() {
        return Err(Error::data("no fine-tuning examples"));
    }
    let max_len = run.lm_config.max_seq_len;

    // pre-tokenized rows: (ids, target mask), prompt left-truncated to fit
    let mut rows: Vec<(Vec<u32>, Vec<bool>)> = Vec::with_capacity(sft_data.len());
    let mut truncated = 0usize;
    for (i, ex) in sft_data.iter().enumerate() {
        if ex.response_ids.is_empty() {
            return Err(Error::data(format!("example {i} has an empty response")));
        }
        let budget_for_prompt = max_len
            .checked_sub(ex.response_ids.len() + 1)
            .filter(|&b| b >= 1)
            .ok_or_else(|| {
                Error::data(format!(
                    "example {i}: response of {} tokens cannot fit max_seq_len {} \
                     without truncating the response",
                    ex.response_ids.len(),
                    max_len
                ))
            })?;
        let prompt = if ex.prompt_ids.len() > budget_for_prompt {
            truncated += 1;
            &ex.prompt_ids[ex.prompt_ids.len() - budget_for_prompt..]
        } else {
            &ex.prompt_ids[..]
        };
        if prompt.is_empty() {
            return Err(Error::data(format!("example {i} has an empty prompt")));
        }
        let mut ids = Vec::with_capacity(prompt.len() + ex.response_ids.len() + 1);
        ids.extend_from_slice(prompt);
        let response_start = ids.len();
        ids.extend_from_slice(&ex.response_ids);
        ids.push(eos_id);
        let mask: Vec<bool> = (0..ids.len())
            .map(|t| run.sft_full_sequence_loss || t >= response_start)
            .collect();
        rows.push((ids, mask));
    }

    let mut params = base.params.clone();
    let mut optimizer = AdamW::new(
        run.adam_beta1,
        run.adam_beta2,
        run.adam_eps,
        run.weight_decay,
        params.param_count(),
    );
    let mut order = OrderStream::new(run.order_seed, rows.len());
    let mut dropout_rng = StreamKey::new("trainer-dropout")
        .push_u64(run.order_seed)
        .rng();
    let mut log = Vec::new();

    for step in 1..=run.total_steps {
        let batch_idx = order.next_batch(run.batch_size);
        let width = batch_idx
            .iter()
            .map(|&i| rows[i].0.len())
            .max()
            .expect("non-empty batch");
        let mut tokens = vec![eos_id; batch_idx.len() * width];
        let mut mask = vec![false; batch_idx.len() * width];
        for (r, &i) in batch_idx.iter().enumerate() {
            let (ids, m) = &rows[i];
            tokens[r * width..r * width + ids.len()].copy_from_slice(ids);
            mask[r * width..r * width + m.len()].copy_from_slice(m);
        }
        let lr = lr_at(run, step);
        let mut out = match loss_and_grads(
            &params,
            Batch {
                tokens: &tokens,
                batch: batch_idx.len(),
                seq: width,
            },
            Some(&mask),
            &mut dropout_rng,
        ) {
            Ok(o) => o,
            Err(Error::Numeric(msg)) => {
                return Err(Error::numeric(format!("aborted at step {step}: {msg}")))
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_global_norm(&mut out.grads, run.grad_clip);
        optimizer.step(&mut params, &out.grads, lr);
        log.push(StepLog {
            step,
            loss: out.loss,
            lr,
            grad_norm,
        });
    }

    Ok(FinetuneOutput {
        checkpoint: Checkpoint {
            params,
            meta: CheckpointMeta {
                init_seed: base.meta.init_seed,
                step: base.meta.step + run.total_steps,
            },
        },
        log,
        truncated_examples: truncated,
    })
}

/// Mean next-token NLL over (a slice of) a packed corpus, in eval mode.
/// `exp` of this is the held-out perplexity used by the capability gate.
pub fn eval_mean_nll(
    params: &LMParams<f32>,
    corpus: &PackedCorpus,
    max_seqs: usize,
) -> Result<f64> {
    let n = corpus.n_seqs.min(max_seqs).max(1);
    let mut total = 0.0f64;
    let mut count = 0usize;
    let chunk = 8usize;
    let seq = corpus.seq_len;
    for start in (0..n).step_by(chunk) {
        let rows = (n - start).min(chunk);
        let tokens = &corpus.tokens[start * seq..(start + rows) * seq];
        let losses = per_position_loss(
            params,
            Batch {
                tokens,
                batch: rows,
                seq,
            },
            None,
        )?;
        for b in 0..rows {
            for t in 1..seq {
                total += losses[b * seq + t];
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests;
