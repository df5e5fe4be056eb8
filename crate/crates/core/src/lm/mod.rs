//! Minimal decoder-only transformer with exact analytic gradients.
//!
//! Architecture: pre-norm RMS normalization, grouped-query attention with
//! rotary position embeddings, SwiGLU feed-forward blocks, untied output
//! head, optional embedding scaling by sqrt(d_model). Dropout (when
//! enabled) applies to attention probabilities and FFN outputs.
//!
//! All kernels are generic over [`Real`](crate::linalg::Real): training
//! runs in `f32`; gradient-check tests instantiate the same code in `f64`
//! (the "high-precision mode").

mod backward;
mod checkpoint;
mod forward;

pub use backward::{loss_and_grads, per_position_loss, LossOutput};
pub(crate) use backward::backward_from_final_normed;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use forward::{forward, gen_step, Batch, Forward, ForwardOpts, GenState, Mode};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::rng::StreamKey;

/// Architecture description for one trainable model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Embedding-table size; when built on the lab tokenizer this is
    /// `TokenizerModel::total_vocab_size()`.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Multiply token embeddings by sqrt(d_model) before the first block.
    #[serde(default)]
    pub scaled_embed: bool,
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return Err(Error::config("all model dimensions must be positive"));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_heads {} must be divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the grouped key/value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = d // attn_norm
            + d * d // wq
            + 2 * d * self.kv_dim() // wk, wv
            + d * d // wo
            + d // ffn_norm
            + 3 * d * self.d_ffn; // gate, up, down
        self.vocab_size * d + self.n_layers * per_layer + d + d * self.vocab_size
    }
}

/// One transformer block's weights.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>, // D
    pub wq: Vec<T>,        // D x D
    pub wk: Vec<T>,        // D x kv_dim
    pub wv: Vec<T>,        // D x kv_dim
    pub wo: Vec<T>,        // D x D
    pub ffn_norm: Vec<T>,  // D
    pub w_gate: Vec<T>,    // D x F
    pub w_up: Vec<T>,      // D x F
    pub w_down: Vec<T>,    // F x D
}

/// Full weight set. Also reused as the gradient container: gradients have
/// exactly the same shapes in the same canonical order.
#[derive(Clone, Debug)]
pub struct LMParams<T> {
    pub config: LMConfig,
    pub embed: Vec<T>, // V x D
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>, // D
    pub head: Vec<T>,       // D x V
}

impl<T: Real> LMParams<T> {
    pub fn zeros(config: &LMConfig) -> Self {
        let d = config.d_model;
        let kv = config.kv_dim();
        let f = config.d_ffn;
        let v = config.vocab_size;
        let layer = |_| LayerParams {
            attn_norm: vec![T::ZERO; d],
            wq: vec![T::ZERO; d * d],
            wk: vec![T::ZERO; d * kv],
            wv: vec![T::ZERO; d * kv],
            wo: vec![T::ZERO; d * d],
            ffn_norm: vec![T::ZERO; d],
            w_gate: vec![T::ZERO; d * f],
            w_up: vec![T::ZERO; d * f],
            w_down: vec![T::ZERO; f * d],
        };
        LMParams {
            config: config.clone(),
            embed: vec![T::ZERO; v * d],
            layers: (0..config.n_layers).map(layer).collect(),
            final_norm: vec![T::ZERO; d],
            head: vec![T::ZERO; d * v],
        }
    }

    /// Canonical tensor order: embed, then per layer (attn_norm, wq, wk,
    /// wv, wo, ffn_norm, w_gate, w_up, w_down), then final_norm, head.
    /// Checkpoints, the optimizer and the gradient checker all follow it.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("embed".into(), self.embed.as_slice())];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &layer.attn_norm));
            out.push((format!("layer{i}.wq"), &layer.wq));
            out.push((format!("layer{i}.wk"), &layer.wk));
            out.push((format!("layer{i}.wv"), &layer.wv));
            out.push((format!("layer{i}.wo"), &layer.wo));
            out.push((format!("layer{i}.ffn_norm"), &layer.ffn_norm));
            out.push((format!("layer{i}.w_gate"), &layer.w_gate));
            out.push((format!("layer{i}.w_up"), &layer.w_up));
            out.push((format!("layer{i}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = vec![("embed".into(), self.embed.as_mut_slice())];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layer{i}.wq"), &mut layer.wq));
            out.push((format!("layer{i}.wk"), &mut layer.wk));
            out.push((format!("layer{i}.wv"), &mut layer.wv));
            out.push((format!("layer{i}.wo"), &mut layer.wo));
            out.push((format!("layer{i}.ffn_norm"), &mut layer.ffn_norm));
            out.push((format!("layer{i}.w_gate"), &mut layer.w_gate));
            out.push((format!("layer{i}.w_up"), &mut layer.w_up));
            out.push((format!("layer{i}.w_down"), &mut layer.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over the f32 little-endian rendering of every tensor in
    /// canonical order. Bit-identical weights yield identical checksums.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in self.tensors() {
            hasher.update(name.as_bytes());
            for &v in tensor {
                hasher.update((v.to_f64() as f32).to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Standard deviation of the base initialization distribution.
pub const INIT_STD: f64 = 0.02;
/// Resampling bound for the truncated normal, in units of sigma.
pub const INIT_TRUNC_SIGMAS: f64 = 2.0;

/// Draw initial weights from a stream keyed only by `init_seed`.
///
/// Matrices use a truncated normal (std 0.02, resampled beyond 2 sigma);
/// the residual-writing projections `wo` and `w_down` shrink the std by
/// 1/sqrt(2 * n_layers); norm gains start at one. Identical
/// (config, init_seed) always produces bit-identical parameters.
pub fn init_params<T: Real>(config: &LMConfig, init_seed: u64) -> Result<LMParams<T>> {
    config.validate()?;
    let mut rng = StreamKey::new("lm-init").push_u64(init_seed).rng();
    let mut params = LMParams::zeros(config);
    let out_proj_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();

    fill_trunc_normal(&mut params.embed, INIT_STD, &mut rng);
    for layer in &mut params.layers {
        layer.attn_norm.fill(T::ONE);
        fill_trunc_normal(&mut layer.wq, INIT_STD, &mut rng);
        fill_trunc_normal(&mut layer.wk, INIT_STD, &mut rng);
        fill_trunc_normal(&mut layer.wv, INIT_STD, &mut rng);
        fill_trunc_normal(&mut layer.wo, out_proj_std, &mut rng);
        layer.ffn_norm.fill(T::ONE);
        fill_trunc_normal(&mut layer.w_gate, INIT_STD, &mut rng);
        fill_trunc_normal(&mut layer.w_up, INIT_STD, &mut rng);
        fill_trunc_normal(&mut layer.w_down, out_proj_std, &mut rng);
    }
    params.final_norm.fill(T::ONE);
    fill_trunc_normal(&mut params.head, INIT_STD, &mut rng);
    Ok(params)
}

fn fill_trunc_normal<T: Real>(tensor: &mut [T], std: f64, rng: &mut rand_chacha::ChaCha8Rng) {
    for v in tensor.iter_mut() {
        *v = T::from_f64(std * trunc_standard_normal(rng));
    }
}

/// Standard normal via Box-Muller, resampled until |z| <= 2.
fn trunc_standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= INIT_TRUNC_SIGMAS {
            return z;
        }
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> LMConfig {
    LMConfig {
        n_layers: 2,
        d_model: 16,
        d_ffn: 24,
        n_heads: 2,
        n_kv_heads: 1,
        vocab_size: 31,
        max_seq_len: 16,
        dropout_rate: 0.0,
        scaled_embed: false,
    }
}
