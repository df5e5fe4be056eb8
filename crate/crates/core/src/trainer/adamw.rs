//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::linalg::Real;
use crate::lm::LMParams;

/// Optimizer state: first/second moments laid out in the canonical tensor
/// order of [`LMParams::tensors`].
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64, param_count: usize) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    /// One update. Weight decay is decoupled: it scales the weights
    /// directly and never enters the moment estimates. Norm gains (the
    /// 1-D tensors) are exempt from decay.
    pub fn step(&mut self, params: &mut LMParams<f32>, grads: &LMParams<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let lr32 = lr as f32;
        let eps = self.eps as f32;
        let decay = (lr * self.weight_decay) as f32;

        let mut offset = 0usize;
        let grad_tensors = grads.tensors();
        for ((name, weights), (_, grad)) in params.tensors_mut().into_iter().zip(grad_tensors) {
            let decayed = self.weight_decay > 0.0 && !is_norm_gain(&name);
            let m = &mut self.m[offset..offset + weights.len()];
            let v = &mut self.v[offset..offset + weights.len()];
            for i in 0..weights.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                let update = (m_hat / (v_hat.sqrt() + eps as f64)) as f32;
                if decayed {
                    weights[i] -= decay * weights[i];
                }
                weights[i] -= lr32 * update;
            }
            offset += weights.len();
        }
        debug_assert_eq!(offset, self.m.len());
    }
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with("norm")
}

/// Scale gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Real>(grads: &mut LMParams<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, tensor) in grads.tensors() {
        for &g in tensor {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, tensor) in grads.tensors_mut() {
            for g in tensor.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
