//! One-vs-rest L2-regularized logistic regression.
//!
//! Each binary problem minimizes 0.5 w'w + C sum_i ln(1 + exp(-y_i w'x_i))
//! with a Newton conjugate-gradient solver run to a gradient-norm
//! tolerance of 1e-5. A constant bias feature is appended to every row
//! and regularized with the rest of the weights. Training is fully
//! deterministic: identical inputs give identical weights bitwise.

use crate::error::{Error, Result};
use crate::tokenizer::TokenizerModel;

pub const GRAD_TOL: f64 = 1e-5;
const MAX_NEWTON_ITERS: usize = 60;
const MAX_CG_ITERS: usize = 250;

pub type SparseRow = Vec<(u32, f32)>;

/// Trained one-vs-rest linear attributor.
#[derive(Clone, Debug)]
pub struct LinearAttributor {
    pub classes: Vec<String>,
    /// Per class: feature weights followed by the bias at index `dim`.
    pub weights: Vec<Vec<f64>>,
    pub dim: usize,
    pub c: f64,
}

fn dot_row(w: &[f64], row: &SparseRow) -> f64 {
    let mut acc = w[w.len() - 1]; // bias
    for &(idx, v) in row {
        acc += w[idx as usize] * v as f64;
    }
    acc
}

/// Train one binary L2-regularized logistic problem (labels +-1).
fn train_binary(rows: &[&SparseRow], ys: &[f64], dim: usize, c: f64) -> Vec<f64> {
    let n_w = dim + 1;
    let mut w = vec![0.0f64; n_w];
    let mut margins = vec![0.0f64; rows.len()];

    let grad_of = |w: &[f64], margins: &[f64]| -> Vec<f64> {
        let mut g = w.to_vec();
        for (i, row) in rows.iter().enumerate() {
            // d/dw ln(1+exp(-y m)) = -y x sigma(-y m)
            let s = sigmoid(-ys[i] * margins[i]);
            let coeff = -c * ys[i] * s;
            for &(idx, v) in row.iter() {
                g[idx as usize] += coeff * v as f64;
            }
            g[n_w - 1] += coeff;
        }
        g
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    for _ in 0..MAX_NEWTON_ITERS {
        for (i, row) in rows.iter().enumerate() {
            margins[i] = dot_row(&w, row);
        }
        let g = grad_of(&w, &margins);
        if norm(&g) <= GRAD_TOL {
            break;
        }
        // Hessian diag factors: C * sigma(m) (1 - sigma(m)) per sample
        let d: Vec<f64> = margins
            .iter()
            .map(|&m| {
                let s = sigmoid(m);
                c * s * (1.0 - s)
            })
            .collect();
        let hess_vec = |v: &[f64]| -> Vec<f64> {
            let mut hv = v.to_vec();
            for (i, row) in rows.iter().enumerate() {
                let mut xv = v[n_w - 1];
                for &(idx, val) in row.iter() {
                    xv += v[idx as usize] * val as f64;
                }
                let coeff = d[i] * xv;
                for &(idx, val) in row.iter() {
                    hv[idx as usize] += coeff * val as f64;
                }
                hv[n_w - 1] += coeff;
            }
            hv
        };

        // CG solve H s = -g
        let mut s = vec![0.0f64; n_w];
        let mut r: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut p = r.clone();
        let mut rs_old: f64 = r.iter().map(|x| x * x).sum();
        let cg_tol = (GRAD_TOL * 0.1).max(1e-10 * rs_old.sqrt());
        for _ in 0..MAX_CG_ITERS {
            if rs_old.sqrt() <= cg_tol {
                break;
            }
            let hp = hess_vec(&p);
            let php: f64 = p.iter().zip(&hp).map(|(a, b)| a * b).sum();
            if php <= 0.0 {
                break;
            }
            let alpha = rs_old / php;
            for i in 0..n_w {
                s[i] += alpha * p[i];
                r[i] -= alpha * hp[i];
            }
            let rs_new: f64 = r.iter().map(|x| x * x).sum();
            let beta = rs_new / rs_old;
            for i in 0..n_w {
                p[i] = r[i] + beta * p[i];
            }
            rs_old = rs_new;
        }

        // backtracking on the objective
        let objective = |w: &[f64]| -> f64 {
            let reg: f64 = 0.5 * w.iter().map(|x| x * x).sum::<f64>();
            let data: f64 = rows
                .iter()
                .enumerate()
                .map(|(i, row)| ln_1p_exp(-ys[i] * dot_row(w, row)))
                .sum();
            reg + c * data
        };
        let f0 = objective(&w);
        let g_dot_s: f64 = g.iter().zip(&s).map(|(a, b)| a * b).sum();
        let mut step = 1.0f64;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = w.iter().zip(&s).map(|(a, b)| a + step * b).collect();
            if objective(&trial) <= f0 + 1e-4 * step * g_dot_s {
                w = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // no descent possible at float precision
        }
    }
    w
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + exp(x)).
#[inline]
fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One-vs-rest training over scaled sparse rows.
pub fn train_linear(
    rows: &[SparseRow],
    label_idx: &[usize],
    classes: &[String],
    dim: usize,
    c: f64,
) -> Result<LinearAttributor> {
    if classes.len() < 2 {
        return Err(Error::config("training needs at least 2 classes"));
    }
    if rows.len() != label_idx.len() || rows.is_empty() {
        return Err(Error::data("rows and labels mismatch or empty"));
    }
    let mut seen = vec![false; classes.len()];
    for &l in label_idx {
        seen[l] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::config("a class has no training samples"));
    }
    if c <= 0.0 {
        return Err(Error::config("regularization C must be positive"));
    }
    let row_refs: Vec<&SparseRow> = rows.iter().collect();
    let weights: Vec<Vec<f64>> = (0..classes.len())
        .map(|class| {
            let ys: Vec<f64> = label_idx
                .iter()
                .map(|&l| if l == class { 1.0 } else { -1.0 })
                .collect();
            train_binary(&row_refs, &ys, dim, c)
        })
        .collect();
    Ok(LinearAttributor {
        classes: classes.to_vec(),
        weights,
        dim,
        c,
    })
}

impl LinearAttributor {
    /// Per-class decision values for one row.
    pub fn decision(&self, row: &SparseRow) -> Vec<f64> {
        self.weights.iter().map(|w| dot_row(w, row)).collect()
    }

    /// Predicted class index: maximum decision value, ties broken by the
    /// lowest class index.
    pub fn predict(&self, row: &SparseRow) -> usize {
        let d = self.decision(row);
        let mut best = 0usize;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if v > d[best] {
                best = i;
            }
        }
        best
    }

    /// The k largest positive weights of one class's one-vs-rest problem,
    /// decoded to printable tokens (whitespace rendered as '_'). Ties
    /// break by ascending token id; the bias never appears. k larger than
    /// the vocabulary clamps.
    pub fn top_features(
        &self,
        class: usize,
        k: usize,
        tokenizer: &TokenizerModel,
    ) -> Vec<(String, f64)> {
        let w = &self.weights[class];
        let mut entries: Vec<(u32, f64)> = (0..self.dim as u32)
            .map(|id| (id, w[id as usize]))
            .filter(|&(_, weight)| weight > 0.0)
            .collect();
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        entries
            .into_iter()
            .take(k)
            .map(|(id, weight)| (tokenizer.render_token(id), weight))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    fn two_class_rows() -> (Vec<SparseRow>, Vec<usize>, Vec<String>) {
        // class 0 uses features {1,2}, class 1 uses {5,6}: separable
        let rows = vec![
            vec![(1u32, 0.9f32), (2, 0.5)],
            vec![(1, 0.7), (2, 0.8)],
            vec![(1, 1.0)],
            vec![(5, 0.9), (6, 0.4)],
            vec![(5, 0.6), (6, 0.9)],
            vec![(6, 1.0)],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        let classes = vec!["a".to_string(), "b".to_string()];
        (rows, labels, classes)
    }

    #[test]
    fn separable_data_reaches_full_train_accuracy() {
        let (rows, labels, classes) = two_class_rows();
        let att = train_linear(&rows, &labels, &classes, 8, 1.0).unwrap();
        for (row, &label) in rows.iter().zip(&labels) {
            assert_eq!(att.predict(row), label);
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (rows, labels, classes) = two_class_rows();
        let a = train_linear(&rows, &labels, &classes, 8, 1.0).unwrap();
        let b = train_linear(&rows, &labels, &classes, 8, 1.0).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn gradient_norm_tolerance_is_met() {
        let (rows, labels, classes) = two_class_rows();
        let att = train_linear(&rows, &labels, &classes, 8, 1.0).unwrap();
        // recompute the gradient of class 0's problem at the solution
        let w = &att.weights[0];
        let mut g = w.clone();
        for (row, &label) in rows.iter().zip(&labels) {
            let y = if label == 0 { 1.0 } else { -1.0 };
            let m = dot_row(w, row);
            let coeff = -1.0 * y * sigmoid(-y * m);
            for &(idx, v) in row {
                g[idx as usize] += coeff * v as f64;
            }
            let last = g.len() - 1;
            g[last] += coeff;
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= GRAD_TOL * 1.01, "gradient norm {norm}");
    }

    #[test]
    fn vanishing_c_shrinks_weights_to_zero() {
        let (rows, labels, classes) = two_class_rows();
        let att = train_linear(&rows, &labels, &classes, 8, 1e-9).unwrap();
        for w in &att.weights {
            for &v in w {
                assert!(v.abs() < 1e-6, "weight {v} did not vanish");
            }
        }
        // all-zero decisions: tie broken by lowest class index
        assert_eq!(att.predict(&rows[4]), 0);
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![(1u32, 1.0f32)], vec![(2, 1.0)]];
        let labels = vec![0, 0];
        let err = train_linear(&rows, &labels, &["a".to_string()], 4, 1.0)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // declared class missing from the training labels
        let err = train_linear(
            &rows,
            &labels,
            &["a".to_string(), "b".to_string()],
            4,
            1.0,
        )
        .map(|_| ())
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn top_features_sorts_and_breaks_ties_by_id() {
        let tok = train_bpe(&vec!["zq zq".to_string()], 257).unwrap();
        let mut att = LinearAttributor {
            classes: vec!["a".into(), "b".into()],
            weights: vec![vec![0.0; 257 + 1], vec![0.0; 257 + 1]],
            dim: 257,
            c: 1.0,
        };
        // hand-set weights: t97('a'):3, t98('b'):2, t99('c'):1
        att.weights[0][97] = 3.0;
        att.weights[0][98] = 2.0;
        att.weights[0][99] = 1.0;
        let top = att.top_features(0, 2, &tok);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0], ("a".to_string(), 3.0));
        assert_eq!(top[1], ("b".to_string(), 2.0));
        // ties: equal weights on ids 100 and 50 -> id 50 first
        att.weights[1][100] = 5.0;
        att.weights[1][50] = 5.0;
        let top = att.top_features(1, 2, &tok);
        assert_eq!(top[0].1, 5.0);
        assert_eq!(top[0].0, tok.render_token(50));
        // k beyond vocab clamps; negative weights never appear
        att.weights[1][10] = -9.0;
        let all = att.top_features(1, 10_000, &tok);
        assert_eq!(all.len(), 2);
    }
}
