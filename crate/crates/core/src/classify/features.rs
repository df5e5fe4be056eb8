//! Bag-of-subwords features: per-document relative unigram frequencies
//! over the shared tokenizer vocabulary, min-max scaled per feature with
//! statistics fit on the training split only.
//!
//! Special ids (BOS/EOS) sit outside the tokenizer's text vocabulary and
//! therefore can never appear in a feature vector. Because frequencies
//! are nonnegative and scaled values clamp into [0, 1], absent features
//! stay exactly zero and rows remain sparse after scaling.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::tokenizer::TokenizerModel;

/// Sparse feature rows over a fixed vocabulary dimension.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    /// Per document: (feature index, value), sorted by index.
    pub rows: Vec<Vec<(u32, f32)>>,
    pub dim: usize,
    /// Documents whose tokenization was empty (zero vectors, flagged).
    pub empty_rows: Vec<usize>,
}

/// Raw relative-frequency features for a set of texts.
pub fn featurize_counts(texts: &[String], tokenizer: &TokenizerModel) -> FeatureMatrix {
    let dim = tokenizer.vocab_size();
    let rows: Vec<Vec<(u32, f32)>> = texts
        .par_iter()
        .map(|text| {
            let ids = tokenizer.encode_str(text);
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for id in &ids {
                *counts.entry(*id).or_insert(0) += 1;
            }
            let total = ids.len() as f32;
            let mut row: Vec<(u32, f32)> = counts
                .into_iter()
                .map(|(id, c)| (id, c as f32 / total))
                .collect();
            row.sort_unstable_by_key(|&(id, _)| id);
            row
        })
        .collect();
    let empty_rows = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_empty())
        .map(|(i, _)| i)
        .collect();
    FeatureMatrix {
        rows,
        dim,
        empty_rows,
    }
}

/// Per-feature min-max statistics fit on the training rows only.
#[derive(Clone, Debug)]
pub struct MinMaxScaler {
    mins: Vec<f32>,
    maxs: Vec<f32>,
}

impl MinMaxScaler {
    /// Fit on the given training rows. A feature absent from some training
    /// row has an implicit value of 0 there, so its min is 0.
    pub fn fit(matrix: &FeatureMatrix, train_rows: &[usize]) -> Self {
        let dim = matrix.dim;
        let mut mins = vec![f32::INFINITY; dim];
        let mut maxs = vec![0.0f32; dim];
        let mut present = vec![0usize; dim];
        for &r in train_rows {
            for &(idx, v) in &matrix.rows[r] {
                let i = idx as usize;
                present[i] += 1;
                if v < mins[i] {
                    mins[i] = v;
                }
                if v > maxs[i] {
                    maxs[i] = v;
                }
            }
        }
        for i in 0..dim {
            if present[i] < train_rows.len() {
                mins[i] = 0.0; // implicit zero somewhere in train
            }
            if present[i] == 0 {
                maxs[i] = 0.0;
            }
        }
        MinMaxScaler { mins, maxs }
    }

    /// Scale one row into [0, 1]; out-of-range values (possible outside the
    /// training split) clamp to the interval ends.
    pub fn transform_row(&self, row: &[(u32, f32)]) -> Vec<(u32, f32)> {
        row.iter()
            .filter_map(|&(idx, v)| {
                let i = idx as usize;
                let span = self.maxs[i] - self.mins[i];
                if span <= 0.0 {
                    return None; // constant feature carries no signal
                }
                let scaled = ((v - self.mins[i]) / span).clamp(0.0, 1.0);
                (scaled != 0.0).then_some((idx, scaled))
            })
            .collect()
    }

    pub fn transform(&self, matrix: &FeatureMatrix) -> Vec<Vec<(u32, f32)>> {
        matrix
            .rows
            .par_iter()
            .map(|row| self.transform_row(row))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    fn plain_tokenizer() -> TokenizerModel {
        // single merge on a throwaway corpus: effectively byte-level
        train_bpe(&vec!["zq zq".to_string()], 257).unwrap()
    }

    #[test]
    fn single_token_document_has_unit_frequency() {
        let tok = plain_tokenizer();
        let m = featurize_counts(&["a".to_string()], &tok);
        assert_eq!(m.rows[0], vec![(97, 1.0)]);
        assert!(m.empty_rows.is_empty());
    }

    #[test]
    fn empty_document_is_flagged() {
        let tok = plain_tokenizer();
        let m = featurize_counts(&["".to_string(), "ab".to_string()], &tok);
        assert_eq!(m.empty_rows, vec![0]);
        assert!(m.rows[0].is_empty());
    }

    #[test]
    fn relative_frequencies_sum_to_one() {
        let tok = plain_tokenizer();
        let m = featurize_counts(&["abab".to_string(), "hello world".to_string()], &tok);
        for row in &m.rows {
            let sum: f32 = row.iter().map(|&(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scaling_maps_half_of_max_to_half() {
        // feature with train max 0.5 and train min 0: document value 0.25
        // scales to 0.5
        let matrix = FeatureMatrix {
            rows: vec![
                vec![(7, 0.5)],
                vec![(7, 0.25), (9, 1.0)],
                vec![(9, 0.5)],
            ],
            dim: 16,
            empty_rows: vec![],
        };
        let scaler = MinMaxScaler::fit(&matrix, &[0, 1, 2]);
        let scaled = scaler.transform_row(&matrix.rows[1]);
        assert_eq!(scaled, vec![(7, 0.5), (9, 1.0)]);
    }

    #[test]
    fn scaled_train_columns_span_zero_to_one() {
        let tok = plain_tokenizer();
        let texts: Vec<String> = vec![
            "the cat sat on the mat".into(),
            "a dog and a log".into(),
            "cats and dogs and cats".into(),
            "mat mat mat dog".into(),
        ];
        let matrix = featurize_counts(&texts, &tok);
        let train: Vec<usize> = vec![0, 1, 2, 3];
        let scaler = MinMaxScaler::fit(&matrix, &train);
        let scaled = scaler.transform(&matrix);
        // direct column scan
        let mut col_max = vec![0.0f32; matrix.dim];
        let mut col_min = vec![f32::INFINITY; matrix.dim];
        let mut col_present = vec![0usize; matrix.dim];
        for row in &scaled {
            for &(idx, v) in row {
                let i = idx as usize;
                col_present[i] += 1;
                col_max[i] = col_max[i].max(v);
                col_min[i] = col_min[i].min(v);
            }
        }
        for i in 0..matrix.dim {
            if col_present[i] == 0 {
                continue;
            }
            assert!(
                (col_max[i] - 1.0).abs() < 1e-6,
                "column {i} max is {}",
                col_max[i]
            );
            // sparse rows imply an implicit 0 whenever a feature is absent
            let effective_min = if col_present[i] < scaled.len() {
                0.0
            } else {
                col_min[i]
            };
            assert!(effective_min.abs() < 1e-6, "column {i} min is {effective_min}");
            for row in &scaled {
                for &(idx, v) in row {
                    if idx as usize == i {
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }

    #[test]
    fn test_rows_clamp_into_unit_interval() {
        let matrix = FeatureMatrix {
            rows: vec![vec![(3, 0.2)], vec![(3, 0.4)], vec![(3, 0.9)]],
            dim: 8,
            empty_rows: vec![],
        };
        // fit on rows 0 and 1 only; row 2 exceeds the train max
        let scaler = MinMaxScaler::fit(&matrix, &[0, 1]);
        let scaled = scaler.transform_row(&matrix.rows[2]);
        assert_eq!(scaled, vec![(3, 1.0)]);
    }

    #[test]
    fn scaler_ignores_test_rows_entirely() {
        let tok = plain_tokenizer();
        let texts: Vec<String> = vec![
            "alpha beta gamma".into(),
            "beta gamma delta".into(),
            "completely different test row zzz".into(),
        ];
        let matrix = featurize_counts(&texts, &tok);
        let with_test = MinMaxScaler::fit(&matrix, &[0, 1]);
        let matrix_no_test = featurize_counts(&texts[..2].to_vec(), &tok);
        let without_test = MinMaxScaler::fit(&matrix_no_test, &[0, 1]);
        assert_eq!(with_test.mins, without_test.mins);
        assert_eq!(with_test.maxs, without_test.maxs);
    }
}
