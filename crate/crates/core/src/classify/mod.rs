//! Attribution classifiers and evaluation.
//!
//! Two classifier families probe different levels of textual signal: a
//! unigram (bag-of-subwords) logistic regression over min-max-scaled
//! relative frequencies, and a from-scratch transformer encoder. Both are
//! evaluated over several random splits; reports carry mean and standard
//! deviation, the chance rate, an exact binomial p-value, a summed
//! confusion matrix, and (for the linear model) top-weighted features.

pub mod encoder;
pub mod features;
pub mod linear;

pub use encoder::{train_encoder, EncoderAttributor, EncoderConfig, EncoderTrainOutput};
pub use features::{featurize_counts, FeatureMatrix, MinMaxScaler};
pub use linear::{train_linear, LinearAttributor, SparseRow, GRAD_TOL};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{AttributionDataset, SplitKind};
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::stats;
use crate::tokenizer::TokenizerModel;

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy and confusion matrix from predicted vs. true class indices.
pub fn evaluate_predictions(
    predicted: &[usize],
    truth: &[usize],
    n_classes: usize,
) -> Result<EvalResult> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::data("prediction/label length mismatch or empty"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut correct = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::data(format!(
                "label {t} or prediction {p} outside the {n_classes}-class space"
            )));
        }
        confusion[t][p] += 1;
        if p == t {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / truth.len() as f64,
        correct,
        total: truth.len(),
        confusion,
    })
}

/// One-sided exact binomial tail: probability of at least the observed
/// number of correct answers under the chance rate.
pub fn binomial_significance(accuracy: f64, n_test: usize, chance: f64) -> f64 {
    let correct = (accuracy * n_test as f64).round() as u64;
    stats::binom_tail_geq(n_test as u64, correct, chance)
}

// ---------------------------------------------------------------------------
// Repeated evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Unigram,
    Encoder,
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassifierKind::Unigram => write!(f, "unigram"),
            ClassifierKind::Encoder => write!(f, "encoder"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RepeatedEvalOptions {
    pub kind: ClassifierKind,
    pub split_seeds: Vec<u64>,
    pub val_size: usize,
    pub test_size: usize,
    /// Regularization strength for the linear model.
    pub c: f64,
    pub encoder: EncoderConfig,
    /// Subsample the training split to this many rows (seeded) before
    /// fitting; used by training-size sweeps.
    pub train_subsample: Option<usize>,
}

impl Default for RepeatedEvalOptions {
    fn default() -> Self {
        RepeatedEvalOptions {
            kind: ClassifierKind::Unigram,
            split_seeds: vec![1, 2, 3],
            val_size: 500,
            test_size: 500,
            c: 1.0,
            encoder: EncoderConfig::default(),
            train_subsample: None,
        }
    }
}

/// Attribution outcome over several random splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionReport {
    pub setting: String,
    pub classifier: String,
    pub split_seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the split seeds.
    pub std: f64,
    pub chance_rate: f64,
    /// Exact binomial tail for the mean accuracy at one split's test size.
    pub p_value: f64,
    pub n_test: usize,
    pub n_classes: usize,
    pub classes: Vec<String>,
    /// Summed over split seeds; rows = true class.
    pub confusion: Vec<Vec<usize>>,
    /// Linear model only: per class, top-10 (token, weight), last seed.
    #[serde(default)]
    pub top_features: BTreeMap<String, Vec<(String, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

impl AttributionReport {
    /// Paper-style "44.5 ± 0.8" rendering of the accuracy.
    pub fn mean_std_pct(&self) -> String {
        stats::format_mean_std_pct(self.mean, self.std)
    }

    pub fn chance_rate_pct(&self) -> String {
        stats::format_chance_rate(self.n_classes)
    }
}

/// Split -> featurize/train -> evaluate for every split seed, then
/// aggregate. The dataset's texts and labels stay fixed; only the split
/// assignment varies per seed.
pub fn repeated_eval(
    texts: &[String],
    labels: &[String],
    tokenizer: &TokenizerModel,
    setting: &str,
    opts: &RepeatedEvalOptions,
) -> Result<AttributionReport> {
    if opts.split_seeds.len() < 2 {
        return Err(Error::config("need at least 2 split seeds"));
    }
    let mut accuracies = Vec::new();
    let mut confusion_sum: Option<Vec<Vec<usize>>> = None;
    let mut classes: Vec<String> = Vec::new();
    let mut top_features = BTreeMap::new();
    let mut warning = None;
    let mut n_test_min = usize::MAX;

    // tokenization-derived features are split-independent
    let counts = featurize_counts(texts, tokenizer);

    for &seed in &opts.split_seeds {
        let dataset = crate::datakit::split_dataset(
            texts.to_vec(),
            labels.to_vec(),
            seed,
            opts.val_size,
            opts.test_size,
        )?;
        classes = dataset.classes.clone();
        let result = match opts.kind {
            ClassifierKind::Unigram => {
                eval_unigram_once(&dataset, &counts, opts, &mut top_features, tokenizer)?
            }
            ClassifierKind::Encoder => {
                let (res, warn) = eval_encoder_once(&dataset, tokenizer, opts, seed)?;
                if let Some(w) = warn {
                    warning = Some(w);
                }
                res
            }
        };
        n_test_min = n_test_min.min(result.total);
        accuracies.push(result.accuracy);
        match &mut confusion_sum {
            None => confusion_sum = Some(result.confusion),
            Some(sum) => {
                for (row, r2) in sum.iter_mut().zip(result.confusion) {
                    for (a, b) in row.iter_mut().zip(r2) {
                        *a += b;
                    }
                }
            }
        }
    }

    let (mean, std) = stats::mean_std(&accuracies);
    let n_classes = classes.len();
    let chance = 1.0 / n_classes as f64;
    Ok(AttributionReport {
        setting: setting.to_string(),
        classifier: opts.kind.to_string(),
        split_seeds: opts.split_seeds.clone(),
        accuracies,
        mean,
        std,
        chance_rate: chance,
        p_value: binomial_significance(mean, n_test_min, chance),
        n_test: n_test_min,
        n_classes,
        classes,
        confusion: confusion_sum.unwrap_or_default(),
        top_features,
        warning,
    })
}

fn subsample_train(train: Vec<usize>, opts: &RepeatedEvalOptions, seed: u64) -> Vec<usize> {
    let Some(k) = opts.train_subsample else {
        return train;
    };
    if k >= train.len() {
        return train;
    }
    let mut rng = StreamKey::new("train-subsample")
        .push_u64(seed)
        .push_u64(k as u64)
        .rng();
    let mut pool = train;
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

fn eval_unigram_once(
    dataset: &AttributionDataset,
    counts: &FeatureMatrix,
    opts: &RepeatedEvalOptions,
    top_features: &mut BTreeMap<String, Vec<(String, f64)>>,
    tokenizer: &TokenizerModel,
) -> Result<EvalResult> {
    let train = subsample_train(dataset.indices(SplitKind::Train), opts, dataset.split_seed);
    let test = dataset.indices(SplitKind::Test);
    if test.is_empty() {
        return Err(Error::config("unigram evaluation needs a test split"));
    }
    let scaler = MinMaxScaler::fit(counts, &train);
    let train_rows: Vec<SparseRow> = train
        .iter()
        .map(|&i| scaler.transform_row(&counts.rows[i]))
        .collect();
    let labels_idx: Vec<usize> = train
        .iter()
        .map(|&i| dataset.class_index(&dataset.labels[i]).expect("known label"))
        .collect();
    let attributor = train_linear(
        &train_rows,
        &labels_idx,
        &dataset.classes,
        counts.dim,
        opts.c,
    )?;
    let predictions: Vec<usize> = test
        .iter()
        .map(|&i| attributor.predict(&scaler.transform_row(&counts.rows[i])))
        .collect();
    let truth: Vec<usize> = test
        .iter()
        .map(|&i| dataset.class_index(&dataset.labels[i]).expect("known label"))
        .collect();
    for (c, name) in dataset.classes.iter().enumerate() {
        top_features.insert(name.clone(), attributor.top_features(c, 10, tokenizer));
    }
    evaluate_predictions(&predictions, &truth, dataset.n_classes())
}

fn eval_encoder_once(
    dataset: &AttributionDataset,
    tokenizer: &TokenizerModel,
    opts: &RepeatedEvalOptions,
    seed: u64,
) -> Result<(EvalResult, Option<String>)> {
    let train = subsample_train(dataset.indices(SplitKind::Train), opts, dataset.split_seed);
    let val = dataset.indices(SplitKind::Val);
    let test = dataset.indices(SplitKind::Test);
    if test.is_empty() {
        return Err(Error::config("encoder evaluation needs a test split"));
    }
    let gather_texts =
        |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| dataset.texts[i].clone()).collect() };
    let gather_labels = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .map(|&i| dataset.class_index(&dataset.labels[i]).expect("known label"))
            .collect()
    };
    let mut cfg = opts.encoder.clone();
    cfg.seed = cfg.seed.wrapping_mul(31).wrapping_add(seed);
    let out = train_encoder(
        &gather_texts(&train),
        &gather_labels(&train),
        &gather_texts(&val),
        &gather_labels(&val),
        &dataset.classes,
        tokenizer,
        &cfg,
    )?;
    let predictions = out.attributor.predict(&gather_texts(&test), tokenizer)?;
    let result = evaluate_predictions(&predictions, &gather_labels(&test), dataset.n_classes())?;
    let warning = out
        .no_improvement_warning
        .then(|| format!("split {seed}: validation accuracy never improved"));
    Ok((result, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::split_dataset;
    use crate::tokenizer::train_bpe;

    #[test]
    fn perfect_predictor_scores_one() {
        let truth = vec![0, 1, 2, 1, 0];
        let result = evaluate_predictions(&truth.clone(), &truth, 3).unwrap();
        assert_eq!(result.accuracy, 1.0);
        for (t, row) in result.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                if t == p {
                    assert_eq!(count, truth.iter().filter(|&&x| x == t).count());
                } else {
                    assert_eq!(count, 0);
                }
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_labels_hits_chance() {
        let truth: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let constant = vec![1usize; 300];
        let result = evaluate_predictions(&constant, &truth, 3).unwrap();
        assert!((result.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_label_is_a_data_error() {
        let err = evaluate_predictions(&[0, 1], &[0, 7], 3).map(|_| ()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn chance_rates_render_like_the_reports() {
        let r = AttributionReport {
            setting: "s".into(),
            classifier: "unigram".into(),
            split_seeds: vec![1, 2, 3],
            accuracies: vec![0.44, 0.45, 0.445],
            mean: 0.445,
            std: 0.008,
            chance_rate: 1.0 / 3.0,
            p_value: 0.0,
            n_test: 100,
            n_classes: 3,
            classes: vec!["a".into(), "b".into(), "c".into()],
            confusion: vec![],
            top_features: BTreeMap::new(),
            warning: None,
        };
        assert_eq!(r.mean_std_pct(), "44.5 ± 0.8");
        assert_eq!(r.chance_rate_pct(), "33.3%");
        let six = AttributionReport {
            n_classes: 6,
            ..r
        };
        assert_eq!(six.chance_rate_pct(), "16.7%");
    }

    #[test]
    fn binomial_significance_edges() {
        // accuracy at chance with large n sits near one half
        let p = binomial_significance(1.0 / 3.0, 30_000, 1.0 / 3.0);
        assert!((p - 0.5).abs() < 0.01);
        // 400/1000 at chance 1/3 is well below 1e-5
        assert!(binomial_significance(0.4, 1000, 1.0 / 3.0) < 1e-5);
        // zero correct has tail probability one
        assert_eq!(binomial_significance(0.0, 50, 0.5), 1.0);
    }

    fn sentinel_dataset(n_per_class: usize) -> (Vec<String>, Vec<String>, TokenizerModel) {
        // sentinel alphabets are disjoint from the filler words, so the
        // classes are word-frequency-separable by construction
        let sentinels = ["xqzx", "wjwj", "ffybf"];
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        let mut rng = StreamKey::new("classify-fixture").push_u64(1).rng();
        for class in 0..3usize {
            for _ in 0..n_per_class {
                // interleave the sentinel so its relative frequency is
                // stable across documents
                let doc: String = (0..rng.gen_range(4..9))
                    .map(|_| {
                        let filler = ["rana", "keso", "muvi", "tolo", "pando"][rng.gen_range(0..5)];
                        format!("{filler} {}", sentinels[class])
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                texts.push(doc);
                labels.push(format!("m{class}"));
            }
        }
        let tok = train_bpe(&texts, 320).unwrap();
        (texts, labels, tok)
    }

    #[test]
    fn unigram_repeated_eval_on_sentinels_is_near_perfect() {
        let (texts, labels, tok) = sentinel_dataset(40);
        let opts = RepeatedEvalOptions {
            kind: ClassifierKind::Unigram,
            split_seeds: vec![1, 2, 3],
            val_size: 10,
            test_size: 30,
            ..Default::default()
        };
        let report = repeated_eval(&texts, &labels, &tok, "sentinel", &opts).unwrap();
        assert!(report.mean > 0.99, "mean accuracy {}", report.mean);
        assert_eq!(report.n_classes, 3);
        assert!((report.chance_rate - 1.0 / 3.0).abs() < 1e-12);
        assert!(report.p_value < 1e-10);
        // each class's sentinel token ranks first for its class
        for class in 0..3usize {
            let top = &report.top_features[&format!("m{class}")];
            let expected = ["xqzx", "wjwj", "ffybf"][class];
            let head: String = top.iter().take(3).map(|(t, _)| t.as_str()).collect();
            assert!(
                head.contains(expected.trim_start_matches('_'))
                    || head.contains(&expected[..3]),
                "class {class}: top features {head:?} do not reflect {expected}"
            );
        }
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let (texts, labels, tok) = sentinel_dataset(20);
        let opts = RepeatedEvalOptions {
            kind: ClassifierKind::Unigram,
            split_seeds: vec![7, 7, 7],
            val_size: 6,
            test_size: 12,
            ..Default::default()
        };
        let report = repeated_eval(&texts, &labels, &tok, "same-seed", &opts).unwrap();
        assert_eq!(report.std, 0.0);
        assert_eq!(report.accuracies[0], report.accuracies[1]);
    }

    #[test]
    fn hand_fed_accuracies_aggregate_by_closed_form() {
        let (mean, std) = stats::mean_std(&[0.4, 0.5, 0.6]);
        assert!((mean - 0.5).abs() < 1e-15);
        assert!((std - (1.0f64 / 150.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn negative_control_stays_at_chance_for_unigram() {
        // shuffled labels: accuracy inside the exact 99% binomial band
        let (texts, mut labels, tok) = sentinel_dataset(60);
        let mut rng = StreamKey::new("label-shuffle").push_u64(3).rng();
        for i in (1..labels.len()).rev() {
            let j = rng.gen_range(0..=i);
            labels.swap(i, j);
        }
        let opts = RepeatedEvalOptions {
            kind: ClassifierKind::Unigram,
            split_seeds: vec![1, 2, 3],
            val_size: 20,
            test_size: 60,
            ..Default::default()
        };
        let report = repeated_eval(&texts, &labels, &tok, "control", &opts).unwrap();
        let correct = (report.mean * report.n_test as f64).round() as u64;
        assert!(
            stats::within_binomial_ci(correct, report.n_test as u64, 1.0 / 3.0, 0.01),
            "shuffled-label accuracy {} escaped the chance band",
            report.mean
        );
    }

    #[test]
    fn scaler_leak_freedom_via_split() {
        // deleting the test split does not change the fitted scaler
        let (texts, labels, tok) = sentinel_dataset(15);
        let counts = featurize_counts(&texts, &tok);
        let ds = split_dataset(texts.clone(), labels.clone(), 5, 5, 10).unwrap();
        let train = ds.indices(SplitKind::Train);
        let scaler_full = MinMaxScaler::fit(&counts, &train);
        // rebuild the matrix with test rows zeroed out entirely
        let mut counts_wiped = counts.clone();
        for &i in &ds.indices(SplitKind::Test) {
            counts_wiped.rows[i].clear();
        }
        let scaler_wiped = MinMaxScaler::fit(&counts_wiped, &train);
        let probe = &counts.rows[train[0]];
        assert_eq!(
            scaler_full.transform_row(probe),
            scaler_wiped.transform_row(probe)
        );
    }
}
