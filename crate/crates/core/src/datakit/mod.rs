//! Corpus ingestion, semantic deduplication, and dataset splitting.

pub mod dedup;
pub mod synth;

pub use dedup::{
    all_pairs_dedup, cosine_distance, dedup_discrepancy, default_k_clusters, embed_for_dedup,
    semantic_dedup, DedupEmbedding, DedupOutcome, DEFAULT_EPS, EMBED_DIM,
};
pub use synth::{synth_corpus, SynthSpec};

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::textgen::GeneratedSample;

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

/// Read a document corpus: JSONL with a `text` field per line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Row {
        text: String,
    }
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        docs.push(row.text);
    }
    if docs.is_empty() {
        return Err(Error::data(format!("{} holds no documents", path.display())));
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for text in docs {
        serde_json::to_writer(&mut buf, &serde_json::json!({ "text": text }))
            .map_err(|e| Error::format(e.to_string()))?;
        buf.push(b'\n');
    }
    crate::labctl::atomic_write(path, &buf)
}

// ---------------------------------------------------------------------------
// Attribution dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Labeled texts with a train/val/test assignment.
#[derive(Clone, Debug)]
pub struct AttributionDataset {
    pub texts: Vec<String>,
    pub labels: Vec<String>,
    pub split: Vec<SplitKind>,
    pub split_seed: u64,
    /// Distinct labels, sorted; class index = position here.
    pub classes: Vec<String>,
}

impl AttributionDataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn chance_rate(&self) -> f64 {
        1.0 / self.n_classes() as f64
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn indices(&self, kind: SplitKind) -> Vec<usize> {
        (0..self.texts.len())
            .filter(|&i| self.split[i] == kind)
            .collect()
    }
}

/// Uniform random split without stratification: `test_size` samples to
/// test, `val_size` to validation, the rest to train.
pub fn split_dataset(
    texts: Vec<String>,
    labels: Vec<String>,
    split_seed: u64,
    val_size: usize,
    test_size: usize,
) -> Result<AttributionDataset> {
    if texts.len() != labels.len() {
        return Err(Error::data("texts and labels differ in length"));
    }
    let n = texts.len();
    if val_size + test_size >= n {
        return Err(Error::config(format!(
            "val {val_size} + test {test_size} must be below the sample count {n}"
        )));
    }
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::config("attribution needs at least 2 classes"));
    }

    let mut rng = StreamKey::new("dataset-split").push_u64(split_seed).rng();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut split = vec![SplitKind::Train; n];
    for &i in order.iter().take(test_size) {
        split[i] = SplitKind::Test;
    }
    for &i in order.iter().skip(test_size).take(val_size) {
        split[i] = SplitKind::Val;
    }

    let dataset = AttributionDataset {
        texts,
        labels,
        split,
        split_seed,
        classes,
    };
    // invariant: every class appears in train
    let mut train_classes: Vec<&String> = dataset
        .indices(SplitKind::Train)
        .into_iter()
        .map(|i| &dataset.labels[i])
        .collect();
    train_classes.sort_unstable();
    train_classes.dedup();
    if train_classes.len() != dataset.classes.len() {
        return Err(Error::data(format!(
            "split seed {split_seed} left a class without training samples"
        )));
    }
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Dedup-then-split pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DedupReport {
    pub removed_count: usize,
    pub removed_fraction: f64,
    pub per_class_removed: BTreeMap<String, usize>,
    pub clamped_k: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: usize,
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<SplitKind>,
    pub retained: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub removed_by: Option<usize>,
}

pub struct BuiltDataset {
    pub dataset: AttributionDataset,
    pub dedup: DedupReport,
    pub manifest: Vec<ManifestRow>,
}

/// Retained generated samples -> deduplicated, split dataset + manifest.
pub fn build_dataset(
    samples: &[GeneratedSample],
    eps: f64,
    k_clusters: Option<usize>,
    dedup_seed: u64,
    split_seed: u64,
    val_size: usize,
    test_size: usize,
) -> Result<BuiltDataset> {
    let kept: Vec<&GeneratedSample> = samples.iter().filter(|s| !s.dropped).collect();
    if kept.is_empty() {
        return Err(Error::data("no retained samples to build a dataset from"));
    }
    let embeddings: Vec<DedupEmbedding> = kept
        .par_iter()
        .map(|s| embed_for_dedup(&s.full_text))
        .collect();
    let k = k_clusters.unwrap_or_else(|| default_k_clusters(kept.len()));
    let outcome = semantic_dedup(&embeddings, eps, k, dedup_seed)?;

    let labels_all: Vec<String> = kept.iter().map(|s| s.model_id.clone()).collect();
    let texts: Vec<String> = outcome
        .retained
        .iter()
        .map(|&i| kept[i].full_text.clone())
        .collect();
    let labels: Vec<String> = outcome
        .retained
        .iter()
        .map(|&i| labels_all[i].clone())
        .collect();
    let dataset = split_dataset(texts, labels, split_seed, val_size, test_size)?;

    let mut split_of_retained = BTreeMap::new();
    for (pos, &orig) in outcome.retained.iter().enumerate() {
        split_of_retained.insert(orig, dataset.split[pos]);
    }
    let removed_by: BTreeMap<usize, usize> = outcome
        .removals
        .iter()
        .map(|r| (r.index, r.removed_by))
        .collect();
    let manifest: Vec<ManifestRow> = (0..kept.len())
        .map(|i| ManifestRow {
            id: i,
            model_id: labels_all[i].clone(),
            split: split_of_retained.get(&i).copied(),
            retained: !removed_by.contains_key(&i),
            removed_by: removed_by.get(&i).copied(),
        })
        .collect();

    let dedup = DedupReport {
        removed_count: outcome.removals.len(),
        removed_fraction: outcome.removed_fraction(kept.len()),
        per_class_removed: outcome.per_class_removed(&labels_all),
        clamped_k: outcome.clamped,
    };
    Ok(BuiltDataset {
        dataset,
        dedup,
        manifest,
    })
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| Error::format(e.to_string()))?;
        buf.push(b'\n');
    }
    crate::labctl::atomic_write(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled_fixture(n_per_class: usize) -> (Vec<String>, Vec<String>) {
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for class in ["m0", "m1", "m2"] {
            let docs = synth_corpus(&SynthSpec {
                seed: class.len() as u64 * 31 + class.as_bytes()[1] as u64,
                documents: n_per_class,
                topic: class.as_bytes()[1] as u64,
                min_sentences: 2,
                max_sentences: 4,
            });
            for d in docs {
                texts.push(d);
                labels.push(class.to_string());
            }
        }
        (texts, labels)
    }

    #[test]
    fn split_sizes_and_partition() {
        let (texts, labels) = labeled_fixture(40);
        let ds = split_dataset(texts, labels, 7, 20, 30).unwrap();
        assert_eq!(ds.indices(SplitKind::Test).len(), 30);
        assert_eq!(ds.indices(SplitKind::Val).len(), 20);
        assert_eq!(ds.indices(SplitKind::Train).len(), 120 - 50);
        assert_eq!(ds.classes, vec!["m0", "m1", "m2"]);
        // disjoint and exhaustive by construction of the enum; check counts
        let total = ds.indices(SplitKind::Train).len()
            + ds.indices(SplitKind::Val).len()
            + ds.indices(SplitKind::Test).len();
        assert_eq!(total, 120);
    }

    #[test]
    fn zero_sizes_mean_all_train() {
        let (texts, labels) = labeled_fixture(5);
        let ds = split_dataset(texts, labels, 1, 0, 0).unwrap();
        assert_eq!(ds.indices(SplitKind::Train).len(), 15);
    }

    #[test]
    fn infeasible_sizes_and_single_class_are_rejected() {
        let (texts, labels) = labeled_fixture(4);
        assert!(split_dataset(texts.clone(), labels, 1, 10, 3).is_err());
        let one_class: Vec<String> = vec!["m0".into(); texts.len()];
        assert!(split_dataset(texts, one_class, 1, 1, 1).is_err());
    }

    #[test]
    fn splits_are_seeded() {
        let (texts, labels) = labeled_fixture(30);
        let a = split_dataset(texts.clone(), labels.clone(), 1, 10, 10).unwrap();
        let b = split_dataset(texts.clone(), labels.clone(), 1, 10, 10).unwrap();
        let c = split_dataset(texts, labels, 2, 10, 10).unwrap();
        assert_eq!(a.split, b.split);
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn test_set_overlap_matches_hypergeometric_expectation() {
        // two independent seeds draw test sets of size k from n; overlap
        // should sit within 5 sigma of the hypergeometric expectation
        let (texts, labels) = labeled_fixture(200); // n = 600
        let n = 600.0;
        let k = 150usize;
        let seeds = [11u64, 22, 33];
        let splits: Vec<Vec<usize>> = seeds
            .iter()
            .map(|&s| {
                split_dataset(texts.clone(), labels.clone(), s, 0, k)
                    .unwrap()
                    .indices(SplitKind::Test)
            })
            .collect();
        let mean = k as f64 * k as f64 / n;
        let var = k as f64 * (k as f64 / n) * (1.0 - k as f64 / n) * ((n - k as f64) / (n - 1.0));
        for i in 0..splits.len() {
            for j in (i + 1)..splits.len() {
                let set: std::collections::HashSet<usize> = splits[i].iter().copied().collect();
                let overlap = splits[j].iter().filter(|x| set.contains(x)).count() as f64;
                assert!(
                    (overlap - mean).abs() <= 5.0 * var.sqrt(),
                    "overlap {overlap} vs mean {mean:.1} (5 sigma {:.1})",
                    5.0 * var.sqrt()
                );
            }
        }
    }

    #[test]
    fn build_dataset_pipeline_with_planted_duplicates() {
        let (texts, labels) = labeled_fixture(20);
        let mut samples: Vec<GeneratedSample> = texts
            .iter()
            .zip(&labels)
            .enumerate()
            .map(|(i, (t, l))| GeneratedSample {
                model_id: l.clone(),
                prompt_index: i,
                prompt: String::new(),
                continuation: t.clone(),
                full_text: t.clone(),
                dropped: false,
                drop_reason: None,
            })
            .collect();
        // plant one duplicate and one pre-dropped sample
        let mut dup = samples[0].clone();
        dup.prompt_index = 999;
        samples.push(dup);
        let mut degenerate = samples[1].clone();
        degenerate.dropped = true;
        degenerate.drop_reason = Some("5-gram repeated".into());
        samples.push(degenerate);

        let built = build_dataset(&samples, 0.2, None, 0, 5, 6, 9).unwrap();
        assert_eq!(built.dedup.removed_count, 1);
        assert_eq!(built.dataset.texts.len(), 60); // 61 kept - 1 duplicate
        assert_eq!(built.manifest.len(), 61); // dropped sample never enters
        let removed_rows: Vec<&ManifestRow> =
            built.manifest.iter().filter(|r| !r.retained).collect();
        assert_eq!(removed_rows.len(), 1);
        assert_eq!(removed_rows[0].removed_by, Some(0));
        assert_eq!(built.dedup.per_class_removed["m0"], 1);
        // manifest round trip
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &built.manifest).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 61);
        assert!(text.contains("\"removed_by\":0"));
    }

    #[test]
    fn corpus_files_round_trip() {
        let docs = synth_corpus(&SynthSpec::new(9, 12));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &docs).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, docs);
        assert!(read_corpus(&dir.path().join("missing.jsonl")).is_err());
    }
}
