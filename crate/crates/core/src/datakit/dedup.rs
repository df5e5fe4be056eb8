//! Semantic deduplication over hashed character n-gram embeddings.
//!
//! The embedding is a deterministic stand-in for a neural sentence
//! encoder: term frequencies of character 3-, 4- and 5-grams hashed into a
//! fixed-dimension vector and L2-normalized. Near-duplicate texts land at
//! tiny cosine distance; unrelated texts land far apart. Deduplication
//! clusters the embeddings with seeded k-means and greedily removes, in
//! input order, any sample closer than `eps` (cosine distance) to an
//! already-retained member of its cluster.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamKey;

pub const EMBED_DIM: usize = 2048;
pub const DEFAULT_EPS: f64 = 0.2;
const NGRAM_RANGE: std::ops::RangeInclusive<usize> = 3..=5;
const KMEANS_MAX_ITERS: usize = 25;

/// L2-normalized hashed n-gram term-frequency vector.
#[derive(Clone, Debug)]
pub struct DedupEmbedding {
    pub values: Vec<f32>,
    /// Empty documents embed to the zero vector and are treated as
    /// always-unique: never removed, never blocking another sample.
    pub is_empty: bool,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

/// Hashed character-n-gram embedding of one text.
pub fn embed_for_dedup(text: &str) -> DedupEmbedding {
    let chars: Vec<char> = text.chars().collect();
    let mut values = vec![0.0f32; EMBED_DIM];
    let mut any = false;
    let mut buf = String::new();
    for n in NGRAM_RANGE {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window.iter());
            let slot = (fnv1a(buf.as_bytes()) % EMBED_DIM as u64) as usize;
            values[slot] += 1.0;
            any = true;
        }
    }
    if !any {
        return DedupEmbedding {
            values,
            is_empty: true,
        };
    }
    let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    for v in values.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    DedupEmbedding {
        values,
        is_empty: false,
    }
}

/// Cosine distance between two embeddings (unit vectors assumed).
pub fn cosine_distance(a: &DedupEmbedding, b: &DedupEmbedding) -> f64 {
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    1.0 - dot
}

#[derive(Clone, Debug, PartialEq)]
pub struct Removal {
    /// Input index of the removed sample.
    pub index: usize,
    /// Input index of the earlier retained sample it duplicated.
    pub removed_by: usize,
}

#[derive(Clone, Debug, Default)]
pub struct DedupOutcome {
    /// Input indices kept, in input order.
    pub retained: Vec<usize>,
    pub removals: Vec<Removal>,
    /// True when k_clusters exceeded the sample count and was clamped.
    pub clamped: bool,
}

impl DedupOutcome {
    pub fn removed_fraction(&self, total: usize) -> f64 {
        self.removals.len() as f64 / total.max(1) as f64
    }

    pub fn per_class_removed(&self, labels: &[String]) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for r in &self.removals {
            *map.entry(labels[r.index].clone()).or_insert(0) += 1;
        }
        map
    }
}

/// Default cluster count when unset.
pub fn default_k_clusters(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

/// Clustered semantic dedup. Within each k-means cluster, samples are
/// visited in input order and removed when their cosine distance to an
/// already-retained cluster member falls below `eps` (the earlier sample
/// wins).
pub fn semantic_dedup(
    embeddings: &[DedupEmbedding],
    eps: f64,
    k_clusters: usize,
    seed: u64,
) -> Result<DedupOutcome> {
    if embeddings.is_empty() {
        return Err(Error::data("no samples to deduplicate"));
    }
    if !(0.0..2.0).contains(&eps) || eps <= 0.0 {
        return Err(Error::config(format!("eps {eps} outside (0, 2)")));
    }
    let n = embeddings.len();
    let clamped = k_clusters > n;
    let k = k_clusters.clamp(1, n);
    let assignment = kmeans_assign(embeddings, k, seed);

    let mut cluster_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        cluster_members[c].push(i); // input order preserved
    }
    let mut removed_by = vec![usize::MAX; n];
    for members in &cluster_members {
        let mut kept: Vec<usize> = Vec::new();
        for &i in members {
            if embeddings[i].is_empty {
                kept.push(i);
                continue;
            }
            let dup_of = kept.iter().copied().find(|&j| {
                !embeddings[j].is_empty && cosine_distance(&embeddings[i], &embeddings[j]) < eps
            });
            match dup_of {
                Some(j) => removed_by[i] = j,
                None => kept.push(i),
            }
        }
    }
    Ok(collect_outcome(removed_by, clamped))
}

/// Brute-force all-pairs reference: identical retention rule, no
/// clustering. Quadratic; used as the audit oracle on small datasets.
pub fn all_pairs_dedup(embeddings: &[DedupEmbedding], eps: f64) -> Result<DedupOutcome> {
    if embeddings.is_empty() {
        return Err(Error::data("no samples to deduplicate"));
    }
    if !(0.0..2.0).contains(&eps) || eps <= 0.0 {
        return Err(Error::config(format!("eps {eps} outside (0, 2)")));
    }
    let n = embeddings.len();
    let mut removed_by = vec![usize::MAX; n];
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..n {
        if embeddings[i].is_empty {
            kept.push(i);
            continue;
        }
        let dup_of = kept.iter().copied().find(|&j| {
            !embeddings[j].is_empty && cosine_distance(&embeddings[i], &embeddings[j]) < eps
        });
        match dup_of {
            Some(j) => removed_by[i] = j,
            None => kept.push(i),
        }
    }
    Ok(collect_outcome(removed_by, false))
}

/// Number of samples on which the clustered and all-pairs routes disagree.
pub fn dedup_discrepancy(a: &DedupOutcome, b: &DedupOutcome) -> usize {
    let removed_a: std::collections::BTreeSet<usize> =
        a.removals.iter().map(|r| r.index).collect();
    let removed_b: std::collections::BTreeSet<usize> =
        b.removals.iter().map(|r| r.index).collect();
    removed_a.symmetric_difference(&removed_b).count()
}

fn collect_outcome(removed_by: Vec<usize>, clamped: bool) -> DedupOutcome {
    let mut outcome = DedupOutcome {
        clamped,
        ..Default::default()
    };
    for (i, &by) in removed_by.iter().enumerate() {
        if by == usize::MAX {
            outcome.retained.push(i);
        } else {
            outcome.removals.push(Removal {
                index: i,
                removed_by: by,
            });
        }
    }
    outcome
}

/// Seeded k-means (k-means++ init, Lloyd iterations, fixed cap).
/// Returns the cluster index per sample.
fn kmeans_assign(embeddings: &[DedupEmbedding], k: usize, seed: u64) -> Vec<usize> {
    let n = embeddings.len();
    let dim = EMBED_DIM;
    if k == 1 {
        return vec![0; n];
    }
    let mut rng = StreamKey::new("dedup-kmeans").push_u64(seed).rng();

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(embeddings[rng.gen_range(0..n)].values.clone());
    let mut dist_sq = vec![0.0f64; n];
    while centroids.len() < k {
        let last = centroids.last().expect("at least one centroid");
        let mut total = 0.0f64;
        for (i, e) in embeddings.iter().enumerate() {
            let d = euclid_sq(&e.values, last);
            if centroids.len() == 1 || d < dist_sq[i] {
                dist_sq[i] = d;
            }
            total += dist_sq[i];
        }
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..1.0) * total;
            let mut chosen = n - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(embeddings[pick].values.clone());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, e) in embeddings.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = euclid_sq(&e.values, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, e) in embeddings.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(&e.values) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            }
        }
    }
    assignment
}

fn euclid_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}
