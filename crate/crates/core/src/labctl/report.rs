//! Report bundles and file emission.
//!
//! `emit_reports` writes everything a plotting tool or reviewer needs:
//! the full structured bundle (JSON), a flat summary CSV, x/y/err series
//! for training-size and checkpoint curves, and a human-readable summary
//! comparing each accuracy against its chance rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::AttributionReport;
use crate::datakit::DedupReport;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub classifier: String,
    pub train_size: usize,
    pub mean: f64,
    pub std: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub classifier: String,
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub corpus_hash: String,
    pub tokenizer_hash: String,
    /// Config keys that differ across the family (factor isolation).
    pub family_diff_fields: Vec<String>,
    pub cache_hits: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub spec_name: String,
    pub setting: String,
    pub n_classes: usize,
    pub chance_rate: f64,
    pub reports: Vec<AttributionReport>,
    #[serde(default)]
    pub size_sweep: Vec<SweepPoint>,
    #[serde(default)]
    pub checkpoint_curve: Vec<CurvePoint>,
    pub perplexities: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity_flag: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dedup: Option<DedupReport>,
    pub dropped_per_model: BTreeMap<String, usize>,
    pub provenance: Provenance,
    /// Set when a late stage failed; earlier results are still present.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partial: Option<String>,
}

impl ReportBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_vec_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        super::atomic_write(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(e.to_string()))
    }
}

/// Write report.json, summary.csv, plot series and summary.txt.
pub fn emit_reports(bundle: &ReportBundle, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", out_dir.display()))))?;
    bundle.save(&out_dir.join("report.json"))?;

    // flat CSV: one row per (setting, classifier) plus sweep rows
    let mut csv = String::from("setting,classifier,train_size,mean,std,p_value\n");
    for r in &bundle.reports {
        writeln!(
            csv,
            "{},{},full,{:.6},{:.6},{:.3e}",
            r.setting, r.classifier, r.mean, r.std, r.p_value
        )
        .expect("string write");
    }
    for p in &bundle.size_sweep {
        writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.3e}",
            bundle.setting, p.classifier, p.train_size, p.mean, p.std, p.p_value
        )
        .expect("string write");
    }
    super::atomic_write(&out_dir.join("summary.csv"), csv.as_bytes())?;

    // x/y/err series for the two figure styles
    if !bundle.size_sweep.is_empty() {
        let mut plot = String::from("classifier,x_train_size,y_accuracy,err_std\n");
        for p in &bundle.size_sweep {
            writeln!(plot, "{},{},{:.6},{:.6}", p.classifier, p.train_size, p.mean, p.std)
                .expect("string write");
        }
        super::atomic_write(&out_dir.join("plot_train_size.csv"), plot.as_bytes())?;
    }
    if !bundle.checkpoint_curve.is_empty() {
        let mut plot = String::from("classifier,x_step,y_accuracy,err_std\n");
        for p in &bundle.checkpoint_curve {
            writeln!(plot, "{},{},{:.6},{:.6}", p.classifier, p.step, p.mean, p.std)
                .expect("string write");
        }
        super::atomic_write(&out_dir.join("plot_checkpoint_curve.csv"), plot.as_bytes())?;
    }

    super::atomic_write(
        &out_dir.join("summary.txt"),
        human_summary(bundle).as_bytes(),
    )
}

fn human_summary(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "experiment: {}", bundle.spec_name);
    let _ = writeln!(
        out,
        "setting: {} ({} models, chance rate {})",
        bundle.setting,
        bundle.n_classes,
        stats::format_chance_rate(bundle.n_classes)
    );
    if let Some(partial) = &bundle.partial {
        let _ = writeln!(out, "PARTIAL: {partial}");
    }
    for r in &bundle.reports {
        let verdict = if r.p_value < 0.01 {
            "above chance (p < 0.01)"
        } else if r.p_value < 0.05 {
            "above chance (p < 0.05)"
        } else {
            "not distinguishable from chance"
        };
        let _ = writeln!(
            out,
            "  {:10} accuracy {} %  vs chance {}  p={:.2e}  -> {verdict}",
            r.classifier,
            r.mean_std_pct(),
            r.chance_rate_pct(),
            r.p_value
        );
        if let Some(w) = &r.warning {
            let _ = writeln!(out, "             warning: {w}");
        }
    }
    for p in &bundle.size_sweep {
        let _ = writeln!(
            out,
            "  sweep {:8} size {:7}: {} %  p={:.2e}",
            p.classifier,
            p.train_size,
            stats::format_mean_std_pct(p.mean, p.std),
            p.p_value
        );
    }
    if !bundle.checkpoint_curve.is_empty() {
        let _ = writeln!(out, "  checkpoint curve (reported, not asserted):");
        for p in &bundle.checkpoint_curve {
            let _ = writeln!(
                out,
                "    {:8} step {:7}: {} %  p={:.2e}",
                p.classifier,
                p.step,
                stats::format_mean_std_pct(p.mean, p.std),
                p.p_value
            );
        }
    }
    if !bundle.perplexities.is_empty() {
        let _ = writeln!(out, "  held-out perplexity per model:");
        for (id, ppl) in &bundle.perplexities {
            let _ = writeln!(out, "    {id}: {ppl:.3}");
        }
        match &bundle.perplexity_flag {
            Some(flag) => {
                let _ = writeln!(out, "  capability gate: FLAGGED - {flag}");
            }
            None => {
                let _ = writeln!(out, "  capability gate: within band");
            }
        }
    }
    if let Some(dedup) = &bundle.dedup {
        let _ = writeln!(
            out,
            "  dedup: removed {} ({:.3}%)",
            dedup.removed_count,
            dedup.removed_fraction * 100.0
        );
    }
    let dropped: usize = bundle.dropped_per_model.values().sum();
    let _ = writeln!(out, "  degeneracy filter: dropped {dropped} samples");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> ReportBundle {
        ReportBundle {
            spec_name: "demo".into(),
            setting: "order_only".into(),
            n_classes: 3,
            chance_rate: 1.0 / 3.0,
            reports: vec![AttributionReport {
                setting: "order_only".into(),
                classifier: "unigram".into(),
                split_seeds: vec![1, 2, 3],
                accuracies: vec![0.44, 0.45, 0.445],
                mean: 0.445,
                std: 0.008,
                chance_rate: 1.0 / 3.0,
                p_value: 2.5e-9,
                n_test: 500,
                n_classes: 3,
                classes: vec!["m1".into(), "m2".into(), "m3".into()],
                confusion: vec![vec![70, 15, 15]; 3],
                top_features: BTreeMap::new(),
                warning: None,
            }],
            size_sweep: vec![SweepPoint {
                classifier: "unigram".into(),
                train_size: 1000,
                mean: 0.41,
                std: 0.01,
                p_value: 1e-5,
            }],
            checkpoint_curve: vec![],
            perplexities: BTreeMap::from([("m1".into(), 41.2), ("m2".into(), 40.9)]),
            perplexity_flag: None,
            dedup: None,
            dropped_per_model: BTreeMap::from([("m1".into(), 2usize)]),
            provenance: Provenance {
                spec_hash: "a".into(),
                corpus_hash: "b".into(),
                tokenizer_hash: "c".into(),
                family_diff_fields: vec!["order_seed".into()],
                cache_hits: BTreeMap::new(),
            },
            partial: None,
        }
    }

    #[test]
    fn emitted_files_and_formatting() {
        let bundle = tiny_bundle();
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&bundle, dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("44.5 ± 0.8"), "summary:\n{summary}");
        assert!(summary.contains("33.3%"));
        assert!(summary.contains("above chance (p < 0.01)"));
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        // header + one report row + one sweep row
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("plot_train_size.csv").exists());
        assert!(!dir.path().join("plot_checkpoint_curve.csv").exists());
        // bundle json round trip
        let back = ReportBundle::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(back.spec_name, bundle.spec_name);
        assert_eq!(back.reports[0].accuracies, bundle.reports[0].accuracies);
    }

    #[test]
    fn summary_row_count_matches_bundle_contents() {
        let mut bundle = tiny_bundle();
        bundle.size_sweep = vec![];
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&bundle, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let rows = csv.lines().count() - 1;
        assert_eq!(rows, bundle.reports.len() + bundle.size_sweep.len());
    }

    #[test]
    fn single_report_gives_single_summary_row() {
        let mut bundle = tiny_bundle();
        bundle.size_sweep.clear();
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&bundle, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
