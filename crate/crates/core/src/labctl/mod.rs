//! Experiment orchestration.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Write a file atomically (write temp in the same directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile_path(dir);
    let mut file = std::fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

fn tempfile_path(dir: &Path) -> std::path::PathBuf {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    dir.join(format!(".tmp-{}-{n}", std::process::id()))
}

pub mod cache;
pub mod report;
pub mod run;
pub mod spec;

pub use cache::{CacheSlot, StageCache, CACHE_ENV_VAR};
pub use report::{emit_reports, CurvePoint, Provenance, ReportBundle, SweepPoint};
pub use run::{run_experiment, synth_instructions, ExperimentContext};
pub use spec::{
    family_diff_fields, CorpusSource, ExperimentSpec, ModelDelta, SettingKind, SftSpec,
};
