//! fplab-core: a desk-scale laboratory for measuring natural fingerprints
//! of small language models.
//!
//! The lab trains families of small decoder-only transformers under
//! controlled randomness (initial weights vs. data order) and hyperparameter
//! variation, samples text from them, and measures whether a classifier can
//! attribute text to its source model above the 1/m chance rate.
//!
//! Pipeline modules, in dependency order:
//!
//! - [`tokenizer`] — byte-level BPE shared by every model and the featurizer
//! - [`lm`] — minimal transformer with exact analytic gradients
//! - [`trainer`] — pretraining / fine-tuning with separated seed streams
//! - [`textgen`] — prompt extraction, pure sampling, degeneracy filtering
//! - [`datakit`] — corpus ingestion, semantic dedup, dataset splitting
//! - [`classify`] — unigram logistic regression and encoder attributors
//! - [`labctl`] — experiment specs, cached orchestration, report emission

pub mod classify;
pub mod datakit;
pub mod error;
pub mod labctl;
pub mod linalg;
pub mod lm;
pub mod rng;
pub mod stats;
pub mod textgen;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
