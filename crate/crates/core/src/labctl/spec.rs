//! Experiment specifications.
//!
//! A spec declares a model family as deltas off a base training recipe and
//! names which factor varies. Validation enforces factor isolation: a
//! setting's models may differ only in its declared fields, and the
//! declared varying field must actually vary.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierKind, EncoderConfig};
use crate::datakit::SynthSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainRun;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingKind {
    DifferentCorpora,
    DifferentSizes,
    HyperparamGrid,
    OrderAndInit,
    OrderOnly,
    InitOnly,
    CheckpointCurve,
    SftOrder,
    SftInit,
}

impl std::fmt::Display for SettingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SettingKind::DifferentCorpora => "different_corpora",
            SettingKind::DifferentSizes => "different_sizes",
            SettingKind::HyperparamGrid => "hyperparam_grid",
            SettingKind::OrderAndInit => "order_and_init",
            SettingKind::OrderOnly => "order_only",
            SettingKind::InitOnly => "init_only",
            SettingKind::CheckpointCurve => "checkpoint_curve",
            SettingKind::SftOrder => "sft_order",
            SettingKind::SftInit => "sft_init",
        };
        write!(f, "{name}")
    }
}

/// One family member: overrides applied to the base run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelDelta {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub init_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub peak_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_ffn: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corpus_topic: Option<u64>,
}

impl ModelDelta {
    fn set_fields(&self) -> BTreeSet<&'static str> {
        let mut fields = BTreeSet::new();
        if self.init_seed.is_some() {
            fields.insert("init_seed");
        }
        if self.order_seed.is_some() {
            fields.insert("order_seed");
        }
        if self.peak_lr.is_some() {
            fields.insert("peak_lr");
        }
        if self.weight_decay.is_some() {
            fields.insert("weight_decay");
        }
        if self.d_model.is_some() {
            fields.insert("d_model");
        }
        if self.d_ffn.is_some() {
            fields.insert("d_ffn");
        }
        if self.n_layers.is_some() {
            fields.insert("n_layers");
        }
        if self.corpus_topic.is_some() {
            fields.insert("corpus_topic");
        }
        fields
    }

    /// The base recipe with this delta applied.
    pub fn apply(&self, base: &TrainRun) -> TrainRun {
        let mut run = base.clone();
        if let Some(s) = self.init_seed {
            run.init_seed = s;
        }
        if let Some(s) = self.order_seed {
            run.order_seed = s;
        }
        if let Some(lr) = self.peak_lr {
            run.peak_lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            run.weight_decay = wd;
        }
        if let Some(d) = self.d_model {
            run.lm_config.d_model = d;
        }
        if let Some(f) = self.d_ffn {
            run.lm_config.d_ffn = f;
        }
        if let Some(l) = self.n_layers {
            run.lm_config.n_layers = l;
        }
        run
    }
}

/// Where training documents come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// JSONL file with a `text` field per line.
    Path { path: PathBuf },
    Synthetic(SynthSpec),
}

/// Supervised fine-tuning stage configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSpec {
    /// Seed for the synthetic instruction fixture.
    pub data_seed: u64,
    pub examples: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_sft_epochs")]
    pub epochs: u64,
}

fn default_sft_epochs() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub setting: SettingKind,
    pub corpus: CorpusSource,
    pub tokenizer_vocab: usize,
    pub base_run: TrainRun,
    pub models: Vec<ModelDelta>,
    /// Prompts per model; every (prompt, model) pair yields one sample.
    pub prompts_per_model: usize,
    #[serde(default = "default_prefix_chars")]
    pub prefix_chars: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    pub gen_seed: u64,
    pub classifiers: Vec<ClassifierKind>,
    pub split_seeds: Vec<u64>,
    pub val_size: usize,
    pub test_size: usize,
    #[serde(default = "default_dedup_eps")]
    pub dedup_eps: f64,
    /// Per-model training-set sizes to sweep (empty = no sweep).
    #[serde(default)]
    pub train_sizes: Vec<usize>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_linear_c")]
    pub linear_c: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sft: Option<SftSpec>,
    /// Allowed relative spread of held-out perplexity across the family.
    #[serde(default = "default_perplexity_band")]
    pub perplexity_band: f64,
}

fn default_prefix_chars() -> usize {
    crate::textgen::DEFAULT_PREFIX_CHARS
}
fn default_max_new_tokens() -> usize {
    crate::textgen::DEFAULT_MAX_NEW_TOKENS
}
fn default_dedup_eps() -> f64 {
    crate::datakit::DEFAULT_EPS
}
fn default_linear_c() -> f64 {
    1.0
}
fn default_perplexity_band() -> f64 {
    0.10
}

impl SettingKind {
    /// Fields a member delta may set, beyond `id`.
    fn allowed_fields(self) -> &'static [&'static str] {
        match self {
            SettingKind::DifferentCorpora => &["corpus_topic"],
            SettingKind::DifferentSizes => &["d_model", "d_ffn", "n_layers"],
            SettingKind::HyperparamGrid => {
                &["peak_lr", "weight_decay", "init_seed", "order_seed"]
            }
            SettingKind::OrderAndInit => &["init_seed", "order_seed"],
            SettingKind::OrderOnly | SettingKind::SftOrder => &["order_seed"],
            SettingKind::InitOnly | SettingKind::SftInit => &["init_seed"],
            SettingKind::CheckpointCurve => &["init_seed", "order_seed"],
        }
    }

    /// Fields that must take pairwise-distinct values across the family.
    fn must_vary(self) -> &'static [&'static str] {
        match self {
            SettingKind::DifferentCorpora => &["corpus_topic"],
            SettingKind::DifferentSizes => &["d_model"],
            SettingKind::HyperparamGrid => &[],
            SettingKind::OrderAndInit => &["init_seed", "order_seed"],
            SettingKind::OrderOnly | SettingKind::SftOrder => &["order_seed"],
            SettingKind::InitOnly | SettingKind::SftInit => &["init_seed"],
            SettingKind::CheckpointCurve => &[],
        }
    }

    pub fn is_sft(self) -> bool {
        matches!(self, SettingKind::SftOrder | SettingKind::SftInit)
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::config(format!("spec parse: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec = Self::from_toml_str(&text)?;
        if let CorpusSource::Path { path: corpus } = &spec.corpus {
            if !corpus.exists() {
                return Err(Error::config(format!(
                    "referenced corpus {} does not exist",
                    corpus.display()
                )));
            }
        }
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn chance_rate(&self) -> f64 {
        1.0 / self.models.len() as f64
    }

    /// The fully resolved training recipe of each family member.
    pub fn family_runs(&self) -> Vec<(String, TrainRun)> {
        self.models
            .iter()
            .map(|delta| (delta.id.clone(), delta.apply(&self.base_run)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("spec field `name`: must not be empty"));
        }
        if self.models.len() < 2 {
            return Err(Error::config(
                "spec field `models`: a family needs at least 2 members",
            ));
        }
        self.base_run.validate()?;
        {
            let mut ids: Vec<&str> = self.models.iter().map(|m| m.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != self.models.len() {
                return Err(Error::config("spec field `models`: duplicate model ids"));
            }
        }
        if self.models.iter().any(|m| m.id.is_empty()) {
            return Err(Error::config("spec field `models.id`: must not be empty"));
        }
        if self.split_seeds.len() < 2 {
            return Err(Error::config(
                "spec field `split_seeds`: needs at least 2 seeds",
            ));
        }
        if self.classifiers.is_empty() {
            return Err(Error::config(
                "spec field `classifiers`: pick at least one of unigram, encoder",
            ));
        }
        if self.prompts_per_model == 0 {
            return Err(Error::config(
                "spec field `prompts_per_model`: must be positive",
            ));
        }
        if !(0.0..2.0).contains(&self.dedup_eps) || self.dedup_eps <= 0.0 {
            return Err(Error::config("spec field `dedup_eps`: outside (0, 2)"));
        }
        if self.train_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("spec field `train_sizes`: sizes must be positive"));
        }
        if self.setting.is_sft() && self.sft.is_none() {
            return Err(Error::config(format!(
                "spec field `sft`: required for setting {}",
                self.setting
            )));
        }

        // factor isolation
        let allowed: BTreeSet<&str> = self.setting.allowed_fields().iter().copied().collect();
        for delta in &self.models {
            let set = delta.set_fields();
            if let Some(bad) = set.iter().find(|f| !allowed.contains(*f)) {
                return Err(Error::config(format!(
                    "spec field `models[{}].{bad}`: setting {} only varies {:?}",
                    delta.id, self.setting, self.setting.allowed_fields()
                )));
            }
        }
        for field in self.setting.must_vary() {
            let values: Vec<String> = self
                .models
                .iter()
                .map(|d| delta_field_repr(d, field, &self.base_run))
                .collect();
            let distinct: BTreeSet<&String> = values.iter().collect();
            if distinct.len() != values.len() {
                return Err(Error::config(format!(
                    "spec field `models.*.{field}`: setting {} requires pairwise distinct values, got {values:?}",
                    self.setting
                )));
            }
        }
        if self.setting == SettingKind::CheckpointCurve {
            // exactly one of order_seed / init_seed varies across members
            let varies = |field: &str| {
                let values: BTreeSet<String> = self
                    .models
                    .iter()
                    .map(|d| delta_field_repr(d, field, &self.base_run))
                    .collect();
                values.len() > 1
            };
            let (order, init) = (varies("order_seed"), varies("init_seed"));
            if order == init {
                return Err(Error::config(
                    "spec field `models`: checkpoint_curve varies exactly one of \
                     order_seed or init_seed",
                ));
            }
            if self.base_run.checkpoint_steps.is_empty() {
                return Err(Error::config(
                    "spec field `base_run.checkpoint_steps`: checkpoint_curve needs milestones",
                ));
            }
        }
        // resolved runs must be valid configurations
        for (id, run) in self.family_runs() {
            run.validate()
                .map_err(|e| Error::config(format!("model {id}: {e}")))?;
        }
        Ok(())
    }
}

fn delta_field_repr(delta: &ModelDelta, field: &str, base: &TrainRun) -> String {
    match field {
        "init_seed" => delta.init_seed.unwrap_or(base.init_seed).to_string(),
        "order_seed" => delta.order_seed.unwrap_or(base.order_seed).to_string(),
        "peak_lr" => format!("{}", delta.peak_lr.unwrap_or(base.peak_lr)),
        "weight_decay" => format!("{}", delta.weight_decay.unwrap_or(base.weight_decay)),
        "d_model" => delta.d_model.unwrap_or(base.lm_config.d_model).to_string(),
        "d_ffn" => delta.d_ffn.unwrap_or(base.lm_config.d_ffn).to_string(),
        "n_layers" => delta.n_layers.unwrap_or(base.lm_config.n_layers).to_string(),
        "corpus_topic" => delta.corpus_topic.unwrap_or(0).to_string(),
        _ => unreachable!("unknown field {field}"),
    }
}

/// Assert factor isolation on the *serialized* family: the TOML of any two
/// member runs may differ only under the setting's allowed keys.
pub fn family_diff_fields(spec: &ExperimentSpec) -> Result<BTreeSet<String>> {
    let runs = spec.family_runs();
    let tables: Vec<toml::Value> = runs
        .iter()
        .map(|(_, run)| toml::Value::try_from(run).map_err(|e| Error::format(e.to_string())))
        .collect::<Result<_>>()?;
    let mut differing = BTreeSet::new();
    for window in tables.windows(2) {
        diff_value("", &window[0], &window[1], &mut differing);
    }
    Ok(differing)
}

fn diff_value(prefix: &str, a: &toml::Value, b: &toml::Value, out: &mut BTreeSet<String>) {
    match (a, b) {
        (toml::Value::Table(ta), toml::Value::Table(tb)) => {
            for (key, va) in ta {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match tb.get(key) {
                    Some(vb) => diff_value(&path, va, vb, out),
                    None => {
                        out.insert(path);
                    }
                }
            }
            for key in tb.keys() {
                if !ta.contains_key(key) {
                    out.insert(format!("{prefix}.{key}"));
                }
            }
        }
        _ if a != b => {
            out.insert(prefix.to_string());
        }
        _ => {}
    }
}

#[cfg(test)]
pub(crate) fn tiny_spec(setting: SettingKind) -> ExperimentSpec {
    use crate::lm::LMConfig;
    let base_run = TrainRun {
        lm_config: LMConfig {
            n_layers: 1,
            d_model: 8,
            d_ffn: 8,
            n_heads: 2,
            n_kv_heads: 1,
            vocab_size: 260, // patched by the pipeline to the tokenizer size
            max_seq_len: 32,
            dropout_rate: 0.0,
            scaled_embed: false,
        },
        peak_lr: 3e-3,
        weight_decay: 0.1,
        adam_beta1: 0.9,
        adam_beta2: 0.95,
        adam_eps: 1e-8,
        warmup_steps: 2,
        total_steps: 20,
        batch_size: 4,
        grad_clip: 1.0,
        min_lr_ratio: 0.1,
        init_seed: 1,
        order_seed: 1,
        checkpoint_steps: vec![],
        sft_full_sequence_loss: false,
    };
    let models = match setting {
        SettingKind::OrderOnly | SettingKind::CheckpointCurve | SettingKind::SftOrder => vec![
            ModelDelta {
                id: "m1".into(),
                order_seed: Some(11),
                ..Default::default()
            },
            ModelDelta {
                id: "m2".into(),
                order_seed: Some(12),
                ..Default::default()
            },
            ModelDelta {
                id: "m3".into(),
                order_seed: Some(13),
                ..Default::default()
            },
        ],
        SettingKind::InitOnly | SettingKind::SftInit => vec![
            ModelDelta {
                id: "m1".into(),
                init_seed: Some(21),
                ..Default::default()
            },
            ModelDelta {
                id: "m2".into(),
                init_seed: Some(22),
                ..Default::default()
            },
        ],
        SettingKind::OrderAndInit => vec![
            ModelDelta {
                id: "m1".into(),
                init_seed: Some(21),
                order_seed: Some(11),
                ..Default::default()
            },
            ModelDelta {
                id: "m2".into(),
                init_seed: Some(22),
                order_seed: Some(12),
                ..Default::default()
            },
        ],
        SettingKind::HyperparamGrid => vec![
            ModelDelta {
                id: "lr-low".into(),
                peak_lr: Some(1e-4),
                ..Default::default()
            },
            ModelDelta {
                id: "lr-mid".into(),
                peak_lr: Some(5e-4),
                ..Default::default()
            },
            ModelDelta {
                id: "lr-high".into(),
                peak_lr: Some(1e-3),
                ..Default::default()
            },
        ],
        SettingKind::DifferentSizes => vec![
            ModelDelta {
                id: "small".into(),
                d_model: Some(8),
                ..Default::default()
            },
            ModelDelta {
                id: "large".into(),
                d_model: Some(16),
                d_ffn: Some(16),
                ..Default::default()
            },
        ],
        SettingKind::DifferentCorpora => vec![
            ModelDelta {
                id: "t0".into(),
                corpus_topic: Some(0),
                ..Default::default()
            },
            ModelDelta {
                id: "t1".into(),
                corpus_topic: Some(1),
                ..Default::default()
            },
        ],
    };
    let mut base_run = base_run;
    if setting == SettingKind::CheckpointCurve {
        base_run.checkpoint_steps = vec![5, 10, 20];
    }
    ExperimentSpec {
        name: format!("tiny-{setting}"),
        setting,
        corpus: CorpusSource::Synthetic(SynthSpec::new(5, 400)),
        tokenizer_vocab: 300,
        base_run,
        models,
        prompts_per_model: 30,
        prefix_chars: 12,
        max_new_tokens: 12,
        gen_seed: 3,
        classifiers: vec![ClassifierKind::Unigram],
        split_seeds: vec![1, 2],
        val_size: 8,
        test_size: 20,
        dedup_eps: 0.2,
        train_sizes: vec![],
        encoder: EncoderConfig {
            n_layers: 1,
            d_model: 8,
            d_ffn: 8,
            n_heads: 2,
            n_kv_heads: 1,
            max_seq_len: 24,
            dropout_rate: 0.0,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            epochs: 1.0,
            eval_fraction: 0.5,
            seed: 0,
        },
        linear_c: 1.0,
        sft: if setting.is_sft() {
            Some(SftSpec {
                data_seed: 4,
                examples: 24,
                peak_lr: 1e-3,
                batch_size: 4,
                epochs: 1,
            })
        } else {
            None
        },
        perplexity_band: 0.5,
    }
}
