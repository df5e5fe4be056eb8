//! Cached experiment execution.
//!
//! An experiment runs as a pipeline of content-addressed stages: corpus,
//! tokenizer, per-model training, generation, dataset assembly, and
//! classification. Rerunning an unchanged spec hits every cache slot and
//! retrains nothing. Stage failures after training mark the bundle
//! partial instead of discarding completed work.

use std::collections::BTreeMap;

use super::cache::StageCache;
use super::report::{CurvePoint, Provenance, ReportBundle, SweepPoint};
use super::spec::{family_diff_fields, CorpusSource, ExperimentSpec, SettingKind};
use crate::classify::{repeated_eval, RepeatedEvalOptions};
use crate::datakit::{build_dataset, read_corpus, synth_corpus, SynthSpec};
use crate::error::{Error, Result};
use crate::lm::{Checkpoint, LMParams};
use crate::textgen::{extract_prompts, generate_corpus, GenerationOptions, GenerationReport};
use crate::tokenizer::{train_bpe, TokenizerModel};
use crate::trainer::{eval_mean_nll, finetune, pretrain, PackedCorpus, SftExample, TrainRun};

/// Fraction of the source corpus reserved for held-out perplexity.
const HELD_OUT_FRACTION: f64 = 0.02;
const HELD_OUT_MIN_DOCS: usize = 8;

pub struct ExperimentContext {
    pub cache: StageCache,
    /// Echo stage progress to stderr.
    pub verbose: bool,
}

impl ExperimentContext {
    pub fn new(cache: StageCache) -> Self {
        ExperimentContext {
            cache,
            verbose: false,
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[fplab] {}", msg.as_ref());
        }
    }
}

fn corpus_fingerprint(docs: &[String]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for d in docs {
        hasher.update((d.len() as u64).to_le_bytes());
        hasher.update(d.as_bytes());
    }
    crate::lm::hex(&hasher.finalize())
}

fn source_corpus(spec: &ExperimentSpec) -> Result<Vec<String>> {
    match &spec.corpus {
        CorpusSource::Path { path } => read_corpus(path),
        CorpusSource::Synthetic(synth) => Ok(synth_corpus(synth)),
    }
}

/// Training documents for one family member. All settings share the
/// source corpus except different_corpora, which hands each member a
/// disjoint slice: a topic-shifted synthesis for synthetic sources, a
/// round-robin partition for file corpora.
fn member_corpus(
    spec: &ExperimentSpec,
    source: &[String],
    topic: Option<u64>,
) -> Result<Vec<String>> {
    let Some(topic) = topic else {
        return Ok(source.to_vec());
    };
    match &spec.corpus {
        CorpusSource::Synthetic(synth) => Ok(synth_corpus(&SynthSpec {
            topic,
            ..synth.clone()
        })),
        CorpusSource::Path { .. } => {
            let n_topics = spec.models.len() as u64;
            let slice: Vec<String> = source
                .iter()
                .enumerate()
                .filter(|(i, _)| *i as u64 % n_topics == topic % n_topics)
                .map(|(_, d)| d.clone())
                .collect();
            if slice.is_empty() {
                return Err(Error::data(format!("topic {topic} slice is empty")));
            }
            Ok(slice)
        }
    }
}

fn stage_tokenizer(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
    corpus_fp: &str,
    docs: &[String],
    hits: &mut BTreeMap<String, bool>,
) -> Result<TokenizerModel> {
    let slot = ctx.cache.slot(
        "tokenizer",
        &[corpus_fp.as_bytes(), &spec.tokenizer_vocab.to_le_bytes()],
    );
    if slot.is_hit() {
        hits.insert("tokenizer".into(), true);
        return TokenizerModel::load(&slot.path("tokenizer.bin"));
    }
    ctx.log(format!("training tokenizer (vocab {})", spec.tokenizer_vocab));
    let tok = train_bpe(docs, spec.tokenizer_vocab)?;
    slot.prepare()?;
    tok.save(&slot.path("tokenizer.bin"))?;
    slot.mark_done()?;
    hits.insert("tokenizer".into(), false);
    Ok(tok)
}

fn pack_docs(
    docs: &[String],
    tokenizer: &TokenizerModel,
    seq_len: usize,
) -> Result<PackedCorpus> {
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| tokenizer.encode_str(d)).collect();
    PackedCorpus::pack(&ids, tokenizer.eos_id(), seq_len)
}

struct TrainedMember {
    id: String,
    checkpoint: Checkpoint,
    /// Milestone snapshots, present when the run declared checkpoint steps.
    milestones: Vec<(u64, Checkpoint)>,
}

/// Pretrain (or load) one family member.
fn stage_pretrain(
    ctx: &ExperimentContext,
    id: &str,
    run: &TrainRun,
    packed: &PackedCorpus,
    hits: &mut BTreeMap<String, bool>,
) -> Result<TrainedMember> {
    let run_toml = run.to_toml_string()?;
    let slot = ctx.cache.slot(
        "pretrain",
        &[run_toml.as_bytes(), packed.fingerprint().as_bytes()],
    );
    let stage_name = format!("pretrain/{id}");
    let load_milestones = |wanted: &[u64]| -> Result<Vec<(u64, Checkpoint)>> {
        wanted
            .iter()
            .map(|&step| {
                let path = slot.path(&format!("checkpoints/step-{step:07}.ckpt"));
                Ok((step, Checkpoint::load(&path)?))
            })
            .collect()
    };
    if slot.is_hit() {
        hits.insert(stage_name, true);
        let final_ck = Checkpoint::load(&slot.path(&format!(
            "checkpoints/step-{:07}.ckpt",
            run.total_steps
        )))?;
        return Ok(TrainedMember {
            id: id.to_string(),
            checkpoint: final_ck,
            milestones: load_milestones(&run.checkpoint_steps)?,
        });
    }
    ctx.log(format!(
        "pretraining {id} ({} steps, {} sequences)",
        run.total_steps, packed.n_seqs
    ));
    slot.prepare()?;
    let out = pretrain(run, packed, Some(slot.dir()))?;
    // the final checkpoint is always on disk for future cache hits
    let final_path = slot.path(&format!("checkpoints/step-{:07}.ckpt", run.total_steps));
    if !final_path.exists() {
        out.final_checkpoint.save(&final_path)?;
    }
    slot.mark_done()?;
    hits.insert(format!("pretrain/{id}"), false);
    Ok(TrainedMember {
        id: id.to_string(),
        checkpoint: out.final_checkpoint,
        milestones: out.milestones,
    })
}

/// Synthetic instruction fixture: prompt = the opening words of a
/// generated document, response = its continuation.
pub fn synth_instructions(seed: u64, n: usize) -> Vec<(String, String)> {
    let docs = synth_corpus(&SynthSpec {
        seed,
        documents: n,
        topic: 7,
        min_sentences: 2,
        max_sentences: 4,
    });
    docs.into_iter()
        .map(|doc| {
            let words: Vec<&str> = doc.split_whitespace().collect();
            let cut = (words.len() / 3).clamp(3, 8).min(words.len() - 1);
            let prompt = words[..cut].join(" ");
            let response = words[cut..].join(" ");
            (prompt, response)
        })
        .collect()
}

fn stage_finetune(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
    id: &str,
    base: &Checkpoint,
    sft_run: &TrainRun,
    tokenizer: &TokenizerModel,
    hits: &mut BTreeMap<String, bool>,
) -> Result<Checkpoint> {
    let sft = spec.sft.as_ref().expect("validated sft settings");
    let run_toml = sft_run.to_toml_string()?;
    let slot = ctx.cache.slot(
        "finetune",
        &[
            run_toml.as_bytes(),
            base.checksum().as_bytes(),
            &sft.data_seed.to_le_bytes(),
            &sft.examples.to_le_bytes(),
        ],
    );
    if slot.is_hit() {
        hits.insert(format!("finetune/{id}"), true);
        return Checkpoint::load(&slot.path("final.ckpt"));
    }
    ctx.log(format!("fine-tuning {id} ({} examples)", sft.examples));
    let pairs = synth_instructions(sft.data_seed, sft.examples);
    let examples: Vec<SftExample> = pairs
        .iter()
        .map(|(p, r)| SftExample {
            prompt_ids: tokenizer.encode_str(p),
            response_ids: tokenizer.encode_str(&format!(" {r}")),
        })
        .collect();
    let out = finetune(base, &examples, sft_run, tokenizer.eos_id())?;
    slot.prepare()?;
    out.checkpoint.save(&slot.path("final.ckpt"))?;
    slot.mark_done()?;
    hits.insert(format!("finetune/{id}"), false);
    Ok(out.checkpoint)
}

fn stage_generate(
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
    models: &[(String, &LMParams<f32>)],
    tokenizer: &TokenizerModel,
    prompts: &[String],
    label: &str,
    hits: &mut BTreeMap<String, bool>,
) -> Result<GenerationReport> {
    let mut key: Vec<Vec<u8>> = vec![
        spec.gen_seed.to_le_bytes().to_vec(),
        spec.max_new_tokens.to_le_bytes().to_vec(),
        corpus_fingerprint(prompts).into_bytes(),
    ];
    for (id, params) in models {
        key.push(id.clone().into_bytes());
        key.push(params.checksum().into_bytes());
    }
    let key_refs: Vec<&[u8]> = key.iter().map(|k| k.as_slice()).collect();
    let slot = ctx.cache.slot("generate", &key_refs);
    let stage_name = format!("generate/{label}");
    if slot.is_hit() {
        hits.insert(stage_name, true);
        let samples = crate::textgen::read_samples(&slot.path("manifest.jsonl"))?;
        let mut dropped_per_model: BTreeMap<String, usize> =
            models.iter().map(|(id, _)| (id.clone(), 0)).collect();
        for s in samples.iter().filter(|s| s.dropped) {
            *dropped_per_model.entry(s.model_id.clone()).or_insert(0) += 1;
        }
        return Ok(GenerationReport {
            samples,
            dropped_per_model,
        });
    }
    ctx.log(format!(
        "generating {} samples ({label})",
        prompts.len() * models.len()
    ));
    let opts = GenerationOptions {
        max_new_tokens: spec.max_new_tokens,
        ..Default::default()
    };
    let report = generate_corpus(models, tokenizer, prompts, spec.gen_seed, opts)?;
    slot.prepare()?;
    crate::textgen::write_samples(slot.dir(), &report)?;
    slot.mark_done()?;
    hits.insert(format!("generate/{label}"), false);
    Ok(report)
}

/// Dataset + per-classifier reports for one generation batch.
#[allow(clippy::too_many_arguments)]
fn classify_generation(
    spec: &ExperimentSpec,
    generation: &GenerationReport,
    tokenizer: &TokenizerModel,
    setting_label: &str,
    train_subsample: Option<usize>,
) -> Result<(Vec<crate::classify::AttributionReport>, crate::datakit::DedupReport)> {
    let built = build_dataset(
        &generation.samples,
        spec.dedup_eps,
        None,
        spec.gen_seed,
        spec.split_seeds[0],
        spec.val_size,
        spec.test_size,
    )?;
    let texts = built.dataset.texts.clone();
    let labels = built.dataset.labels.clone();
    let mut reports = Vec::new();
    for kind in &spec.classifiers {
        let opts = RepeatedEvalOptions {
            kind: *kind,
            split_seeds: spec.split_seeds.clone(),
            val_size: spec.val_size,
            test_size: spec.test_size,
            c: spec.linear_c,
            encoder: spec.encoder.clone(),
            train_subsample,
        };
        reports.push(repeated_eval(&texts, &labels, tokenizer, setting_label, &opts)?);
    }
    Ok((reports, built.dedup))
}

/// Execute the full pipeline for a spec.
///
/// Errors in the early stages (corpus, tokenizer, training) surface as
/// `Err`; failures after training produce an `Ok` bundle marked partial
/// so completed work is not discarded.
pub fn run_experiment(spec: &ExperimentSpec, ctx: &ExperimentContext) -> Result<ReportBundle> {
    spec.validate()?;
    let mut hits: BTreeMap<String, bool> = BTreeMap::new();

    // corpus + tokenizer
    let source = source_corpus(spec)?;
    let corpus_fp = corpus_fingerprint(&source);
    let tokenizer = stage_tokenizer(ctx, spec, &corpus_fp, &source, &mut hits)?;
    let spec_toml = spec.to_toml_string()?;

    // held-out slice for the capability gate, shared across the family
    let held_out_n = ((source.len() as f64 * HELD_OUT_FRACTION).ceil() as usize)
        .clamp(HELD_OUT_MIN_DOCS.min(source.len() / 2), source.len() / 2);
    let (train_docs, held_out_docs) = source.split_at(source.len() - held_out_n);

    // family training (vocab size comes from the shared tokenizer)
    let mut family_runs = spec.family_runs();
    for (_, run) in family_runs.iter_mut() {
        run.lm_config.vocab_size = tokenizer.total_vocab_size();
    }
    let mut members: Vec<TrainedMember> = Vec::new();
    if spec.setting.is_sft() {
        for (delta, (id, run)) in spec.models.iter().zip(&family_runs) {
            // pretrain the base with the *base* seeds; sft_init varies the
            // base init seed, sft_order varies only the SFT data order
            let mut base_run = spec.base_run.clone();
            base_run.lm_config.vocab_size = tokenizer.total_vocab_size();
            if spec.setting == SettingKind::SftInit {
                base_run.init_seed = delta.init_seed.unwrap_or(base_run.init_seed);
            }
            let member_docs = member_corpus(spec, train_docs, delta.corpus_topic)?;
            let packed = pack_docs(&member_docs, &tokenizer, base_run.lm_config.max_seq_len)?;
            let base_id = format!("base-i{}", base_run.init_seed);
            let base = stage_pretrain(ctx, &base_id, &base_run, &packed, &mut hits)?;

            let sft = spec.sft.as_ref().expect("validated");
            let mut sft_run = base_run.clone();
            sft_run.peak_lr = sft.peak_lr;
            sft_run.batch_size = sft.batch_size;
            sft_run.total_steps =
                (sft.examples as u64).div_ceil(sft.batch_size as u64) * sft.epochs;
            sft_run.warmup_steps =
                ((sft_run.total_steps as f64) * 0.002).round().max(0.0) as u64;
            sft_run.checkpoint_steps = vec![];
            sft_run.order_seed = match spec.setting {
                SettingKind::SftOrder => run.order_seed,
                _ => spec.base_run.order_seed,
            };
            let ck = stage_finetune(ctx, spec, id, &base.checkpoint, &sft_run, &tokenizer, &mut hits)?;
            members.push(TrainedMember {
                id: id.clone(),
                checkpoint: ck,
                milestones: vec![],
            });
        }
    } else {
        for (delta, (id, run)) in spec.models.iter().zip(&family_runs) {
            let member_docs = member_corpus(spec, train_docs, delta.corpus_topic)?;
            let packed = pack_docs(&member_docs, &tokenizer, run.lm_config.max_seq_len)?;
            members.push(stage_pretrain(ctx, id, run, &packed, &mut hits)?);
        }
    }

    // capability parity gate: held-out perplexity per member
    let mut perplexities = BTreeMap::new();
    let mut perplexity_flag = None;
    {
        // all members share max_seq_len except different_sizes, where the
        // config dims differ but the window is identical
        let seq_len = members[0].checkpoint.params.config.max_seq_len;
        let eval_packed = pack_docs(held_out_docs, &tokenizer, seq_len)?;
        for member in &members {
            let nll = eval_mean_nll(&member.checkpoint.params, &eval_packed, 64)?;
            perplexities.insert(member.id.clone(), nll.exp());
        }
        let min = perplexities.values().cloned().fold(f64::INFINITY, f64::min);
        let max = perplexities.values().cloned().fold(0.0f64, f64::max);
        if min > 0.0 && (max - min) / min > spec.perplexity_band {
            perplexity_flag = Some(format!(
                "held-out perplexity spread {:.1}% exceeds the {:.1}% band",
                (max - min) / min * 100.0,
                spec.perplexity_band * 100.0
            ));
        }
    }

    let mut bundle = ReportBundle {
        spec_name: spec.name.clone(),
        setting: spec.setting.to_string(),
        n_classes: spec.n_models(),
        chance_rate: spec.chance_rate(),
        reports: vec![],
        size_sweep: vec![],
        checkpoint_curve: vec![],
        perplexities,
        perplexity_flag,
        dedup: None,
        dropped_per_model: BTreeMap::new(),
        provenance: Provenance {
            spec_hash: corpus_fingerprint(&[spec_toml]),
            corpus_hash: corpus_fp,
            tokenizer_hash: crate::lm::hex(&tokenizer.fingerprint()),
            family_diff_fields: family_diff_fields(spec)?
                .into_iter()
                .collect(),
            cache_hits: BTreeMap::new(),
        },
        partial: None,
    };

    // everything past training degrades to a partial bundle on failure
    let late = run_late_stages(spec, ctx, &members, &tokenizer, &source, &mut hits, &mut bundle);
    bundle.provenance.cache_hits = hits;
    if let Err(e) = late {
        bundle.partial = Some(format!("stage failure: {e}"));
    }
    Ok(bundle)
}

fn run_late_stages(
    spec: &ExperimentSpec,
    ctx: &ExperimentContext,
    members: &[TrainedMember],
    tokenizer: &TokenizerModel,
    source: &[String],
    hits: &mut BTreeMap<String, bool>,
    bundle: &mut ReportBundle,
) -> Result<()> {
    let prompts = extract_prompts(
        source,
        spec.prefix_chars,
        spec.prompts_per_model,
        spec.gen_seed,
    )?;
    let model_refs: Vec<(String, &LMParams<f32>)> = members
        .iter()
        .map(|m| (m.id.clone(), &m.checkpoint.params))
        .collect();
    let generation = stage_generate(ctx, spec, &model_refs, tokenizer, &prompts, "final", hits)?;
    bundle.dropped_per_model = generation.dropped_per_model.clone();

    let (reports, dedup) =
        classify_generation(spec, &generation, tokenizer, &spec.setting.to_string(), None)?;
    for report in &reports {
        if report.n_classes != spec.n_models() {
            bundle.partial = Some(format!(
                "class count {} does not match family size {}",
                report.n_classes,
                spec.n_models()
            ));
        }
    }
    bundle.reports = reports;
    bundle.dedup = Some(dedup);

    // training-size sweep
    for &size in &spec.train_sizes {
        let available = generation.samples.iter().filter(|s| !s.dropped).count();
        if size > available {
            ctx.log(format!(
                "sweep size {size} exceeds available {available}; row skipped"
            ));
            continue;
        }
        let (reports, _) = classify_generation(
            spec,
            &generation,
            tokenizer,
            &spec.setting.to_string(),
            Some(size),
        )?;
        for r in reports {
            bundle.size_sweep.push(SweepPoint {
                classifier: r.classifier.clone(),
                train_size: size,
                mean: r.mean,
                std: r.std,
                p_value: r.p_value,
            });
        }
    }

    // checkpoint curve
    if spec.setting == SettingKind::CheckpointCurve {
        let steps = spec.base_run.checkpoint_steps.clone();
        for step in steps {
            let at_step: Vec<(String, &LMParams<f32>)> = members
                .iter()
                .map(|m| {
                    m.milestones
                        .iter()
                        .find(|(s, _)| *s == step)
                        .map(|(_, ck)| (m.id.clone(), &ck.params))
                        .ok_or_else(|| {
                            Error::data(format!("member {} lacks milestone {step}", m.id))
                        })
                })
                .collect::<Result<_>>()?;
            let generation = stage_generate(
                ctx,
                spec,
                &at_step,
                tokenizer,
                &prompts,
                &format!("step{step}"),
                hits,
            )?;
            let (reports, _) = classify_generation(
                spec,
                &generation,
                tokenizer,
                &format!("{}@{}", spec.setting, step),
                None,
            )?;
            for r in reports {
                bundle.checkpoint_curve.push(CurvePoint {
                    classifier: r.classifier.clone(),
                    step,
                    mean: r.mean,
                    std: r.std,
                    p_value: r.p_value,
                });
            }
        }
    }
    Ok(())
}
