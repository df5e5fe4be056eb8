use super::*;
use crate::lm::tiny_config;

fn tiny_run(total_steps: u64) -> TrainRun {
    TrainRun {
        lm_config: tiny_config(),
        peak_lr: 1e-3,
        weight_decay: 0.1,
        adam_beta1: 0.9,
        adam_beta2: 0.95,
        adam_eps: 1e-8,
        warmup_steps: (total_steps / 10).max(1),
        total_steps,
        batch_size: 4,
        grad_clip: 1.0,
        min_lr_ratio: 0.1,
        init_seed: 1,
        order_seed: 1,
        checkpoint_steps: vec![],
        sft_full_sequence_loss: false,
    }
}

/// Cyclic tokens with a little seeded jitter: learnable but not trivial.
fn pattern_corpus(n_tokens: usize, vocab: u32, seq_len: usize) -> PackedCorpus {
    let mut rng = crate::rng::stream("trainer-test-corpus", 7);
    let doc: Vec<u32> = (0..n_tokens)
        .map(|i| {
            if rng.gen_range(0..10) == 0 {
                rng.gen_range(0..vocab)
            } else {
                (i as u32) % 8
            }
        })
        .collect();
    PackedCorpus::pack(&[doc], vocab - 1, seq_len).unwrap()
}

#[test]
fn schedule_warmup_and_cosine_endpoints() {
    let mut run = tiny_run(1000);
    run.warmup_steps = 100;
    assert_eq!(lr_at(&run, 0), 0.0);
    assert!((lr_at(&run, 50) - 0.5e-3).abs() < 1e-12);
    assert!((lr_at(&run, 100) - 1e-3).abs() < 1e-12);
    // closed-form cosine: at total the multiplier is exactly min_ratio
    assert!((lr_at(&run, 1000) - 0.1e-3).abs() < 1e-12);
    // midpoint of decay: floor + half the span
    assert!((lr_at(&run, 550) - (0.1 + 0.45) * 1e-3).abs() < 1e-12);
}

#[test]
fn classifier_schedule_decays_to_zero() {
    let peak = 2e-5;
    assert_eq!(lr_at_with(Schedule::WarmupLinear, peak, 10, 100, 0), 0.0);
    assert!((lr_at_with(Schedule::WarmupLinear, peak, 10, 100, 10) - peak).abs() < 1e-18);
    assert!((lr_at_with(Schedule::WarmupLinear, peak, 10, 100, 55) - 0.5 * peak).abs() < 1e-18);
    assert_eq!(lr_at_with(Schedule::WarmupLinear, peak, 10, 100, 100), 0.0);
}

#[test]
#[should_panic(expected = "beyond total")]
fn schedule_rejects_out_of_range_step() {
    let run = tiny_run(10);
    lr_at(&run, 11);
}

#[test]
fn order_single_item_is_identity() {
    assert_eq!(make_order(9, 1, 0).indices, vec![0]);
}

#[test]
fn order_is_deterministic_and_a_bijection() {
    let a = make_order(5, 100, 3);
    let b = make_order(5, 100, 3);
    assert_eq!(a, b);
    let mut sorted = a.indices.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..100).collect::<Vec<u32>>());
    assert_ne!(make_order(5, 100, 4).indices, a.indices);
    assert_ne!(make_order(6, 100, 3).indices, a.indices);
}

#[test]
fn order_permutations_are_uniform() {
    // 10^4 epochs of n=4: each of the 24 permutations within 5 sigma of
    // the uniform expectation
    let n_draws = 10_000usize;
    let mut counts = std::collections::HashMap::<Vec<u32>, usize>::new();
    for epoch in 0..n_draws {
        let order = make_order(11, 4, epoch as u64);
        *counts.entry(order.indices).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 24);
    let p = 1.0 / 24.0;
    let expect = n_draws as f64 * p;
    let sigma = (n_draws as f64 * p * (1.0 - p)).sqrt();
    for (perm, count) in counts {
        let dev = (count as f64 - expect).abs();
        assert!(
            dev <= 5.0 * sigma,
            "permutation {perm:?} count {count} deviates {dev:.1} (> 5 sigma {:.1})",
            5.0 * sigma
        );
    }
}

#[test]
fn order_stream_is_epoch_major() {
    let mut stream = OrderStream::new(3, 5);
    let first: Vec<usize> = stream.next_batch(5);
    let second: Vec<usize> = stream.next_batch(5);
    assert_eq!(
        first,
        make_order(3, 5, 0).indices.iter().map(|&i| i as usize).collect::<Vec<_>>()
    );
    assert_eq!(
        second,
        make_order(3, 5, 1).indices.iter().map(|&i| i as usize).collect::<Vec<_>>()
    );
}

#[test]
fn packing_counts_and_errors() {
    let docs = vec![vec![1u32, 2, 3], vec![4u32, 5]];
    // with eos after each doc: 4 + 3 = 7 tokens -> 3 seqs of 2, tail dropped
    let packed = PackedCorpus::pack(&docs, 9, 2).unwrap();
    assert_eq!(packed.n_seqs, 3);
    assert_eq!(packed.seq(0), &[1, 2]);
    assert_eq!(packed.seq(1), &[3, 9]);
    assert_eq!(packed.seq(2), &[4, 5]);
    assert!(PackedCorpus::pack(&docs, 9, 100).is_err());
    assert!(PackedCorpus::pack(&docs, 9, 1).is_err());
}

#[test]
fn milestones_follow_fractional_cadence() {
    assert_eq!(milestone_steps(3000), vec![30, 150, 300, 600, 1500, 3000]);
    assert_eq!(milestone_steps(1), vec![1]);
    assert_eq!(milestone_steps(10), vec![1, 2, 5, 10]);
}

#[test]
fn train_run_toml_round_trip() {
    let run = tiny_run(100);
    let text = run.to_toml_string().unwrap();
    assert!(text.contains("peak_lr"));
    assert!(text.contains("order_seed"));
    let back = TrainRun::from_toml_str(&text).unwrap();
    assert_eq!(back, run);
    assert!(TrainRun::from_toml_str("peak_lr = 1.0").is_err());
}

#[test]
fn pretrain_is_bit_deterministic() {
    let corpus = pattern_corpus(600, 31, 16);
    let run = tiny_run(8);
    let a = pretrain(&run, &corpus, None).unwrap();
    let b = pretrain(&run, &corpus, None).unwrap();
    assert_eq!(
        a.final_checkpoint.checksum(),
        b.final_checkpoint.checksum()
    );
    let mut varied = run.clone();
    varied.order_seed = 2;
    let c = pretrain(&varied, &corpus, None).unwrap();
    assert_ne!(
        a.final_checkpoint.checksum(),
        c.final_checkpoint.checksum()
    );
}

#[test]
fn seed_factorization_holds() {
    let corpus = pattern_corpus(600, 31, 16);
    let mut run = tiny_run(4);
    run.checkpoint_steps = vec![0];
    // order varied, init fixed: identical initial weights
    let mut order_b = run.clone();
    order_b.order_seed = 99;
    let a = pretrain(&run, &corpus, None).unwrap();
    let b = pretrain(&order_b, &corpus, None).unwrap();
    assert_eq!(a.milestones[0].1.checksum(), b.milestones[0].1.checksum());
    assert_ne!(
        a.final_checkpoint.checksum(),
        b.final_checkpoint.checksum()
    );
    // init varied, order fixed: identical permutations
    assert_eq!(
        make_order(run.order_seed, corpus.n_seqs, 0),
        make_order(run.order_seed, corpus.n_seqs, 0)
    );
}

#[test]
fn smoke_loss_decreases_on_learnable_data() {
    let corpus = pattern_corpus(2000, 31, 16);
    let mut run = tiny_run(200);
    run.peak_lr = 3e-3;
    let out = pretrain(&run, &corpus, None).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(
        last < first,
        "loss did not decrease: {first} -> {last}"
    );
    assert!(last < first * 0.8, "decrease too weak: {first} -> {last}");
}

#[test]
fn run_dir_layout_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = pattern_corpus(600, 31, 16);
    let mut run = tiny_run(4);
    run.checkpoint_steps = vec![2, 4];
    let out = pretrain(&run, &corpus, Some(dir.path())).unwrap();
    assert!(dir.path().join("config.toml").exists());
    assert!(dir.path().join("train_log.csv").exists());
    assert!(dir.path().join("checkpoints/step-0000002.ckpt").exists());
    assert!(dir.path().join("checkpoints/step-0000004.ckpt").exists());
    let reloaded = Checkpoint::load(&dir.path().join("checkpoints/step-0000004.ckpt")).unwrap();
    assert_eq!(reloaded.checksum(), out.final_checkpoint.checksum());
    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(csv.starts_with("step,loss,lr,grad_norm"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn pretrain_with_zero_weight_decay_matches_plain_adam_loop() {
    // independent training loop: same batches, same dropout stream, plain
    // Adam formulas written out longhand
    let corpus = pattern_corpus(600, 31, 16);
    let mut run = tiny_run(10);
    run.weight_decay = 0.0;
    run.grad_clip = 1e9; // keep clipping out of the comparison
    let ours = pretrain(&run, &corpus, None).unwrap();

    let mut params: LMParams<f32> = init_params(&run.lm_config, run.init_seed).unwrap();
    let mut order = OrderStream::new(run.order_seed, corpus.n_seqs);
    let mut dropout_rng = StreamKey::new("trainer-dropout")
        .push_u64(run.order_seed)
        .rng();
    let n = params.param_count();
    let (mut m, mut v) = (vec![0.0f32; n], vec![0.0f32; n]);
    let seq = corpus.seq_len;
    for step in 1..=run.total_steps {
        let idx = order.next_batch(run.batch_size);
        let mut tokens = vec![0u32; run.batch_size * seq];
        for (row, &i) in idx.iter().enumerate() {
            tokens[row * seq..(row + 1) * seq].copy_from_slice(corpus.seq(i));
        }
        let out = loss_and_grads(
            &params,
            Batch {
                tokens: &tokens,
                batch: run.batch_size,
                seq,
            },
            None,
            &mut dropout_rng,
        )
        .unwrap();
        let lr = lr_at(&run, step);
        let mut i = 0usize;
        let flat: Vec<f32> = out
            .grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        for (_, w) in params.tensors_mut() {
            for wv in w.iter_mut() {
                let g = flat[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.95 * v[i] + 0.05 * g * g;
                let mh = m[i] as f64 / (1.0 - 0.9f64.powi(step as i32));
                let vh = v[i] as f64 / (1.0 - 0.95f64.powi(step as i32));
                *wv -= (lr * (mh / (vh.sqrt() + 1e-8))) as f32;
                i += 1;
            }
        }
    }
    for ((_, a), (_, b)) in ours
        .final_checkpoint
        .params
        .tensors()
        .iter()
        .zip(params.tensors().iter())
    {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }
}

#[test]
fn pretrain_aborts_on_divergence_keeping_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = pattern_corpus(600, 31, 16);
    let mut run = tiny_run(50);
    run.peak_lr = 1e7; // guaranteed blow-up
    run.warmup_steps = 0;
    run.checkpoint_steps = vec![1];
    let err = pretrain(&run, &corpus, Some(dir.path()))
        .map(|_| ())
        .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "got {err}");
    assert!(err.to_string().contains("last checkpoint retained"));
    assert!(dir.path().join("checkpoints/step-0000001.ckpt").exists());
}

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

fn sft_base() -> Checkpoint {
    let corpus = pattern_corpus(600, 31, 16);
    let run = tiny_run(5);
    pretrain(&run, &corpus, None).unwrap().final_checkpoint
}

fn sft_examples(n: usize) -> Vec<SftExample> {
    (0..n)
        .map(|i| SftExample {
            prompt_ids: vec![(i % 7) as u32, 3, 5],
            response_ids: vec![(i % 5) as u32 + 10, 2],
        })
        .collect()
}

#[test]
fn finetune_zero_steps_is_identity() {
    let base = sft_base();
    let mut run = tiny_run(0);
    run.warmup_steps = 0;
    let out = finetune(&base, &sft_examples(4), &run, 30).unwrap();
    assert_eq!(out.checkpoint.checksum(), base.checksum());
}

#[test]
fn finetune_order_seed_changes_result() {
    let base = sft_base();
    let mut run = tiny_run(6);
    run.batch_size = 2;
    let a = finetune(&base, &sft_examples(8), &run, 30).unwrap();
    let mut varied = run.clone();
    varied.order_seed = 41;
    let b = finetune(&base, &sft_examples(8), &varied, 30).unwrap();
    assert_ne!(a.checkpoint.checksum(), b.checkpoint.checksum());
    // but both differ from base and share its init_seed metadata
    assert_ne!(a.checkpoint.checksum(), base.checksum());
    assert_eq!(a.checkpoint.meta.init_seed, base.meta.init_seed);
}

#[test]
fn finetune_truncates_prompt_from_left_only() {
    let base = sft_base();
    let mut run = tiny_run(1);
    run.batch_size = 1;
    let long_prompt: Vec<u32> = (0..40).map(|i| (i % 9) as u32).collect();
    let examples = vec![SftExample {
        prompt_ids: long_prompt,
        response_ids: vec![11, 12, 13],
    }];
    let out = finetune(&base, &examples, &run, 30).unwrap();
    assert_eq!(out.truncated_examples, 1);
    // response longer than the window is refused, never cut
    let bad = vec![SftExample {
        prompt_ids: vec![1],
        response_ids: (0..20).map(|i| (i % 9) as u32).collect(),
    }];
    let err = finetune(&base, &bad, &run, 30).map(|_| ()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn finetune_masks_prompt_loss_by_default() {
    let base = sft_base();
    let mut run = tiny_run(1);
    run.batch_size = 4;
    let data = sft_examples(4);
    let masked = finetune(&base, &data, &run, 30).unwrap();
    let mut full = run.clone();
    full.sft_full_sequence_loss = true;
    let unmasked = finetune(&base, &data, &full, 30).unwrap();
    // same batch, different objective -> different first-step loss
    assert_ne!(masked.log[0].loss, unmasked.log[0].loss);
}

#[test]
fn finetune_rejects_mismatched_config() {
    let base = sft_base();
    let mut run = tiny_run(1);
    run.lm_config.d_model = 32;
    run.lm_config.d_ffn = 48;
    let err = finetune(&base, &sft_examples(2), &run, 30)
        .map(|_| ())
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn eval_nll_of_uniform_model_is_ln_vocab() {
    let corpus = pattern_corpus(600, 31, 16);
    let mut params: LMParams<f32> = init_params(&tiny_config(), 1).unwrap();
    params.head.fill(0.0);
    let nll = eval_mean_nll(&params, &corpus, 8).unwrap();
    assert!((nll - (31.0f64).ln()).abs() < 1e-5);
}
