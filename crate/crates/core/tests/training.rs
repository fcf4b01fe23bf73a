use std::collections::HashMap;

use latentkv::autograd::{grad_check_floor, Tape};
use latentkv::latent::{InjectionMode, PassCounter};
use latentkv::model::{AugmentationPlan, BoundModel, ModelConfig};
use latentkv::tasks::{CotExample, CotRecord};
use latentkv::train::{
    adamw_step, evaluate_perplexity, finetune_step, lm_perplexity, lm_step, pretrain_loss, pretrain_step,
    select_augmentation_sites, BoundState, CurriculumConfig, FinetuneItem, MetricsRow, MetricsWriter, OptimizerConfig,
    OptimizerState, ScheduleConfig, TrainState,
};
use latentkv::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn opt(lr: f64, wd: f64) -> OptimizerConfig {
    OptimizerConfig {
        lr,
        weight_decay: wd,
        warmup_steps: 0,
        grad_clip: 0.0,
        ..OptimizerConfig::default()
    }
}

fn scalar_opt(cfg: OptimizerConfig) -> OptimizerState<f64> {
    OptimizerState::new(cfg, vec!["p".into()], &[vec![1]], vec![true]).unwrap()
}

#[test]
fn adamw_matches_closed_form() {
    let cfg = opt(0.01, 0.0);
    let mut state = scalar_opt(cfg.clone());
    let mut p = Tensor::from_vec(&[1], vec![0.5f64]).unwrap();
    let grads = [0.3, -1.2, 0.7];
    for &g in &grads {
        adamw_step(&mut state, &mut [&mut p], &[Tensor::from_vec(&[1], vec![g]).unwrap()]).unwrap();
    }
    // expanded by hand: m_t, v_t as explicit weighted sums of past gradients
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let mut expect = 0.5f64;
    for t in 1..=3usize {
        let m: f64 = (1..=t)
            .map(|k| (1.0 - b1) * b1.powi((t - k) as i32) * grads[k - 1])
            .sum();
        let v: f64 = (1..=t)
            .map(|k| (1.0 - b2) * b2.powi((t - k) as i32) * grads[k - 1].powi(2))
            .sum();
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        expect -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    assert!((p.data()[0] - expect).abs() < 1e-12, "{} vs {}", p.data()[0], expect);
    // the first update of Adam always has magnitude close to lr
    let mut s2 = scalar_opt(cfg.clone());
    let mut q = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
    adamw_step(&mut s2, &mut [&mut q], &[Tensor::from_vec(&[1], vec![42.0]).unwrap()]).unwrap();
    assert!((q.data()[0] + 0.01).abs() < 1e-9);
}

#[test]
fn weight_decay_alone_shrinks_geometrically() {
    let cfg = opt(0.01, 0.1);
    let mut state = scalar_opt(cfg);
    let mut p = Tensor::from_vec(&[1], vec![2.0f64]).unwrap();
    for _ in 0..5 {
        adamw_step(&mut state, &mut [&mut p], &[Tensor::zeros(&[1])]).unwrap();
    }
    let expect = 2.0 * (1.0f64 - 0.01 * 0.1).powi(5);
    assert!((p.data()[0] - expect).abs() < 1e-14);
}

#[test]
fn zero_gradients_without_decay_leave_parameters() {
    let mut state = scalar_opt(opt(0.01, 0.0));
    let mut p = Tensor::from_vec(&[1], vec![-0.75f64]).unwrap();
    for _ in 0..4 {
        adamw_step(&mut state, &mut [&mut p], &[Tensor::zeros(&[1])]).unwrap();
    }
    assert_eq!(p.data()[0], -0.75);
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let mut state = scalar_opt(opt(0.01, 0.0));
    let mut p = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
    let bad = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
    assert!(adamw_step(&mut state, &mut [&mut p], &[bad]).is_err());
    assert_eq!(p.data()[0], 1.0);
}

#[test]
fn warmup_ramps_linearly() {
    let cfg = OptimizerConfig::default();
    assert!((cfg.lr_at(1) - 1e-6).abs() < 1e-18);
    assert!((cfg.lr_at(50) - 5e-5).abs() < 1e-18);
    assert_eq!(cfg.lr_at(100), 1e-4);
    assert_eq!(cfg.lr_at(5000), 1e-4);
}

proptest! {
    #[test]
    fn sites_are_valid(s in 4usize..80, m in 1usize..6, na in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match select_augmentation_sites(s, m, na, &mut rng) {
            Ok(sites) => {
                prop_assert_eq!(sites.len(), m);
                prop_assert!(sites[0] >= 1);
                prop_assert!(*sites.last().unwrap() + na <= s);
                for w in sites.windows(2) {
                    prop_assert!(w[0] + na <= w[1]);
                }
                prop_assert!(AugmentationPlan::new(s, sites, 2, na).is_ok());
            }
            Err(_) => prop_assert!(m * na + 1 > s),
        }
    }
}

#[test]
fn infeasible_sites_name_the_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(select_augmentation_sites(7, 3, 2, &mut rng).is_ok());
    let err = select_augmentation_sites(6, 3, 2, &mut rng).unwrap_err().to_string();
    assert!(
        err.contains("S=6") && err.contains("M=3") && err.contains("N_A=2"),
        "{}",
        err
    );
}

/// Exact per-position marginal of the pooled sites under a uniform placement,
/// by enumerating every valid configuration.
fn exact_marginal(s: usize, m: usize, na: usize) -> (Vec<f64>, u64) {
    fn rec(start: usize, left: usize, s: usize, na: usize, stack: &mut Vec<usize>, hits: &mut [u64], total: &mut u64) {
        if left == 0 {
            *total += 1;
            for &t in stack.iter() {
                hits[t] += 1;
            }
            return;
        }
        let mut t = start;
        while t + na + (left - 1) * na <= s {
            stack.push(t);
            rec(t + na, left - 1, s, na, stack, hits, total);
            stack.pop();
            t += 1;
        }
    }
    let mut hits = vec![0u64; s + 1];
    let mut total = 0;
    rec(1, m, s, na, &mut Vec::new(), &mut hits, &mut total);
    (
        hits.iter().map(|&h| h as f64 / (total as f64 * m as f64)).collect(),
        total,
    )
}

#[test]
fn site_marginal_matches_enumeration() {
    let (s, m, na) = (64, 4, 2);
    let (marginal, configs) = exact_marginal(s, m, na);
    assert_eq!(configs, 455_126);
    let draws = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0u64; s + 1];
    for _ in 0..draws {
        for t in select_augmentation_sites(s, m, na, &mut rng).unwrap() {
            counts[t] += 1;
        }
    }
    let n = (draws * m) as f64;
    let mut chi2 = 0.0;
    let mut cells = 0;
    for t in 0..=s {
        let e = marginal[t] * n;
        if e > 0.0 {
            chi2 += (counts[t] as f64 - e).powi(2) / e;
            cells += 1;
        } else {
            assert_eq!(counts[t], 0, "position {} is never valid", t);
        }
    }
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {} over {} cells, p = {}", chi2, cells, p);
}

#[test]
fn schedule_validation() {
    let ok = ScheduleConfig {
        seq_len: 64,
        n_sites: 4,
        n_latents: 8,
        n_ahead: 4,
        seed: 0,
    };
    assert!(ok.validate().is_ok());
    assert_eq!(ok.effective_context(), 64 + 4 * 12);
    let small = ScheduleConfig {
        seq_len: 9,
        ..ok.clone()
    };
    assert!(small.validate().is_err());
    let cur = CurriculumConfig {
        stages: 3,
        latents_per_stage: 2,
        epochs_per_stage: 1,
    };
    assert!(cur.validate(6).is_ok());
    assert!(cur.validate(8).is_err());
}

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig::new(2, 16, 2, vocab, 64)
}

fn repetitive(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            use rand::Rng;
            let period = rng.random_range(2..4);
            let motif: Vec<usize> = (0..period).map(|_| rng.random_range(0..12)).collect();
            (0..len).map(|i| motif[i % period]).collect()
        })
        .collect()
}

fn sched(seq_len: usize) -> ScheduleConfig {
    ScheduleConfig {
        seq_len,
        n_sites: 2,
        n_latents: 2,
        n_ahead: 3,
        seed: 5,
    }
}

fn snapshot(p: &latentkv::model::ModelParams<f32>) -> Vec<Vec<u32>> {
    p.tensors()
        .iter()
        .map(|t| t.data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let data = repetitive(4, 16, 1);
    for mode in InjectionMode::TRAINABLE {
        let mut st = TrainState::<f32>::new(mode, &tiny(12), 2, opt(1e-2, 0.1), 3).unwrap();
        let base0 = snapshot(&st.base);
        let co0 = st.coproc.as_ref().map(snapshot);
        let bank0 = st.bank.as_ref().unwrap().embeddings.clone();
        for _ in 0..2 {
            pretrain_step(&mut st, &data, &sched(16)).unwrap();
        }
        assert_eq!(snapshot(&st.base) == base0, !mode.base_trainable(), "{} base", mode);
        if let Some(c0) = co0 {
            assert_ne!(snapshot(st.coproc.as_ref().unwrap()), c0, "{} coprocessor", mode);
        }
        assert_ne!(st.bank.as_ref().unwrap().embeddings, bank0, "{} bank", mode);
    }
}

#[test]
fn zero_unembedding_gives_vocabulary_perplexity() {
    let mut st = TrainState::<f64>::new(InjectionMode::EmbeddingFrozenBase, &tiny(12), 2, opt(1e-3, 0.0), 0).unwrap();
    for v in st.base.unembed.data_mut() {
        *v = 0.0;
    }
    let ppl = evaluate_perplexity(&st, &repetitive(3, 16, 2), &sched(16)).unwrap();
    assert!((ppl - 12.0).abs() < 1e-9, "{}", ppl);
    assert!((lm_perplexity(&st.base, &repetitive(3, 16, 2)).unwrap() - 12.0).abs() < 1e-9);
    assert!(evaluate_perplexity(&st, &[], &sched(16)).is_err());
}

#[test]
fn repeated_token_perplexity_approaches_one() {
    let data = vec![vec![7usize; 16]; 4];
    let mut st = TrainState::<f32>::new(InjectionMode::EmbeddingCofinetuned, &tiny(12), 2, opt(1e-2, 0.0), 4).unwrap();
    for _ in 0..60 {
        pretrain_step(&mut st, &data, &sched(16)).unwrap();
    }
    let ppl = evaluate_perplexity(&st, &data, &sched(16)).unwrap();
    assert!(ppl < 1.05, "{}", ppl);
}

#[test]
fn pretraining_loss_decreases_and_is_reproducible() {
    let data = repetitive(8, 24, 3);
    let run = || {
        let mut st =
            TrainState::<f32>::new(InjectionMode::EmbeddingFrozenBase, &tiny(12), 2, opt(3e-3, 0.1), 9).unwrap();
        let mut lm = TrainState::<f32>::language_model(&tiny(12), opt(3e-3, 0.1), 9).unwrap();
        for _ in 0..30 {
            lm_step(&mut lm, &data).unwrap();
        }
        st.base = lm.base.clone().with_trainable(false);
        st.coproc = Some(lm.base.duplicate_as(latentkv::model::Role::Coprocessor));
        let s = sched(24);
        let before = evaluate_perplexity(&st, &data, &s).unwrap();
        let mut last = 0.0;
        for _ in 0..40 {
            last = pretrain_step(&mut st, &data, &s).unwrap().loss;
        }
        let after = evaluate_perplexity(&st, &data, &s).unwrap();
        (
            before,
            after,
            last,
            snapshot(st.coproc.as_ref().unwrap()),
            st.tokens_seen,
        )
    };
    let a = run();
    assert!(a.1 < a.0, "perplexity {} -> {}", a.0, a.1);
    assert_eq!(a.4, 40 * 8 * 24);
    let b = run();
    assert_eq!(a.2.to_bits(), b.2.to_bits());
    assert_eq!(a.3, b.3);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut st = TrainState::<f32>::new(InjectionMode::EmbeddingCofinetuned, &tiny(12), 2, opt(1e-3, 0.0), 1).unwrap();
    st.base.unembed.data_mut()[0] = f32::NAN;
    let before = snapshot(&st.base);
    let err = pretrain_step(&mut st, &repetitive(2, 16, 1), &sched(16))
        .unwrap_err()
        .to_string();
    assert!(err.contains("step 1"), "{}", err);
    let after = snapshot(&st.base);
    assert_eq!(before, after);
}

fn cot() -> CotExample {
    CotExample::from_record(&CotRecord {
        question: "q?".into(),
        steps: vec!["s1".into(), "s2".into(), "step3".into(), "s4".into()],
        answer: "yes".into(),
    })
}

#[test]
fn curriculum_stage_layout() {
    let ex = cot();
    let c = 3;
    let item = FinetuneItem::stage(&ex, 2, 2 * c).unwrap();
    let later: usize = ex.steps[2..].iter().map(Vec::len).sum();
    let answer = ex.answer.len() - 1; // the separator is fed, never predicted
    assert_eq!(item.input_len(), ex.question.len() + 2 * c + later + answer);
    let mask = item.loss_mask();
    assert_eq!(mask.len(), item.input_len());
    assert!(mask.as_slice()[..ex.question.len() + 2 * c].iter().all(|&m| !m));
    assert_eq!(mask.count(), later + answer);
    let zero = FinetuneItem::stage(&ex, 0, 0).unwrap();
    let all: usize = ex.steps.iter().map(Vec::len).sum();
    assert_eq!(zero.loss_mask().count(), all + answer);
    assert!(FinetuneItem::stage(&ex, 5, 0).is_err());
}

#[test]
fn finetuning_learns_a_fixed_answer() {
    let items: Vec<FinetuneItem> = (0..2).map(|_| FinetuneItem::stage(&cot(), 4, 4).unwrap()).collect();
    let cfg = ModelConfig::new(2, 16, 2, latentkv::tasks::VOCAB_SIZE, 64);
    let mut st = TrainState::<f32>::new(InjectionMode::EmbeddingCofinetuned, &cfg, 4, opt(1e-2, 0.0), 2).unwrap();
    let first = finetune_step(&mut st, &items).unwrap().loss;
    let mut last = first;
    for _ in 0..40 {
        last = finetune_step(&mut st, &items).unwrap().loss;
    }
    assert!(last < 0.2 * first, "{} -> {}", first, last);
}

#[test]
fn curriculum_skips_short_examples() {
    let mut short = cot();
    short.steps.truncate(1);
    let data = vec![cot(), short, cot()];
    let cfg = ModelConfig::new(1, 16, 2, latentkv::tasks::VOCAB_SIZE, 64);
    let cur = CurriculumConfig {
        stages: 2,
        latents_per_stage: 1,
        epochs_per_stage: 1,
    };
    let mut st = TrainState::<f32>::new(InjectionMode::CacheConcatFrozenBase, &cfg, 2, opt(1e-3, 0.0), 0).unwrap();
    let mut steps = 0;
    let report = latentkv::train::curriculum_finetune(&mut st, &data, &cur, 1, |_, _| {
        steps += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(report.skipped, 1);
    assert_eq!(report.stages.len(), 3);
    assert_eq!(steps, 6);
    assert_eq!(report.stages[2].n_latents, 2);
}

#[test]
fn three_pass_gradients_match_finite_differences() {
    let cfg = ModelConfig::new(2, 16, 2, 10, 32);
    let tokens = [1usize, 4, 2, 6, 0, 3, 5, 8, 7, 9];
    let plan = AugmentationPlan::new(10, vec![2, 6], 2, 2).unwrap();
    for mode in InjectionMode::TRAINABLE {
        let st = TrainState::<f64>::new(mode, &cfg, 2, opt(1e-3, 0.0), 11).unwrap();
        let mut groups = vec![st.base.tensors().into_iter().cloned().collect::<Vec<_>>()];
        if let Some(c) = &st.coproc {
            groups.push(c.tensors().into_iter().cloned().collect());
        }
        for g in groups.iter_mut() {
            for t in g.iter_mut() {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = *v * 5.0 + if i % 3 == 0 { 0.1 } else { -0.05 };
                }
            }
        }
        let n = groups[0].len();
        let mut leaves: Vec<Tensor<f64>> = groups.concat();
        leaves.push(st.bank.as_ref().unwrap().embeddings.map(|x| x * 20.0));
        let has_coproc = st.coproc.is_some();
        // loss values near 2 put finite-difference noise around 1e-12 at this step
        let err = grad_check_floor(
            |tape: &mut Tape<f64>, vars| {
                let base = BoundModel::from_vars(&cfg, &vars[..n])?;
                let coproc = if has_coproc {
                    Some(BoundModel::from_vars(&cfg, &vars[n..2 * n])?)
                } else {
                    None
                };
                let bound = BoundState {
                    base,
                    coproc,
                    bank: Some(*vars.last().unwrap()),
                };
                let (loss, _) = pretrain_loss(tape, mode, &bound, &tokens, &plan, &mut PassCounter::default())?;
                Ok(loss)
            },
            &leaves,
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(err < 1e-3, "{}: relative error {}", mode, err);
    }
}

#[test]
fn metrics_csv_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    {
        let mut w = MetricsWriter::open(&path).unwrap();
        w.write(&MetricsRow {
            step: 1,
            tokens_seen: 128,
            loss: 2.5,
            ppl: None,
            lr: 1e-4,
            mode: "liu".into(),
            n_latents: 8,
        })
        .unwrap();
    }
    let mut w = MetricsWriter::open(&path).unwrap();
    w.write(&MetricsRow {
        step: 2,
        tokens_seen: 256,
        loss: 2.0,
        ppl: Some(7.389),
        lr: 1e-4,
        mode: "liu".into(),
        n_latents: 8,
    })
    .unwrap();
    drop(w);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "step,tokens_seen,loss,ppl,lr,mode,N_L");
    let cols: HashMap<usize, &str> = lines[2].split(',').enumerate().collect();
    assert_eq!(cols.len(), 7);
    assert_eq!(cols[&3], "7.3890");
    assert_eq!(lines[1].split(',').nth(3), Some(""));
}
