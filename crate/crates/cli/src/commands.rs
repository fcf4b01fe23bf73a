//! Subcommand implementations. Each writes its report to `out`.

use std::io::Write;
use std::path::{Path, PathBuf};

use latentkv::autograd::Tape;
use latentkv::checkpoint::{load_checkpoint_with, save_checkpoint_with};
use latentkv::error::{Error, Result};
use latentkv::interp::{collect_activations, cross_capture, emit_report, silhouette, DEFAULT_CAP};
use latentkv::latent::{run_schedule, sequential_rollout, InjectionMode, Models, PassCounter, SoftTokenBank};
use latentkv::model::{AugmentationPlan, ModelConfig, ModelParams, Role};
use latentkv::tasks::{
    gen_countdown, gen_countdown_unfiltered, gen_graph_qa, ingest_text_corpus, parse_answer, prompt_text, read_jsonl,
    synthetic_corpus, write_jsonl, CotExample, CotRecord, CountdownInstance, Tokenizer,
};
use latentkv::train::{
    curriculum_finetune, evaluate_countdown, evaluate_perplexity, generate_answer, lm_step, pretrain_step,
    train_epochs, AccuracyReport, FinetuneItem, MetricsRow, MetricsWriter, StepStats, TrainState, TrainableSet,
};
use latentkv::TrainState32;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, TaskKind};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

fn emit(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{}", line).map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Token windows of `seq_len` from the configured corpus.
pub fn corpus_windows(cfg: &RunConfig) -> Result<Vec<Vec<usize>>> {
    let s = cfg.schedule.seq_len;
    match &cfg.task.path {
        Some(p) => ingest_text_corpus(p, s),
        None => {
            let text = synthetic_corpus(cfg.task.synthetic_bytes, cfg.seed);
            Ok(Tokenizer.encode(&text).chunks_exact(s).map(<[usize]>::to_vec).collect())
        }
    }
}

/// Held-out windows come from the end of the corpus.
pub fn split_windows(mut windows: Vec<Vec<usize>>, eval: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let n_val = eval.min(windows.len() / 10).max(1);
    if windows.len() < n_val + 1 {
        return Err(Error::contract(format!("corpus yields only {} windows", windows.len())));
    }
    let val = windows.split_off(windows.len() - n_val);
    Ok((windows, val))
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Language-model pretraining of a fresh Base on `windows`.
pub fn warm_start_base(cfg: &RunConfig, windows: &[Vec<usize>], out: &mut dyn Write) -> Result<ModelParams<f32>> {
    let mut opt = cfg.optimizer.clone();
    if let Some(lr) = cfg.train.warm_start_lr {
        opt.lr = lr;
    }
    let mut lm = TrainState32::language_model(&cfg.model, opt, cfg.seed)?;
    let mut steps = 0u64;
    while lm.tokens_seen < cfg.train.warm_start_tokens {
        let batch: Vec<Vec<usize>> = (0..cfg.train.batch_size)
            .map(|_| windows[lm.rng.random_range(0..windows.len())].clone())
            .collect();
        lm_step(&mut lm, &batch)?;
        steps += 1;
    }
    emit(out, format!("warm start: {} steps, {} tokens", steps, lm.tokens_seen))?;
    Ok(lm.base)
}

fn new_state(cfg: &RunConfig, train: &[Vec<usize>], out: &mut dyn Write) -> Result<TrainState32> {
    let mode = cfg.mode()?;
    if cfg.train.warm_start_tokens == 0 {
        return TrainState::new(mode, &cfg.model, cfg.n_latents(), cfg.optimizer.clone(), cfg.seed);
    }
    let base = warm_start_base(cfg, train, out)?;
    TrainState::from_base(mode, base, cfg.n_latents(), cfg.optimizer.clone(), rng_for(cfg.seed, 1))
}

fn resume_state(cfg: &RunConfig, path: &Path) -> Result<TrainState32> {
    let (state, _) = load_checkpoint_with::<f32>(path)?;
    let mode = cfg.mode()?;
    if state.mode != mode {
        return Err(Error::config(
            "mode",
            format!("checkpoint was trained as {} but the run asks for {}", state.mode, mode),
        ));
    }
    Ok(state)
}

fn save(cfg: &RunConfig, dir: &Path, name: &str, state: &TrainState32) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint_with(&path, state, Some(&cfg.to_toml()?))?;
    Ok(path)
}

/// Final summary of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub steps: u64,
    pub tokens_seen: u64,
    pub val_ppl: f64,
    pub checkpoint: PathBuf,
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<PretrainSummary> {
    cfg.validate()?;
    if cfg.task.kind != TaskKind::Corpus {
        return Err(Error::config("task.kind", "pretraining needs a corpus task"));
    }
    let mode = cfg.mode()?;
    let dir = cfg.paths.out.clone();
    create_dir(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let (train, val) = split_windows(corpus_windows(cfg)?, cfg.train.eval_sequences)?;
    let mut state = match resume {
        Some(p) => resume_state(cfg, p)?,
        None => new_state(cfg, &train, out)?,
    };
    let mut metrics = MetricsWriter::open(&dir.join(METRICS_FILE))?;
    let mut sched = cfg.schedule.clone();
    sched.seed = cfg.seed;
    let mut last_ppl = f64::NAN;
    let mut last_saved = None;
    while state.tokens_seen < cfg.train.token_budget {
        let batch: Vec<Vec<usize>> = (0..cfg.train.batch_size)
            .map(|_| train[state.rng.random_range(0..train.len())].clone())
            .collect();
        let stats = pretrain_step(&mut state, &batch, &sched)?;
        let done = state.tokens_seen >= cfg.train.token_budget;
        let ppl = if done || stats.step % cfg.train.eval_every.max(1) == 0 {
            last_ppl = evaluate_perplexity(&state, &val, &sched)?;
            Some(last_ppl)
        } else {
            None
        };
        metrics.write(&MetricsRow {
            step: stats.step,
            tokens_seen: state.tokens_seen,
            loss: stats.loss,
            ppl,
            lr: stats.update.lr,
            mode: mode.name().to_string(),
            n_latents: sched.n_latents,
        })?;
        if stats.step % cfg.train.checkpoint_every.max(1) == 0 {
            last_saved = Some(save(cfg, &dir, CHECKPOINT_FILE, &state)?);
        }
    }
    if last_ppl.is_nan() {
        last_ppl = evaluate_perplexity(&state, &val, &sched)?;
    }
    let checkpoint = match last_saved {
        Some(p) if state.step() % cfg.train.checkpoint_every.max(1) == 0 => p,
        _ => save(cfg, &dir, CHECKPOINT_FILE, &state)?,
    };
    emit(
        out,
        format!(
            "final step={} tokens_seen={} val_ppl={:.6} mode={} n_latents={}",
            state.step(),
            state.tokens_seen,
            last_ppl,
            mode.name(),
            sched.n_latents
        ),
    )?;
    Ok(PretrainSummary {
        steps: state.step(),
        tokens_seen: state.tokens_seen,
        val_ppl: last_ppl,
        checkpoint,
    })
}

/// Held-out evaluation data of a finetuning task.
#[derive(Clone, Debug)]
pub enum EvalSet {
    Countdown(Vec<CountdownInstance>),
    /// Prompt tokens and the expected answer text.
    Cot(Vec<(Vec<usize>, String)>),
}

impl EvalSet {
    pub fn len(&self) -> usize {
        match self {
            EvalSet::Countdown(v) => v.len(),
            EvalSet::Cot(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn countdown_instances(n_operands: usize, count: usize, seed: u64) -> Result<Vec<CountdownInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_countdown(n_operands, &mut rng)).collect()
}

/// Training examples and evaluation set of a finetuning task.
pub fn finetune_data(cfg: &RunConfig) -> Result<(Vec<CotExample>, EvalSet)> {
    let t = &cfg.task;
    match t.kind {
        TaskKind::Countdown => {
            let train = countdown_instances(t.operands, t.train_examples, cfg.seed)?;
            // evaluation draws from its own stream
            let mut rng = rng_for(cfg.seed, 7);
            let eval = (0..t.eval_examples)
                .map(|_| gen_countdown(t.operands, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let examples = train
                .iter()
                .map(CotExample::from_countdown)
                .collect::<Result<Vec<_>>>()?;
            Ok((examples, EvalSet::Countdown(eval)))
        }
        TaskKind::GraphQa => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut records = Vec::new();
            for _ in 0..t.train_examples + t.eval_examples {
                let g = gen_graph_qa(t.depth, t.width, &mut rng)?;
                records.push(CotRecord {
                    question: g.question,
                    steps: g.steps,
                    answer: g.answer,
                });
            }
            Ok(split_records(records, t.eval_examples))
        }
        TaskKind::Jsonl => {
            let path = t
                .path
                .as_ref()
                .ok_or_else(|| Error::config("task.path", "jsonl tasks need a path"))?;
            let records: Vec<CotRecord> = read_jsonl(path)?;
            if records.len() < 2 {
                return Err(Error::contract(format!(
                    "{} holds fewer than 2 records",
                    path.display()
                )));
            }
            let n_eval = (records.len() / 10).max(1).min(t.eval_examples);
            Ok(split_records(records, n_eval))
        }
        TaskKind::Corpus => Err(Error::config(
            "task.kind",
            "finetuning needs countdown, graph_qa or jsonl",
        )),
    }
}

fn split_records(mut records: Vec<CotRecord>, n_eval: usize) -> (Vec<CotExample>, EvalSet) {
    let eval = records.split_off(records.len() - n_eval);
    let examples = records.iter().map(CotExample::from_record).collect();
    let eval = eval
        .iter()
        .map(|r| (CotExample::from_record(r).question, r.answer.clone()))
        .collect();
    (examples, EvalSet::Cot(eval))
}

pub fn evaluate_set(state: &TrainState32, set: &EvalSet) -> Result<AccuracyReport> {
    if set.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    match set {
        EvalSet::Countdown(v) => evaluate_countdown(state, v),
        EvalSet::Cot(v) => {
            let mut report = AccuracyReport::default();
            let mut counter = PassCounter::default();
            for (prompt, answer) in v {
                let text = generate_answer(state, prompt, &mut counter)?;
                report.record(match parse_answer(&text) {
                    None => latentkv::tasks::ScoreOutcome::ParseFailure,
                    Some(a) if a == answer.trim() => latentkv::tasks::ScoreOutcome::Correct,
                    Some(_) => latentkv::tasks::ScoreOutcome::Wrong,
                });
            }
            Ok(report)
        }
    }
}

fn accuracy_line(r: &AccuracyReport) -> String {
    format!(
        "accuracy={:.4} correct={} wrong={} parse_failures={} total={}",
        r.accuracy(),
        r.correct,
        r.wrong,
        r.parse_failures,
        r.total
    )
}

/// Starting point for finetuning: pretrained weights re-wired for the
/// requested mode, with a bank of the right size and fresh optimizer moments.
fn finetune_start(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainState32> {
    let mode = cfg.mode()?;
    let Some(path) = resume else {
        return TrainState::new(mode, &cfg.model, cfg.n_latents(), cfg.optimizer.clone(), cfg.seed);
    };
    let (loaded, _) = load_checkpoint_with::<f32>(path)?;
    if loaded.base.config != cfg.model {
        return Err(Error::config(
            "model",
            "checkpoint architecture differs from the run configuration",
        ));
    }
    let mut rng = rng_for(cfg.seed, 3);
    let trainable = TrainableSet::for_mode(mode);
    let base = loaded.base.clone().with_trainable(trainable.base);
    let coproc = mode.has_coprocessor().then(|| match &loaded.coproc {
        Some(c) => c.clone(),
        None => loaded.base.duplicate_as(Role::Coprocessor).with_trainable(true),
    });
    let bank = match loaded.bank {
        Some(b) if b.n_latents() == cfg.n_latents() => b,
        _ => SoftTokenBank::init(cfg.n_latents(), cfg.model.d_model, &mut rng),
    };
    TrainState::from_parts(mode, base, coproc, Some(bank), trainable, cfg.optimizer.clone(), rng)
}

pub fn cmd_finetune(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<AccuracyReport> {
    cfg.validate()?;
    let mode = cfg.mode()?;
    if let Some(p) = resume {
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "resume checkpoint not found"),
            ));
        }
    }
    let (examples, eval) = finetune_data(cfg)?;
    let dir = cfg.paths.out.clone();
    create_dir(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    let mut state = finetune_start(cfg, resume)?;
    let mut metrics = MetricsWriter::open(&dir.join(METRICS_FILE))?;
    let n_latents = cfg.n_latents();
    let mut log_step = |st: &TrainState32, s: &StepStats| -> Result<()> {
        metrics.write(&MetricsRow {
            step: s.step,
            tokens_seen: st.tokens_seen,
            loss: s.loss,
            ppl: None,
            lr: s.update.lr,
            mode: mode.name().to_string(),
            n_latents,
        })
    };
    match &cfg.curriculum {
        Some(cur) => {
            let mut cur = cur.clone();
            cur.epochs_per_stage = cur.epochs_per_stage.max(1);
            let report = curriculum_finetune(&mut state, &examples, &cur, cfg.train.batch_size, &mut log_step)?;
            for s in &report.stages {
                emit(
                    out,
                    format!(
                        "stage {} n_latents={} steps={} mean_loss={:.6}",
                        s.stage, s.n_latents, s.steps, s.mean_loss
                    ),
                )?;
            }
            if report.skipped > 0 {
                emit(out, format!("skipped {} examples with too few steps", report.skipped))?;
            }
        }
        None => {
            let items = examples
                .iter()
                .map(|e| FinetuneItem::flat(e, n_latents))
                .collect::<Result<Vec<_>>>()?;
            let stats = train_epochs(
                &mut state,
                &items,
                cfg.train.epochs,
                cfg.train.batch_size,
                &mut log_step,
            )?;
            if let Some(last) = stats.last() {
                emit(out, format!("trained steps={} last_loss={:.6}", last.step, last.loss))?;
            }
        }
    }
    save(cfg, &dir, CHECKPOINT_FILE, &state)?;
    let report = evaluate_set(&state, &eval)?;
    emit(out, accuracy_line(&report))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataTask {
    Countdown,
    /// Independent operand and target draws, kept even when unsolvable.
    CountdownUnfiltered,
    GraphQa,
}

pub fn cmd_gen_data(
    task: DataTask,
    count: usize,
    operands: usize,
    depth: usize,
    width: usize,
    seed: u64,
    path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    match task {
        DataTask::Countdown => {
            let items = countdown_instances(operands, count, seed)?;
            if let Some(bad) = items.iter().position(|i| !i.verify()) {
                return Err(Error::Generation(format!("instance {} failed verification", bad)));
            }
            write_jsonl(path, &items)?;
        }
        DataTask::CountdownUnfiltered => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items = (0..count)
                .map(|_| gen_countdown_unfiltered(operands, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(path, &items)?;
        }
        DataTask::GraphQa => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items = (0..count)
                .map(|_| {
                    gen_graph_qa(depth, width, &mut rng).map(|g| CotRecord {
                        question: g.question,
                        steps: g.steps,
                        answer: g.answer,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(path, &items)?;
        }
    }
    emit(out, format!("wrote {} records to {}", count, path.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Countdown,
    Cot,
    Corpus,
}

fn load_prompts(task: EvalTask, data: &Path) -> Result<EvalSet> {
    match task {
        EvalTask::Countdown => Ok(EvalSet::Countdown(read_jsonl(data)?)),
        EvalTask::Cot => {
            let recs: Vec<CotRecord> = read_jsonl(data)?;
            Ok(EvalSet::Cot(
                recs.iter()
                    .map(|r| (CotExample::from_record(r).question, r.answer.clone()))
                    .collect(),
            ))
        }
        EvalTask::Corpus => Err(Error::contract("corpus files have no prompts")),
    }
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, task: EvalTask, out: &mut dyn Write) -> Result<()> {
    let (state, run_config) = load_checkpoint_with::<f32>(checkpoint)?;
    if task == EvalTask::Corpus {
        let cfg_text = run_config.ok_or_else(|| Error::contract("checkpoint has no run configuration"))?;
        let cfg = RunConfig::parse(&cfg_text)?;
        let mut sched = cfg.schedule.clone();
        sched.seed = cfg.seed;
        let windows = ingest_text_corpus(data, sched.seq_len)?;
        let ppl = evaluate_perplexity(&state, &windows, &sched)?;
        return emit(out, format!("ppl={:.6} sequences={}", ppl, windows.len()));
    }
    let set = load_prompts(task, data)?;
    let report = evaluate_set(&state, &set)?;
    emit(out, accuracy_line(&report))
}

pub fn cmd_interp(
    checkpoint: &Path,
    data: &Path,
    task: EvalTask,
    tau: f64,
    cap: Option<usize>,
    centered: bool,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<String> {
    let state = latentkv::checkpoint::load_checkpoint::<f32>(checkpoint)?;
    let prompts: Vec<Vec<usize>> = match load_prompts(task, data)? {
        EvalSet::Countdown(v) => v.iter().map(|i| Tokenizer.encode(&prompt_text(i))).collect(),
        EvalSet::Cot(v) => v.into_iter().map(|(p, _)| p).collect(),
    };
    if prompts.is_empty() {
        return Err(Error::contract("no prompts to analyse"));
    }
    let dump = collect_activations(
        &state,
        &prompts,
        Some(cap.unwrap_or(DEFAULT_CAP)),
        &checkpoint.display().to_string(),
    )?;
    create_dir(out_dir)?;
    dump.write(&out_dir.join("activations.bin"))?;
    let h = cross_capture(&dump, tau, centered)?;
    let sil = silhouette(&dump)?;
    let summary = emit_report(&h, &sil, out_dir)?;
    emit(out, summary.clone())?;
    Ok(summary)
}

/// Full forward passes of both schedules on the same input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassCount {
    pub rollout: u64,
    pub three_pass: u64,
    pub ratio: f64,
}

pub fn cmd_passcount(n_latents: usize, seed: u64, out: &mut dyn Write) -> Result<PassCount> {
    let cfg = ModelConfig::new(2, 16, 2, 32, 64 + n_latents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<usize> = (0..16).map(|_| rng.random_range(0..32)).collect();
    tokens.shuffle(&mut rng);
    let state = TrainState32::new(
        InjectionMode::CacheConcatFrozenBase,
        &cfg,
        n_latents,
        Default::default(),
        seed,
    )?;

    let mut tape = Tape::<f32>::new();
    let bound = state.bind(&mut tape, false)?;
    let mut rollout = PassCounter::default();
    sequential_rollout(&mut tape, &bound.base, &tokens, n_latents, &mut rollout)?;

    let mut three = PassCounter::default();
    let plan = AugmentationPlan::answer_site(tokens.len(), n_latents, 1)?;
    let models = Models {
        base: &bound.base,
        coproc: bound.coproc.as_ref(),
        bank: bound.bank,
    };
    run_schedule(
        &mut tape,
        state.mode,
        &models,
        &tokens,
        &plan,
        &[vec![tokens[0]]],
        &mut three,
    )?;

    let result = PassCount {
        rollout: rollout.full_forward_passes,
        three_pass: three.full_forward_passes,
        ratio: rollout.full_forward_passes as f64 / three.full_forward_passes as f64,
    };
    emit(
        out,
        format!(
            "n_latents={} sequential_rollout={} three_pass={} ratio={:.3}",
            n_latents, result.rollout, result.three_pass, result.ratio
        ),
    )?;
    Ok(result)
}
