//! Answer-site finetuning: flat latent budgets and the staged curriculum.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{greedy_generate, run_schedule, GenerateOptions, InferenceModels, InjectionMode, PassCounter};
use crate::model::AugmentationPlan;
use crate::scalar::Scalar;
use crate::tasks::{score_countdown, CotExample, CountdownInstance, ScoreOutcome, Tokenizer, ANSWER_CLOSE, ANSWER_SEP};

use super::config::CurriculumConfig;
use super::loss::LossMask;
use super::state::{BoundState, StepStats, TrainState};

/// One finetuning example: a prompt followed by a latent block and a stream
/// whose first token (the separator) is given and whose rest is predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinetuneItem {
    pub prompt: Vec<usize>,
    pub n_latents: usize,
    pub stream: Vec<usize>,
}

impl FinetuneItem {
    /// Plain example: every step is kept in the supervised stream.
    pub fn flat(example: &CotExample, n_latents: usize) -> Result<Self> {
        Self::stage(example, 0, n_latents)
    }

    /// Curriculum stage: the first `removed` steps are replaced by latents.
    pub fn stage(example: &CotExample, removed: usize, n_latents: usize) -> Result<Self> {
        if removed > example.steps.len() {
            return Err(Error::contract(format!(
                "cannot remove {} of {} reasoning steps",
                removed,
                example.steps.len()
            )));
        }
        let (sep, answer) = example
            .answer
            .split_first()
            .ok_or_else(|| Error::contract("answer stream is empty"))?;
        let mut stream = vec![*sep];
        for s in &example.steps[removed..] {
            stream.extend_from_slice(s);
        }
        stream.extend_from_slice(answer);
        Ok(Self {
            prompt: example.question.clone(),
            n_latents,
            stream,
        })
    }

    /// Inputs after the prompt: latent slots then all but the last stream token.
    pub fn input_len(&self) -> usize {
        self.prompt.len() + self.n_latents + self.stream.len() - 1
    }

    pub fn loss_mask(&self) -> LossMask {
        LossMask::finetune(self.prompt.len(), self.n_latents, self.stream.len() - 1)
    }
}

pub fn finetune_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mode: InjectionMode,
    bound: &BoundState,
    item: &FinetuneItem,
    counter: &mut PassCounter,
) -> Result<(Var, usize)> {
    if item.stream.len() < 2 {
        return Err(Error::contract("finetuning stream has nothing to predict"));
    }
    let n_inputs = item.stream.len() - 1;
    let plan = AugmentationPlan::answer_site(item.prompt.len(), item.n_latents, n_inputs)?;
    let mut models = bound.models();
    if let Some(bank) = models.bank {
        let rows = tape.rows(bank);
        if rows < item.n_latents {
            return Err(Error::contract(format!(
                "{} latents requested from a bank of {}",
                item.n_latents, rows
            )));
        }
        if rows > item.n_latents {
            models.bank = Some(tape.slice_rows(bank, 0, item.n_latents)?);
        }
    }
    let ahead = vec![item.stream[..n_inputs].to_vec()];
    let out = run_schedule(tape, mode, &models, &item.prompt, &plan, &ahead, counter)?;
    let mask = item.loss_mask();
    let loss = tape.cross_entropy(out.logits, &item.stream[1..], mask.tail(n_inputs))?;
    Ok((loss, mask.count()))
}

pub fn finetune_step<T: Scalar>(state: &mut TrainState<T>, batch: &[FinetuneItem]) -> Result<StepStats> {
    let mode = state.mode;
    let stats = state.train_step(batch, |tape, bound, item, _| {
        finetune_loss(tape, mode, bound, item, &mut PassCounter::default())
    })?;
    state.tokens_seen += batch.iter().map(|i| i.input_len() as u64).sum::<u64>();
    Ok(stats)
}

/// Mean per-token loss of `items` without updating anything.
pub fn finetune_eval_loss<T: Scalar>(state: &TrainState<T>, items: &[FinetuneItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("loss of an empty evaluation set"));
    }
    let mut nll = 0.0;
    let mut count = 0;
    for item in items {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false)?;
        let (loss, n) = finetune_loss(&mut tape, state.mode, &bound, item, &mut PassCounter::default())?;
        nll += tape.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    Ok(nll / count as f64)
}

/// Shuffled epochs of `finetune_step` over fixed items.
pub fn train_epochs<T: Scalar>(
    state: &mut TrainState<T>,
    items: &[FinetuneItem],
    epochs: usize,
    batch_size: usize,
    mut on_step: impl FnMut(&TrainState<T>, &StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if items.is_empty() {
        return Err(Error::contract("finetuning set is empty"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut out = Vec::new();
    for _ in 0..epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<FinetuneItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let stats = finetune_step(state, &batch)?;
            on_step(state, &stats)?;
            out.push(stats);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub n_latents: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    /// Examples dropped for having fewer reasoning steps than stages.
    pub skipped: usize,
    pub stages: Vec<StageSummary>,
}

/// Stage `j` (0 through k) replaces the first `j` reasoning steps with
/// `j * c` latents; stage 0 is plain chain-of-thought training.
pub fn curriculum_finetune<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[CotExample],
    cur: &CurriculumConfig,
    batch_size: usize,
    mut on_step: impl FnMut(&TrainState<T>, &StepStats) -> Result<()>,
) -> Result<CurriculumReport> {
    cur.validate(state.n_latents())?;
    let kept: Vec<&CotExample> = data.iter().filter(|e| e.steps.len() >= cur.stages).collect();
    let skipped = data.len() - kept.len();
    if skipped > 0 {
        log::warn!(
            "skipping {} of {} examples with fewer than {} reasoning steps",
            skipped,
            data.len(),
            cur.stages
        );
    }
    if kept.is_empty() {
        return Err(Error::contract(
            "no example has enough reasoning steps for the curriculum",
        ));
    }
    let mut stages = Vec::new();
    for j in 0..=cur.stages {
        let n_latents = j * cur.latents_per_stage;
        let items = kept
            .iter()
            .map(|e| FinetuneItem::stage(e, j, n_latents))
            .collect::<Result<Vec<_>>>()?;
        let stats = train_epochs(state, &items, cur.epochs_per_stage, batch_size, &mut on_step)?;
        let mean_loss = stats.iter().map(|s| s.loss).sum::<f64>() / stats.len().max(1) as f64;
        log::info!(
            "curriculum stage {} ({} latents): mean loss {:.4}",
            j,
            n_latents,
            mean_loss
        );
        stages.push(StageSummary {
            stage: j,
            n_latents,
            steps: stats.len(),
            mean_loss,
        });
    }
    Ok(CurriculumReport { skipped, stages })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    pub parse_failures: usize,
}

impl AccuracyReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn record(&mut self, outcome: ScoreOutcome) {
        self.total += 1;
        match outcome {
            ScoreOutcome::Correct => self.correct += 1,
            ScoreOutcome::Wrong => self.wrong += 1,
            ScoreOutcome::ParseFailure => self.parse_failures += 1,
        }
    }
}

/// Longest answer the evaluator lets a model emit.
pub const MAX_ANSWER_TOKENS: usize = 64;

/// Greedy answer text for a Countdown prompt under the state's mode.
pub fn generate_answer<T: Scalar>(
    state: &TrainState<T>,
    prompt: &[usize],
    counter: &mut PassCounter,
) -> Result<String> {
    let models = InferenceModels {
        mode: state.mode,
        base: &state.base,
        coproc: state.coproc.as_ref(),
        bank: state.bank.as_ref(),
    };
    let opts = GenerateOptions {
        forced: vec![ANSWER_SEP],
        stop: Some(ANSWER_CLOSE),
        max_new: MAX_ANSWER_TOKENS,
    };
    let out = greedy_generate(&models, prompt, &opts, counter)?;
    Ok(Tokenizer.decode(&out))
}

pub fn evaluate_countdown<T: Scalar>(state: &TrainState<T>, instances: &[CountdownInstance]) -> Result<AccuracyReport> {
    if instances.is_empty() {
        return Err(Error::contract("accuracy of an empty evaluation set"));
    }
    let mut report = AccuracyReport::default();
    let mut counter = PassCounter::default();
    for inst in instances {
        let prompt = Tokenizer.encode(&crate::tasks::prompt_text(inst));
        let text = generate_answer(state, &prompt, &mut counter)?;
        report.record(score_countdown(&text, inst));
    }
    Ok(report)
}
