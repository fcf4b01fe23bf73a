//! Latent-augmented pretraining and language-model warm starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{run_schedule, InjectionMode, PassCounter};
use crate::model::{forward_tokens, AugmentationPlan, ModelCache, ModelParams, Role};
use crate::scalar::Scalar;

use super::config::ScheduleConfig;
use super::loss::LossMask;
use super::sites::select_augmentation_sites;
use super::state::{BoundState, StepStats, TrainState};

/// Draws a plan whose ahead windows all have next-token targets.
pub fn sample_plan<R: rand::Rng + ?Sized>(sched: &ScheduleConfig, rng: &mut R) -> Result<AugmentationPlan> {
    let sites = select_augmentation_sites(sched.seq_len - 1, sched.n_sites, sched.n_ahead, rng)?;
    AugmentationPlan::new(sched.seq_len, sites, sched.n_latents, sched.n_ahead)
}

/// Mean next-token loss over the plan's ahead positions, and their count.
pub fn pretrain_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mode: InjectionMode,
    bound: &BoundState,
    tokens: &[usize],
    plan: &AugmentationPlan,
    counter: &mut PassCounter,
) -> Result<(Var, usize)> {
    let ahead = plan.ahead_tokens(tokens)?;
    let targets: Vec<usize> = plan
        .ahead_targets(tokens)
        .into_iter()
        .flatten()
        .map(|t| t.ok_or_else(|| Error::contract("ahead window ends at the last token and has no target")))
        .collect::<Result<_>>()?;
    let mut models = bound.models();
    if let Some(bank) = models.bank {
        if tape.rows(bank) > plan.n_latents() {
            models.bank = Some(tape.slice_rows(bank, 0, plan.n_latents())?);
        }
    }
    let out = run_schedule(tape, mode, &models, tokens, plan, &ahead, counter)?;
    let mask = LossMask::pretraining(plan);
    let supervised = mask.tail(plan.total_ahead());
    let loss = tape.cross_entropy(out.logits, &targets, supervised)?;
    Ok((loss, mask.count()))
}

fn check_lengths(sched: &ScheduleConfig, seqs: &[Vec<usize>]) -> Result<()> {
    if let Some(s) = seqs.iter().find(|s| s.len() != sched.seq_len) {
        return Err(Error::contract(format!(
            "sequence of {} tokens in a schedule over {}",
            s.len(),
            sched.seq_len
        )));
    }
    Ok(())
}

/// One optimizer step of latent-augmented pretraining.
pub fn pretrain_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[Vec<usize>],
    sched: &ScheduleConfig,
) -> Result<StepStats> {
    sched.validate()?;
    check_lengths(sched, batch)?;
    let plans = batch
        .iter()
        .map(|_| sample_plan(sched, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let mode = state.mode;
    let items: Vec<(&Vec<usize>, AugmentationPlan)> = batch.iter().zip(plans).collect();
    let stats = state.train_step(&items, |tape, bound, (tokens, plan), _| {
        pretrain_loss(tape, mode, bound, tokens, plan, &mut PassCounter::default())
    })?;
    state.tokens_seen += (batch.len() * sched.seq_len) as u64;
    Ok(stats)
}

/// Ahead-token perplexity over `seqs`, with sites drawn from `sched.seed`
/// so repeated evaluations agree.
pub fn evaluate_perplexity<T: Scalar>(
    state: &TrainState<T>,
    seqs: &[Vec<usize>],
    sched: &ScheduleConfig,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::contract("perplexity of an empty evaluation set"));
    }
    sched.validate()?;
    check_lengths(sched, seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut nll = 0.0;
    let mut count = 0usize;
    for tokens in seqs {
        let plan = sample_plan(sched, &mut rng)?;
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, false)?;
        let (loss, n) = pretrain_loss(
            &mut tape,
            state.mode,
            &bound,
            tokens,
            &plan,
            &mut PassCounter::default(),
        )?;
        nll += tape.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

/// Mean causal next-token loss over a whole window.
pub fn lm_loss<T: Scalar>(tape: &mut Tape<T>, bound: &BoundState, tokens: &[usize]) -> Result<(Var, usize)> {
    if tokens.len() < 2 {
        return Err(Error::contract("language-model loss needs at least two tokens"));
    }
    let n = tokens.len() - 1;
    let out = forward_tokens(tape, &bound.base, Role::Base, &tokens[..n], &ModelCache::empty())?;
    let loss = tape.cross_entropy(out.logits()?, &tokens[1..], &vec![true; n])?;
    Ok((loss, n))
}

/// One optimizer step of plain next-token training of the Base.
pub fn lm_step<T: Scalar>(state: &mut TrainState<T>, batch: &[Vec<usize>]) -> Result<StepStats> {
    let stats = state.train_step(batch, |tape, bound, tokens, _| lm_loss(tape, bound, tokens))?;
    state.tokens_seen += batch.iter().map(|s| s.len() as u64).sum::<u64>();
    Ok(stats)
}

/// Causal next-token perplexity of a Base model.
pub fn lm_perplexity<T: Scalar>(base: &ModelParams<T>, seqs: &[Vec<usize>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::contract("perplexity of an empty evaluation set"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for tokens in seqs {
        let mut tape = Tape::new();
        let bound = BoundState {
            base: base.bind(&mut tape, false)?,
            coproc: None,
            bank: None,
        };
        let (loss, n) = lm_loss(&mut tape, &bound, tokens)?;
        nll += tape.value(loss).data()[0].as_f64() * n as f64;
        count += n;
    }
    Ok((nll / count as f64).exp())
}
