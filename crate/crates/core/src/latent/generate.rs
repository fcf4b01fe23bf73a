use std::rc::Rc;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{concat_cache, forward, forward_tokens, AttentionMask, AugmentationPlan, ModelParams, Role};
use crate::scalar::Scalar;

use super::mode::InjectionMode;
use super::pipeline::{base_prefix_pass, coprocessor_pass, PassCounter, SoftTokenBank};

/// Weights needed to run one mode at inference time.
#[derive(Clone, Copy, Debug)]
pub struct InferenceModels<'a, T> {
    pub mode: InjectionMode,
    pub base: &'a ModelParams<T>,
    pub coproc: Option<&'a ModelParams<T>>,
    pub bank: Option<&'a SoftTokenBank<T>>,
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    /// Tokens fed after the latents before free generation starts.
    pub forced: Vec<usize>,
    /// Generation ends after emitting this token.
    pub stop: Option<usize>,
    pub max_new: usize,
}

/// Greedy decoding with one latent site after the whole prompt.
///
/// With a single site at the end of the prompt the decode mask is plain
/// causal attention over prompt, latents and generated tokens, so the
/// continuation runs incrementally on the cache. Generation also ends when
/// the context is full.
pub fn greedy_generate<T: Scalar>(
    models: &InferenceModels<'_, T>,
    prompt: &[usize],
    opts: &GenerateOptions,
    counter: &mut PassCounter,
) -> Result<Vec<usize>> {
    let mut tape = Tape::<T>::new();
    let base = models.base.bind(&mut tape, false)?;
    let mut cache = base_prefix_pass(&mut tape, &base, prompt, counter)?;
    let n_latents = match models.bank {
        Some(b) => b.n_latents(),
        None => 0,
    };
    if n_latents > 0 {
        let bank_t = models.bank.expect("n_latents > 0 implies a bank");
        let bank = bank_t.bind(&mut tape, false)?;
        let plan = AugmentationPlan::answer_site(prompt.len(), n_latents, 1)?;
        let z = match models.mode {
            InjectionMode::SoftEmbeddingUnified => Some(bank),
            InjectionMode::SequentialRollout => {
                return Err(Error::contract(
                    "sequential rollout is a cost model and cannot generate",
                ))
            }
            mode => {
                let coproc_p = models
                    .coproc
                    .ok_or_else(|| Error::contract(format!("{} needs a Coprocessor", mode)))?;
                let coproc = coproc_p.bind(&mut tape, false)?;
                let blocks = coprocessor_pass(&mut tape, &coproc, &cache, bank, &plan, mode, counter)?;
                let block = blocks.into_iter().next().expect("one site");
                if mode == InjectionMode::CacheConcatFrozenBase {
                    let extra = block.coproc_cache.expect("cache rows requested");
                    cache = concat_cache(&mut tape, &cache, &extra)?;
                    None
                } else {
                    Some(block.z)
                }
            }
        };
        if let Some(z) = z {
            let positions = plan.latent_positions();
            let mask = Rc::new(AttentionMask::causal(n_latents, cache.len()));
            let out = forward(&mut tape, &base, Role::Base, z, &cache, &mask, &positions, false)?;
            cache = concat_cache(&mut tape, &cache, &out.new_entries)?;
        }
    }
    let mut generated = Vec::new();
    let mut feed = opts.forced.clone();
    if feed.is_empty() {
        return Err(Error::contract(
            "generation needs at least one forced token to start from",
        ));
    }
    let room = models.base.config.max_positions;
    while generated.len() < opts.max_new && cache.len() + feed.len() <= room {
        let out = forward_tokens(&mut tape, &base, Role::Base, &feed, &cache)?;
        cache = concat_cache(&mut tape, &cache, &out.new_entries)?;
        let logits = tape.value(out.logits()?);
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        generated.push(next);
        if Some(next) == opts.stop {
            break;
        }
        feed = vec![next];
    }
    Ok(generated)
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
