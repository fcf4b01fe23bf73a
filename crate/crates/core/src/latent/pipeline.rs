//! The three-pass schedule: Base prefix, Coprocessor latents, Base decode.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    build_attention_mask, concat_cache, embed_tokens, forward, AugmentationPlan, BoundModel, ModelCache, PassKind,
    Role, INIT_STD,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::mode::InjectionMode;

/// `N_L x d` slot-specific soft tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokenBank<T> {
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> SoftTokenBank<T> {
    pub fn init<R: Rng + ?Sized>(n_latents: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            embeddings: Tensor::randn(&[n_latents, d_model], INIT_STD, rng),
        }
    }

    pub fn n_latents(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<Var> {
        tape.leaf(self.embeddings.clone(), requires_grad)
    }
}

/// Pass and token accounting for one run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub full_forward_passes: u64,
    pub tokens_processed: u64,
}

impl PassCounter {
    pub fn record(&mut self, rows: usize) {
        self.full_forward_passes += 1;
        self.tokens_processed += rows as u64;
    }
}

/// Coprocessor output for one site.
#[derive(Clone, Debug)]
pub struct LatentBlock {
    /// `N_L x d` final hidden states at the site's latent slots.
    pub z: Var,
    pub site: usize,
    /// The site's Coprocessor cache rows (cache concatenation only).
    pub coproc_cache: Option<ModelCache>,
}

/// Next-token logits at every ahead position, site-major.
#[derive(Clone, Copy, Debug)]
pub struct AheadLogits {
    pub logits: Var,
    pub n_sites: usize,
    pub n_ahead: usize,
}

impl AheadLogits {
    pub fn site<T: Scalar>(&self, tape: &mut Tape<T>, site: usize) -> Result<Var> {
        tape.slice_rows(self.logits, site * self.n_ahead, (site + 1) * self.n_ahead)
    }
}

fn check_bank<T: Scalar>(tape: &Tape<T>, bank: Var, plan: &AugmentationPlan) -> Result<()> {
    if tape.rows(bank) != plan.n_latents() {
        return Err(Error::contract(format!(
            "soft-token bank has {} rows but the plan uses {} latents",
            tape.rows(bank),
            plan.n_latents()
        )));
    }
    Ok(())
}

/// Pass 1: causal Base pass over the prefix tokens.
pub fn base_prefix_pass<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BoundModel,
    tokens: &[usize],
    counter: &mut PassCounter,
) -> Result<ModelCache> {
    if tokens.is_empty() {
        return Err(Error::contract("base prefix pass needs at least one token"));
    }
    let x = embed_tokens(tape, base, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mask = Rc::new(crate::model::AttentionMask::causal(tokens.len(), 0));
    let out = forward(
        tape,
        base,
        Role::Base,
        x,
        &ModelCache::empty(),
        &mask,
        &positions,
        false,
    )?;
    counter.record(tokens.len());
    Ok(out.new_entries)
}

/// Pass 2: all sites' latent placeholders in one Coprocessor pass.
pub fn coprocessor_pass<T: Scalar>(
    tape: &mut Tape<T>,
    coproc: &BoundModel,
    base_cache: &ModelCache,
    bank: Var,
    plan: &AugmentationPlan,
    mode: InjectionMode,
    counter: &mut PassCounter,
) -> Result<Vec<LatentBlock>> {
    check_bank(tape, bank, plan)?;
    if base_cache.len() != plan.seq_len() {
        return Err(Error::contract(format!(
            "base cache holds {} rows for a plan over {}",
            base_cache.len(),
            plan.seq_len()
        )));
    }
    let nl = plan.n_latents();
    let keep_cache = mode == InjectionMode::CacheConcatFrozenBase;
    counter.record(plan.total_latents());
    if nl == 0 {
        let d = coproc.config.d_model;
        let mut blocks = Vec::with_capacity(plan.n_sites());
        for &site in plan.sites() {
            blocks.push(LatentBlock {
                z: tape.constant(Tensor::zeros(&[0, d]))?,
                site,
                coproc_cache: keep_cache.then(ModelCache::empty),
            });
        }
        return Ok(blocks);
    }
    let tiled: Vec<Var> = vec![bank; plan.n_sites()];
    let x = tape.concat_rows(&tiled)?;
    let mask = Rc::new(build_attention_mask(plan, PassKind::Coprocessor)?);
    let out = forward(
        tape,
        coproc,
        Role::Coprocessor,
        x,
        base_cache,
        &mask,
        &plan.latent_positions(),
        false,
    )?;
    let mut blocks = Vec::with_capacity(plan.n_sites());
    for (i, &site) in plan.sites().iter().enumerate() {
        let z = tape.slice_rows(out.hidden_last, i * nl, (i + 1) * nl)?;
        let coproc_cache = if keep_cache {
            Some(out.new_entries.slice(tape, i * nl, (i + 1) * nl)?)
        } else {
            None
        };
        blocks.push(LatentBlock { z, site, coproc_cache });
    }
    Ok(blocks)
}

fn ahead_embeddings<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BoundModel,
    plan: &AugmentationPlan,
    ahead: &[Vec<usize>],
) -> Result<Var> {
    if ahead.len() != plan.n_sites() || ahead.iter().any(|a| a.len() != plan.n_ahead()) {
        return Err(Error::contract(format!(
            "expected {} ahead lists of {} tokens",
            plan.n_sites(),
            plan.n_ahead()
        )));
    }
    embed_tokens(tape, base, &ahead.concat())
}

/// Pass 3: the Base decodes ahead tokens with the latents injected.
pub fn decode_pass<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BoundModel,
    base_cache: &ModelCache,
    latents: &[LatentBlock],
    plan: &AugmentationPlan,
    ahead: &[Vec<usize>],
    mode: InjectionMode,
    counter: &mut PassCounter,
) -> Result<AheadLogits> {
    if latents.len() != plan.n_sites() {
        return Err(Error::contract(format!(
            "{} latent blocks for {} sites",
            latents.len(),
            plan.n_sites()
        )));
    }
    for (b, &site) in latents.iter().zip(plan.sites()) {
        if b.site != site || tape.rows(b.z) != plan.n_latents() {
            return Err(Error::contract(format!(
                "latent block for site {} does not match the plan",
                b.site
            )));
        }
    }
    let logits = match mode {
        InjectionMode::EmbeddingFrozenBase | InjectionMode::EmbeddingCofinetuned => {
            let zs: Vec<Var> = latents.iter().map(|b| b.z).collect();
            decode_embedded(tape, base, base_cache, &zs, plan, ahead)?
        }
        InjectionMode::CacheConcatFrozenBase => {
            let mut parts = Vec::with_capacity(latents.len());
            for b in latents {
                let c = b
                    .coproc_cache
                    .as_ref()
                    .ok_or_else(|| Error::contract("cache concatenation needs the Coprocessor cache rows"))?;
                if c.len() != plan.n_latents() {
                    return Err(Error::contract("latent cache length differs from N_L"));
                }
                parts.push(c);
            }
            let extra = ModelCache::concat_all(tape, &parts)?;
            let joined = concat_cache(tape, base_cache, &extra)?;
            let x = ahead_embeddings(tape, base, plan, ahead)?;
            let mask = Rc::new(build_attention_mask(plan, PassKind::DecodeCachedLatents)?);
            let out = forward(tape, base, Role::Base, x, &joined, &mask, &plan.ahead_positions(), true)?;
            out.logits()?
        }
        other => {
            return Err(Error::contract(format!(
                "decode_pass does not handle {} (use its own entry point)",
                other
            )));
        }
    };
    counter.record(plan.total_latents() + plan.total_ahead());
    Ok(AheadLogits {
        logits,
        n_sites: plan.n_sites(),
        n_ahead: plan.n_ahead(),
    })
}

/// Latent rows fed as inputs, followed by ahead tokens, under the decode mask.
fn decode_embedded<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BoundModel,
    base_cache: &ModelCache,
    zs: &[Var],
    plan: &AugmentationPlan,
    ahead: &[Vec<usize>],
) -> Result<Var> {
    let a = ahead_embeddings(tape, base, plan, ahead)?;
    let mut rows: Vec<Var> = zs.iter().copied().filter(|&z| tape.rows(z) > 0).collect();
    rows.push(a);
    let x = tape.concat_rows(&rows)?;
    let mut positions = plan.latent_positions();
    positions.extend(plan.ahead_positions());
    let mask = Rc::new(build_attention_mask(plan, PassKind::Decode)?);
    let out = forward(tape, base, Role::Base, x, base_cache, &mask, &positions, true)?;
    // only the ahead rows carry next-token predictions
    let start = plan.total_latents();
    let logits = out.logits()?;
    tape.slice_rows(logits, start, start + plan.total_ahead())
}

/// Single-model baseline: bank rows fill the latent slots directly.
pub fn soft_embedding_pass<T: Scalar>(
    tape: &mut Tape<T>,
    base: &BoundModel,
    bank: Var,
    tokens: &[usize],
    plan: &AugmentationPlan,
    ahead: &[Vec<usize>],
    counter: &mut PassCounter,
) -> Result<AheadLogits> {
    check_bank(tape, bank, plan)?;
    if tokens.len() != plan.seq_len() {
        return Err(Error::contract(format!(
            "{} prefix tokens for a plan over {}",
            tokens.len(),
            plan.seq_len()
        )));
    }
    let cache = base_prefix_pass(tape, base, tokens, counter)?;
    let zs = vec![bank; plan.n_sites()];
    let logits = decode_embedded(tape, base, &cache, &zs, plan, ahead)?;
    counter.record(plan.total_latents() + plan.total_ahead());
    Ok(AheadLogits {
        logits,
        n_sites: plan.n_sites(),
        n_ahead: plan.n_ahead(),
    })
}

/// Bound models of one step.
#[derive(Clone, Debug)]
pub struct Models<'a> {
    pub base: &'a BoundModel,
    pub coproc: Option<&'a BoundModel>,
    pub bank: Option<Var>,
}

/// Runs the whole schedule for `mode` and returns the ahead logits.
pub fn run_schedule<T: Scalar>(
    tape: &mut Tape<T>,
    mode: InjectionMode,
    models: &Models<'_>,
    tokens: &[usize],
    plan: &AugmentationPlan,
    ahead: &[Vec<usize>],
    counter: &mut PassCounter,
) -> Result<AheadLogits> {
    let bank = models
        .bank
        .ok_or_else(|| Error::contract(format!("{} needs a soft-token bank", mode)))?;
    match mode {
        InjectionMode::SoftEmbeddingUnified => {
            soft_embedding_pass(tape, models.base, bank, tokens, plan, ahead, counter)
        }
        InjectionMode::SequentialRollout => Err(Error::contract("sequential rollout has no training schedule")),
        _ => {
            let coproc = models
                .coproc
                .ok_or_else(|| Error::contract(format!("{} needs a Coprocessor", mode)))?;
            if tokens.len() != plan.seq_len() {
                return Err(Error::contract(format!(
                    "{} prefix tokens for a plan over {}",
                    tokens.len(),
                    plan.seq_len()
                )));
            }
            let cache = base_prefix_pass(tape, models.base, tokens, counter)?;
            let blocks = coprocessor_pass(tape, coproc, &cache, bank, plan, mode, counter)?;
            decode_pass(tape, models.base, &cache, &blocks, plan, ahead, mode, counter)
        }
    }
}
