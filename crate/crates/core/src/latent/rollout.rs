use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{embed_tokens, forward, AttentionMask, BoundModel, ModelCache, Role};
use crate::scalar::Scalar;

use super::pipeline::PassCounter;

/// Sequential continuous thoughts: each pass re-reads the sequence plus all earlier
/// thoughts and appends its last hidden state as the next input row.
///
/// Returns the final pass's logits (one row per input position) and the
/// number of full passes run, `n_latents + 1`.
pub fn sequential_rollout<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    tokens: &[usize],
    n_latents: usize,
    counter: &mut PassCounter,
) -> Result<(Var, usize)> {
    if tokens.is_empty() {
        return Err(Error::contract("sequential rollout needs at least one token"));
    }
    let prompt = embed_tokens(tape, model, tokens)?;
    let mut x = prompt;
    let mut passes = 0;
    loop {
        let rows = tape.rows(x);
        let positions: Vec<usize> = (0..rows).collect();
        let mask = Rc::new(AttentionMask::causal(rows, 0));
        let last = passes == n_latents;
        let out = forward(
            tape,
            model,
            Role::Base,
            x,
            &ModelCache::empty(),
            &mask,
            &positions,
            last,
        )?;
        counter.record(rows);
        passes += 1;
        if last {
            return Ok((out.logits()?, passes));
        }
        let thought = tape.slice_rows(out.hidden_last, rows - 1, rows)?;
        x = tape.concat_rows(&[x, thought])?;
    }
}

/// Full passes of the three-pass schedule, independent of `N_L` and `M`.
pub const THREE_PASS: usize = 3;

/// Pass-count ratio of sequential rollout to the three-pass schedule.
pub fn rollout_speedup(n_latents: usize) -> f64 {
    (n_latents + 1) as f64 / THREE_PASS as f64
}
