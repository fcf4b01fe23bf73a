use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// `M` strictly increasing site positions in `[1, S - N_A]` with
/// non-overlapping windows, uniform over all valid placements.
///
/// A placement `t_1 < ... < t_M` with gaps of at least `N_A` maps one to one
/// onto an `M`-subset of `[1, R]` via `u_i = t_i - (i - 1)(N_A - 1)`, where
/// `R = S - N_A - (M - 1)(N_A - 1)`; drawing the subset uniformly therefore
/// draws the placement uniformly.
pub fn select_augmentation_sites<R: Rng + ?Sized>(
    seq_len: usize,
    n_sites: usize,
    n_ahead: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let infeasible = || {
        Error::contract(format!(
            "cannot place {} sites with {} ahead tokens in a sequence of {} (S={}, M={}, N_A={})",
            n_sites, n_ahead, seq_len, seq_len, n_sites, n_ahead
        ))
    };
    if n_sites == 0 || n_ahead == 0 {
        return Err(infeasible());
    }
    let span = n_ahead + (n_sites - 1) * (n_ahead - 1);
    let slots = seq_len.checked_sub(span).ok_or_else(infeasible)?;
    if slots < n_sites {
        return Err(infeasible());
    }
    let mut u: Vec<usize> = index::sample(rng, slots, n_sites).into_iter().map(|i| i + 1).collect();
    u.sort_unstable();
    Ok(u.into_iter()
        .enumerate()
        .map(|(i, ui)| ui + i * (n_ahead - 1))
        .collect())
}
