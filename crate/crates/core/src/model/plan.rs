//! Augmentation plans: where latents are inserted and which tokens are
//! supervised after them.
//!
//! Sites are prefix lengths. A site `t` lets its latents, and the ahead
//! tokens that follow them, read the first `t` cached prefix tokens. Ahead
//! token `j` of a pretraining site is the sequence token at index `t + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where ahead tokens come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AheadSource {
    /// Ahead tokens are the continuation inside the prefix sequence.
    Sequence,
    /// Ahead tokens follow the whole prefix (answers, remaining CoT).
    External,
}

/// Role of one position in a pass layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    Prefix { pos: usize },
    Latent { site: usize, slot: usize },
    Ahead { site: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    seq_len: usize,
    sites: Vec<usize>,
    n_latents: usize,
    n_ahead: usize,
    source: AheadSource,
}

impl AugmentationPlan {
    pub fn new(seq_len: usize, sites: Vec<usize>, n_latents: usize, n_ahead: usize) -> Result<Self> {
        Self::with_source(seq_len, sites, n_latents, n_ahead, AheadSource::Sequence)
    }

    /// A single site after the whole prefix, with `n_ahead` external tokens.
    pub fn answer_site(prefix_len: usize, n_latents: usize, n_ahead: usize) -> Result<Self> {
        Self::with_source(prefix_len, vec![prefix_len], n_latents, n_ahead, AheadSource::External)
    }

    pub fn with_source(
        seq_len: usize,
        sites: Vec<usize>,
        n_latents: usize,
        n_ahead: usize,
        source: AheadSource,
    ) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::contract("augmentation plan needs at least one site"));
        }
        for (i, &t) in sites.iter().enumerate() {
            if t < 1 {
                return Err(Error::contract(format!(
                    "site {} at position {} is before the first token",
                    i, t
                )));
            }
            if t > seq_len {
                return Err(Error::contract(format!(
                    "site {} at position {} exceeds sequence length {}",
                    i, t, seq_len
                )));
            }
            if source == AheadSource::Sequence && t + n_ahead > seq_len {
                return Err(Error::contract(format!(
                    "site {} at {} with {} ahead tokens runs past sequence length {}",
                    i, t, n_ahead, seq_len
                )));
            }
            if i > 0 {
                let prev = sites[i - 1];
                if t <= prev {
                    return Err(Error::contract(format!(
                        "sites must be strictly increasing: {:?}",
                        sites
                    )));
                }
                if prev + n_ahead > t {
                    return Err(Error::contract(format!(
                        "overlapping site windows: site {} + {} ahead tokens crosses site {}",
                        prev, n_ahead, t
                    )));
                }
            }
        }
        Ok(Self {
            seq_len,
            sites,
            n_latents,
            n_ahead,
            source,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_latents(&self) -> usize {
        self.n_latents
    }

    pub fn n_ahead(&self) -> usize {
        self.n_ahead
    }

    pub fn source(&self) -> AheadSource {
        self.source
    }

    /// Same sites and ahead count with a different latent count.
    pub fn with_latents(&self, n_latents: usize) -> Self {
        Self {
            n_latents,
            ..self.clone()
        }
    }

    pub fn total_latents(&self) -> usize {
        self.sites.len() * self.n_latents
    }

    pub fn total_ahead(&self) -> usize {
        self.sites.len() * self.n_ahead
    }

    /// Rotary position of latent `slot` at `site`.
    pub fn latent_position(&self, site: usize, slot: usize) -> usize {
        self.sites[site] + slot
    }

    pub fn ahead_position(&self, site: usize, index: usize) -> usize {
        self.sites[site] + self.n_latents + index
    }

    /// Positions of all latent slots, site-major.
    pub fn latent_positions(&self) -> Vec<usize> {
        (0..self.n_sites())
            .flat_map(|s| (0..self.n_latents).map(move |i| (s, i)))
            .map(|(s, i)| self.latent_position(s, i))
            .collect()
    }

    pub fn ahead_positions(&self) -> Vec<usize> {
        (0..self.n_sites())
            .flat_map(|s| (0..self.n_ahead).map(move |j| (s, j)))
            .map(|(s, j)| self.ahead_position(s, j))
            .collect()
    }

    /// Sequence tokens fed as ahead inputs, site-major (sequence source only).
    pub fn ahead_tokens(&self, tokens: &[usize]) -> Result<Vec<Vec<usize>>> {
        if self.source != AheadSource::Sequence {
            return Err(Error::contract(
                "ahead tokens of an external plan are supplied by the caller",
            ));
        }
        if tokens.len() < self.seq_len {
            return Err(Error::contract(format!(
                "{} tokens for a plan over {}",
                tokens.len(),
                self.seq_len
            )));
        }
        Ok(self
            .sites
            .iter()
            .map(|&t| tokens[t..t + self.n_ahead].to_vec())
            .collect())
    }

    /// Next-token targets of each ahead input (sequence source only).
    ///
    /// `None` marks an ahead input whose successor lies beyond `tokens`.
    pub fn ahead_targets(&self, tokens: &[usize]) -> Vec<Vec<Option<usize>>> {
        self.sites
            .iter()
            .map(|&t| (0..self.n_ahead).map(|j| tokens.get(t + j + 1).copied()).collect())
            .collect()
    }

    /// Key/query layout of the decode pass: prefix, latents, ahead tokens.
    pub fn decode_layout(&self) -> Vec<SlotRole> {
        let mut roles: Vec<SlotRole> = (0..self.seq_len).map(|pos| SlotRole::Prefix { pos }).collect();
        for site in 0..self.n_sites() {
            for slot in 0..self.n_latents {
                roles.push(SlotRole::Latent { site, slot });
            }
        }
        for site in 0..self.n_sites() {
            for index in 0..self.n_ahead {
                roles.push(SlotRole::Ahead { site, index });
            }
        }
        roles
    }
}
