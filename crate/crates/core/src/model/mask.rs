//! Dense boolean attention masks for the three passes.

use crate::error::{Error, Result};

use super::plan::{AugmentationPlan, SlotRole};

/// Which pass a mask is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassKind {
    /// Causal mask over the raw sequence.
    BasePrefix,
    /// Latent placeholders of every site reading the base cache.
    Coprocessor,
    /// Latent rows and ahead tokens fed as inputs to the Base.
    Decode,
    /// Ahead tokens only; latent rows were appended to the cache beforehand.
    DecodeCachedLatents,
}

/// `rows` query positions by `cols` key positions, `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    dense: Vec<bool>,
    offsets: Vec<usize>,
    allowed: Vec<u32>,
}

impl AttentionMask {
    pub fn from_dense(rows: usize, cols: usize, dense: Vec<bool>) -> Result<Self> {
        if dense.len() != rows * cols {
            return Err(Error::shape(
                "attention_mask",
                format!("{} entries", rows * cols),
                format!("{}", dense.len()),
            ));
        }
        let mut offsets = Vec::with_capacity(rows + 1);
        let mut allowed = Vec::new();
        offsets.push(0);
        for r in 0..rows {
            let before = allowed.len();
            allowed.extend((0..cols).filter(|&c| dense[r * cols + c]).map(|c| c as u32));
            if allowed.len() == before {
                return Err(Error::contract(format!("attention mask row {} permits no key", r)));
            }
            offsets.push(allowed.len());
        }
        Ok(Self {
            rows,
            cols,
            dense,
            offsets,
            allowed,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let dense = (0..rows * cols).map(|i| f(i / cols.max(1), i % cols.max(1))).collect();
        Self::from_dense(rows, cols, dense)
    }

    /// Queries at the `rows` newest positions after `past` cached keys.
    pub fn causal(rows: usize, past: usize) -> Self {
        Self::from_fn(rows, past + rows, |r, c| c <= past + r).expect("causal mask has no empty rows")
    }

    pub fn full(rows: usize, cols: usize) -> Result<Self> {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.dense[r * self.cols + c]
    }

    /// Keys permitted for query `r`, ascending.
    pub fn allowed(&self, r: usize) -> &[u32] {
        &self.allowed[self.offsets[r]..self.offsets[r + 1]]
    }

    pub fn nnz(&self) -> usize {
        self.allowed.len()
    }

    /// Keeps only the listed query rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut dense = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            dense.extend_from_slice(&self.dense[r * self.cols..(r + 1) * self.cols]);
        }
        Self::from_dense(rows.len(), self.cols, dense)
    }
}

/// Attention rule shared by every pass: may `query` read `key`?
pub fn permits(plan: &AugmentationPlan, query: SlotRole, key: SlotRole) -> bool {
    let sites = plan.sites();
    match (query, key) {
        (SlotRole::Prefix { pos: q }, SlotRole::Prefix { pos: k }) => k <= q,
        (SlotRole::Prefix { .. }, _) => false,
        (SlotRole::Latent { site, .. } | SlotRole::Ahead { site, .. }, SlotRole::Prefix { pos }) => pos < sites[site],
        (SlotRole::Latent { site, slot }, SlotRole::Latent { site: ks, slot: kslot }) => ks == site && kslot <= slot,
        (SlotRole::Latent { .. }, SlotRole::Ahead { .. }) => false,
        (SlotRole::Ahead { site, .. }, SlotRole::Latent { site: ks, .. }) => ks == site,
        (SlotRole::Ahead { site, index }, SlotRole::Ahead { site: ks, index: kj }) => ks == site && kj <= index,
    }
}

pub fn build_attention_mask(plan: &AugmentationPlan, pass: PassKind) -> Result<AttentionMask> {
    let s = plan.seq_len();
    let layout = plan.decode_layout();
    let latents = plan.total_latents();
    match pass {
        PassKind::BasePrefix => Ok(AttentionMask::causal(s, 0)),
        PassKind::Coprocessor => {
            let keys = &layout[..s + latents];
            let queries = &layout[s..s + latents];
            AttentionMask::from_fn(queries.len(), keys.len(), |r, c| permits(plan, queries[r], keys[c]))
        }
        PassKind::Decode => {
            let queries = &layout[s..];
            AttentionMask::from_fn(queries.len(), layout.len(), |r, c| permits(plan, queries[r], layout[c]))
        }
        PassKind::DecodeCachedLatents => {
            let queries = &layout[s + latents..];
            AttentionMask::from_fn(queries.len(), layout.len(), |r, c| permits(plan, queries[r], layout[c]))
        }
    }
}
