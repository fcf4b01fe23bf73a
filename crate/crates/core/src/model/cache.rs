use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rotated keys and values of one layer, all heads side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub keys: Var,
    pub values: Var,
    pub position_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOrigin {
    Base,
    Coprocessor,
    Concatenated,
}

/// Per-layer caches living on a tape. An empty cache has no layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCache {
    pub layers: Vec<LayerCache>,
    pub origin: CacheOrigin,
}

impl ModelCache {
    pub fn empty() -> Self {
        Self {
            layers: Vec::new(),
            origin: CacheOrigin::Base,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cached length (identical for every layer).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.position_ids.len())
    }

    pub fn position_ids(&self) -> &[usize] {
        self.layers.first().map_or(&[], |l| &l.position_ids)
    }

    /// Rows `start..end` of every layer.
    pub fn slice<T: Scalar>(&self, tape: &mut Tape<T>, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::contract(format!(
                "cache slice {}..{} of length {}",
                start,
                end,
                self.len()
            )));
        }
        if start == end {
            return Ok(Self {
                layers: Vec::new(),
                origin: self.origin,
            });
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerCache {
                    keys: tape.slice_rows(l.keys, start, end)?,
                    values: tape.slice_rows(l.values, start, end)?,
                    position_ids: l.position_ids[start..end].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            origin: self.origin,
        })
    }

    /// Concatenates several caches in order; empty parts are skipped.
    pub fn concat_all<T: Scalar>(tape: &mut Tape<T>, parts: &[&ModelCache]) -> Result<Self> {
        let mut acc = ModelCache::empty();
        let mut first = true;
        for part in parts {
            if first {
                acc = (*part).clone();
                first = false;
            } else {
                acc = concat_cache(tape, &acc, part)?;
            }
        }
        Ok(acc)
    }
}

/// Appends the rows of `extra` after those of `base`, layer by layer.
pub fn concat_cache<T: Scalar>(tape: &mut Tape<T>, base: &ModelCache, extra: &ModelCache) -> Result<ModelCache> {
    if extra.is_empty() {
        return Ok(base.clone());
    }
    if base.is_empty() {
        return Ok(ModelCache {
            layers: extra.layers.clone(),
            origin: CacheOrigin::Concatenated,
        });
    }
    if base.layers.len() != extra.layers.len() {
        return Err(Error::contract(format!(
            "concat_cache: {} layers vs {} layers",
            base.layers.len(),
            extra.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(base.layers.len());
    for (i, (a, b)) in base.layers.iter().zip(&extra.layers).enumerate() {
        if tape.cols(a.keys) != tape.cols(b.keys) || tape.cols(a.values) != tape.cols(b.values) {
            return Err(Error::contract(format!(
                "concat_cache: head geometry differs at layer {} ({} vs {} columns)",
                i,
                tape.cols(a.keys),
                tape.cols(b.keys)
            )));
        }
        let mut position_ids = a.position_ids.clone();
        position_ids.extend_from_slice(&b.position_ids);
        layers.push(LayerCache {
            keys: tape.concat_rows(&[a.keys, b.keys])?,
            values: tape.concat_rows(&[a.values, b.values])?,
            position_ids,
        });
    }
    Ok(ModelCache {
        layers,
        origin: CacheOrigin::Concatenated,
    })
}
