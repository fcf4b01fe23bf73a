use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::cache::{CacheOrigin, LayerCache, ModelCache};
use super::mask::AttentionMask;
use super::params::{BoundModel, Role};

/// Result of one transformer pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `T x V`, absent when logits were not requested.
    pub logits: Option<Var>,
    /// Cache rows produced by this pass only.
    pub new_entries: ModelCache,
    /// Final hidden states after the output layer norm, `T x d`.
    pub hidden_last: Var,
}

impl ForwardOutput {
    pub fn logits(&self) -> Result<Var> {
        self.logits
            .ok_or_else(|| Error::contract("forward pass was run without logits"))
    }
}

/// Looks up token embedding rows.
pub fn embed_tokens<T: Scalar>(tape: &mut Tape<T>, model: &BoundModel, tokens: &[usize]) -> Result<Var> {
    let v = model.config.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::contract(format!("token id {} out of vocabulary {}", bad, v)));
    }
    tape.embedding(model.tok_emb, tokens)
}

/// Runs the decoder over `input` (`T x d`) given cached keys in `past`.
///
/// `mask` is `T x (len(past) + T)`; column order is the past rows followed
/// by the current rows.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    role: Role,
    input: Var,
    past: &ModelCache,
    mask: &Rc<AttentionMask>,
    position_ids: &[usize],
    with_logits: bool,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let t = tape.rows(input);
    if tape.shape(input).len() != 2 || tape.cols(input) != cfg.d_model {
        return Err(Error::shape(
            "forward",
            format!("T x {}", cfg.d_model),
            format!("{:?}", tape.shape(input)),
        ));
    }
    if position_ids.len() != t {
        return Err(Error::contract(format!(
            "forward: {} position ids for {} rows",
            position_ids.len(),
            t
        )));
    }
    if let Some(&p) = position_ids.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::contract(format!(
            "position id {} >= max_positions {}",
            p, cfg.max_positions
        )));
    }
    if mask.rows() != t || mask.cols() != past.len() + t {
        return Err(Error::contract(format!(
            "forward: mask {}x{} for {} queries over {} cached + {} current keys",
            mask.rows(),
            mask.cols(),
            t,
            past.len(),
            t
        )));
    }
    if !past.is_empty() && past.layers.len() != cfg.n_layers {
        return Err(Error::contract(format!(
            "forward: cache has {} layers, model {}",
            past.layers.len(),
            cfg.n_layers
        )));
    }
    let heads = cfg.n_heads;
    let mut h = input;
    let mut entries = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in model.layers.iter().enumerate() {
        let x = tape.layer_norm(h, layer.ln1_gain, layer.ln1_bias)?;
        let q = tape.matmul(x, layer.wq)?;
        let q = tape.rope(q, position_ids, heads, cfg.rope_base)?;
        let k = tape.matmul(x, layer.wk)?;
        let k = tape.rope(k, position_ids, heads, cfg.rope_base)?;
        let v = tape.matmul(x, layer.wv)?;
        let (keys, values) = match past.layers.get(li) {
            Some(p) => (tape.concat_rows(&[p.keys, k])?, tape.concat_rows(&[p.values, v])?),
            None => (k, v),
        };
        let a = tape.attention(q, keys, values, Rc::clone(mask), heads)?;
        let a = tape.matmul(a, layer.wo)?;
        h = tape.add(h, a)?;
        let x = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias)?;
        let up = tape.matmul(x, layer.w_up)?;
        let up = tape.gelu(up)?;
        let down = tape.matmul(up, layer.w_down)?;
        h = tape.add(h, down)?;
        entries.push(LayerCache {
            keys: k,
            values: v,
            position_ids: position_ids.to_vec(),
        });
    }
    let hidden_last = tape.layer_norm(h, model.lnf_gain, model.lnf_bias)?;
    let logits = if with_logits {
        Some(tape.matmul(hidden_last, model.unembed)?)
    } else {
        None
    };
    let origin = match role {
        Role::Base => CacheOrigin::Base,
        Role::Coprocessor => CacheOrigin::Coprocessor,
    };
    let new_entries = if t == 0 {
        ModelCache {
            layers: Vec::new(),
            origin,
        }
    } else {
        ModelCache {
            layers: entries,
            origin,
        }
    };
    Ok(ForwardOutput {
        logits,
        new_entries,
        hidden_last,
    })
}

/// Causal pass over plain tokens starting at position `past.len()`.
pub fn forward_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    model: &BoundModel,
    role: Role,
    tokens: &[usize],
    past: &ModelCache,
) -> Result<ForwardOutput> {
    let x = embed_tokens(tape, model, tokens)?;
    let start = past.position_ids().last().map_or(0, |&p| p + 1);
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let mask = Rc::new(AttentionMask::causal(tokens.len(), past.len()));
    forward(tape, model, role, x, past, &mask, &positions, true)
}
