//! Binary checkpoints: a JSON header followed by raw little-endian tensors.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the
//! UTF-8 JSON header, then every tensor listed in the header back to back.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{InjectionMode, SoftTokenBank};
use crate::model::{ModelConfig, ModelParams, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{OptimizerConfig, TrainState, TrainableSet};

pub const MAGIC: &[u8; 8] = b"LATKVCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    mode: InjectionMode,
    config: ModelConfig,
    train_base: bool,
    train_coproc: bool,
    train_bank: bool,
    step: u64,
    tokens_seen: u64,
    optimizer: OptimizerConfig,
    rng: RngState,
    /// Serialised run configuration the state was trained under.
    #[serde(default)]
    run_config: Option<String>,
    tensors: Vec<TensorEntry>,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Option<ChaCha8Rng> {
    if s.seed.len() != 64 {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).ok()?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse().ok()?);
    Some(rng)
}

fn width<T: Scalar>() -> usize {
    std::mem::size_of::<T>()
}

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &x in t.data() {
        if width::<T>() == 4 {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
}

/// Serialises everything needed to resume training bit-exactly.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    encode_checkpoint_with(state, None)
}

/// [`encode_checkpoint`] plus a snapshot of the run configuration.
pub fn encode_checkpoint_with<T: Scalar>(state: &TrainState<T>, run_config: Option<&str>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<T>)> = Vec::new();
    named.extend(
        state
            .base
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("base.{}", n), t)),
    );
    if let Some(c) = &state.coproc {
        named.extend(c.named_tensors().into_iter().map(|(n, t)| (format!("coproc.{}", n), t)));
    }
    if let Some(b) = &state.bank {
        named.push(("bank".into(), &b.embeddings));
    }
    for (i, n) in state.opt.names.iter().enumerate() {
        named.push((format!("opt.m.{}", n), &state.opt.m[i]));
        named.push((format!("opt.v.{}", n), &state.opt.v[i]));
    }
    let header = Header {
        dtype: T::NAME.to_string(),
        mode: state.mode,
        config: state.base.config.clone(),
        train_base: state.trainable.base,
        train_coproc: state.trainable.coproc,
        train_bank: state.trainable.bank,
        step: state.opt.step,
        tokens_seen: state.tokens_seen,
        optimizer: state.opt.config.clone(),
        rng: rng_state(&state.rng),
        run_config: run_config.map(str::to_string),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::contract(format!("checkpoint header: {}", e)))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        push_tensor(&mut out, t);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {}", what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TrainState<T>> {
    decode_checkpoint_with(bytes, path).map(|(s, _)| s)
}

/// Decodes the state and the stored run configuration, if any.
pub fn decode_checkpoint_with<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(TrainState<T>, Option<String>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported checkpoint version {}", version)));
    }
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header_at = r.pos;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        offset: header_at + e.column().saturating_sub(1),
        message: format!("checkpoint header: {}", e),
    })?;
    if header.dtype != T::NAME {
        r.pos = header_at;
        return Err(r.fail(format!(
            "checkpoint holds {} tensors, expected {}",
            header.dtype,
            T::NAME
        )));
    }
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let w = width::<T>();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = r.take(n * w, &entry.name)?;
        let data: Vec<T> = raw
            .chunks_exact(w)
            .map(|c| {
                if w == 4 {
                    T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                } else {
                    T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                }
            })
            .collect();
        tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let rng = restore_rng(&header.rng).ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        offset: header_at,
        message: "invalid RNG state".into(),
    })?;

    let mut take_group = |prefix: &str| -> Vec<(String, Tensor<T>)> {
        let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let t = tensors.remove(&k).expect("listed key");
                (k[prefix.len()..].to_string(), t)
            })
            .collect()
    };
    let base = ModelParams::from_named(&header.config, Role::Base, header.train_base, take_group("base."))?;
    let coproc_named = take_group("coproc.");
    let coproc = if coproc_named.is_empty() {
        None
    } else {
        Some(ModelParams::from_named(
            &header.config,
            Role::Coprocessor,
            true,
            coproc_named,
        )?)
    };
    let bank = tensors.remove("bank").map(|embeddings| SoftTokenBank { embeddings });
    let trainable = TrainableSet {
        base: header.train_base,
        coproc: header.train_coproc,
        bank: header.train_bank,
    };
    let mut state = TrainState::from_parts(header.mode, base, coproc, bank, trainable, header.optimizer, rng)?;
    for i in 0..state.opt.names.len() {
        let name = state.opt.names[i].clone();
        let (m, v) = (
            tensors.remove(&format!("opt.m.{}", name)),
            tensors.remove(&format!("opt.v.{}", name)),
        );
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == state.opt.m[i].shape() && v.shape() == state.opt.v[i].shape() => {
                state.opt.m[i] = m;
                state.opt.v[i] = v;
            }
            _ => {
                r.pos = header_at;
                return Err(r.fail(format!("optimizer moments for {} are missing or misshapen", name)));
            }
        }
    }
    if let Some(extra) = tensors.keys().next() {
        r.pos = header_at;
        return Err(r.fail(format!("unexpected tensor {}", extra)));
    }
    state.opt.step = header.step;
    state.tokens_seen = header.tokens_seen;
    Ok((state, header.run_config))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    save_checkpoint_with(path, state, None)
}

pub fn save_checkpoint_with<T: Scalar>(path: &Path, state: &TrainState<T>, run_config: Option<&str>) -> Result<()> {
    let bytes = encode_checkpoint_with(state, run_config)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    load_checkpoint_with(path).map(|(s, _)| s)
}

pub fn load_checkpoint_with<T: Scalar>(path: &Path) -> Result<(TrainState<T>, Option<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint_with(&bytes, path)
}

/// Mode recorded in a checkpoint, without decoding its tensors.
pub fn checkpoint_mode(path: &Path) -> Result<InjectionMode> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint file"));
    }
    r.take(4, "version")?;
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let at = r.pos;
    #[derive(Deserialize)]
    struct ModeOnly {
        mode: InjectionMode,
    }
    let m: ModeOnly = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        offset: at,
        message: e.to_string(),
    })?;
    Ok(m.mode)
}
