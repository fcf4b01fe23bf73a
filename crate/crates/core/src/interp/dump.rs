use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::latent::{base_prefix_pass, coprocessor_pass, PassCounter};
use crate::model::AugmentationPlan;
use crate::scalar::Scalar;
use crate::train::TrainState;

pub const DUMP_MAGIC: &[u8; 8] = b"LATKVACT";
pub const DUMP_VERSION: u32 = 1;
/// Rows kept per latent unless the caller asks otherwise.
pub const DEFAULT_CAP: usize = 2048;

/// Coprocessor last-layer activations grouped by latent slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub n_latents: usize,
    pub d: usize,
    pub run_id: String,
    pub cap: Option<usize>,
    /// Row-major `n_i x d` data per latent slot.
    data: Vec<Vec<f64>>,
}

impl ActivationDump {
    pub fn new(n_latents: usize, d: usize, run_id: impl Into<String>, cap: Option<usize>) -> Self {
        Self {
            n_latents,
            d,
            run_id: run_id.into(),
            cap,
            data: vec![Vec::new(); n_latents],
        }
    }

    /// Builds a dump from explicit clusters of rows.
    pub fn from_clusters(clusters: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let d = clusters.iter().flatten().map(Vec::len).next().unwrap_or(0);
        let mut dump = Self::new(clusters.len(), d, "constructed", None);
        for (i, rows) in clusters.into_iter().enumerate() {
            for r in rows {
                dump.push(i, &r)?;
            }
        }
        Ok(dump)
    }

    pub fn count(&self, latent: usize) -> usize {
        self.data[latent].len() / self.d.max(1)
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.n_latents).map(|i| self.count(i)).collect()
    }

    pub fn is_full(&self, latent: usize) -> bool {
        self.cap.is_some_and(|c| self.count(latent) >= c)
    }

    /// Appends a row unless the latent already holds `cap` rows.
    pub fn push(&mut self, latent: usize, row: &[f64]) -> Result<bool> {
        if latent >= self.n_latents {
            return Err(Error::contract(format!(
                "latent {} out of range for {}",
                latent, self.n_latents
            )));
        }
        if row.len() != self.d {
            return Err(Error::shape(
                "activation row",
                format!("{}", self.d),
                format!("{}", row.len()),
            ));
        }
        if self.is_full(latent) {
            return Ok(false);
        }
        self.data[latent].extend_from_slice(row);
        Ok(true)
    }

    pub fn row(&self, latent: usize, r: usize) -> &[f64] {
        &self.data[latent][r * self.d..(r + 1) * self.d]
    }

    pub fn matrix(&self, latent: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.count(latent), self.d, &self.data[latent])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_latents as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.cap.unwrap_or(0) as u64).to_le_bytes());
        out.extend_from_slice(&(self.run_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.run_id.as_bytes());
        for i in 0..self.n_latents {
            out.extend_from_slice(&(self.count(i) as u64).to_le_bytes());
        }
        for rows in &self.data {
            for &x in rows {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let fail = |offset: usize, msg: &str| Error::Malformed {
            path: path.to_path_buf(),
            offset,
            message: msg.to_string(),
        };
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(fail(pos, "truncated activation dump"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(8)? != DUMP_MAGIC {
            return Err(fail(0, "not an activation dump"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let version = u32_at(take(4)?);
        if version != DUMP_VERSION as usize {
            return Err(fail(8, "unsupported activation dump version"));
        }
        let n_latents = u32_at(take(4)?);
        let d = u32_at(take(4)?);
        let cap = u64_at(take(8)?);
        let id_len = u32_at(take(4)?);
        let run_id = String::from_utf8_lossy(take(id_len)?).into_owned();
        let mut counts = Vec::with_capacity(n_latents);
        for _ in 0..n_latents {
            counts.push(u64_at(take(8)?));
        }
        let mut dump = Self::new(n_latents, d, run_id, (cap > 0).then_some(cap));
        for (i, &n) in counts.iter().enumerate() {
            let raw = take(n * d * 4)?;
            dump.data[i] = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
        }
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes after activation rows"));
        }
        Ok(dump)
    }
}

/// Coprocessor last-layer rows at each latent slot of an answer site placed
/// after every prompt.
pub fn collect_activations<T: Scalar>(
    state: &TrainState<T>,
    prompts: &[Vec<usize>],
    cap_per_latent: Option<usize>,
    run_id: &str,
) -> Result<ActivationDump> {
    let coproc = state
        .coproc
        .as_ref()
        .filter(|_| state.mode.has_coprocessor())
        .ok_or_else(|| Error::contract(format!("{} has no Coprocessor to analyse", state.mode)))?;
    let bank = state
        .bank
        .as_ref()
        .ok_or_else(|| Error::contract("activation collection needs a soft-token bank"))?;
    let n_latents = bank.n_latents();
    let mut dump = ActivationDump::new(n_latents, state.base.config.d_model, run_id, cap_per_latent);
    let mut counter = PassCounter::default();
    for prompt in prompts {
        if (0..n_latents).all(|i| dump.is_full(i)) {
            break;
        }
        let mut tape = Tape::<T>::new();
        let base = state.base.bind(&mut tape, false)?;
        let co = coproc.bind(&mut tape, false)?;
        let bank_v = bank.bind(&mut tape, false)?;
        let plan = AugmentationPlan::answer_site(prompt.len(), n_latents, 1)?;
        let cache = base_prefix_pass(&mut tape, &base, prompt, &mut counter)?;
        let blocks = coprocessor_pass(&mut tape, &co, &cache, bank_v, &plan, state.mode, &mut counter)?;
        let z = tape.value(blocks[0].z);
        for i in 0..n_latents {
            let row: Vec<f64> = z.row(i).iter().map(|x| x.as_f64()).collect();
            dump.push(i, &row)?;
        }
    }
    Ok(dump)
}
