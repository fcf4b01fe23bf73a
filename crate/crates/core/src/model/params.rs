use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Coprocessor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    const NAMES: [&'static str; 10] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "mlp.up",
        "mlp.down",
    ];

    fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// One transformer's weights plus its role and trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub role: Role,
    pub trainable: bool,
    pub tok_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    pub unembed: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian init; residual output projections are scaled by `1/sqrt(2L)`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, role: Role, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.mlp_dim();
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], INIT_STD, rng),
                wk: Tensor::randn(&[d, d], INIT_STD, rng),
                wv: Tensor::randn(&[d, d], INIT_STD, rng),
                wo: Tensor::randn(&[d, d], resid_std, rng),
                ln2_gain: Tensor::filled(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: Tensor::randn(&[d, f], INIT_STD, rng),
                w_down: Tensor::randn(&[f, d], resid_std, rng),
            })
            .collect();
        let unembed = Tensor::randn(&[d, config.vocab_size], INIT_STD, rng);
        Ok(Self {
            config: config.clone(),
            role,
            trainable: true,
            tok_emb,
            layers,
            lnf_gain: Tensor::filled(&[d], T::one()),
            lnf_bias: Tensor::zeros(&[d]),
            unembed,
        })
    }

    /// Zero weights with unit layer-norm gains.
    pub fn zeros(config: &ModelConfig, role: Role) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.mlp_dim();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], T::one()),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::zeros(&[d, d]),
                wk: Tensor::zeros(&[d, d]),
                wv: Tensor::zeros(&[d, d]),
                wo: Tensor::zeros(&[d, d]),
                ln2_gain: Tensor::filled(&[d], T::one()),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: Tensor::zeros(&[d, f]),
                w_down: Tensor::zeros(&[f, d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            role,
            trainable: true,
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            layers,
            lnf_gain: Tensor::filled(&[d], T::one()),
            lnf_bias: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[d, config.vocab_size]),
        })
    }

    /// A copy of these weights under a different role.
    pub fn duplicate_as(&self, role: Role) -> Self {
        Self { role, ..self.clone() }
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string()];
        for l in 0..self.layers.len() {
            names.extend(LayerParams::<T>::NAMES.iter().map(|n| format!("layers.{}.{}", l, n)));
        }
        names.extend(["lnf.gain".to_string(), "lnf.bias".to_string(), "unembed".to_string()]);
        names
    }

    /// Parameter tensors in canonical order, paired with [`Self::names`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.unembed]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.unembed]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds a parameter set from named tensors in any order.
    pub fn from_named(
        config: &ModelConfig,
        role: Role,
        trainable: bool,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut params = Self::zeros(config, role)?;
        params.trainable = trainable;
        let names = params.names();
        let mut map: std::collections::HashMap<String, Tensor<T>> = named.into_iter().collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::contract(format!("missing parameter tensor {}", name)))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{} {:?}", name, slot.shape()),
                    format!("{:?}", t.shape()),
                ));
            }
            *slot = t;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::contract(format!("unexpected parameter tensor {}", extra)));
        }
        Ok(params)
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Result<BoundModel> {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        let tok_emb = leaf(&self.tok_emb)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(BoundLayer {
                ln1_gain: leaf(&l.ln1_gain)?,
                ln1_bias: leaf(&l.ln1_bias)?,
                wq: leaf(&l.wq)?,
                wk: leaf(&l.wk)?,
                wv: leaf(&l.wv)?,
                wo: leaf(&l.wo)?,
                ln2_gain: leaf(&l.ln2_gain)?,
                ln2_bias: leaf(&l.ln2_bias)?,
                w_up: leaf(&l.w_up)?,
                w_down: leaf(&l.w_down)?,
            });
        }
        Ok(BoundModel {
            config: self.config.clone(),
            tok_emb,
            layers,
            lnf_gain: leaf(&self.lnf_gain)?,
            lnf_bias: leaf(&self.lnf_bias)?,
            unembed: leaf(&self.unembed)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Parameter handles of a model bound to one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub unembed: Var,
}

impl BoundModel {
    /// Reassembles handles listed in [`Self::vars`] order.
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let want = 4 + 10 * config.n_layers;
        if vars.len() != want {
            return Err(Error::contract(format!(
                "expected {} parameter handles, got {}",
                want,
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = || it.next().expect("length checked");
        let tok_emb = take();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(BoundLayer {
                ln1_gain: take(),
                ln1_bias: take(),
                wq: take(),
                wk: take(),
                wv: take(),
                wo: take(),
                ln2_gain: take(),
                ln2_bias: take(),
                w_up: take(),
                w_down: take(),
            });
        }
        Ok(Self {
            config: config.clone(),
            tok_emb,
            layers,
            lnf_gain: take(),
            lnf_bias: take(),
            unembed: take(),
        })
    }

    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.w_up, l.w_down,
            ]);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.unembed]);
        out
    }
}
