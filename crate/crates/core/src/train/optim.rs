use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::OptimizerConfig;

/// AdamW moments for the trainable tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub names: Vec<String>,
    /// Whether decoupled weight decay applies to each tensor.
    pub decay: Vec<bool>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Summary of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub lr: f64,
    pub grad_norm: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig, names: Vec<String>, shapes: &[Vec<usize>], decay: Vec<bool>) -> Result<Self> {
        config.validate()?;
        if names.len() != shapes.len() || decay.len() != shapes.len() {
            return Err(Error::contract(
                "optimizer: names, shapes and decay flags differ in length",
            ));
        }
        Ok(Self {
            config,
            step: 0,
            names,
            decay,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update; `params` and `grads` follow the
/// optimizer's tensor order.
pub fn adamw_step<T: Scalar>(
    opt: &mut OptimizerState<T>,
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<f64> {
    if params.len() != opt.len() || grads.len() != opt.len() {
        return Err(Error::contract(format!(
            "adamw_step: {} moments, {} params, {} grads",
            opt.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{:?}", params[i].shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NumericFault {
                op: format!("adamw_step: non-finite gradient for {}", opt.names[i]),
            });
        }
    }
    opt.step += 1;
    let c = &opt.config;
    let lr = c.lr_at(opt.step);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(opt.step as i32));
    let bc2 = T::of(1.0 - c.beta2.powi(opt.step as i32));
    let (lr_t, eps) = (T::of(lr), T::of(c.eps));
    let shrink = T::of(1.0 - lr * c.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        let decay = opt.decay[i];
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            if decay {
                *p = *p * shrink;
            }
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(lr)
}
