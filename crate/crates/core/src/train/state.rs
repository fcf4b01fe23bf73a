use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{InjectionMode, Models, SoftTokenBank};
use crate::model::{BoundModel, ModelConfig, ModelParams, Role};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::OptimizerConfig;
use super::optim::{adamw_step, clip_grad_norm, OptimizerState, UpdateStats};

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    pub base: bool,
    pub coproc: bool,
    pub bank: bool,
}

impl TrainableSet {
    pub fn for_mode(mode: InjectionMode) -> Self {
        Self {
            base: mode.base_trainable(),
            coproc: mode.has_coprocessor(),
            bank: mode.uses_bank(),
        }
    }

    /// Plain language modelling of the Base alone.
    pub fn base_only() -> Self {
        Self {
            base: true,
            coproc: false,
            bank: false,
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub mode: InjectionMode,
    pub base: ModelParams<T>,
    pub coproc: Option<ModelParams<T>>,
    pub bank: Option<SoftTokenBank<T>>,
    pub trainable: TrainableSet,
    pub opt: OptimizerState<T>,
    pub tokens_seen: u64,
    pub rng: ChaCha8Rng,
}

/// Models bound to one tape for one example.
#[derive(Debug)]
pub struct BoundState {
    pub base: BoundModel,
    pub coproc: Option<BoundModel>,
    pub bank: Option<Var>,
}

impl BoundState {
    pub fn models(&self) -> Models<'_> {
        Models {
            base: &self.base,
            coproc: self.coproc.as_ref(),
            bank: self.bank,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Mean over the batch of per-example mean losses.
    pub loss: f64,
    /// Supervised positions across the batch.
    pub positions: usize,
    pub update: UpdateStats,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh Base, a Coprocessor copied from it, and a bank of `n_latents`.
    pub fn new(
        mode: InjectionMode,
        config: &ModelConfig,
        n_latents: usize,
        opt: OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ModelParams::init(config, Role::Base, &mut rng)?;
        Self::from_base(mode, base, n_latents, opt, rng)
    }

    /// Starts from pretrained Base weights; the Coprocessor begins as a copy.
    pub fn from_base(
        mode: InjectionMode,
        base: ModelParams<T>,
        n_latents: usize,
        opt: OptimizerConfig,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        if mode == InjectionMode::SequentialRollout {
            return Err(Error::contract("sequential rollout is not a training mode"));
        }
        let trainable = TrainableSet::for_mode(mode);
        let base = base.with_trainable(trainable.base);
        let coproc = mode
            .has_coprocessor()
            .then(|| base.duplicate_as(Role::Coprocessor).with_trainable(true));
        let bank = Some(SoftTokenBank::init(n_latents, base.config.d_model, &mut rng));
        Self::from_parts(mode, base, coproc, bank, trainable, opt, rng)
    }

    /// Base-only language-model state used to warm-start the other modes.
    pub fn language_model(config: &ModelConfig, opt: OptimizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = ModelParams::init(config, Role::Base, &mut rng)?;
        Self::from_parts(
            InjectionMode::EmbeddingCofinetuned,
            base,
            None,
            None,
            TrainableSet::base_only(),
            opt,
            rng,
        )
    }

    /// Builds a state from explicit parameter groups with fresh optimizer moments.
    pub fn from_parts(
        mode: InjectionMode,
        base: ModelParams<T>,
        coproc: Option<ModelParams<T>>,
        bank: Option<SoftTokenBank<T>>,
        trainable: TrainableSet,
        opt: OptimizerConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let mut state = Self {
            mode,
            base,
            coproc,
            bank,
            trainable,
            opt: OptimizerState::new(opt.clone(), vec![], &[], vec![])?,
            tokens_seen: 0,
            rng,
        };
        let (names, shapes): (Vec<String>, Vec<Vec<usize>>) = state
            .trainable_named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .unzip();
        let decay = shapes.iter().map(|s| s.len() == 2).collect();
        state.opt = OptimizerState::new(opt, names, &shapes, decay)?;
        Ok(state)
    }

    pub fn n_latents(&self) -> usize {
        self.bank.as_ref().map_or(0, |b| b.n_latents())
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Trainable tensors in optimizer order: Base, Coprocessor, bank.
    pub fn trainable_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if self.trainable.base {
            out.extend(
                self.base
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("base.{}", n), t)),
            );
        }
        if let (true, Some(c)) = (self.trainable.coproc, &self.coproc) {
            out.extend(c.named_tensors().into_iter().map(|(n, t)| (format!("coproc.{}", n), t)));
        }
        if let (true, Some(b)) = (self.trainable.bank, &self.bank) {
            out.push(("bank".to_string(), &b.embeddings));
        }
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if self.trainable.base {
            out.extend(self.base.tensors_mut());
        }
        if let (true, Some(c)) = (self.trainable.coproc, self.coproc.as_mut()) {
            out.extend(c.tensors_mut());
        }
        if let (true, Some(b)) = (self.trainable.bank, self.bank.as_mut()) {
            out.push(&mut b.embeddings);
        }
        out
    }

    /// Binds every model onto `tape`; only trainable groups track gradients.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Result<BoundState> {
        let base = self.base.bind(tape, track && self.trainable.base)?;
        let coproc = match &self.coproc {
            Some(c) => Some(c.bind(tape, track && self.trainable.coproc)?),
            None => None,
        };
        let bank = match &self.bank {
            Some(b) => Some(b.bind(tape, track && self.trainable.bank)?),
            None => None,
        };
        Ok(BoundState { base, coproc, bank })
    }

    fn trainable_vars(&self, bound: &BoundState) -> Vec<Var> {
        let mut out = Vec::new();
        if self.trainable.base {
            out.extend(bound.base.vars());
        }
        if let (true, Some(c)) = (self.trainable.coproc, &bound.coproc) {
            out.extend(c.vars());
        }
        if let (true, Some(b)) = (self.trainable.bank, bound.bank) {
            out.push(b);
        }
        out
    }

    /// Mean-loss value and gradients over `batch`, accumulated in batch order.
    ///
    /// `loss_fn` returns each example's mean loss and its supervised position
    /// count.
    pub fn gradients<E, F>(&self, batch: &[E], mut loss_fn: F) -> Result<(f64, usize, Vec<Tensor<T>>)>
    where
        F: FnMut(&mut Tape<T>, &BoundState, &E, usize) -> Result<(Var, usize)>,
    {
        if batch.is_empty() {
            return Err(Error::contract("training step needs a non-empty batch"));
        }
        let mut grads: Vec<Tensor<T>> = self
            .trainable_named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut total = 0.0;
        let mut positions = 0;
        let weight = T::of(1.0 / batch.len() as f64);
        for (i, example) in batch.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, true)?;
            let (loss, count) = loss_fn(&mut tape, &bound, example, i)?;
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NumericFault {
                    op: format!(
                        "loss is {} at step {} on batch item {} ({} mode, {} supervised positions)",
                        value,
                        self.opt.step + 1,
                        i,
                        self.mode,
                        count
                    ),
                });
            }
            total += value;
            positions += count;
            tape.backward(loss)?;
            for (g, v) in grads.iter_mut().zip(self.trainable_vars(&bound)) {
                let mut gv = tape.grad_tensor(v);
                gv.scale_assign(weight);
                g.add_assign(&gv);
            }
        }
        Ok((total / batch.len() as f64, positions, grads))
    }

    /// Clips and applies `grads`.
    pub fn apply(&mut self, mut grads: Vec<Tensor<T>>) -> Result<UpdateStats> {
        let grad_norm = clip_grad_norm(&mut grads, self.opt.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NumericFault {
                op: format!("gradient norm is {} at step {}", grad_norm, self.opt.step + 1),
            });
        }
        let mut opt = std::mem::replace(
            &mut self.opt,
            OptimizerState::new(OptimizerConfig::default(), vec![], &[], vec![])?,
        );
        let result = {
            let mut params = self.trainable_mut();
            adamw_step(&mut opt, &mut params, &grads)
        };
        self.opt = opt;
        let lr = result?;
        Ok(UpdateStats { lr, grad_norm })
    }

    /// One optimizer step on `batch` with a caller-defined loss.
    pub fn train_step<E, F>(&mut self, batch: &[E], loss_fn: F) -> Result<StepStats>
    where
        F: FnMut(&mut Tape<T>, &BoundState, &E, usize) -> Result<(Var, usize)>,
    {
        let (loss, positions, grads) = self.gradients(batch, loss_fn)?;
        let update = self.apply(grads)?;
        Ok(StepStats {
            step: self.opt.step,
            loss,
            positions,
            update,
        })
    }
}
