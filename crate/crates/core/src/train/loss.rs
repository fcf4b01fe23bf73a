use crate::model::{AugmentationPlan, SlotRole};

/// Which rows of a training layout contribute to the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    mask: Vec<bool>,
}

impl LossMask {
    pub fn from_vec(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    /// Decode-pass inputs of a pretraining plan: latent rows are never
    /// supervised, every ahead row predicts its successor.
    pub fn pretraining(plan: &AugmentationPlan) -> Self {
        let mask = plan
            .decode_layout()
            .into_iter()
            .skip(plan.seq_len())
            .map(|role| matches!(role, SlotRole::Ahead { .. }))
            .collect();
        Self { mask }
    }

    /// Finetuning layout `question | latents | stream inputs`: only the
    /// stream inputs, each predicting the next stream token, are supervised.
    pub fn finetune(question_len: usize, n_latents: usize, stream_inputs: usize) -> Self {
        let mut mask = vec![false; question_len + n_latents];
        mask.extend(std::iter::repeat_n(true, stream_inputs));
        Self { mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// The last `n` entries, aligned with logits of the trailing rows.
    pub fn tail(&self, n: usize) -> &[bool] {
        &self.mask[self.mask.len().saturating_sub(n)..]
    }
}
