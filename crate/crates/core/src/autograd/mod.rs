//! Minimal dense-tensor reverse-mode automatic differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_floor, grad_check_sampled, relative_error, relative_error_floor};
pub use tape::{Node, OpKind, OpRecord, Tape, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Op-specific attributes for [`Tape::forward_op`].
#[derive(Clone, Debug, Default)]
pub enum OpAttrs {
    #[default]
    None,
    Scale(f64),
    Ids(Vec<usize>),
    Range(usize, usize),
}

impl<T: Scalar> Tape<T> {
    /// Uniform entry point over the primitive kinds.
    ///
    /// The dedicated methods (`matmul`, `gelu`, ...) are equivalent and are
    /// what model code uses.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{:?}: expected {} inputs, got {}",
                    kind,
                    n,
                    inputs.len()
                )));
            }
            Ok(())
        };
        match (kind, attrs) {
            (OpKind::MatMul, _) => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            (OpKind::Add, _) => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            (OpKind::Mul, _) => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            (OpKind::SoftmaxRows, _) => {
                arity(1)?;
                self.softmax_rows(inputs[0])
            }
            (OpKind::LayerNorm, _) => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            (OpKind::Gelu, _) => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            (OpKind::EmbeddingLookup, OpAttrs::Ids(ids)) => {
                arity(1)?;
                self.embedding(inputs[0], ids)
            }
            (OpKind::Slice, OpAttrs::Range(a, b)) => {
                arity(1)?;
                self.slice_rows(inputs[0], *a, *b)
            }
            (OpKind::SliceCols, OpAttrs::Range(a, b)) => {
                arity(1)?;
                self.slice_cols(inputs[0], *a, *b)
            }
            (OpKind::ConcatRows, _) => self.concat_rows(inputs),
            (OpKind::ConcatCols, _) => self.concat_cols(inputs),
            (OpKind::Transpose, _) => {
                arity(1)?;
                self.transpose(inputs[0])
            }
            (OpKind::Scale, OpAttrs::Scale(s)) => {
                arity(1)?;
                self.scale(inputs[0], T::of(*s))
            }
            (OpKind::Sum, _) => {
                arity(1)?;
                self.sum(inputs[0])
            }
            (kind, attrs) => Err(Error::contract(format!(
                "forward_op: {:?} is not available through the generic entry point with attrs {:?}",
                kind, attrs
            ))),
        }
    }
}
