use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-12)
}

/// Relative error whose denominator never drops below `floor`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients against central differences.
///
/// `scalar_fn` builds a scalar from the supplied leaf variables. Returns the
/// maximum relative error over every element of every leaf.
pub fn grad_check<T, F>(scalar_fn: F, leaves: &[Tensor<T>], step: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_floor(scalar_fn, leaves, step, 1e-12)
}

/// [`grad_check`] with a denominator floor.
///
/// Deep compositions have entries whose true gradient sits at the
/// finite-difference noise level (about `eps * |f| / step`); a floor above
/// that level keeps those entries from dominating the maximum.
pub fn grad_check_floor<T, F>(scalar_fn: F, leaves: &[Tensor<T>], step: f64, floor: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = leaves.iter().map(|l| (0..l.numel()).collect()).collect();
    check_entries(scalar_fn, leaves, &all, step, floor)
}

/// [`grad_check_floor`] on at most `per_leaf` random entries of each leaf.
///
/// Leaves with no more than `per_leaf` entries are checked in full.
pub fn grad_check_sampled<T, F, R>(
    scalar_fn: F,
    leaves: &[Tensor<T>],
    step: f64,
    floor: f64,
    per_leaf: usize,
    rng: &mut R,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let picks: Vec<Vec<usize>> = leaves
        .iter()
        .map(|l| {
            if l.numel() <= per_leaf {
                (0..l.numel()).collect()
            } else {
                sample(rng, l.numel(), per_leaf).into_vec()
            }
        })
        .collect();
    check_entries(scalar_fn, leaves, &picks, step, floor)
}

fn check_entries<T, F>(scalar_fn: F, leaves: &[Tensor<T>], entries: &[Vec<usize>], step: f64, floor: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "grad_check: step must be positive, got {}",
            step
        )));
    }
    let eval = |values: &[Tensor<T>], grad: bool| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|v| tape.leaf(v.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let root = scalar_fn(&mut tape, &vars)?;
        if tape.value(root).numel() != 1 {
            return Err(Error::contract("grad_check: function must return a scalar"));
        }
        Ok((tape, vars, root))
    };

    let (mut tape, vars, root) = eval(leaves, true)?;
    let f0 = tape.value(root).data()[0];
    let (again, _, root2) = eval(leaves, false)?;
    if again.value(root2).data()[0].to_bits_f64() != f0.to_bits_f64() {
        return Err(Error::contract("grad_check: scalar_fn is not deterministic"));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut worst = 0.0f64;
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for &e in &entries[li] {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + T::of(step);
            let fp = {
                let (t, _, r) = eval(&work, false)?;
                t.value(r).data()[0].as_f64()
            };
            work[li].data_mut()[e] = orig - T::of(step);
            let fm = {
                let (t, _, r) = eval(&work, false)?;
                t.value(r).data()[0].as_f64()
            };
            work[li].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[li].data()[e].as_f64();
            worst = worst.max(relative_error_floor(a, numeric, floor));
        }
    }
    Ok(worst)
}

trait Bits {
    fn to_bits_f64(self) -> u64;
}

impl<T: Scalar> Bits for T {
    fn to_bits_f64(self) -> u64 {
        self.as_f64().to_bits()
    }
}
