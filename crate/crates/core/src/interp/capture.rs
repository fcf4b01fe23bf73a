use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::dump::ActivationDump;

/// Orthogonal projector onto a minimal principal subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    /// `d x d` symmetric idempotent matrix.
    pub p: DMatrix<f64>,
    pub rank: usize,
    /// Fraction of variance the subspace explains.
    pub explained: f64,
    /// No variance at all: rank 0 and a zero projector.
    pub degenerate: bool,
}

/// Subtracts the column means.
pub fn center_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    if x.nrows() == 0 {
        return c;
    }
    for j in 0..x.ncols() {
        let mean = x.column(j).mean();
        c.column_mut(j).add_scalar_mut(-mean);
    }
    c
}

/// Smallest principal subspace of the centered rows explaining at least
/// `tau` of the variance.
pub fn pca_projector(x: &DMatrix<f64>, tau: f64) -> Result<Projector> {
    if x.nrows() < 2 {
        return Err(Error::contract(format!("PCA needs at least 2 rows, got {}", x.nrows())));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config("tau", format!("must lie in (0, 1], got {}", tau)));
    }
    let d = x.ncols();
    let c = center_rows(x);
    let total = c.norm_squared();
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if total <= (1e-13 * scale).powi(2) * x.len() as f64 {
        return Ok(Projector {
            p: DMatrix::zeros(d, d),
            rank: 0,
            explained: 0.0,
            degenerate: true,
        });
    }
    let svd = c.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let var_total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut cum = 0.0;
    let mut rank = 0;
    for &k in &order {
        cum += svd.singular_values[k].powi(2);
        rank += 1;
        if cum >= tau * var_total * (1.0 - 1e-12) {
            break;
        }
    }
    let mut basis = DMatrix::zeros(d, rank);
    for (col, &k) in order[..rank].iter().enumerate() {
        basis.set_column(col, &v_t.row(k).transpose());
    }
    let p = &basis * basis.transpose();
    Ok(Projector {
        p,
        rank,
        explained: cum / var_total,
        degenerate: false,
    })
}

/// Cross-subspace capture between latent slots.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureMatrix {
    /// `h[i][j]`: share of latent `j`'s variance inside latent `i`'s subspace;
    /// `None` where either latent is empty or degenerate.
    pub h: Vec<Vec<Option<f64>>>,
    pub tau: f64,
    pub subspace_dims: Vec<Option<usize>>,
    pub centered: bool,
}

impl CaptureMatrix {
    pub fn n_latents(&self) -> usize {
        self.h.len()
    }

    pub fn valid(&self) -> Vec<usize> {
        (0..self.n_latents()).filter(|&i| self.h[i][i].is_some()).collect()
    }
}

/// `H[i][j] = |X_j P_i|^2 / |X_j|^2`, with `X_j` centered by its own mean
/// unless `centered` is false.
pub fn cross_capture(dump: &ActivationDump, tau: f64, centered: bool) -> Result<CaptureMatrix> {
    let nonempty = dump.counts().iter().filter(|&&n| n > 0).count();
    if nonempty < 2 {
        return Err(Error::contract(format!(
            "cross capture needs at least 2 non-empty latents, found {}",
            nonempty
        )));
    }
    let n = dump.n_latents;
    let xs: Vec<DMatrix<f64>> = (0..n).map(|i| dump.matrix(i)).collect();
    let projectors: Vec<Option<Projector>> = xs
        .iter()
        .map(|x| {
            if x.nrows() < 2 {
                return Ok(None);
            }
            pca_projector(x, tau).map(|p| (!p.degenerate).then_some(p))
        })
        .collect::<Result<_>>()?;
    let targets: Vec<Option<DMatrix<f64>>> = xs
        .iter()
        .zip(&projectors)
        .map(|(x, p)| p.as_ref().map(|_| if centered { center_rows(x) } else { x.clone() }))
        .collect();
    let mut h = vec![vec![None; n]; n];
    for i in 0..n {
        let Some(pi) = &projectors[i] else { continue };
        for j in 0..n {
            let Some(xj) = &targets[j] else { continue };
            let denom = xj.norm_squared();
            if denom > 0.0 {
                h[i][j] = Some(((xj * &pi.p).norm_squared() / denom).clamp(0.0, 1.0));
            }
        }
    }
    Ok(CaptureMatrix {
        h,
        tau,
        subspace_dims: projectors.iter().map(|p| p.as_ref().map(|p| p.rank)).collect(),
        centered,
    })
}

/// Mean over the defined off-diagonal entries.
pub fn mean_offdiag(h: &CaptureMatrix) -> Result<f64> {
    let valid = h.valid();
    if valid.len() < 2 {
        return Err(Error::contract(format!(
            "mean off-diagonal capture needs 2 valid latents, found {}",
            valid.len()
        )));
    }
    let vals: Vec<f64> = valid
        .iter()
        .flat_map(|&i| valid.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .filter_map(|(i, j)| h.h[i][j])
        .collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
