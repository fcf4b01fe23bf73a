use crate::error::{Error, Result};

use super::dump::ActivationDump;

#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteReport {
    pub global: f64,
    /// Mean score per latent; `None` for empty latents.
    pub per_latent: Vec<Option<f64>>,
    pub sample_count: Vec<usize>,
    /// Per-point scores in dump order (latent-major).
    pub points: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Exact Euclidean silhouette of labelled points; singletons score 0.
pub fn silhouette_points(points: &[&[f64]], labels: &[usize], n_clusters: usize) -> Result<SilhouetteReport> {
    if points.len() != labels.len() {
        return Err(Error::contract("silhouette: one label per point required"));
    }
    let mut sizes = vec![0usize; n_clusters];
    for &l in labels {
        if l >= n_clusters {
            return Err(Error::contract(format!("silhouette: label {} out of range", l)));
        }
        sizes[l] += 1;
    }
    let nonempty = sizes.iter().filter(|&&s| s > 0).count();
    if nonempty < 2 {
        return Err(Error::contract("silhouette needs at least 2 non-empty clusters"));
    }
    if points.len() < 3 {
        return Err(Error::contract("silhouette needs at least 3 points"));
    }
    let mut scores = Vec::with_capacity(points.len());
    let mut sums = vec![0.0; n_clusters];
    for (p, &lp) in points.iter().zip(labels) {
        if sizes[lp] == 1 {
            scores.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (q, &lq) in points.iter().zip(labels) {
            sums[lq] += dist(p, q);
        }
        let a = sums[lp] / (sizes[lp] - 1) as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != lp && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        scores.push(if m > 0.0 { (b - a) / m } else { 0.0 });
    }
    let mut per = vec![0.0; n_clusters];
    for (&s, &l) in scores.iter().zip(labels) {
        per[l] += s;
    }
    Ok(SilhouetteReport {
        global: scores.iter().sum::<f64>() / scores.len() as f64,
        per_latent: per
            .iter()
            .zip(&sizes)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect(),
        sample_count: sizes,
        points: scores,
    })
}

/// Silhouette with latent slots as clusters.
pub fn silhouette(dump: &ActivationDump) -> Result<SilhouetteReport> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for i in 0..dump.n_latents {
        for r in 0..dump.count(i) {
            points.push(dump.row(i, r));
            labels.push(i);
        }
    }
    silhouette_points(&points, &labels, dump.n_latents)
}
