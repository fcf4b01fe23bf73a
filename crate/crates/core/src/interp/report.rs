use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::capture::{mean_offdiag, CaptureMatrix};
use super::silhouette::SilhouetteReport;

pub const CAPTURE_CSV: &str = "capture.csv";
pub const SILHOUETTE_CSV: &str = "silhouette.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_else(|| "-".into())
}

pub fn capture_csv(h: &CaptureMatrix) -> String {
    let n = h.n_latents();
    let mut s = String::from("latent");
    for j in 1..=n {
        s.push_str(&format!(",{}", j));
    }
    s.push('\n');
    for (i, row) in h.h.iter().enumerate() {
        s.push_str(&(i + 1).to_string());
        for &v in row {
            s.push(',');
            s.push_str(&cell(v));
        }
        s.push('\n');
    }
    s
}

/// Parses [`capture_csv`] output back into entries.
pub fn parse_capture_csv(text: &str) -> Result<Vec<Vec<Option<f64>>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .skip(1)
                .map(|c| match c {
                    "-" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::contract(format!("bad capture cell {:?}", v))),
                })
                .collect()
        })
        .collect()
}

pub fn silhouette_csv(sil: &SilhouetteReport) -> String {
    let mut s = String::from("latent,count,silhouette\n");
    for (i, (v, n)) in sil.per_latent.iter().zip(&sil.sample_count).enumerate() {
        s.push_str(&format!("{},{},{}\n", i + 1, n, cell(*v)));
    }
    s
}

pub fn summary_line(h: &CaptureMatrix, sil: &SilhouetteReport) -> Result<String> {
    Ok(format!(
        "mean_offdiag_capture={:.6} global_silhouette={:.6} tau={} centered={}",
        mean_offdiag(h)?,
        sil.global,
        h.tau,
        h.centered
    ))
}

/// Writes the capture matrix, the per-latent silhouettes and a summary into
/// `out_dir`, returning the summary line.
pub fn emit_report(h: &CaptureMatrix, sil: &SilhouetteReport, out_dir: &Path) -> Result<String> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = summary_line(h, sil)?;
    let files: [(PathBuf, String); 3] = [
        (out_dir.join(CAPTURE_CSV), capture_csv(h)),
        (out_dir.join(SILHOUETTE_CSV), silhouette_csv(sil)),
        (out_dir.join(SUMMARY_TXT), format!("{}\n", summary)),
    ];
    for (path, body) in files {
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
