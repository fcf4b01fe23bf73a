//! Diagnostics of Coprocessor latent activations: subspace capture and
//! silhouette scores.

mod capture;
mod dump;
mod report;
mod silhouette;

pub use capture::{center_rows, cross_capture, mean_offdiag, pca_projector, CaptureMatrix, Projector};
pub use dump::{collect_activations, ActivationDump, DEFAULT_CAP, DUMP_MAGIC, DUMP_VERSION};
pub use report::{
    capture_csv, emit_report, parse_capture_csv, silhouette_csv, summary_line, CAPTURE_CSV, SILHOUETTE_CSV, SUMMARY_TXT,
};
pub use silhouette::{silhouette, silhouette_points, SilhouetteReport};
