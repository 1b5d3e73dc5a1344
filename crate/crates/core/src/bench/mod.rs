//! The benchmark harness: dataset manifests, synthetic phantom suites, the
//! cross-dataset experiment matrix, report tables, and overlay rendering.

mod manifest;
mod matrix;
mod overlay;
mod phantom;
mod report;

pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry};
pub use matrix::{per_center_breakdown, run_matrix, ExperimentSpec, Normalization, ResultRow};
pub use overlay::{overlay_pixels, render_overlay, FALSE_NEG_RGB, FALSE_POS_RGB, TRUE_POS_RGB};
pub use phantom::{
    default_site_profiles, generate_phantom_dataset, generate_phantom_scan, PhantomProfile,
};
pub use report::{emit_report, write_results_csv};
