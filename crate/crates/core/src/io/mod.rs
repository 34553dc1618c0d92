//! Checkpoints, run manifests and report export.

mod checkpoint;
mod manifest;
mod report;

pub use checkpoint::{
    checkpoint_from_json, checkpoint_to_json, decode_f64s, encode_f64s, load_checkpoint, save_checkpoint,
    Checkpoint, CsvSource, Provenance, SCHEMA_VERSION,
};
pub use manifest::{load_manifest, RunManifest};
pub use report::{export_report, write_report, ComparisonReport, Format, RatioRow, Report};
