//! End-to-end stages: data generation, training, inference, evaluation and sweeps.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/                      generated dataset (unless data.root is set)
//! selector/selector.ckpt     selector weights + history.csv
//! refiner/refiner.ckpt       refiner weights + history.csv + schedule.csv
//! infer/                     report.json, per_image.csv, detections.jsonl,
//!                            assembled/, tiles/<id>/, masks/<id>.json
//! sweep/                     sweep.csv, sweep.json, tradeoff.svg, tpr_vs_tau.svg
//! cache/<checkpoint hash>/   selector scores per image (or $DPR_CACHE_DIR)
//! ```

mod cache;
mod config;
mod data;
mod infer;
mod plot;
mod sweep;
mod train;

use std::path::Path;

use crate::error::{DprError, Result};

pub use cache::{ScoreCache, CACHE_ENV};
pub use config::{DataConfig, DetectorConfig, InferenceConfig, MetricsConfig, RunConfig, SweepConfig};
pub use data::{load_split, low_res_pairs, run_generate_data, DataSummary, SamplePair};
pub use infer::{
    infer_dir, infer_with, run_evaluate, run_infer, ImageRow, InferContext, InferReport, SkippedImage, TileMemo,
};
pub use plot::{line_chart, Series};
pub use sweep::{run_sweep, sweep_with, write_sweep, SweepResult, SweepRow};
pub use train::{
    positive_pairs, run_train_refiner, run_train_selector, selector_examples, RefinerTrainSummary,
    SelectorTrainSummary,
};

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DprError::io(dir, e))
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let to_err = |e: csv::Error| DprError::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| DprError::io(path, e))
}
