//! Image quality, feature distances, detection metrics and compute accounting.

mod detection;
mod distance;
mod flops;
mod quality;

use serde::{Deserialize, Serialize};

pub use detection::{
    evaluate_detections, greedy_match, interpolated_ap, load_detections, save_detections, Detection,
    DetectionMetrics, DetectionRecord, DetectionSet, Detector, GroundTruth, MapProtocol, ToyDetector,
};
pub use distance::{frechet_distance, kernel_mmd, pixel_features, FeatureSet};
pub use flops::{flops_report, FlopsReport};
pub use quality::{mse, psnr, ssim, SsimParams};

/// Run-level summary. Metrics that could not be computed are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over images with finite PSNR.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub frechet: Option<f64>,
    pub kernel_mmd: Option<f64>,
    pub map: f64,
    pub map50: f64,
    pub tpr: f64,
    pub precision: f64,
    pub flops_ratio: f64,
    pub patch_fraction: f64,
}
