//! Frame-level micro AUC and the region/track detection criteria.

mod auc;
mod detection;

use serde::{Deserialize, Serialize};

pub use auc::{align_frames, micro_auc, roc_auc};
pub use detection::{
    bbox_iou, build_gt_tracks, curve_area, detection_curves, rbdc, regions_from_scores, tbdc,
    validate_bbox, DetectionCurves, GtRegion, GtTrack, PersonFrameScore, Region,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSettings {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub rbdc: Option<f64>,
    pub tbdc: Option<f64>,
    pub n_frames: usize,
    pub n_gt_regions: usize,
    pub n_gt_tracks: usize,
    pub settings: MetricSettings,
}
