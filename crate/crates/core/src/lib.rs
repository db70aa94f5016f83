//! Spatio-temporal graph normalizing flows for pose-based video anomaly detection.
//!
//! Pose tracks are cut into fixed-length windows ([`ingest`]), mapped to a Gaussian
//! latent by an exact-likelihood flow ([`flow`]) trained by [`train`], and scored
//! per frame ([`scoring`]). [`metrics`] evaluates frame AUC and the region/track
//! detection criteria; [`synth`] generates labeled synthetic walking data.

pub mod error;
pub mod flow;
pub mod graph;
pub mod ingest;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, Prior, SegmentLabel};
pub use graph::{AdjacencyMode, SkeletonGraph};
pub use ingest::{Keypoint, PoseSegment, PoseTrack};
pub use tensor::Tensor3;
