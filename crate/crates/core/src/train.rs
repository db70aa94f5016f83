//! Maximum-likelihood training of the flow with Adam.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Checkpoint, FlowModel, LossRecord, Prior, SegmentLabel, MIN_ABS_DET};
use crate::ingest::{PoseSegment, PoseTrack};
use crate::metrics::{bbox_iou, GtRegion};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    Unsupervised,
    Supervised,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Setting::Unsupervised),
            "supervised" => Ok(Setting::Supervised),
            other => Err(Error::Config(format!("unknown setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub setting: Setting,
    pub mu_normal: f64,
    pub mu_abnormal: f64,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::unsupervised()
    }
}

impl TrainConfig {
    pub fn unsupervised() -> Self {
        Self {
            epochs: 8,
            batch_size: 256,
            learning_rate: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            seed: 0,
            setting: Setting::Unsupervised,
            mu_normal: 3.0,
            mu_abnormal: -10.0,
            grad_clip: 10.0,
        }
    }

    pub fn supervised() -> Self {
        Self {
            setting: Setting::Supervised,
            mu_normal: 10.0,
            ..Self::unsupervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, beta) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.setting == Setting::Supervised && self.mu_normal == self.mu_abnormal {
            return Err(Error::Config(
                "supervised setting needs distinct normal and abnormal prior means".into(),
            ));
        }
        Ok(())
    }

    pub fn prior(&self) -> Prior {
        Prior {
            mu_normal: self.mu_normal,
            mu_abnormal: (self.setting == Setting::Supervised).then_some(self.mu_abnormal),
        }
    }
}

/// First and second moment estimates for every flat parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam update, after clipping the gradient to `cfg.grad_clip`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let mut g = grads.to_vec();
    clip_global_norm(&mut g, cfg.grad_clip);

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Mean of `−log p(x | μ_label)` over the batch.
pub fn nll_loss(
    model: &FlowModel,
    batch: &[&Tensor3],
    labels: Option<&[SegmentLabel]>,
) -> Result<f64> {
    model.nll(batch, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// One record per optimizer step: the batch loss before the update.
    pub loss_history: Vec<LossRecord>,
    /// Mean of the step losses of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Training stopped on a singular channel mix or a non-finite loss.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub epoch: usize,
    pub step: usize,
    /// Parameters from before the failing update.
    pub last_good: Box<Checkpoint>,
    pub report: TrainReport,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted at epoch {} step {}: {}",
            self.epoch, self.step, self.error
        )
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Trains `model` in place on `data`.
///
/// Actnorm layers are data-initialized on the first (shuffled) batch. Each epoch
/// visits the data in a fresh seeded order in batches of `batch_size`, keeping
/// the final partial batch.
pub fn train(
    model: &mut FlowModel,
    data: &[&Tensor3],
    labels: Option<&[SegmentLabel]>,
    cfg: &TrainConfig,
) -> std::result::Result<TrainReport, Box<TrainAbort>> {
    let mut report = TrainReport {
        loss_history: Vec::new(),
        epoch_losses: Vec::new(),
    };
    let abort = |error: Error, epoch, step, model: &FlowModel, report: &TrainReport| {
        Box::new(TrainAbort {
            error,
            epoch,
            step,
            last_good: Box::new(Checkpoint::from_model(model)),
            report: report.clone(),
        })
    };

    if let Err(e) = validate_inputs(data, labels, cfg) {
        return Err(abort(e, 0, 0, model, &report));
    }
    model.prior = cfg.prior();
    let labels = if cfg.setting == Setting::Supervised {
        labels
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = AdamState::new(model.n_params());
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor3> = chunk.iter().map(|&i| data[i]).collect();
            let batch_labels: Option<Vec<SegmentLabel>> =
                labels.map(|l| chunk.iter().map(|&i| l[i]).collect());

            if !model.is_initialized() {
                if let Err(e) = model.initialize_actnorm(&batch) {
                    return Err(abort(e, epoch, step, model, &report));
                }
            }

            let (loss, grads) = match model.grad_nll(&batch, batch_labels.as_deref()) {
                Ok(v) => v,
                Err(e) => return Err(abort(e, epoch, step, model, &report)),
            };
            let last_good = model.params_flat();
            let mut params = last_good.clone();
            adam_step(&mut params, &grads.flatten(), &mut state, cfg);
            model.set_params_flat(&params);

            if let Some((k, det)) = singular_mix(model) {
                model.set_params_flat(&last_good);
                return Err(abort(
                    Error::SingularMix { step: k, det },
                    epoch,
                    step,
                    model,
                    &report,
                ));
            }
            if params.iter().any(|p| !p.is_finite()) {
                model.set_params_flat(&last_good);
                return Err(abort(
                    Error::numeric("optimizer update", "non-finite parameter"),
                    epoch,
                    step,
                    model,
                    &report,
                ));
            }

            report.loss_history.push(LossRecord { epoch, step, loss });
            epoch_sum += loss;
            epoch_batches += 1;
            step += 1;
        }
        let epoch_loss = epoch_sum / epoch_batches as f64;
        log::info!("epoch {epoch}: mean loss {epoch_loss:.6}");
        report.epoch_losses.push(epoch_loss);
    }
    Ok(report)
}

fn validate_inputs(
    data: &[&Tensor3],
    labels: Option<&[SegmentLabel]>,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    match (cfg.setting, labels) {
        (Setting::Supervised, None) => Err(Error::Config(
            "supervised training needs per-segment labels".into(),
        )),
        (_, Some(l)) if l.len() != data.len() => Err(Error::Config(format!(
            "{} labels for {} segments",
            l.len(),
            data.len()
        ))),
        _ => Ok(()),
    }
}

fn singular_mix(model: &FlowModel) -> Option<(usize, f64)> {
    let c = model.config().channels;
    model
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| (k, s.mix.det(c)))
        .find(|(_, det)| !(det.abs() > MIN_ABS_DET))
}

/// Writes the final parameters and training metadata into a checkpoint.
pub fn checkpoint_with_report(
    model: &FlowModel,
    cfg: &TrainConfig,
    report: &TrainReport,
) -> Checkpoint {
    let mut ck = Checkpoint::from_model(model);
    ck.train_config = serde_json::to_value(cfg).ok();
    ck.loss_history = report.loss_history.clone();
    ck.epoch_losses = report.epoch_losses.clone();
    ck
}

/// Label a segment abnormal when, on at least `min_fraction` of its frames, the
/// person's keypoint box overlaps a ground-truth region of that frame with IoU of
/// at least `min_iou`.
pub fn segment_labels_from_regions(
    segments: &[PoseSegment],
    tracks: &[PoseTrack],
    regions: &[GtRegion],
    min_iou: f64,
    min_fraction: f64,
) -> Vec<SegmentLabel> {
    let mut by_frame: HashMap<(&str, i64), Vec<&GtRegion>> = HashMap::new();
    for r in regions {
        by_frame
            .entry((&r.video_id, r.frame_index))
            .or_default()
            .push(r);
    }
    let track_index: HashMap<(&str, i64), &PoseTrack> = tracks
        .iter()
        .map(|t| ((t.video_id.as_str(), t.person_id), t))
        .collect();
    segments
        .iter()
        .map(|seg| {
            let Some(track) = track_index.get(&(seg.video_id.as_str(), seg.person_id)) else {
                return SegmentLabel::Normal;
            };
            let hits = seg
                .frame_range()
                .filter(|&f| {
                    let (Some(bbox), Some(gts)) = (
                        track.frame_bbox(f),
                        by_frame.get(&(seg.video_id.as_str(), f)),
                    ) else {
                        return false;
                    };
                    gts.iter().any(|g| bbox_iou(&bbox, &g.bbox) >= min_iou)
                })
                .count();
            if hits as f64 >= min_fraction * seg.window() as f64 {
                SegmentLabel::Abnormal
            } else {
                SegmentLabel::Normal
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::graph::{AdjacencyMode, SkeletonGraph};

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::unsupervised()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[0.0; 3], &mut state, &cfg());
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        let c = cfg();
        adam_step(&mut params, &[1.0], &mut state, &c);
        // m̂ = 1, v̂ = 1 so the step is lr / (1 + eps)
        assert!((params[0] + c.learning_rate / (1.0 + c.adam_eps)).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![30.0, 40.0];
        let norm = clip_global_norm(&mut g, 10.0);
        assert_eq!(norm, 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn supervised_config_requires_distinct_means() {
        let bad = TrainConfig {
            mu_abnormal: 10.0,
            ..TrainConfig::supervised()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::supervised().validate().is_ok());
    }

    #[test]
    fn supervised_without_labels_aborts() {
        let config = FlowConfig {
            flow_steps: 1,
            seg_len: 2,
            n_joints: 2,
            kernel_t: 1,
            ..FlowConfig::default()
        };
        let graph = SkeletonGraph::build(AdjacencyMode::Uniform, 2).unwrap();
        let mut model = FlowModel::new(config, graph, Prior::default()).unwrap();
        let x = Tensor3::zeros(3, 2, 2);
        let err = train(&mut model, &[&x], None, &TrainConfig::supervised()).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn defaults_follow_published_settings() {
        let u = TrainConfig::unsupervised();
        assert_eq!((u.epochs, u.batch_size), (8, 256));
        assert_eq!(u.learning_rate, 5e-4);
        assert_eq!(u.mu_normal, 3.0);
        let s = TrainConfig::supervised();
        assert_eq!((s.mu_normal, s.mu_abnormal), (10.0, -10.0));
    }

    #[test]
    fn segment_labels_need_half_the_frames() {
        use crate::ingest::{segment_track, ChannelLayout, Keypoint, PoseFrame};
        let track = PoseTrack {
            video_id: "v".into(),
            person_id: 0,
            frames: (0..4)
                .map(|f| PoseFrame {
                    frame_index: f,
                    joints: vec![Keypoint::new(0.0, 0.0, 1.0), Keypoint::new(10.0, 10.0, 1.0)],
                })
                .collect(),
        };
        let segs = segment_track(&track, 2, 1, ChannelLayout::XyConfidence).unwrap();
        let region = |f| GtRegion {
            video_id: "v".into(),
            frame_index: f,
            track_id: 0,
            bbox: [0.0, 0.0, 10.0, 10.0],
        };
        let labels = segment_labels_from_regions(&segs, &[track], &[region(2)], 0.5, 0.5);
        use SegmentLabel::{Abnormal, Normal};
        assert_eq!(labels, vec![Normal, Abnormal, Abnormal]);
    }
}
