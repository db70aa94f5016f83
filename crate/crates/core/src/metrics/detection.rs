use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PoseTrack;

/// Bounding box as `[x_min, y_min, x_max, y_max]` in pixels.
pub type BBox = [f64; 4];

/// A detected region. `score` is an anomaly strength: higher is more anomalous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub video_id: String,
    pub frame_index: i64,
    pub bbox: BBox,
    pub score: f64,
    pub person_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRegion {
    pub video_id: String,
    pub frame_index: i64,
    pub track_id: i64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTrack {
    pub video_id: String,
    pub track_id: i64,
    pub frames: Vec<(i64, BBox)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonFrameScore {
    pub video_id: String,
    pub person_id: i64,
    pub frame_index: i64,
    pub log_prob: f64,
}

pub fn validate_bbox(b: &BBox) -> Result<()> {
    if b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3] {
        Ok(())
    } else {
        Err(Error::Schema(format!("invalid bounding box {b:?}")))
    }
}

pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Group GT regions into tracks keyed by `(video_id, track_id)`, frames ascending.
pub fn build_gt_tracks(gt: &[GtRegion]) -> Result<Vec<GtTrack>> {
    let mut map: BTreeMap<(&str, i64), Vec<(i64, BBox)>> = BTreeMap::new();
    for r in gt {
        map.entry((&r.video_id, r.track_id))
            .or_default()
            .push((r.frame_index, r.bbox));
    }
    map.into_iter()
        .map(|((video, track), mut frames)| {
            frames.sort_by_key(|f| f.0);
            if frames.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Schema(format!(
                    "track {track} of video {video} has two regions on one frame"
                )));
            }
            Ok(GtTrack {
                video_id: video.to_string(),
                track_id: track,
                frames,
            })
        })
        .collect()
}

/// One region per person-frame whose anomaly strength (`-log_prob`) reaches
/// `threshold`, boxed tightly around the visible keypoints.
pub fn regions_from_scores(
    tracks: &[PoseTrack],
    scores: &[PersonFrameScore],
    threshold: f64,
) -> Vec<Region> {
    let index: HashMap<(&str, i64), &PoseTrack> = tracks
        .iter()
        .map(|t| ((t.video_id.as_str(), t.person_id), t))
        .collect();
    scores
        .iter()
        .filter(|s| -s.log_prob >= threshold)
        .filter_map(|s| {
            let track = index.get(&(s.video_id.as_str(), s.person_id))?;
            let bbox = track.frame_bbox(s.frame_index)?;
            validate_bbox(&bbox).ok()?;
            Some(Region {
                video_id: s.video_id.clone(),
                frame_index: s.frame_index,
                bbox,
                score: -s.log_prob,
                person_id: s.person_id,
            })
        })
        .collect()
}

/// Operating points of the detection sweep, in order of decreasing threshold.
/// The first point is the `+inf` sentinel where nothing is detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurves {
    pub thresholds: Vec<f64>,
    pub fppf: Vec<f64>,
    pub region_tpr: Vec<f64>,
    pub track_tpr: Vec<f64>,
}

impl DetectionCurves {
    pub fn rbdc(&self) -> f64 {
        curve_area(&self.fppf, &self.region_tpr)
    }

    pub fn tbdc(&self) -> f64 {
        curve_area(&self.fppf, &self.track_tpr)
    }
}

#[derive(Default)]
struct FrameState {
    dets: Vec<usize>,
    gts: Vec<usize>,
    active: Vec<usize>,
    matched: Vec<bool>,
}

impl FrameState {
    /// Greedy one-to-one matching by descending IoU among pairs with IoU >= alpha.
    fn rematch(&mut self, dets: &[Region], gt: &[GtRegion], alpha: f64) -> usize {
        let mut pairs = Vec::new();
        for (ai, &d) in self.active.iter().enumerate() {
            for (gi, &g) in self.gts.iter().enumerate() {
                let iou = bbox_iou(&dets[d].bbox, &gt[g].bbox);
                if iou >= alpha {
                    pairs.push((iou, ai, gi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; self.active.len()];
        self.matched = vec![false; self.gts.len()];
        let mut n = 0;
        for (_, ai, gi) in pairs {
            if !det_used[ai] && !self.matched[gi] {
                det_used[ai] = true;
                self.matched[gi] = true;
                n += 1;
            }
        }
        n
    }
}

/// Sweep the detection threshold over every distinct detection score.
///
/// At threshold `θ` the detections with `score >= θ` are active. TPR counts GT
/// regions (or tracks) detected; FPPF is unmatched active detections divided by
/// `n_frames`.
pub fn detection_curves(
    detections: &[Region],
    gt: &[GtRegion],
    n_frames: usize,
    alpha: f64,
    beta: f64,
) -> Result<DetectionCurves> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("beta must be in (0, 1], got {beta}")));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth regions".into()));
    }
    if n_frames == 0 {
        return Err(Error::UndefinedMetric("zero evaluated frames".into()));
    }
    for d in detections {
        validate_bbox(&d.bbox)?;
        if !d.score.is_finite() {
            return Err(Error::numeric(
                "detection sweep",
                "non-finite detection score",
            ));
        }
    }
    for g in gt {
        validate_bbox(&g.bbox)?;
    }

    let tracks = build_gt_tracks(gt)?;
    let track_of: HashMap<(&str, i64), usize> = tracks
        .iter()
        .enumerate()
        .map(|(i, t)| ((t.video_id.as_str(), t.track_id), i))
        .collect();
    let gt_track: Vec<usize> = gt
        .iter()
        .map(|g| track_of[&(g.video_id.as_str(), g.track_id)])
        .collect();
    let track_len: Vec<usize> = tracks.iter().map(|t| t.frames.len()).collect();
    let mut track_hits = vec![0usize; tracks.len()];
    let track_detected = |hits: usize, len: usize| hits as f64 / len as f64 >= beta;

    let mut frames: HashMap<(&str, i64), FrameState> = HashMap::new();
    for (i, d) in detections.iter().enumerate() {
        frames
            .entry((&d.video_id, d.frame_index))
            .or_default()
            .dets
            .push(i);
    }
    for (i, g) in gt.iter().enumerate() {
        let f = frames.entry((&g.video_id, g.frame_index)).or_default();
        f.gts.push(i);
        f.matched.push(false);
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });

    let n_gt = gt.len() as f64;
    let n_tracks = tracks.len() as f64;
    let mut curves = DetectionCurves {
        thresholds: vec![f64::INFINITY],
        fppf: vec![0.0],
        region_tpr: vec![0.0],
        track_tpr: vec![0.0],
    };
    let (mut active, mut matched, mut detected_tracks) = (0usize, 0usize, 0usize);

    let mut i = 0;
    while i < order.len() {
        let theta = detections[order[i]].score;
        let mut touched: Vec<(&str, i64)> = Vec::new();
        while i < order.len() && detections[order[i]].score == theta {
            let d = &detections[order[i]];
            let key = (d.video_id.as_str(), d.frame_index);
            frames
                .get_mut(&key)
                .expect("frame indexed")
                .active
                .push(order[i]);
            touched.push(key);
            active += 1;
            i += 1;
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let state = frames.get_mut(&key).expect("frame indexed");
            let before = std::mem::take(&mut state.matched);
            let before_n = before.iter().filter(|&&m| m).count();
            matched = matched + state.rematch(detections, gt, alpha) - before_n;
            for (k, (&was, &now)) in before.iter().zip(&state.matched).enumerate() {
                if was == now {
                    continue;
                }
                let t = gt_track[state.gts[k]];
                let old = track_detected(track_hits[t], track_len[t]);
                if now {
                    track_hits[t] += 1;
                } else {
                    track_hits[t] -= 1;
                }
                let new = track_detected(track_hits[t], track_len[t]);
                match (old, new) {
                    (false, true) => detected_tracks += 1,
                    (true, false) => detected_tracks -= 1,
                    _ => {}
                }
            }
        }
        curves.thresholds.push(theta);
        curves
            .fppf
            .push((active - matched) as f64 / n_frames as f64);
        curves.region_tpr.push(matched as f64 / n_gt);
        curves.track_tpr.push(detected_tracks as f64 / n_tracks);
    }
    Ok(curves)
}

/// Trapezoidal area under a TPR-vs-FPPF curve on `[0, 1]`. Points are taken in
/// sweep order, stably sorted by FPPF; the curve is cut at FPPF = 1 and extended
/// horizontally from its last point.
pub fn curve_area(fppf: &[f64], tpr: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = fppf.iter().copied().zip(tpr.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(mut last_x, mut last_y)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    for &(x, y) in &pts[1..] {
        if x >= 1.0 {
            let y_at_1 = last_y + (y - last_y) * (1.0 - last_x) / (x - last_x);
            area += (1.0 - last_x) * (last_y + y_at_1) / 2.0;
            return area.clamp(0.0, 1.0);
        }
        area += (x - last_x) * (last_y + y) / 2.0;
        last_x = x;
        last_y = y;
    }
    area += (1.0 - last_x) * last_y;
    area.clamp(0.0, 1.0)
}

pub fn rbdc(detections: &[Region], gt: &[GtRegion], n_frames: usize, alpha: f64) -> Result<f64> {
    Ok(detection_curves(detections, gt, n_frames, alpha, 1.0)?.rbdc())
}

pub fn tbdc(
    detections: &[Region],
    gt: &[GtRegion],
    n_frames: usize,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    Ok(detection_curves(detections, gt, n_frames, alpha, beta)?.tbdc())
}
