//! Per-segment log-likelihoods turned into per-frame scores.
//!
//! Every segment's score is assigned to all frames it covers. A person's score at
//! a frame is the minimum over their covering segments, and the frame score is the
//! minimum over the people present. Frames nobody covers take the video's maximum
//! observed score.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::ingest::PoseSegment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub video_id: String,
    pub person_id: i64,
    pub start_frame: i64,
    pub tau: usize,
    pub log_prob: f64,
}

impl SegmentScore {
    pub fn frames(&self) -> std::ops::Range<i64> {
        self.start_frame..self.start_frame + self.tau as i64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub scored: usize,
    pub skipped_degenerate: usize,
    pub skipped_numeric: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegments {
    pub scores: Vec<SegmentScore>,
    pub diagnostics: ScoreDiagnostics,
}

/// `log p(x | μ_normal)` for each segment, in input order. Degenerate segments
/// and segments whose evaluation fails are skipped and counted.
pub fn score_segments(model: &FlowModel, segments: &[PoseSegment]) -> ScoredSegments {
    let results: Vec<Option<Result<f64>>> = segments
        .par_iter()
        .map(|seg| (!seg.degenerate).then(|| model.log_prob_normal(&seg.data)))
        .collect();

    let mut diagnostics = ScoreDiagnostics::default();
    let mut scores = Vec::with_capacity(segments.len());
    for (seg, res) in segments.iter().zip(results) {
        match res {
            None => diagnostics.skipped_degenerate += 1,
            Some(Ok(lp)) if lp.is_finite() => {
                diagnostics.scored += 1;
                scores.push(SegmentScore {
                    video_id: seg.video_id.clone(),
                    person_id: seg.person_id,
                    start_frame: seg.start_frame,
                    tau: seg.window(),
                    log_prob: lp,
                });
            }
            Some(Ok(_)) | Some(Err(_)) => {
                log::warn!(
                    "skipping segment video {} person {} start {}: evaluation failed",
                    seg.video_id,
                    seg.person_id,
                    seg.start_frame
                );
                diagnostics.skipped_numeric += 1;
            }
        }
    }
    ScoredSegments {
        scores,
        diagnostics,
    }
}

/// Minimum covering-segment score for each `(person, frame)`.
pub fn person_frame_scores(scores: &[SegmentScore]) -> BTreeMap<(i64, i64), f64> {
    let mut out: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for s in scores {
        for f in s.frames() {
            out.entry((s.person_id, f))
                .and_modify(|v| *v = v.min(s.log_prob))
                .or_insert(s.log_prob);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRecord {
    pub policy: String,
    pub fill_value: f64,
    pub filled_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_scores: Vec<f64>,
    pub fill: FillRecord,
}

/// Per-frame scores for one video of `video_length` frames.
pub fn aggregate_frames(
    video_id: &str,
    scores: &[SegmentScore],
    video_length: usize,
) -> Result<ScoreSeries> {
    if let Some(s) = scores.iter().find(|s| s.video_id != video_id) {
        return Err(Error::Config(format!(
            "segment from video {} passed to aggregation of video {video_id}",
            s.video_id
        )));
    }
    let mut frame: Vec<Option<f64>> = vec![None; video_length];
    for ((_, f), v) in person_frame_scores(scores) {
        let idx = usize::try_from(f)
            .ok()
            .filter(|&i| i < video_length)
            .ok_or_else(|| {
                Error::Bounds(format!(
                    "video {video_id}: segment covers frame {f} but the video has {video_length} frames"
                ))
            })?;
        frame[idx] = Some(frame[idx].map_or(v, |cur: f64| cur.min(v)));
    }

    let observed_max = frame.iter().flatten().copied().reduce(f64::max);
    let fill_value = observed_max.unwrap_or(0.0);
    let filled_frames = frame.iter().filter(|v| v.is_none()).count();
    Ok(ScoreSeries {
        video_id: video_id.to_string(),
        frame_scores: frame.into_iter().map(|v| v.unwrap_or(fill_value)).collect(),
        fill: FillRecord {
            policy: if observed_max.is_some() {
                "video_max".into()
            } else {
                "no_scores_zero".into()
            },
            fill_value,
            filled_frames,
        },
    })
}

/// Gaussian smoothing with reflected boundaries. `sigma == 0` returns the input.
pub fn smooth_series(series: &ScoreSeries, sigma: f64) -> Result<ScoreSeries> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "smoothing sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 || series.frame_scores.is_empty() {
        return Ok(series.clone());
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = weights.iter().sum();
    let n = series.frame_scores.len() as i64;
    let smoothed = (0..n)
        .map(|i| {
            (-radius..=radius)
                .zip(&weights)
                .map(|(k, w)| w * series.frame_scores[reflect(i + k, n) as usize])
                .sum::<f64>()
                / norm
        })
        .collect();
    Ok(ScoreSeries {
        frame_scores: smoothed,
        ..series.clone()
    })
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(mut i: i64, n: i64) -> i64 {
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        period - 1 - i
    } else {
        i
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(person: i64, start: i64, tau: usize, lp: f64) -> SegmentScore {
        SegmentScore {
            video_id: "v".into(),
            person_id: person,
            start_frame: start,
            tau,
            log_prob: lp,
        }
    }

    #[test]
    fn single_segment_fills_with_its_score() {
        let s = aggregate_frames("v", &[seg(0, 0, 4, -5.0)], 7).unwrap();
        assert_eq!(s.frame_scores, vec![-5.0; 7]);
        assert_eq!(s.fill.filled_frames, 3);
    }

    #[test]
    fn min_over_people() {
        let s = aggregate_frames("v", &[seg(0, 0, 1, -2.0), seg(1, 0, 1, -7.0)], 1).unwrap();
        assert_eq!(s.frame_scores, vec![-7.0]);
    }

    #[test]
    fn min_over_overlapping_segments() {
        let s = aggregate_frames("v", &[seg(0, 0, 3, -3.0), seg(0, 2, 3, -9.0)], 5).unwrap();
        assert_eq!(s.frame_scores, vec![-3.0, -3.0, -9.0, -9.0, -9.0]);
    }

    #[test]
    fn out_of_range_segment_is_bounds_error() {
        assert!(matches!(
            aggregate_frames("v", &[seg(0, 3, 4, -1.0)], 5),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn foreign_video_rejected() {
        let mut s = seg(0, 0, 1, -1.0);
        s.video_id = "other".into();
        assert!(aggregate_frames("v", &[s], 2).is_err());
    }

    #[test]
    fn empty_video_gets_zero_fill() {
        let s = aggregate_frames("v", &[], 3).unwrap();
        assert_eq!(s.frame_scores, vec![0.0; 3]);
        assert_eq!(s.fill.filled_frames, 3);
    }

    fn series(values: Vec<f64>) -> ScoreSeries {
        ScoreSeries {
            video_id: "v".into(),
            frame_scores: values,
            fill: FillRecord {
                policy: "video_max".into(),
                fill_value: 0.0,
                filled_frames: 0,
            },
        }
    }

    #[test]
    fn smoothing_identity_and_constant() {
        let s = series(vec![1.0, -4.0, 2.5]);
        assert_eq!(smooth_series(&s, 0.0).unwrap(), s);
        let c = smooth_series(&series(vec![-3.0; 20]), 2.0).unwrap();
        assert!(c.frame_scores.iter().all(|v| (v + 3.0).abs() < 1e-12));
    }

    #[test]
    fn smoothing_impulse_is_symmetric() {
        let mut values = vec![0.0; 21];
        values[10] = -10.0;
        let out = smooth_series(&series(values), 0.5).unwrap().frame_scores;
        // σ = 0.5 gives a 5-tap kernel (radius 2)
        let w: Vec<f64> = (-2..=2)
            .map(|k: i32| (-2.0 * (k * k) as f64).exp())
            .collect();
        let norm: f64 = w.iter().sum();
        for k in -2i32..=2 {
            let expected = -10.0 * w[(k + 2) as usize] / norm;
            assert!((out[(10 + k) as usize] - expected).abs() < 1e-12);
        }
        for k in 1..=2 {
            assert_eq!(out[10 - k], out[10 + k]);
        }
        let argmin = out
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmin, 10);
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(smooth_series(&series(vec![1.0]), -1.0).is_err());
    }
}
