//! Pose-track ingestion: JSON-lines parsing, sliding-window segmentation and
//! per-segment normalization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Segments whose pooled coordinate spread falls below this are treated as degenerate.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(format!("non-finite keypoint ({}, {})", self.x, self.y));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence {} outside [0, 1]", self.confidence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame_index: i64,
    pub joints: Vec<Keypoint>,
}

/// One person's keypoint trajectory within one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub video_id: String,
    pub person_id: i64,
    pub frames: Vec<PoseFrame>,
}

impl PoseTrack {
    pub fn n_joints(&self) -> usize {
        self.frames.first().map_or(0, |f| f.joints.len())
    }

    /// Tight bounding box `(x_min, y_min, x_max, y_max)` of the confident keypoints of one frame.
    pub fn frame_bbox(&self, frame_index: i64) -> Option<[f64; 4]> {
        let pos = self
            .frames
            .binary_search_by_key(&frame_index, |f| f.frame_index)
            .ok()?;
        keypoint_bbox(&self.frames[pos].joints)
    }
}

pub fn keypoint_bbox(joints: &[Keypoint]) -> Option<[f64; 4]> {
    let mut bbox: Option<[f64; 4]> = None;
    for kp in joints.iter().filter(|kp| kp.confidence > 0.0) {
        bbox = Some(match bbox {
            None => [kp.x, kp.y, kp.x, kp.y],
            Some([x0, y0, x1, y1]) => [x0.min(kp.x), y0.min(kp.y), x1.max(kp.x), y1.max(kp.y)],
        });
    }
    bbox
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRecord {
    video_id: String,
    person_id: i64,
    frame_index: i64,
    keypoints: Vec<[f64; 3]>,
}

pub fn parse_tracks(path: impl AsRef<Path>) -> Result<Vec<PoseTrack>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks_from(BufReader::new(file))
}

/// Parses JSON-lines track records and groups them by `(video_id, person_id)`.
///
/// Tracks come back ordered by video then person, frames ascending.
pub fn parse_tracks_from<R: BufRead>(reader: R) -> Result<Vec<PoseTrack>> {
    let mut grouped: BTreeMap<(String, i64), BTreeMap<i64, Vec<Keypoint>>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrackRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.keypoints.is_empty() {
            return Err(Error::Schema(format!(
                "line {line_no}: record has no keypoints"
            )));
        }
        let joints: Vec<Keypoint> = record
            .keypoints
            .iter()
            .map(|&[x, y, c]| Keypoint::new(x, y, c))
            .collect();
        if let Some(msg) = joints.iter().find_map(|kp| kp.validate().err()) {
            return Err(Error::Schema(format!("line {line_no}: {msg}")));
        }

        let frames = grouped
            .entry((record.video_id.clone(), record.person_id))
            .or_default();
        if let Some(expected) = frames.values().next().map(Vec::len) {
            if expected != joints.len() {
                return Err(Error::Schema(format!(
                    "line {line_no}: video {} person {} has {} joints, earlier frames have {expected}",
                    record.video_id,
                    record.person_id,
                    joints.len()
                )));
            }
        }
        if frames.insert(record.frame_index, joints).is_some() {
            return Err(Error::Schema(format!(
                "line {line_no}: duplicate record for video {} person {} frame {}",
                record.video_id, record.person_id, record.frame_index
            )));
        }
    }

    Ok(grouped
        .into_iter()
        .map(|((video_id, person_id), frames)| PoseTrack {
            video_id,
            person_id,
            frames: frames
                .into_iter()
                .map(|(frame_index, joints)| PoseFrame {
                    frame_index,
                    joints,
                })
                .collect(),
        })
        .collect())
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &[PoseTrack]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_tracks_to(&mut writer, tracks).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_tracks_to<W: Write>(writer: &mut W, tracks: &[PoseTrack]) -> Result<()> {
    for track in tracks {
        for frame in &track.frames {
            let record = TrackRecord {
                video_id: track.video_id.clone(),
                person_id: track.person_id,
                frame_index: frame.frame_index,
                keypoints: frame
                    .joints
                    .iter()
                    .map(|kp| [kp.x, kp.y, kp.confidence])
                    .collect(),
            };
            serde_json::to_writer(&mut *writer, &record)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<writer>", e))?;
        }
    }
    Ok(())
}

/// Which keypoint fields become tensor channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelLayout {
    /// `(x, y, confidence)`
    #[default]
    XyConfidence,
    /// `(x, y)`
    Xy,
}

impl ChannelLayout {
    pub fn channels(self) -> usize {
        match self {
            ChannelLayout::XyConfidence => 3,
            ChannelLayout::Xy => 2,
        }
    }

    pub fn from_channels(channels: usize) -> Result<Self> {
        match channels {
            3 => Ok(ChannelLayout::XyConfidence),
            2 => Ok(ChannelLayout::Xy),
            other => Err(Error::Config(format!(
                "pose segments support 2 or 3 channels, got {other}"
            ))),
        }
    }
}

/// Transform applied by [`normalize_segment`]: `x' = (x - mean_x) / scale`, same for y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub mean_x: f64,
    pub mean_y: f64,
    pub scale: f64,
}

impl NormRecord {
    pub const IDENTITY: NormRecord = NormRecord {
        mean_x: 0.0,
        mean_y: 0.0,
        scale: 1.0,
    };
}

/// Fixed-length window of one track, shaped `channels × τ × joints`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSegment {
    pub data: Tensor3,
    pub video_id: String,
    pub person_id: i64,
    pub start_frame: i64,
    pub norm_record: NormRecord,
    /// Set when normalization had to clamp the scale.
    pub degenerate: bool,
}

impl PoseSegment {
    pub fn window(&self) -> usize {
        self.data.frames()
    }

    /// Frame indices covered by this segment.
    pub fn frame_range(&self) -> std::ops::Range<i64> {
        self.start_frame..self.start_frame + self.window() as i64
    }
}

/// Cuts a track into `tau`-frame windows taken every `stride` frames.
///
/// Windows never cross a gap in `frame_index`; each contiguous run is windowed
/// independently starting at its first frame.
pub fn segment_track(
    track: &PoseTrack,
    tau: usize,
    stride: usize,
    layout: ChannelLayout,
) -> Result<Vec<PoseSegment>> {
    if tau == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "segment window and stride must be >= 1 (tau={tau}, stride={stride})"
        )));
    }
    let n_joints = track.n_joints();
    let channels = layout.channels();
    let mut segments = Vec::new();

    for run in contiguous_runs(&track.frames) {
        if run.len() < tau {
            continue;
        }
        let mut start = 0;
        while start + tau <= run.len() {
            let mut data = Tensor3::zeros(channels, tau, n_joints);
            for (t, frame) in run[start..start + tau].iter().enumerate() {
                for (n, kp) in frame.joints.iter().enumerate() {
                    data.set(0, t, n, kp.x);
                    data.set(1, t, n, kp.y);
                    if channels == 3 {
                        data.set(2, t, n, kp.confidence);
                    }
                }
            }
            segments.push(PoseSegment {
                data,
                video_id: track.video_id.clone(),
                person_id: track.person_id,
                start_frame: run[start].frame_index,
                norm_record: NormRecord::IDENTITY,
                degenerate: false,
            });
            start += stride;
        }
    }
    Ok(segments)
}

fn contiguous_runs(frames: &[PoseFrame]) -> impl Iterator<Item = &[PoseFrame]> {
    frames.chunk_by(|a, b| b.frame_index == a.frame_index + 1)
}

/// Centers x and y separately and divides both by their pooled standard deviation.
///
/// The confidence channel is left untouched. A spread below [`MIN_SCALE`] is
/// clamped and the segment flagged degenerate.
pub fn normalize_segment(seg: &PoseSegment) -> PoseSegment {
    let xs = seg.data.channel(0);
    let ys = seg.data.channel(1);
    let count = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / count;
    let mean_y = ys.iter().sum::<f64>() / count;
    let sum_sq: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>()
        + ys.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>();
    let std = (sum_sq / (2.0 * count)).sqrt();
    let degenerate = !(std >= MIN_SCALE);
    let scale = if degenerate { MIN_SCALE } else { std };

    let mut data = seg.data.clone();
    for v in data.channel_mut(0) {
        *v = (*v - mean_x) / scale;
    }
    for v in data.channel_mut(1) {
        *v = (*v - mean_y) / scale;
    }

    // Compose with any earlier transform so denormalization recovers raw pixels.
    let prev = seg.norm_record;
    let norm_record = NormRecord {
        mean_x: prev.mean_x + prev.scale * mean_x,
        mean_y: prev.mean_y + prev.scale * mean_y,
        scale: prev.scale * scale,
    };
    PoseSegment {
        data,
        norm_record,
        degenerate: seg.degenerate || degenerate,
        ..seg.clone()
    }
}

/// Inverse of [`normalize_segment`] using the stored record.
pub fn denormalize_segment(seg: &PoseSegment) -> PoseSegment {
    let NormRecord {
        mean_x,
        mean_y,
        scale,
    } = seg.norm_record;
    let mut data = seg.data.clone();
    for v in data.channel_mut(0) {
        *v = *v * scale + mean_x;
    }
    for v in data.channel_mut(1) {
        *v = *v * scale + mean_y;
    }
    PoseSegment {
        data,
        norm_record: NormRecord::IDENTITY,
        ..seg.clone()
    }
}

/// Adds `scale · N(0, 1)` to every x and y coordinate (confidence untouched).
pub fn add_keypoint_noise<R: Rng + ?Sized>(seg: &mut PoseSegment, scale: f64, rng: &mut R) {
    if scale == 0.0 {
        return;
    }
    for c in 0..2 {
        for v in seg.data.channel_mut(c) {
            let z: f64 = rng.sample(StandardNormal);
            *v += scale * z;
        }
    }
}

/// Segments and normalizes every track.
pub fn prepare_segments(
    tracks: &[PoseTrack],
    tau: usize,
    stride: usize,
    layout: ChannelLayout,
) -> Result<Vec<PoseSegment>> {
    let mut out = Vec::new();
    for track in tracks {
        out.extend(
            segment_track(track, tau, stride, layout)?
                .iter()
                .map(normalize_segment),
        );
    }
    Ok(out)
}
