//! Deterministic synthetic walking data with labeled motion anomalies.
//!
//! Each person is a 17-joint template that walks horizontally at a constant speed
//! with sinusoidal arm and leg swing. Anomalies are contiguous windows in which one
//! person's dynamics change. Only odd-indexed videos receive anomalies, so the
//! even-indexed videos form a normal-only training split.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::COCO17_JOINTS;
use crate::ingest::{keypoint_bbox, write_tracks, Keypoint, PoseFrame, PoseTrack};
use crate::io::{write_frame_labels, write_gt_regions, FrameLabels};
use crate::metrics::GtRegion;

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const LABELS_FILE: &str = "labels.csv";
pub const REGIONS_FILE: &str = "regions.csv";
pub const GT_TRACKS_FILE: &str = "gt_tracks.csv";

/// Template joint offsets from the hip center, in units of body height (y down).
const TEMPLATE: [(f64, f64); COCO17_JOINTS] = [
    (0.0, -0.45),
    (-0.02, -0.47),
    (0.02, -0.47),
    (-0.04, -0.46),
    (0.04, -0.46),
    (-0.10, -0.32),
    (0.10, -0.32),
    (-0.13, -0.18),
    (0.13, -0.18),
    (-0.14, -0.05),
    (0.14, -0.05),
    (-0.07, 0.0),
    (0.07, 0.0),
    (-0.07, 0.25),
    (0.07, 0.25),
    (-0.07, 0.5),
    (0.07, 0.5),
];

/// Joints 0..=10 (head, shoulders, arms).
const UPPER_BODY: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    SpeedBurst,
    Collapse,
    Jitter,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 3] = [Self::SpeedBurst, Self::Collapse, Self::Jitter];
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SpeedBurst => "speed_burst",
            Self::Collapse => "collapse",
            Self::Jitter => "jitter",
        })
    }
}

impl FromStr for AnomalyType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speed_burst" => Ok(Self::SpeedBurst),
            "collapse" => Ok(Self::Collapse),
            "jitter" => Ok(Self::Jitter),
            other => Err(Error::Config(format!("unknown anomaly type '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub persons_per_video: usize,
    pub n_joints: usize,
    pub anomaly_types: Vec<AnomalyType>,
    /// Target fraction of anomalous frames over the whole dataset.
    pub anomaly_rate: f64,
    /// Maximum length of one anomaly window in frames.
    pub anomaly_window: usize,
    /// Keypoint noise standard deviation in pixels.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 20,
            frames_per_video: 300,
            persons_per_video: 2,
            n_joints: COCO17_JOINTS,
            anomaly_types: AnomalyType::ALL.to_vec(),
            anomaly_rate: 0.1,
            anomaly_window: 60,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.frames_per_video == 0 || self.persons_per_video == 0 {
            return bad("n_videos, frames_per_video and persons_per_video must be >= 1".into());
        }
        if self.n_joints != COCO17_JOINTS {
            return bad(format!(
                "the generator only has a {COCO17_JOINTS}-joint layout, got n_joints={}",
                self.n_joints
            ));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!(
                "anomaly_rate must be in [0, 1], got {}",
                self.anomaly_rate
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            ));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_types.is_empty() {
            return bad("anomaly_rate > 0 needs at least one anomaly type".into());
        }
        if self.anomaly_window == 0 {
            return bad("anomaly_window must be >= 1".into());
        }
        Ok(())
    }

    /// Whether video `index` may contain anomalies.
    pub fn is_anomalous_video(&self, index: usize) -> bool {
        if self.n_videos == 1 {
            true
        } else {
            index % 2 == 1
        }
    }

    pub fn video_id(index: usize) -> String {
        format!("video_{index:03}")
    }
}

/// Motion parameters of one synthetic person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonParams {
    pub height: f64,
    /// Pixels per frame; the sign is the walking direction.
    pub velocity: f64,
    pub start_x: f64,
    pub ground_y: f64,
    pub phase: f64,
    /// Gait phase advance per frame.
    pub phase_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyWindow {
    pub video_id: String,
    pub track_id: i64,
    pub person_id: i64,
    pub start_frame: i64,
    /// Exclusive.
    pub end_frame: i64,
    pub anomaly_type: AnomalyType,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub tracks: Vec<PoseTrack>,
    pub labels: FrameLabels,
    pub regions: Vec<GtRegion>,
    pub windows: Vec<AnomalyWindow>,
    /// Indexed by `(video_id, person_id)`.
    pub persons: BTreeMap<(String, i64), PersonParams>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let n_anomalous = (0..cfg.n_videos)
        .filter(|&i| cfg.is_anomalous_video(i))
        .count();
    let total_frames = (cfg.n_videos * cfg.frames_per_video) as f64;
    let per_video = if n_anomalous == 0 {
        0
    } else {
        ((cfg.anomaly_rate * total_frames / n_anomalous as f64).round() as usize)
            .min(cfg.frames_per_video)
    };

    let videos: Vec<VideoData> = (0..cfg.n_videos)
        .into_par_iter()
        .map(|i| {
            let budget = if cfg.is_anomalous_video(i) {
                per_video
            } else {
                0
            };
            generate_video(cfg, i, budget)
        })
        .collect();

    let mut out = SynthDataset {
        config: cfg.clone(),
        tracks: Vec::new(),
        labels: FrameLabels::new(),
        regions: Vec::new(),
        windows: Vec::new(),
        persons: BTreeMap::new(),
    };
    for v in videos {
        out.labels.insert(v.video_id.clone(), v.labels);
        out.tracks.extend(v.tracks);
        out.regions.extend(v.regions);
        out.windows.extend(v.windows);
        out.persons.extend(v.persons);
    }
    Ok(out)
}

struct VideoData {
    video_id: String,
    tracks: Vec<PoseTrack>,
    labels: Vec<bool>,
    regions: Vec<GtRegion>,
    windows: Vec<AnomalyWindow>,
    persons: Vec<((String, i64), PersonParams)>,
}

fn sample_person(rng: &mut ChaCha8Rng) -> PersonParams {
    let height = rng.random_range(80.0..140.0);
    // 0.8 to 2 px/frame, proportional to body size
    let speed = height * rng.random_range(0.010..0.014);
    let direction = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    PersonParams {
        height,
        velocity: direction * speed,
        start_x: rng.random_range(100.0..540.0),
        ground_y: rng.random_range(250.0..450.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        // about one stride per 0.8 body heights travelled
        phase_rate: std::f64::consts::TAU * speed / (0.8 * height),
    }
}

/// Split `budget` frames into windows of at most `max_len`, placed without
/// overlap at random positions in `0..frames`.
fn place_windows(
    rng: &mut ChaCha8Rng,
    budget: usize,
    max_len: usize,
    frames: usize,
) -> Vec<(usize, usize)> {
    if budget == 0 {
        return Vec::new();
    }
    let n = budget.div_ceil(max_len);
    let lens: Vec<usize> = (0..n)
        .map(|k| budget / n + usize::from(k < budget % n))
        .collect();
    // Distribute the free frames into n+1 gaps.
    let free = frames - budget;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (len, cut) in lens.into_iter().zip(cuts) {
        pos += cut - prev_cut;
        prev_cut = cut;
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

fn generate_video(cfg: &SynthConfig, index: usize, budget: usize) -> VideoData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let video_id = SynthConfig::video_id(index);
    let n_frames = cfg.frames_per_video;
    let persons: Vec<PersonParams> = (0..cfg.persons_per_video)
        .map(|_| sample_person(&mut rng))
        .collect();

    let spans = place_windows(&mut rng, budget, cfg.anomaly_window, n_frames);
    let mut windows = Vec::with_capacity(spans.len());
    for (k, (start, end)) in spans.into_iter().enumerate() {
        let person = rng.random_range(0..persons.len());
        let kind = *cfg
            .anomaly_types
            .choose(&mut rng)
            .expect("validated non-empty");
        windows.push(AnomalyWindow {
            video_id: video_id.clone(),
            track_id: k as i64,
            person_id: person as i64,
            start_frame: start as i64,
            end_frame: end as i64,
            anomaly_type: kind,
        });
    }

    let noise = Normal::new(0.0, cfg.noise_scale).expect("validated noise scale");
    let jitter = Normal::new(0.0, 10.0 * cfg.noise_scale.max(1.0)).expect("finite");
    let mut tracks = Vec::with_capacity(persons.len());
    for (pid, p) in persons.iter().enumerate() {
        let mut x = p.start_x;
        let mut phase = p.phase;
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let active = windows.iter().find(|w| {
                w.person_id == pid as i64 && (w.start_frame..w.end_frame).contains(&(t as i64))
            });
            let mut pose = body_pose(p, x, phase);
            match active.map(|w| (w, w.anomaly_type)) {
                Some((w, AnomalyType::Collapse)) => {
                    // contract over the first quarter of the window, then hold
                    let ramp = ((w.end_frame - w.start_frame) as f64 / 4.0).max(1.0);
                    let progress = ((t as i64 - w.start_frame) as f64 / ramp).min(1.0);
                    let factor = 1.0 - 0.6 * progress;
                    let hip_y = p.ground_y - 0.5 * p.height;
                    for joint in pose.iter_mut().take(UPPER_BODY) {
                        joint.1 = hip_y + (joint.1 - hip_y) * factor;
                    }
                }
                Some((_, AnomalyType::Jitter)) => {
                    for joint in pose.iter_mut() {
                        joint.0 += jitter.sample(&mut rng);
                        joint.1 += jitter.sample(&mut rng);
                    }
                }
                _ => {}
            }
            let joints = pose
                .iter()
                .map(|&(jx, jy)| {
                    let (nx, ny) = if cfg.noise_scale > 0.0 {
                        (noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    Keypoint::new(jx + nx, jy + ny, rng.random_range(0.6..=1.0))
                })
                .collect();
            frames.push(PoseFrame {
                frame_index: t as i64,
                joints,
            });

            let burst = matches!(active, Some(w) if w.anomaly_type == AnomalyType::SpeedBurst);
            let mult = if burst { 3.0 } else { 1.0 };
            x += p.velocity * mult;
            phase += p.phase_rate * mult;
        }
        tracks.push(PoseTrack {
            video_id: video_id.clone(),
            person_id: pid as i64,
            frames,
        });
    }

    let mut labels = vec![false; n_frames];
    let mut regions = Vec::new();
    for w in &windows {
        let track = &tracks[w.person_id as usize];
        for f in w.start_frame..w.end_frame {
            labels[f as usize] = true;
            let bbox = keypoint_bbox(&track.frames[f as usize].joints).expect("confident joints");
            regions.push(GtRegion {
                video_id: video_id.clone(),
                frame_index: f,
                track_id: w.track_id,
                bbox,
            });
        }
    }
    regions.sort_by_key(|r| (r.frame_index, r.track_id));

    VideoData {
        persons: persons
            .iter()
            .enumerate()
            .map(|(pid, p)| ((video_id.clone(), pid as i64), *p))
            .collect(),
        video_id,
        tracks,
        labels,
        regions,
        windows,
    }
}

/// Noise-free joint positions at horizontal position `x` and gait `phase`.
fn body_pose(p: &PersonParams, x: f64, phase: f64) -> [(f64, f64); COCO17_JOINTS] {
    let h = p.height;
    let dir = p.velocity.signum();
    let s = phase.sin();
    let hip_y = p.ground_y - 0.5 * h + 0.01 * h * (2.0 * phase).cos();
    let mut pose = [(0.0, 0.0); COCO17_JOINTS];
    for (j, &(ox, oy)) in TEMPLATE.iter().enumerate() {
        pose[j] = (x + ox * h, hip_y + oy * h);
    }
    // left limbs swing with +sin, right with -sin; arms oppose legs
    let swing = |side: f64, amp: f64| dir * side * amp * h * s;
    pose[7].0 -= swing(1.0, 0.04);
    pose[8].0 -= swing(-1.0, 0.04);
    pose[9].0 -= swing(1.0, 0.08);
    pose[10].0 -= swing(-1.0, 0.08);
    pose[13].0 += swing(1.0, 0.06);
    pose[14].0 += swing(-1.0, 0.06);
    pose[15].0 += swing(1.0, 0.12);
    pose[16].0 += swing(-1.0, 0.12);
    pose[15].1 -= 0.04 * h * s.max(0.0);
    pose[16].1 -= 0.04 * h * (-s).max(0.0);
    pose
}

#[derive(Debug, Serialize)]
struct GtTrackRow<'a> {
    video_id: &'a str,
    track_id: i64,
    person_id: i64,
    start_frame: i64,
    end_frame: i64,
    anomaly_type: String,
}

impl SynthDataset {
    /// Writes the four dataset files into `dir` and returns their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        let paths: Vec<_> = [TRACKS_FILE, LABELS_FILE, REGIONS_FILE, GT_TRACKS_FILE]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        write_tracks(&paths[0], &self.tracks)?;
        write_frame_labels(&paths[1], &self.labels)?;
        write_gt_regions(&paths[2], &self.regions)?;

        let file = std::fs::File::create(&paths[3]).map_err(|e| Error::io(&paths[3], e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        for win in &self.windows {
            w.serialize(GtTrackRow {
                video_id: &win.video_id,
                track_id: win.track_id,
                person_id: win.person_id,
                start_frame: win.start_frame,
                // inclusive on disk
                end_frame: win.end_frame - 1,
                anomaly_type: win.anomaly_type.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(&paths[3], e))?;
        Ok(paths)
    }

    pub fn anomalous_fraction(&self) -> f64 {
        let total: usize = self.labels.values().map(Vec::len).sum();
        let pos: usize = self.labels.values().flatten().filter(|&&l| l).count();
        pos as f64 / total as f64
    }
}
