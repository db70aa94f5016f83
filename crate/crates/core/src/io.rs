//! CSV readers and writers for labels, ground-truth regions and scores.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::LossRecord;
use crate::flow::SegmentLabel;
use crate::metrics::{GtRegion, PersonFrameScore, Region};
use crate::scoring::ScoreSeries;

fn read_rows<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        out.push(row.map_err(|e| Error::Parse {
            // header is line 1
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn read_rows_path<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_rows(file)
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

fn write_rows_path<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(file), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameLabelRow {
    video_id: String,
    frame_index: i64,
    label: u8,
}

/// Per-video binary frame labels, indexed from frame 0.
pub type FrameLabels = BTreeMap<String, Vec<bool>>;

pub fn read_frame_labels_from<R: Read>(reader: R) -> Result<FrameLabels> {
    let rows: Vec<FrameLabelRow> = read_rows(reader)?;
    let mut grouped: BTreeMap<String, BTreeMap<i64, bool>> = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let label = match r.label {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("label must be 0 or 1, got {other}"),
                })
            }
        };
        if grouped
            .entry(r.video_id.clone())
            .or_default()
            .insert(r.frame_index, label)
            .is_some()
        {
            return Err(Error::Schema(format!(
                "duplicate label for video {} frame {}",
                r.video_id, r.frame_index
            )));
        }
    }
    grouped
        .into_iter()
        .map(|(video, frames)| {
            let contiguous = frames.keys().copied().eq(0..frames.len() as i64);
            if !contiguous {
                return Err(Error::Schema(format!(
                    "labels of video {video} must cover frames 0..n without gaps"
                )));
            }
            Ok((video, frames.into_values().collect()))
        })
        .collect()
}

pub fn read_frame_labels(path: impl AsRef<Path>) -> Result<FrameLabels> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_frame_labels_from(file)
}

pub fn write_frame_labels(path: impl AsRef<Path>, labels: &FrameLabels) -> Result<()> {
    write_rows_path(
        path.as_ref(),
        labels.iter().flat_map(|(video, l)| {
            l.iter().enumerate().map(move |(f, &v)| FrameLabelRow {
                video_id: video.clone(),
                frame_index: f as i64,
                label: v as u8,
            })
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegionRow {
    video_id: String,
    frame_index: i64,
    track_id: i64,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

pub fn read_gt_regions(path: impl AsRef<Path>) -> Result<Vec<GtRegion>> {
    let rows: Vec<RegionRow> = read_rows_path(path.as_ref())?;
    rows.into_iter()
        .map(|r| {
            let g = GtRegion {
                video_id: r.video_id,
                frame_index: r.frame_index,
                track_id: r.track_id,
                bbox: [r.x_min, r.y_min, r.x_max, r.y_max],
            };
            crate::metrics::validate_bbox(&g.bbox)?;
            Ok(g)
        })
        .collect()
}

pub fn write_gt_regions(path: impl AsRef<Path>, regions: &[GtRegion]) -> Result<()> {
    write_rows_path(
        path.as_ref(),
        regions.iter().map(|g| RegionRow {
            video_id: g.video_id.clone(),
            frame_index: g.frame_index,
            track_id: g.track_id,
            x_min: g.bbox[0],
            y_min: g.bbox[1],
            x_max: g.bbox[2],
            y_max: g.bbox[3],
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreRow {
    video_id: String,
    frame_index: i64,
    score: f64,
}

pub fn write_frame_scores(path: impl AsRef<Path>, series: &[ScoreSeries]) -> Result<()> {
    write_rows_path(
        path.as_ref(),
        series.iter().flat_map(|s| {
            s.frame_scores
                .iter()
                .enumerate()
                .map(move |(f, &v)| ScoreRow {
                    video_id: s.video_id.clone(),
                    frame_index: f as i64,
                    score: v,
                })
        }),
    )
}

/// Frame scores grouped by video. Fill metadata is not stored in the CSV and
/// comes back as `"unknown"`.
pub fn read_frame_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreSeries>> {
    let rows: Vec<ScoreRow> = read_rows_path(path.as_ref())?;
    let mut grouped: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for r in rows {
        if !r.score.is_finite() {
            return Err(Error::Schema(format!(
                "non-finite score for video {} frame {}",
                r.video_id, r.frame_index
            )));
        }
        grouped
            .entry(r.video_id)
            .or_default()
            .push((r.frame_index, r.score));
    }
    grouped
        .into_iter()
        .map(|(video, mut rows)| {
            rows.sort_by_key(|r| r.0);
            if !rows.iter().map(|r| r.0).eq(0..rows.len() as i64) {
                return Err(Error::Schema(format!(
                    "scores of video {video} must cover frames 0..n exactly once"
                )));
            }
            Ok(ScoreSeries {
                video_id: video,
                frame_scores: rows.into_iter().map(|r| r.1).collect(),
                fill: crate::scoring::FillRecord {
                    policy: "unknown".into(),
                    fill_value: f64::NAN,
                    filled_frames: 0,
                },
            })
        })
        .collect()
}

pub fn write_person_scores(path: impl AsRef<Path>, scores: &[PersonFrameScore]) -> Result<()> {
    write_rows_path(path.as_ref(), scores)
}

pub fn read_person_scores(path: impl AsRef<Path>) -> Result<Vec<PersonFrameScore>> {
    read_rows_path(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentKey {
    pub video_id: String,
    pub person_id: i64,
    pub start_frame: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentLabelRow {
    video_id: String,
    person_id: i64,
    start_frame: i64,
    label: u8,
}

pub fn read_segment_labels(path: impl AsRef<Path>) -> Result<BTreeMap<SegmentKey, SegmentLabel>> {
    let rows: Vec<SegmentLabelRow> = read_rows_path(path.as_ref())?;
    let mut out = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let label = match r.label {
            0 => SegmentLabel::Normal,
            1 => SegmentLabel::Abnormal,
            other => {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("label must be 0 or 1, got {other}"),
                })
            }
        };
        let key = SegmentKey {
            video_id: r.video_id,
            person_id: r.person_id,
            start_frame: r.start_frame,
        };
        if out.insert(key.clone(), label).is_some() {
            return Err(Error::Schema(format!("duplicate segment label {key:?}")));
        }
    }
    Ok(out)
}

pub fn write_segment_labels(
    path: impl AsRef<Path>,
    labels: &BTreeMap<SegmentKey, SegmentLabel>,
) -> Result<()> {
    write_rows_path(
        path.as_ref(),
        labels.iter().map(|(k, l)| SegmentLabelRow {
            video_id: k.video_id.clone(),
            person_id: k.person_id,
            start_frame: k.start_frame,
            label: (*l == SegmentLabel::Abnormal) as u8,
        }),
    )
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    write_rows_path(path.as_ref(), history)
}

pub fn read_loss_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    read_rows_path(path.as_ref())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectionRow {
    video_id: String,
    frame_index: i64,
    person_id: i64,
    log_prob: f64,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// Person-frame detections with their keypoint boxes. The file stores the
/// log-likelihood; [`Region::score`] is its negation.
pub fn write_detections(path: impl AsRef<Path>, regions: &[Region]) -> Result<()> {
    write_rows_path(
        path.as_ref(),
        regions.iter().map(|r| DetectionRow {
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            person_id: r.person_id,
            log_prob: -r.score,
            x_min: r.bbox[0],
            y_min: r.bbox[1],
            x_max: r.bbox[2],
            y_max: r.bbox[3],
        }),
    )
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Region>> {
    let rows: Vec<DetectionRow> = read_rows_path(path.as_ref())?;
    rows.into_iter()
        .map(|r| {
            let region = Region {
                video_id: r.video_id,
                frame_index: r.frame_index,
                bbox: [r.x_min, r.y_min, r.x_max, r.y_max],
                score: -r.log_prob,
                person_id: r.person_id,
            };
            crate::metrics::validate_bbox(&region.bbox)?;
            Ok(region)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_labels_parse_and_validate() {
        let text = "video_id,frame_index,label\nb,1,1\nb,0,0\na,0,1\n";
        let l = read_frame_labels_from(text.as_bytes()).unwrap();
        assert_eq!(l["b"], vec![false, true]);
        assert_eq!(l["a"], vec![true]);

        let gap = "video_id,frame_index,label\na,0,0\na,2,1\n";
        assert!(matches!(
            read_frame_labels_from(gap.as_bytes()),
            Err(Error::Schema(_))
        ));
        let bad = "video_id,frame_index,label\na,0,0\na,1,2\n";
        assert!(matches!(
            read_frame_labels_from(bad.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let labels = FrameLabels::from([("v".into(), vec![false, true, true])]);
        let p = dir.path().join("labels.csv");
        write_frame_labels(&p, &labels).unwrap();
        assert_eq!(read_frame_labels(&p).unwrap(), labels);

        let regions = vec![GtRegion {
            video_id: "v".into(),
            frame_index: 4,
            track_id: 1,
            bbox: [1.5, 2.0, 30.25, 80.0],
        }];
        let p = dir.path().join("regions.csv");
        write_gt_regions(&p, &regions).unwrap();
        assert_eq!(read_gt_regions(&p).unwrap(), regions);

        let seg = BTreeMap::from([(
            SegmentKey {
                video_id: "v".into(),
                person_id: 3,
                start_frame: 10,
            },
            SegmentLabel::Abnormal,
        )]);
        let p = dir.path().join("seg.csv");
        write_segment_labels(&p, &seg).unwrap();
        assert_eq!(read_segment_labels(&p).unwrap(), seg);

        let ps = vec![PersonFrameScore {
            video_id: "v".into(),
            person_id: 0,
            frame_index: 2,
            log_prob: -123.456789012345,
        }];
        let p = dir.path().join("persons.csv");
        write_person_scores(&p, &ps).unwrap();
        assert_eq!(read_person_scores(&p).unwrap(), ps);
    }

    #[test]
    fn frame_scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = ScoreSeries {
            video_id: "v".into(),
            frame_scores: vec![-1.25, -3.0e-7, -812.0625],
            fill: crate::scoring::FillRecord {
                policy: "video_max".into(),
                fill_value: -1.25,
                filled_frames: 1,
            },
        };
        let p = dir.path().join("scores.csv");
        write_frame_scores(&p, std::slice::from_ref(&s)).unwrap();
        let back = read_frame_scores(&p).unwrap();
        assert_eq!(back[0].frame_scores, s.frame_scores);
    }
}
