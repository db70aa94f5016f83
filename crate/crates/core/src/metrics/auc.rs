use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scoring::ScoreSeries;

/// ROC AUC of `anomaly` against binary `labels` via the Mann-Whitney rank statistic.
/// Ties contribute one half.
pub fn roc_auc(anomaly: &[f64], labels: &[bool]) -> Result<f64> {
    if anomaly.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            anomaly.len(),
            labels.len()
        )));
    }
    if let Some(i) = anomaly.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("auc", format!("score {i} is not finite")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} anomalous, {n_neg} normal frames)"
        )));
    }

    let mut order: Vec<usize> = (0..anomaly.len()).collect();
    order.sort_by(|&a, &b| anomaly[a].total_cmp(&anomaly[b]));

    // Twice the rank sum of positives keeps everything integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && anomaly[order[j + 1]] == anomaly[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the average (i+j+2)/2
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let p = n_pos as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Frame AUC over every video concatenated. Stored scores are log-likelihoods, so
/// the anomaly strength is their negation.
pub fn micro_auc(series: &[ScoreSeries], labels: &BTreeMap<String, Vec<bool>>) -> Result<f64> {
    let (scores, flat_labels) = align_frames(series, labels)?;
    let anomaly: Vec<f64> = scores.iter().map(|s| -s).collect();
    roc_auc(&anomaly, &flat_labels)
}

/// Concatenate scores and labels video by video, in label order. Every labeled
/// video must have a series of the same length.
pub fn align_frames(
    series: &[ScoreSeries],
    labels: &BTreeMap<String, Vec<bool>>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let by_video: BTreeMap<&str, &ScoreSeries> =
        series.iter().map(|s| (s.video_id.as_str(), s)).collect();
    let mut problems = Vec::new();
    let mut scores = Vec::new();
    let mut flat = Vec::new();
    for (video, lab) in labels {
        match by_video.get(video.as_str()) {
            None => problems.push(format!("{video}: no scores")),
            Some(s) if s.frame_scores.len() != lab.len() => problems.push(format!(
                "{video}: {} scored frames vs {} labeled",
                s.frame_scores.len(),
                lab.len()
            )),
            Some(s) => {
                scores.extend_from_slice(&s.frame_scores);
                flat.extend_from_slice(lab);
            }
        }
    }
    if problems.is_empty() {
        Ok((scores, flat))
    } else {
        Err(Error::Schema(format!(
            "scores and labels are misaligned: {}",
            problems.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied() {
        assert_eq!(
            roc_auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[4.0; 6], &[true, false, true, false, false, true]).unwrap(),
            0.5
        );
    }

    #[test]
    fn worked_example_in_log_likelihood_orientation() {
        let s = ScoreSeries {
            video_id: "a".into(),
            frame_scores: vec![-1.0, -3.0, -2.0, -4.0],
            fill: crate::scoring::FillRecord {
                policy: "video_max".into(),
                fill_value: -1.0,
                filled_frames: 0,
            },
        };
        let labels = BTreeMap::from([("a".to_string(), vec![false, true, false, true])]);
        assert_eq!(micro_auc(&[s], &labels).unwrap(), 1.0);
    }

    #[test]
    fn partial_ties() {
        // pairs: (2 vs 1)=1, (2 vs 2)=.5, (3 vs 1)=1, (3 vs 2)=1 -> 3.5/4
        assert_eq!(
            roc_auc(&[1.0, 2.0, 2.0, 3.0], &[false, false, true, true]).unwrap(),
            0.875
        );
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            roc_auc(&[1.0, 2.0], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn misalignment_lists_videos() {
        let labels = BTreeMap::from([("missing".to_string(), vec![true])]);
        let err = micro_auc(&[], &labels).unwrap_err().to_string();
        assert!(err.contains("missing"));
    }
}
