use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use stgnf::flow::Checkpoint;
use stgnf::ingest::{
    add_keypoint_noise, parse_tracks, prepare_segments, ChannelLayout, PoseSegment, PoseTrack,
};
use stgnf::io::{self, FrameLabels, SegmentKey};
use stgnf::metrics::{self, MetricReport, MetricSettings, PersonFrameScore};
use stgnf::scoring::{self, ScoreDiagnostics, ScoreSeries, SegmentScore};
use stgnf::synth;
use stgnf::train::{self, Setting};
use stgnf::{FlowModel, SegmentLabel, SkeletonGraph, Tensor3};

use crate::args::{EvalArgs, GenArgs, InspectArgs, ScoreArgs, Split, TrainArgs};
use crate::config::{resolve_gen, resolve_train};
use crate::error::{usage_msg, CliError, CliResult};
use crate::output::{sibling, RunManifest, Staging};

fn keep_video(split: Split, labels: Option<&FrameLabels>, video: &str) -> CliResult<bool> {
    let Some(labels) = labels else {
        return match split {
            Split::All => Ok(true),
            _ => Err(usage_msg("--split needs --labels")),
        };
    };
    let anomalous = labels.get(video).is_some_and(|l| l.iter().any(|&v| v));
    Ok(match split {
        Split::All => true,
        Split::Normal => labels.contains_key(video) && !anomalous,
        Split::Anomalous => anomalous,
    })
}

fn filter_tracks(
    tracks: Vec<PoseTrack>,
    split: Split,
    labels: Option<&FrameLabels>,
) -> CliResult<Vec<PoseTrack>> {
    let mut out = Vec::with_capacity(tracks.len());
    for t in tracks {
        if keep_video(split, labels, &t.video_id)? {
            out.push(t);
        }
    }
    Ok(out)
}

fn filter_labels(labels: FrameLabels, split: Split) -> CliResult<FrameLabels> {
    let keep: BTreeSet<String> = labels
        .keys()
        .filter(|v| keep_video(split, Some(&labels), v).unwrap_or(false))
        .cloned()
        .collect();
    Ok(labels
        .into_iter()
        .filter(|(v, _)| keep.contains(v))
        .collect())
}

pub fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = resolve_gen(args)?;
    let mut staging = Staging::for_dir(&args.out)?;
    let data = synth::generate(&cfg)?;

    let names = [
        synth::TRACKS_FILE,
        synth::LABELS_FILE,
        synth::REGIONS_FILE,
        synth::GT_TRACKS_FILE,
    ];
    let staged: Vec<_> = names
        .iter()
        .map(|n| staging.stage(&args.out.join(n)))
        .collect::<CliResult<_>>()?;
    let tmp_dir = tempfile::tempdir_in(staged[0].parent().unwrap_or(Path::new(".")))
        .map_err(CliError::runtime)?;
    let written = data.write(tmp_dir.path())?;
    for (src, dst) in written.iter().zip(&staged) {
        std::fs::copy(src, dst).map_err(CliError::runtime)?;
    }

    let manifest = RunManifest::build(
        "gen",
        serde_json::to_value(&cfg).map_err(CliError::runtime)?,
        Some(cfg.seed),
        &[],
        &staging,
        started,
    )?;
    let manifest_path = args.out.join("manifest.json");
    staging.commit(Some((&manifest_path, &manifest)))?;
    log::info!(
        "wrote {} videos ({:.1}% anomalous frames) to {}",
        cfg.n_videos,
        100.0 * data.anomalous_fraction(),
        args.out.display()
    );
    Ok(())
}

fn check_joint_counts(tracks: &[PoseTrack], expected: Option<usize>) -> CliResult<usize> {
    let mut counts = tracks
        .iter()
        .map(PoseTrack::n_joints)
        .collect::<BTreeSet<_>>();
    if counts.len() > 1 {
        return Err(usage_msg(format!(
            "tracks disagree on joint count: {counts:?}"
        )));
    }
    let n = counts
        .pop_first()
        .ok_or_else(|| usage_msg("no pose tracks selected"))?;
    if let Some(e) = expected {
        if e != n {
            return Err(usage_msg(format!(
                "checkpoint expects {e} joints but the tracks have {n}"
            )));
        }
    }
    Ok(n)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut resolved = resolve_train(args)?;
    let supervised = resolved.train.setting == Setting::Supervised;
    if supervised && args.segment_labels.is_none() && args.regions.is_none() {
        return Err(usage_msg(
            "supervised training needs --segment-labels or --regions",
        ));
    }

    let frame_labels = args
        .labels
        .as_deref()
        .map(io::read_frame_labels)
        .transpose()?;
    let tracks = filter_tracks(
        parse_tracks(&args.tracks)?,
        args.split,
        frame_labels.as_ref(),
    )?;
    resolved.flow.n_joints = check_joint_counts(&tracks, None)?;
    resolved.flow.validate()?;

    let layout = ChannelLayout::from_channels(resolved.flow.channels)?;
    let all = prepare_segments(&tracks, resolved.flow.seg_len, resolved.stride, layout)?;
    let n_degenerate = all.iter().filter(|s| s.degenerate).count();
    let segments: Vec<PoseSegment> = all.into_iter().filter(|s| !s.degenerate).collect();
    if n_degenerate > 0 {
        log::warn!("dropped {n_degenerate} degenerate segments");
    }
    if segments.is_empty() {
        return Err(usage_msg(format!(
            "no training segments: tracks shorter than tau={}?",
            resolved.flow.seg_len
        )));
    }

    let seg_labels: Option<Vec<SegmentLabel>> = if supervised {
        Some(if let Some(path) = &args.segment_labels {
            let map = io::read_segment_labels(path)?;
            segments
                .iter()
                .map(|s| {
                    let key = SegmentKey {
                        video_id: s.video_id.clone(),
                        person_id: s.person_id,
                        start_frame: s.start_frame,
                    };
                    map.get(&key).copied().unwrap_or(SegmentLabel::Normal)
                })
                .collect()
        } else {
            let regions = io::read_gt_regions(args.regions.as_ref().expect("checked above"))?;
            train::segment_labels_from_regions(
                &segments,
                &tracks,
                &regions,
                0.5,
                args.label_min_fraction,
            )
        })
    } else {
        None
    };
    let n_abnormal = seg_labels.as_ref().map_or(0, |l| {
        l.iter().filter(|&&l| l == SegmentLabel::Abnormal).count()
    });
    log::info!(
        "training on {} segments ({n_abnormal} abnormal) from {} tracks",
        segments.len(),
        tracks.len()
    );

    let graph = match &args.bones {
        Some(p) => {
            SkeletonGraph::with_bones(resolved.flow.n_joints, &SkeletonGraph::load_bones(p)?)?
        }
        None => SkeletonGraph::build(resolved.flow.adjacency, resolved.flow.n_joints)?,
    };
    if graph.mode() != resolved.flow.adjacency {
        return Err(usage_msg("--bones requires the anatomical adjacency"));
    }
    let mut model = FlowModel::new(resolved.flow.clone(), graph, resolved.train.prior())?;
    let data: Vec<&Tensor3> = segments.iter().map(|s| &s.data).collect();

    let config_value = serde_json::to_value(&resolved).map_err(CliError::runtime)?;
    let mut inputs: Vec<&Path> = vec![&args.tracks];
    inputs.extend(
        [
            &args.labels,
            &args.segment_labels,
            &args.regions,
            &args.config,
            &args.bones,
        ]
        .into_iter()
        .flatten()
        .map(|p| p.as_path()),
    );

    let report = match train::train(&mut model, &data, seg_labels.as_deref(), &resolved.train) {
        Ok(r) => r,
        Err(abort) => {
            let mut staging = Staging::new();
            let ck_path = sibling(&args.out, "last_good.json");
            let diag_path = sibling(&args.out, "abort.json");
            let mut ck = *abort.last_good.clone();
            ck.train_config = serde_json::to_value(&resolved.train).ok();
            ck.loss_history = abort.report.loss_history.clone();
            ck.epoch_losses = abort.report.epoch_losses.clone();
            staging.write_bytes(&ck_path, ck.to_json()?.as_bytes())?;
            staging.write_json(
                &diag_path,
                &json!({
                    "error": abort.error.to_string(),
                    "epoch": abort.epoch,
                    "step": abort.step,
                    "last_good_checkpoint": ck_path.display().to_string(),
                }),
            )?;
            staging.commit(None)?;
            return Err(CliError::runtime(anyhow::anyhow!(
                "{abort}; diagnostics in {}",
                diag_path.display()
            )));
        }
    };

    let ck = train::checkpoint_with_report(&model, &resolved.train, &report);
    let mut staging = Staging::new();
    staging.write_bytes(&args.out, ck.to_json()?.as_bytes())?;
    let loss_path = sibling(&args.out, "loss.csv");
    let tmp = staging.stage(&loss_path)?;
    io::write_loss_history(&tmp, &report.loss_history)?;
    let manifest = RunManifest::build(
        "train",
        config_value,
        Some(resolved.train.seed),
        &inputs,
        &staging,
        started,
    )?;
    staging.commit(Some((&sibling(&args.out, "manifest.json"), &manifest)))?;
    if let Some(last) = report.epoch_losses.last() {
        log::info!("final epoch loss {last:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    segments: ScoreDiagnostics,
    smooth_sigma: f64,
    noise_scale: f64,
    noise_seed: u64,
    stride: usize,
    fills: BTreeMap<String, scoring::FillRecord>,
}

/// Scored frame series (one per video, in video order) and the per-person frame scores.
pub struct ScoreOutput {
    pub series: Vec<ScoreSeries>,
    pub persons: Vec<PersonFrameScore>,
    pub diagnostics: ScoreDiagnostics,
}

/// Scores `tracks` with `model`. `video_lengths` fixes the set of videos and their
/// frame counts.
pub fn score_tracks(
    model: &FlowModel,
    tracks: &[PoseTrack],
    video_lengths: &BTreeMap<String, usize>,
    stride: usize,
    smooth_sigma: f64,
    noise: Option<(f64, u64)>,
) -> stgnf::Result<ScoreOutput> {
    let cfg = model.config();
    let layout = ChannelLayout::from_channels(cfg.channels)?;
    let mut segments = prepare_segments(tracks, cfg.seg_len, stride, layout)?;
    if let Some((scale, seed)) = noise.filter(|(s, _)| *s > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in &mut segments {
            add_keypoint_noise(seg, scale, &mut rng);
        }
    }
    let scored = scoring::score_segments(model, &segments);

    let mut by_video: BTreeMap<&str, Vec<SegmentScore>> = BTreeMap::new();
    for s in &scored.scores {
        by_video
            .entry(s.video_id.as_str())
            .or_default()
            .push(s.clone());
    }
    let mut series = Vec::with_capacity(video_lengths.len());
    let mut persons = Vec::new();
    for (video, &len) in video_lengths {
        let scores = by_video.remove(video.as_str()).unwrap_or_default();
        let s = scoring::aggregate_frames(video, &scores, len)?;
        series.push(scoring::smooth_series(&s, smooth_sigma)?);
        persons.extend(scoring::person_frame_scores(&scores).into_iter().map(
            |((person_id, frame_index), log_prob)| PersonFrameScore {
                video_id: video.clone(),
                person_id,
                frame_index,
                log_prob,
            },
        ));
    }
    Ok(ScoreOutput {
        series,
        persons,
        diagnostics: scored.diagnostics,
    })
}

pub fn cmd_score(args: &ScoreArgs) -> CliResult<()> {
    let started = Instant::now();
    if !(args.smooth_sigma >= 0.0) {
        return Err(usage_msg("--smooth-sigma must be >= 0"));
    }
    if !(args.noise_scale >= 0.0) {
        return Err(usage_msg("--noise-scale must be >= 0"));
    }
    let model = Checkpoint::load(&args.checkpoint)?.to_model()?;
    let labels = args
        .labels
        .as_deref()
        .map(io::read_frame_labels)
        .transpose()?;
    let tracks = filter_tracks(parse_tracks(&args.tracks)?, args.split, labels.as_ref())?;
    check_joint_counts(&tracks, Some(model.config().n_joints))?;

    let video_lengths: BTreeMap<String, usize> = match &labels {
        Some(l) => filter_labels(l.clone(), args.split)?
            .into_iter()
            .map(|(v, lab)| (v, lab.len()))
            .collect(),
        None => {
            let mut m = BTreeMap::new();
            for t in &tracks {
                let last = t.frames.last().map_or(0, |f| f.frame_index + 1).max(0) as usize;
                let e = m.entry(t.video_id.clone()).or_insert(0);
                *e = (*e).max(last);
            }
            m
        }
    };
    let tracks: Vec<PoseTrack> = tracks
        .into_iter()
        .filter(|t| video_lengths.contains_key(&t.video_id))
        .collect();

    let out = score_tracks(
        &model,
        &tracks,
        &video_lengths,
        args.stride,
        args.smooth_sigma,
        Some((args.noise_scale, args.noise_seed)),
    )?;
    let detections = metrics::regions_from_scores(&tracks, &out.persons, f64::NEG_INFINITY);

    let report = ScoreReport {
        segments: out.diagnostics.clone(),
        smooth_sigma: args.smooth_sigma,
        noise_scale: args.noise_scale,
        noise_seed: args.noise_seed,
        stride: args.stride,
        fills: out
            .series
            .iter()
            .map(|s| (s.video_id.clone(), s.fill.clone()))
            .collect(),
    };

    let mut staging = Staging::new();
    let tmp = staging.stage(&args.out)?;
    io::write_frame_scores(&tmp, &out.series)?;
    let tmp = staging.stage(&sibling(&args.out, "detections.csv"))?;
    io::write_detections(&tmp, &detections)?;
    staging.write_json(&sibling(&args.out, "diagnostics.json"), &report)?;

    let mut inputs: Vec<&Path> = vec![&args.checkpoint, &args.tracks];
    inputs.extend(args.labels.as_deref());
    let manifest = RunManifest::build(
        "score",
        json!({
            "stride": args.stride,
            "smooth_sigma": args.smooth_sigma,
            "noise_scale": args.noise_scale,
            "noise_seed": args.noise_seed,
            "split": args.split,
        }),
        Some(args.noise_seed),
        &inputs,
        &staging,
        started,
    )?;
    staging.commit(Some((&sibling(&args.out, "manifest.json"), &manifest)))?;
    log::info!(
        "scored {} segments ({} degenerate, {} numeric failures skipped)",
        out.diagnostics.scored,
        out.diagnostics.skipped_degenerate,
        out.diagnostics.skipped_numeric
    );
    Ok(())
}

pub fn evaluate(
    series: &[ScoreSeries],
    labels: &FrameLabels,
    detection_inputs: Option<(&[metrics::Region], &[metrics::GtRegion])>,
    settings: MetricSettings,
) -> stgnf::Result<MetricReport> {
    let auc = metrics::micro_auc(series, labels)?;
    let n_frames: usize = labels.values().map(Vec::len).sum();
    let mut report = MetricReport {
        auc,
        rbdc: None,
        tbdc: None,
        n_frames,
        n_gt_regions: 0,
        n_gt_tracks: 0,
        settings,
    };
    if let Some((detections, gt)) = detection_inputs {
        let dets: Vec<_> = detections
            .iter()
            .filter(|d| labels.contains_key(&d.video_id))
            .cloned()
            .collect();
        let gt: Vec<_> = gt
            .iter()
            .filter(|g| labels.contains_key(&g.video_id))
            .cloned()
            .collect();
        let curves =
            metrics::detection_curves(&dets, &gt, n_frames, settings.alpha, settings.beta)?;
        report.rbdc = Some(curves.rbdc());
        report.tbdc = Some(curves.tbdc());
        report.n_gt_regions = gt.len();
        report.n_gt_tracks = metrics::build_gt_tracks(&gt)?.len();
    }
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    for (name, v) in [("alpha", args.alpha), ("beta", args.beta)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage_msg(format!("--{name} must be in (0, 1]")));
        }
    }
    let series = io::read_frame_scores(&args.scores)?;
    let labels = filter_labels(io::read_frame_labels(&args.labels)?, args.split)?;
    let detection_data = match (&args.detections, &args.regions) {
        (Some(d), Some(r)) => Some((io::read_detections(d)?, io::read_gt_regions(r)?)),
        _ => None,
    };
    let settings = MetricSettings {
        alpha: args.alpha,
        beta: args.beta,
    };
    let report = evaluate(
        &series,
        &labels,
        detection_data
            .as_ref()
            .map(|(d, g)| (d.as_slice(), g.as_slice())),
        settings,
    )?;

    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    match &args.out {
        Some(out) => {
            let mut staging = Staging::new();
            staging.write_bytes(out, format!("{text}\n").as_bytes())?;
            let mut inputs: Vec<&Path> = vec![&args.scores, &args.labels];
            inputs.extend(args.regions.as_deref());
            inputs.extend(args.detections.as_deref());
            let manifest = RunManifest::build(
                "eval",
                json!({ "alpha": args.alpha, "beta": args.beta, "split": args.split }),
                None,
                &inputs,
                &staging,
                started,
            )?;
            staging.commit(Some((&sibling(out, "manifest.json"), &manifest)))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model()?;
    let c = model.config().channels;
    let summary = json!({
        "config": ck.config,
        "prior": ck.prior,
        "latent_dim": model.latent_dim(),
        "n_params": model.n_params(),
        "mix_determinants": model.steps.iter().map(|s| s.mix.det(c)).collect::<Vec<_>>(),
        "train_config": ck.train_config,
        "optimizer_steps": ck.loss_history.len(),
        "epoch_losses": ck.epoch_losses,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(CliError::runtime)?
    );
    Ok(())
}
