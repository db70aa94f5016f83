//! Config files and their merge with command-line flags (flag > file > default).

use std::path::Path;

use serde::{Deserialize, Serialize};
use stgnf::synth::SynthConfig;
use stgnf::train::{Setting, TrainConfig};
use stgnf::{AdjacencyMode, FlowConfig};

use crate::args::{GenArgs, TrainArgs};
use crate::error::{usage_msg, CliError, CliResult};

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage_msg(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage_msg(format!("invalid config {}: {e}", path.display())))
}

pub fn resolve_gen(args: &GenArgs) -> CliResult<SynthConfig> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.videos {
        cfg.n_videos = v;
    }
    if let Some(v) = args.frames {
        cfg.frames_per_video = v;
    }
    if let Some(v) = args.persons {
        cfg.persons_per_video = v;
    }
    if let Some(v) = args.anomaly_rate {
        cfg.anomaly_rate = v;
    }
    if let Some(v) = args.noise_scale {
        cfg.noise_scale = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Flat training config file. Every key is optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub flow_steps: Option<usize>,
    pub channels: Option<usize>,
    pub tau: Option<usize>,
    pub stride: Option<usize>,
    pub hidden: Option<usize>,
    pub kernel_t: Option<usize>,
    pub adjacency: Option<AdjacencyMode>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub seed: Option<u64>,
    pub setting: Option<Setting>,
    pub mu_normal: Option<f64>,
    pub mu_abnormal: Option<f64>,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub stride: usize,
}

pub fn resolve_train(args: &TrainArgs) -> CliResult<ResolvedTrain> {
    let file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let setting = match &args.setting {
        Some(s) => s.parse::<Setting>()?,
        None => file.setting.unwrap_or_default(),
    };
    let mut train = match setting {
        Setting::Unsupervised => TrainConfig::unsupervised(),
        Setting::Supervised => TrainConfig::supervised(),
    };
    let mut flow = FlowConfig::default();

    macro_rules! layer {
        ($target:expr, $file:expr, $flag:expr) => {
            if let Some(v) = $flag.or($file) {
                $target = v;
            }
        };
    }
    layer!(flow.flow_steps, file.flow_steps, args.flow_steps);
    layer!(flow.channels, file.channels, None::<usize>);
    layer!(flow.seg_len, file.tau, args.tau);
    layer!(flow.hidden, file.hidden, None::<usize>);
    layer!(flow.kernel_t, file.kernel_t, None::<usize>);
    let adjacency = args
        .adjacency
        .as_deref()
        .map(str::parse::<AdjacencyMode>)
        .transpose()?;
    layer!(flow.adjacency, file.adjacency, adjacency);
    layer!(train.epochs, file.epochs, args.epochs);
    layer!(train.batch_size, file.batch_size, args.batch_size);
    layer!(train.learning_rate, file.learning_rate, args.learning_rate);
    layer!(train.adam_beta1, file.adam_beta1, None::<f64>);
    layer!(train.adam_beta2, file.adam_beta2, None::<f64>);
    layer!(train.adam_eps, file.adam_eps, None::<f64>);
    layer!(train.seed, file.seed, args.seed);
    layer!(train.mu_normal, file.mu_normal, None::<f64>);
    layer!(train.mu_abnormal, file.mu_abnormal, None::<f64>);
    layer!(train.grad_clip, file.grad_clip, None::<f64>);
    let mut stride = 1;
    layer!(stride, file.stride, args.stride);
    flow.seed = train.seed;

    if stride == 0 {
        return Err(usage_msg("stride must be >= 1"));
    }
    train.validate().map_err(CliError::from)?;
    Ok(ResolvedTrain {
        flow,
        train,
        stride,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["stgnf", "train", "--tracks", "t.jsonl", "--out", "c.json"];
        argv.extend_from_slice(extra);
        match crate::args::Cli::parse_from(argv).command {
            crate::args::Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_follow_setting() {
        let r = resolve_train(&train_args(&[])).unwrap();
        assert_eq!(r.flow.flow_steps, 8);
        assert_eq!(r.flow.seg_len, 24);
        assert_eq!(r.train.mu_normal, 3.0);
        let r = resolve_train(&train_args(&["--setting", "supervised"])).unwrap();
        assert_eq!((r.train.mu_normal, r.train.mu_abnormal), (10.0, -10.0));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"tau": 12, "epochs": 3, "adjacency": "identity"}"#).unwrap();
        let ps = p.to_str().unwrap();
        let r = resolve_train(&train_args(&["--config", ps, "--tau", "16"])).unwrap();
        assert_eq!(r.flow.seg_len, 16);
        assert_eq!(r.train.epochs, 3);
        assert_eq!(r.flow.adjacency, AdjacencyMode::Identity);
        assert_eq!(r.train.batch_size, 256);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"tua": 12}"#).unwrap();
        let err = resolve_train(&train_args(&["--config", p.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.code, crate::error::EXIT_USAGE);
    }
}
