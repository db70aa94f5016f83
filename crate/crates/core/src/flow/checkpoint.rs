use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowConfig, FlowModel, FlowStep, Prior};
use crate::error::{Error, Result};
use crate::graph::SkeletonGraph;

pub const CHECKPOINT_FORMAT: &str = "stgnf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// On-disk model: config, graph, prior and every parameter array (row-major),
/// plus optional training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: FlowConfig,
    pub graph: SkeletonGraph,
    pub prior: Prior,
    pub steps: Vec<FlowStep>,
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    #[serde(default)]
    pub loss_history: Vec<LossRecord>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            graph: model.graph().clone(),
            prior: model.prior,
            steps: model.steps.clone(),
            train_config: None,
            loss_history: Vec::new(),
            epoch_losses: Vec::new(),
        }
    }

    pub fn to_model(&self) -> Result<FlowModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "not a checkpoint (format '{}')",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.graph.mode() != self.config.adjacency {
            return Err(Error::Schema(format!(
                "graph mode {} disagrees with config adjacency {}",
                self.graph.mode(),
                self.config.adjacency
            )));
        }
        let graph: SkeletonGraph = self.graph.rebuild()?;
        FlowModel::from_parts(self.config.clone(), graph, self.steps.clone(), self.prior)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AdjacencyMode;
    use crate::tensor::Tensor3;

    fn model() -> FlowModel {
        let config = FlowConfig {
            flow_steps: 2,
            seg_len: 4,
            n_joints: 17,
            adjacency: AdjacencyMode::Anatomical,
            ..FlowConfig::default()
        };
        let graph = SkeletonGraph::build(AdjacencyMode::Anatomical, 17).unwrap();
        let mut m = FlowModel::new(config, graph, Prior::default()).unwrap();
        let x = Tensor3::from_vec(
            3,
            4,
            17,
            (0..204).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let y = Tensor3::from_vec(
            3,
            4,
            17,
            (0..204).map(|i| (i as f64 * 0.11).cos()).collect(),
        );
        m.initialize_actnorm(&[&x, &y]).unwrap();
        m
    }

    #[test]
    fn json_round_trip_preserves_outputs() {
        let m = model();
        let text = Checkpoint::from_model(&m).to_json().unwrap();
        let restored = Checkpoint::from_json(&text).unwrap().to_model().unwrap();
        assert_eq!(restored.params_flat(), m.params_flat());
        assert_eq!(restored.graph().normalized(), m.graph().normalized());
        let x = Tensor3::from_vec(3, 4, 17, vec![0.25; 204]);
        assert_eq!(
            restored.log_prob_normal(&x).unwrap(),
            m.log_prob_normal(&x).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected_on_load() {
        let mut ck = Checkpoint::from_model(&model());
        ck.steps[1].coupling.temporal_bias.push(0.0);
        assert!(matches!(ck.to_model(), Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut ck = Checkpoint::from_model(&model());
        ck.version = 99;
        assert!(ck.to_model().is_err());
    }
}
