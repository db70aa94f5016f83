//! Skeleton adjacency for the spatial graph convolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COCO17_JOINTS: usize = 17;

/// COCO 17-keypoint skeleton edges (0-based joint indices).
pub const COCO17_BONES: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Edges along the bones of the skeleton layout.
    Anatomical,
    /// No spatial mixing, `A = I`.
    Identity,
    /// Every joint connected to every joint, `A = 1`.
    #[default]
    Uniform,
}

impl fmt::Display for AdjacencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyMode::Anatomical => "anatomical",
            AdjacencyMode::Identity => "identity",
            AdjacencyMode::Uniform => "uniform",
        })
    }
}

impl FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anatomical" => Ok(AdjacencyMode::Anatomical),
            "identity" => Ok(AdjacencyMode::Identity),
            "uniform" => Ok(AdjacencyMode::Uniform),
            other => Err(Error::Config(format!("unknown adjacency mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    n_joints: usize,
    mode: AdjacencyMode,
    bones: Vec<(usize, usize)>,
    #[serde(skip)]
    adjacency: Vec<f64>,
    #[serde(skip)]
    normalized: Vec<f64>,
}

impl SkeletonGraph {
    /// Builds the graph for `mode`. Anatomical mode uses the COCO layout and so
    /// needs `n_joints == 17`; use [`SkeletonGraph::with_bones`] for other layouts.
    pub fn build(mode: AdjacencyMode, n_joints: usize) -> Result<Self> {
        match mode {
            AdjacencyMode::Anatomical if n_joints == COCO17_JOINTS => {
                Self::with_bones(n_joints, &COCO17_BONES)
            }
            AdjacencyMode::Anatomical => Err(Error::Config(format!(
                "no built-in skeleton layout for {n_joints} joints; supply a bone list"
            ))),
            _ => Self::assemble(mode, n_joints, Vec::new()),
        }
    }

    pub fn with_bones(n_joints: usize, bones: &[(usize, usize)]) -> Result<Self> {
        if let Some(&(a, b)) = bones.iter().find(|&&(a, b)| a >= n_joints || b >= n_joints) {
            return Err(Error::Config(format!(
                "bone ({a}, {b}) references a joint outside 0..{n_joints}"
            )));
        }
        if let Some(&(a, _)) = bones.iter().find(|&&(a, b)| a == b) {
            return Err(Error::Config(format!("bone ({a}, {a}) is a self-loop")));
        }
        Self::assemble(AdjacencyMode::Anatomical, n_joints, bones.to_vec())
    }

    /// Loads a JSON list of joint-index pairs, e.g. `[[0, 1], [1, 2]]`.
    pub fn load_bones(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs: Vec<[usize; 2]> = serde_json::from_str(&text)?;
        Ok(pairs.into_iter().map(|[a, b]| (a, b)).collect())
    }

    /// Recomputes the matrices after deserialization.
    pub fn rebuild(&self) -> Result<Self> {
        match self.mode {
            AdjacencyMode::Anatomical => Self::with_bones(self.n_joints, &self.bones),
            mode => Self::build(mode, self.n_joints),
        }
    }

    fn assemble(mode: AdjacencyMode, n: usize, bones: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("skeleton needs at least one joint".into()));
        }
        let mut a = vec![0.0; n * n];
        match mode {
            AdjacencyMode::Identity => (0..n).for_each(|i| a[i * n + i] = 1.0),
            AdjacencyMode::Uniform => a.fill(1.0),
            AdjacencyMode::Anatomical => {
                for &(i, j) in &bones {
                    a[i * n + j] = 1.0;
                    a[j * n + i] = 1.0;
                }
            }
        }
        let normalized = symmetric_normalize(&a, n);
        Ok(Self {
            n_joints: n,
            mode,
            bones,
            adjacency: a,
            normalized,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn mode(&self) -> AdjacencyMode {
        self.mode
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Raw adjacency `A`, row-major `N × N`.
    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    /// `D^{-1/2} (A + I) D^{-1/2}`, row-major `N × N`.
    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
fn symmetric_normalize(a: &[f64], n: usize) -> Vec<f64> {
    let mut with_loops = a.to_vec();
    for i in 0..n {
        with_loops[i * n + i] += 1.0;
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| with_loops[i * n..(i + 1) * n].iter().sum())
        .collect();
    let mut out = with_loops;
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] /= (degree[i] * degree[j]).sqrt();
        }
    }
    out
}

/// Frame indices read by a temporal kernel of width `kernel` centred at `t`.
///
/// Indices outside `0..frames` are returned as-is; consumers treat them as zero padding.
pub fn temporal_neighborhood(t: usize, kernel: usize, _frames: usize) -> Result<Vec<i64>> {
    check_temporal_kernel(kernel)?;
    let half = (kernel / 2) as i64;
    let t = t as i64;
    Ok((t - half..=t + half).collect())
}

pub fn check_temporal_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal kernel size must be odd and >= 1, got {kernel}"
        )));
    }
    Ok(())
}
