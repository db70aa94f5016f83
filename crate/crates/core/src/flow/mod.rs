//! The spatio-temporal graph normalizing flow.
//!
//! A [`FlowModel`] is `K` steps of actnorm → channel mix → affine coupling mapping a
//! `C × T × N` pose segment to a latent of the same size. Log-likelihoods are exact
//! (change of variables with a unit-covariance Gaussian prior centred at `μ·1`) and
//! parameter gradients of the negative log-likelihood are derived by hand per layer.

mod actnorm;
mod checkpoint;
mod coupling;
mod mix;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use actnorm::{Actnorm, LOG_SCALE_BOUND};
pub use checkpoint::{Checkpoint, LossRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use coupling::{Coupling, SubnetCache, SubnetDims, SCALE_SHIFT};
pub use mix::ChannelMix;

use crate::error::{Error, Result};
use crate::graph::{check_temporal_kernel, AdjacencyMode, SkeletonGraph};
use crate::tensor::Tensor3;

/// Smallest `|det W|` accepted for a channel-mix matrix.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub t: usize,
    pub n: usize,
}

impl Dims {
    #[inline]
    pub fn plane(&self) -> usize {
        self.t * self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.c * self.plane()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub flow_steps: usize,
    pub channels: usize,
    pub seg_len: usize,
    pub n_joints: usize,
    pub hidden: usize,
    pub kernel_t: usize,
    pub adjacency: AdjacencyMode,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            flow_steps: 8,
            channels: 3,
            seg_len: 24,
            n_joints: 17,
            hidden: 8,
            kernel_t: 9,
            adjacency: AdjacencyMode::Uniform,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flow_steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config(format!(
                "coupling needs at least 2 channels, got {}",
                self.channels
            )));
        }
        if self.seg_len == 0 || self.n_joints == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "segment length, joint count and hidden width must be >= 1".into(),
            ));
        }
        check_temporal_kernel(self.kernel_t)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            c: self.channels,
            t: self.seg_len,
            n: self.n_joints,
        }
    }

    /// Latent dimension `D = C·T·N`.
    pub fn latent_dim(&self) -> usize {
        self.dims().len()
    }

    /// `(C_a, C_b) = (⌈C/2⌉, ⌊C/2⌋)`
    pub fn split(&self) -> (usize, usize) {
        (self.channels.div_ceil(2), self.channels / 2)
    }

    pub fn subnet_dims(&self) -> SubnetDims {
        let (cond, transformed) = self.split();
        SubnetDims {
            cond,
            transformed,
            hidden: self.hidden,
            kernel: self.kernel_t,
            t: self.seg_len,
            n: self.n_joints,
        }
    }
}

/// Gaussian prior means: `N(μ_normal·1, I)`, plus `N(μ_abnormal·1, I)` in the supervised setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mu_normal: f64,
    pub mu_abnormal: Option<f64>,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            mu_normal: 3.0,
            mu_abnormal: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Normal,
    Abnormal,
}

impl Prior {
    pub fn mean_for(&self, label: SegmentLabel) -> Result<f64> {
        match label {
            SegmentLabel::Normal => Ok(self.mu_normal),
            SegmentLabel::Abnormal => self.mu_abnormal.ok_or_else(|| {
                Error::Config("abnormal label given but no abnormal prior mean configured".into())
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub actnorm: Actnorm,
    pub mix: ChannelMix,
    pub coupling: Coupling,
}

impl FlowStep {
    fn zeros(config: &FlowConfig) -> Self {
        let c = config.channels;
        Self {
            actnorm: Actnorm::new(c),
            mix: ChannelMix {
                weight: vec![0.0; c * c],
            },
            coupling: Coupling::zeros(config.subnet_dims()),
        }
    }

    /// Parameter arrays in canonical order.
    pub fn params(&self) -> [&[f64]; 7] {
        [
            &self.actnorm.log_scale,
            &self.actnorm.bias,
            &self.mix.weight,
            &self.coupling.spatial_weights,
            &self.coupling.spatial_bias,
            &self.coupling.temporal_weights,
            &self.coupling.temporal_bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.actnorm.log_scale,
            &mut self.actnorm.bias,
            &mut self.mix.weight,
            &mut self.coupling.spatial_weights,
            &mut self.coupling.spatial_bias,
            &mut self.coupling.temporal_weights,
            &mut self.coupling.temporal_bias,
        ]
    }
}

pub const PARAM_NAMES: [&str; 7] = [
    "actnorm.log_scale",
    "actnorm.bias",
    "mix.weight",
    "coupling.spatial_weights",
    "coupling.spatial_bias",
    "coupling.temporal_weights",
    "coupling.temporal_bias",
];

/// Gradients with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub steps: Vec<FlowStep>,
}

impl Gradients {
    pub fn zeros(config: &FlowConfig) -> Self {
        Self {
            steps: (0..config.flow_steps)
                .map(|_| FlowStep::zeros(config))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_steps(&self.steps)
    }

    fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        for (a, b) in self.steps.iter_mut().zip(&other.steps) {
            for (pa, pb) in a.params_mut().into_iter().zip(b.params()) {
                for (x, y) in pa.iter_mut().zip(pb) {
                    *x += weight * y;
                }
            }
        }
    }
}

fn flatten_steps(steps: &[FlowStep]) -> Vec<f64> {
    steps
        .iter()
        .flat_map(|s| {
            s.params()
                .into_iter()
                .flatten()
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Activations of one step kept for back-propagation.
struct StepCache {
    /// input to the channel mix (= actnorm output)
    mix_in: Vec<f64>,
    /// input to the coupling (= mix output)
    coupling_in: Vec<f64>,
    subnet: SubnetCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    graph: SkeletonGraph,
    pub steps: Vec<FlowStep>,
    pub prior: Prior,
}

impl FlowModel {
    /// Fresh model: actnorm uninitialized, channel mixes random rotations, spatial
    /// weights small random values and temporal (output) weights zero.
    pub fn new(config: FlowConfig, graph: SkeletonGraph, prior: Prior) -> Result<Self> {
        config.validate()?;
        if graph.n_joints() != config.n_joints {
            return Err(Error::Config(format!(
                "graph has {} joints but the flow expects {}",
                graph.n_joints(),
                config.n_joints
            )));
        }
        let d = config.subnet_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spatial_init = Normal::new(0.0, 1.0 / (d.cond as f64).sqrt()).expect("positive std");
        let steps = (0..config.flow_steps)
            .map(|k| {
                let mix_seed = config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1));
                let mut coupling = Coupling::zeros(d);
                for w in &mut coupling.spatial_weights {
                    *w = spatial_init.sample(&mut rng);
                }
                FlowStep {
                    actnorm: Actnorm::new(config.channels),
                    mix: ChannelMix::random_rotation(config.channels, mix_seed),
                    coupling,
                }
            })
            .collect();
        Ok(Self {
            config,
            graph,
            steps,
            prior,
        })
    }

    /// Model whose every step is exactly the identity map: identity mixes, a zero
    /// coupling subnet, and actnorm scales cancelling the coupling's `sigmoid(2)`
    /// on the transformed channels.
    pub fn identity(config: FlowConfig, graph: SkeletonGraph, prior: Prior) -> Result<Self> {
        let mut model = Self::new(config, graph, prior)?;
        let c = model.config.channels;
        let (cond, _) = model.config.split();
        let d = model.config.subnet_dims();
        let inv_sigmoid_log = (1.0 + (-SCALE_SHIFT).exp()).ln();
        for step in &mut model.steps {
            step.actnorm = Actnorm::new(c);
            step.actnorm.initialized = true;
            for s in &mut step.actnorm.log_scale[cond..] {
                *s = inv_sigmoid_log;
            }
            step.mix = ChannelMix::identity(c);
            step.coupling = Coupling::zeros(d);
        }
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn dims(&self) -> Dims {
        self.config.dims()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn is_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.actnorm.initialized)
    }

    pub fn n_params(&self) -> usize {
        self.steps
            .iter()
            .map(|s| s.params().iter().map(|p| p.len()).sum::<usize>())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten_steps(&self.steps)
    }

    /// Overwrites all parameters from the canonical flat layout.
    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.n_params(),
            "flat parameter length mismatch"
        );
        let mut offset = 0;
        for step in &mut self.steps {
            for p in step.params_mut() {
                let len = p.len();
                p.copy_from_slice(&flat[offset..offset + len]);
                offset += len;
            }
            step.actnorm.clamp();
        }
    }

    /// `(step, parameter name, index)` for every flat parameter position.
    pub fn param_labels(&self) -> Vec<(usize, &'static str, usize)> {
        let mut out = Vec::with_capacity(self.n_params());
        for (k, step) in self.steps.iter().enumerate() {
            for (name, p) in PARAM_NAMES.iter().zip(step.params()) {
                out.extend((0..p.len()).map(|i| (k, *name, i)));
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let d = self.dims();
        if x.shape() != (d.c, d.t, d.n) {
            return Err(Error::Config(format!(
                "segment shape {:?} does not match model shape ({}, {}, {})",
                x.shape(),
                d.c,
                d.t,
                d.n
            )));
        }
        if !self.is_initialized() {
            return Err(Error::Config(
                "flow actnorm layers are not initialized".into(),
            ));
        }
        Ok(())
    }

    fn check_mix(&self, k: usize) -> Result<()> {
        let det = self.steps[k].mix.det(self.config.channels);
        if !(det.abs() > MIN_ABS_DET) {
            return Err(Error::SingularMix { step: k, det });
        }
        Ok(())
    }

    fn apply_step(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<(f64, StepCache)> {
        let dims = self.dims();
        let step = &self.steps[k];
        self.check_mix(k)?;
        let mut mix_in = vec![0.0; x.len()];
        let mut logdet = step.actnorm.forward(x, &mut mix_in, dims);
        let mut coupling_in = vec![0.0; x.len()];
        logdet += step.mix.forward(&mix_in, &mut coupling_in, dims);
        let (ld, subnet) =
            step.coupling
                .forward(&coupling_in, out, &self.graph, self.config.subnet_dims());
        logdet += ld;
        if !logdet.is_finite() || out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("flow step {k}"),
                "non-finite activation or log-determinant",
            ));
        }
        Ok((
            logdet,
            StepCache {
                mix_in,
                coupling_in,
                subnet,
            },
        ))
    }

    /// `z = f(x)` flattened, and `Σ log|det ∂f_k/∂x|`.
    pub fn forward(&self, x: &Tensor3) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        let mut cur = x.as_slice().to_vec();
        let mut next = vec![0.0; cur.len()];
        let mut total = 0.0;
        for k in 0..self.steps.len() {
            let (ld, _) = self.apply_step(k, &cur, &mut next)?;
            total += ld;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok((cur, total))
    }

    /// `x = f⁻¹(z)`, applying the inverse steps in reverse order.
    pub fn inverse(&self, z: &[f64]) -> Result<Tensor3> {
        let dims = self.dims();
        if z.len() != dims.len() {
            return Err(Error::Config(format!(
                "latent has length {}, model expects {}",
                z.len(),
                dims.len()
            )));
        }
        let mut cur = z.to_vec();
        let mut tmp = vec![0.0; cur.len()];
        for (k, step) in self.steps.iter().enumerate().rev() {
            self.check_mix(k)?;
            step.coupling
                .inverse(&cur, &mut tmp, &self.graph, self.config.subnet_dims());
            step.mix.inverse(&tmp, &mut cur, dims);
            step.actnorm.inverse(&cur, &mut tmp, dims);
            std::mem::swap(&mut cur, &mut tmp);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("inverse of flow step {k}"),
                    "non-finite value",
                ));
            }
        }
        Ok(Tensor3::from_vec(dims.c, dims.t, dims.n, cur))
    }

    /// `log N(z; μ·1, I)`
    pub fn prior_log_density(z: &[f64], mu: f64) -> f64 {
        let d = z.len() as f64;
        let sq: f64 = z.iter().map(|v| (v - mu).powi(2)).sum();
        -0.5 * d * (2.0 * PI).ln() - 0.5 * sq
    }

    /// Exact `log p_X(x)` under the prior centred at `mu`.
    pub fn log_prob(&self, x: &Tensor3, mu: f64) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        Ok(Self::prior_log_density(&z, mu) + logdet)
    }

    /// Log-likelihood under the normal-class prior, the anomaly score used at inference.
    pub fn log_prob_normal(&self, x: &Tensor3) -> Result<f64> {
        self.log_prob(x, self.prior.mu_normal)
    }

    /// Draws `z ~ N(μ·1, I)` and maps it back through the flow.
    pub fn sample<R: rand::Rng + ?Sized>(&self, mu: f64, rng: &mut R) -> Result<Tensor3> {
        let normal = Normal::new(mu, 1.0).expect("unit std");
        let z: Vec<f64> = (0..self.latent_dim()).map(|_| normal.sample(rng)).collect();
        self.inverse(&z)
    }

    /// Data-dependent actnorm initialization, layer by layer, on `batch`.
    pub fn initialize_actnorm(&mut self, batch: &[&Tensor3]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config(
                "actnorm initialization needs a non-empty batch".into(),
            ));
        }
        let dims = self.dims();
        let mut current: Vec<Vec<f64>> = batch.iter().map(|x| x.as_slice().to_vec()).collect();
        for k in 0..self.steps.len() {
            if !self.steps[k].actnorm.initialized {
                self.steps[k].actnorm.initialize(&current, dims);
            }
            let mut next = Vec::with_capacity(current.len());
            for x in &current {
                let mut out = vec![0.0; x.len()];
                self.apply_step(k, x, &mut out)?;
                next.push(out);
            }
            current = next;
        }
        Ok(())
    }

    /// Negative log-likelihood of one sample and its parameter gradient scaled by `weight`,
    /// accumulated into `grads`.
    fn accumulate_sample_grad(
        &self,
        x: &Tensor3,
        mu: f64,
        weight: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.check_input(x)?;
        let dims = self.dims();
        let mut caches = Vec::with_capacity(self.steps.len());
        let mut cur = x.as_slice().to_vec();
        let mut total_logdet = 0.0;
        for k in 0..self.steps.len() {
            let mut out = vec![0.0; cur.len()];
            let (ld, cache) = self.apply_step(k, &cur, &mut out)?;
            total_logdet += ld;
            cur = out;
            caches.push(cache);
        }
        let z = cur;
        let nll = -(Self::prior_log_density(&z, mu) + total_logdet);

        // L = ½‖z − μ‖² − Σ logdet + const
        let mut dy: Vec<f64> = z.iter().map(|v| weight * (v - mu)).collect();
        let dlogdet = -weight;
        let mut dx = vec![0.0; dy.len()];
        let mut d_mid = vec![0.0; dy.len()];
        let sub = self.config.subnet_dims();
        for k in (0..self.steps.len()).rev() {
            let step = &self.steps[k];
            let cache = &caches[k];
            let g = &mut grads.steps[k];
            step.coupling.backward(
                &cache.coupling_in,
                &cache.subnet,
                &dy,
                &mut dx,
                dlogdet,
                &mut g.coupling,
                &self.graph,
                sub,
            );
            step.mix
                .backward(&cache.mix_in, &dx, &mut d_mid, dlogdet, &mut g.mix, dims);
            step.actnorm.backward(
                &cache.mix_in,
                &d_mid,
                &mut dy,
                dlogdet,
                &mut g.actnorm,
                dims,
            );
        }
        Ok(nll)
    }

    /// Mean negative log-likelihood over `batch` and its gradient with respect to
    /// every parameter. Labels select the prior mean per sample (normal when absent).
    ///
    /// Per-sample gradients are computed in parallel and summed in batch order,
    /// so the result does not depend on the thread count.
    pub fn grad_nll(
        &self,
        batch: &[&Tensor3],
        labels: Option<&[SegmentLabel]>,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if let Some(l) = labels {
            if l.len() != batch.len() {
                return Err(Error::Config(format!(
                    "{} labels for a batch of {}",
                    l.len(),
                    batch.len()
                )));
            }
        }
        let means: Vec<f64> = (0..batch.len())
            .map(|i| match labels {
                Some(l) => self.prior.mean_for(l[i]),
                None => Ok(self.prior.mu_normal),
            })
            .collect::<Result<_>>()?;
        let weight = 1.0 / batch.len() as f64;

        let per_sample: Vec<(f64, Gradients)> = batch
            .par_iter()
            .zip(means.par_iter())
            .map(|(x, &mu)| {
                let mut g = Gradients::zeros(&self.config);
                let nll = self.accumulate_sample_grad(x, mu, weight, &mut g)?;
                Ok((nll, g))
            })
            .collect::<Result<_>>()?;

        let mut total = Gradients::zeros(&self.config);
        let mut loss = 0.0;
        for (i, (nll, g)) in per_sample.iter().enumerate() {
            if !nll.is_finite() {
                return Err(Error::numeric(
                    format!("sample {i} of batch"),
                    "non-finite negative log-likelihood",
                ));
            }
            loss += nll;
            total.add_scaled(g, 1.0);
        }
        Ok((loss * weight, total))
    }

    /// Mean negative log-likelihood without gradients.
    pub fn nll(&self, batch: &[&Tensor3], labels: Option<&[SegmentLabel]>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut total = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let mu = match labels {
                Some(l) => self.prior.mean_for(l[i])?,
                None => self.prior.mu_normal,
            };
            let lp = self.log_prob(x, mu)?;
            if !lp.is_finite() {
                return Err(Error::numeric(
                    format!("sample {i} of batch"),
                    "non-finite log-likelihood",
                ));
            }
            total -= lp;
        }
        Ok(total / batch.len() as f64)
    }

    /// Rebuilds a model from parts, validating every array against `config`.
    pub fn from_parts(
        config: FlowConfig,
        graph: SkeletonGraph,
        steps: Vec<FlowStep>,
        prior: Prior,
    ) -> Result<Self> {
        config.validate()?;
        if steps.len() != config.flow_steps {
            return Err(Error::Schema(format!(
                "{} flow steps stored, config says {}",
                steps.len(),
                config.flow_steps
            )));
        }
        if graph.n_joints() != config.n_joints {
            return Err(Error::Schema(format!(
                "graph has {} joints, config says {}",
                graph.n_joints(),
                config.n_joints
            )));
        }
        let template = FlowStep::zeros(&config);
        for (k, step) in steps.iter().enumerate() {
            for ((name, got), want) in PARAM_NAMES.iter().zip(step.params()).zip(template.params())
            {
                if got.len() != want.len() {
                    return Err(Error::Schema(format!(
                        "step {k} {name}: {} values, expected {}",
                        got.len(),
                        want.len()
                    )));
                }
                if got.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Schema(format!("step {k} {name}: non-finite value")));
                }
            }
        }
        Ok(Self {
            config,
            graph,
            steps,
            prior,
        })
    }
}
