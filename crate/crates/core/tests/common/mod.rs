#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stgnf::flow::{FlowConfig, FlowModel, Prior};
use stgnf::graph::{AdjacencyMode, SkeletonGraph};
use stgnf::Tensor3;

pub fn random_tensor(rng: &mut ChaCha8Rng, c: usize, t: usize, n: usize) -> Tensor3 {
    Tensor3::from_vec(
        c,
        t,
        n,
        (0..c * t * n).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

/// The D = 12 configuration: C = 3, T = 2, N = 2, K = 2.
pub fn d12_config(seed: u64) -> FlowConfig {
    FlowConfig {
        flow_steps: 2,
        channels: 3,
        seg_len: 2,
        n_joints: 2,
        hidden: 4,
        kernel_t: 3,
        adjacency: AdjacencyMode::Uniform,
        seed,
    }
}

/// Builds a model, data-initializes actnorm, then perturbs every parameter so no
/// layer sits at its identity-like initialization.
pub fn random_model(config: FlowConfig, prior: Prior, param_scale: f64) -> FlowModel {
    let seed = config.seed;
    let graph = SkeletonGraph::build(config.adjacency, config.n_joints).unwrap();
    let mut model = FlowModel::new(config, graph, prior).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let d = model.dims();
    let batch: Vec<Tensor3> = (0..8)
        .map(|_| random_tensor(&mut rng, d.c, d.t, d.n))
        .collect();
    let refs: Vec<&Tensor3> = batch.iter().collect();
    model.initialize_actnorm(&refs).unwrap();
    let mut flat = model.params_flat();
    for v in &mut flat {
        let z: f64 = rng.sample(StandardNormal);
        *v += param_scale * z;
    }
    model.set_params_flat(&flat);
    model
}

/// log|det| of a dense row-major matrix by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
        }
        let p = a[col * n + col];
        acc += p.abs().ln();
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
        }
    }
    acc
}

/// Central-difference Jacobian `∂z_i/∂x_j` of the flow at `x`, row-major.
pub fn numerical_jacobian(model: &FlowModel, x: &Tensor3, step: f64) -> Vec<f64> {
    let dim = x.len();
    let mut jac = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut plus = x.clone();
        plus.as_mut_slice()[j] += step;
        let mut minus = x.clone();
        minus.as_mut_slice()[j] -= step;
        let (zp, _) = model.forward(&plus).unwrap();
        let (zm, _) = model.forward(&minus).unwrap();
        for i in 0..dim {
            jac[i * dim + j] = (zp[i] - zm[i]) / (2.0 * step);
        }
    }
    jac
}
