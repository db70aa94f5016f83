use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dims;
use crate::linalg::{self, Lu};

/// Invertible `C × C` channel mixing applied at every `(t, n)` position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMix {
    /// Row-major `C × C`.
    pub weight: Vec<f64>,
}

impl ChannelMix {
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for i in 0..channels {
            weight[i * channels + i] = 1.0;
        }
        Self { weight }
    }

    /// Random rotation: Q factor of a seeded Gaussian matrix, with `det = +1`.
    pub fn random_rotation(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussian: Vec<f64> = (0..channels * channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut weight = linalg::orthonormalize_columns(&gaussian, channels);
        if linalg::det(&weight, channels) < 0.0 {
            for i in 0..channels {
                weight[i * channels] = -weight[i * channels];
            }
        }
        Self { weight }
    }

    pub fn det(&self, channels: usize) -> f64 {
        linalg::det(&self.weight, channels)
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64], dims: Dims) -> f64 {
        let (c, plane) = (dims.c, dims.plane());
        y.fill(0.0);
        for i in 0..c {
            let out = &mut y[i * plane..(i + 1) * plane];
            for j in 0..c {
                let w = self.weight[i * c + j];
                for (o, xv) in out.iter_mut().zip(&x[j * plane..(j + 1) * plane]) {
                    *o += w * xv;
                }
            }
        }
        plane as f64 * self.det(c).abs().ln()
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64], dims: Dims) {
        let inv = Lu::factor(&self.weight, dims.c).inverse();
        ChannelMix { weight: inv }.forward(y, x, dims);
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        dx: &mut [f64],
        dlogdet: f64,
        grad: &mut ChannelMix,
        dims: Dims,
    ) {
        let (c, plane) = (dims.c, dims.plane());
        let inv = Lu::factor(&self.weight, c).inverse();
        dx.fill(0.0);
        for i in 0..c {
            let dyi = &dy[i * plane..(i + 1) * plane];
            for j in 0..c {
                let xj = &x[j * plane..(j + 1) * plane];
                let w = self.weight[i * c + j];
                let mut acc = 0.0;
                for ((d, &g), &xv) in dx[j * plane..(j + 1) * plane].iter_mut().zip(dyi).zip(xj) {
                    *d += w * g;
                    acc += g * xv;
                }
                // d log|det W| / dW = W^{-T}
                grad.weight[i * c + j] += acc + dlogdet * plane as f64 * inv[j * c + i];
            }
        }
    }
}
