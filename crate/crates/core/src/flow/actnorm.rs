use serde::{Deserialize, Serialize};

use super::Dims;

pub const LOG_SCALE_BOUND: f64 = 10.0;
const MIN_STD: f64 = 1e-6;

/// Per-channel affine `y = exp(log_scale) · (x + bias)` with data-dependent initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actnorm {
    pub log_scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub initialized: bool,
}

impl Actnorm {
    pub fn new(channels: usize) -> Self {
        Self {
            log_scale: vec![0.0; channels],
            bias: vec![0.0; channels],
            initialized: false,
        }
    }

    /// Sets bias and scale so that `inputs` leave this layer with zero mean and unit
    /// standard deviation per channel.
    pub fn initialize(&mut self, inputs: &[Vec<f64>], dims: Dims) {
        let plane = dims.plane();
        let count = (inputs.len() * plane) as f64;
        for c in 0..dims.c {
            let channel = |x: &'_ Vec<f64>| x[c * plane..(c + 1) * plane].to_vec();
            let mean = inputs.iter().flat_map(channel).sum::<f64>() / count;
            let var = inputs
                .iter()
                .flat_map(channel)
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
                / count;
            let std = var.sqrt().max(MIN_STD);
            self.bias[c] = -mean;
            self.log_scale[c] = (-std.ln()).clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND);
        }
        self.initialized = true;
    }

    pub fn clamp(&mut self) {
        for s in &mut self.log_scale {
            *s = s.clamp(-LOG_SCALE_BOUND, LOG_SCALE_BOUND);
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64], dims: Dims) -> f64 {
        let plane = dims.plane();
        for c in 0..dims.c {
            let scale = self.log_scale[c].exp();
            let bias = self.bias[c];
            let range = c * plane..(c + 1) * plane;
            for (yi, xi) in y[range.clone()].iter_mut().zip(&x[range]) {
                *yi = scale * (xi + bias);
            }
        }
        plane as f64 * self.log_scale.iter().sum::<f64>()
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64], dims: Dims) {
        let plane = dims.plane();
        for c in 0..dims.c {
            let inv_scale = (-self.log_scale[c]).exp();
            let bias = self.bias[c];
            let range = c * plane..(c + 1) * plane;
            for (xi, yi) in x[range.clone()].iter_mut().zip(&y[range]) {
                *xi = yi * inv_scale - bias;
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and writes `∂L/∂x` into `dx`.
    ///
    /// `dlogdet` is `∂L/∂logdet` for this layer's log-determinant term.
    pub fn backward(
        &self,
        y: &[f64],
        dy: &[f64],
        dx: &mut [f64],
        dlogdet: f64,
        grad: &mut Actnorm,
        dims: Dims,
    ) {
        let plane = dims.plane();
        for c in 0..dims.c {
            let scale = self.log_scale[c].exp();
            let range = c * plane..(c + 1) * plane;
            let mut sum_dy = 0.0;
            let mut sum_dy_y = 0.0;
            for ((dxi, dyi), yi) in dx[range.clone()]
                .iter_mut()
                .zip(&dy[range.clone()])
                .zip(&y[range])
            {
                *dxi = scale * dyi;
                sum_dy += dyi;
                sum_dy_y += dyi * yi;
            }
            grad.bias[c] += scale * sum_dy;
            grad.log_scale[c] += sum_dy_y + dlogdet * plane as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_zero_params() {
        let layer = Actnorm::new(2);
        let dims = Dims { c: 2, t: 2, n: 1 };
        let x = [1.0, -2.0, 3.0, 0.5];
        let mut y = [0.0; 4];
        assert_eq!(layer.forward(&x, &mut y, dims), 0.0);
        assert_eq!(y, x);
    }

    #[test]
    fn logdet_counts_every_position() {
        let mut layer = Actnorm::new(1);
        layer.log_scale[0] = 2f64.ln();
        let dims = Dims { c: 1, t: 2, n: 2 };
        let mut y = [0.0; 4];
        let logdet = layer.forward(&[1.0; 4], &mut y, dims);
        assert!((logdet - 4.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(y, [2.0; 4]);
    }

    #[test]
    fn init_maps_two_values_to_unit_pair() {
        let mut layer = Actnorm::new(1);
        let dims = Dims { c: 1, t: 1, n: 1 };
        layer.initialize(&[vec![1.0], vec![3.0]], dims);
        let mut y = [0.0];
        layer.forward(&[1.0], &mut y, dims);
        assert!((y[0] + 1.0).abs() < 1e-12);
        layer.forward(&[3.0], &mut y, dims);
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(layer.initialized);
    }

    #[test]
    fn init_is_fixed_point_on_standardized_batch() {
        let mut layer = Actnorm::new(1);
        let dims = Dims { c: 1, t: 2, n: 1 };
        layer.initialize(&[vec![1.0, -1.0], vec![-1.0, 1.0]], dims);
        assert!(layer.log_scale[0].abs() < 1e-12);
        assert!(layer.bias[0].abs() < 1e-12);
    }

    #[test]
    fn init_clamps_constant_channel() {
        let mut layer = Actnorm::new(1);
        let dims = Dims { c: 1, t: 2, n: 1 };
        layer.initialize(&[vec![5.0, 5.0]], dims);
        assert_eq!(layer.log_scale[0], LOG_SCALE_BOUND);
        let mut y = [0.0; 2];
        layer.forward(&[5.0, 5.0], &mut y, dims);
        assert!(y.iter().all(|v| v.is_finite() && *v == 0.0));
    }
}
