use serde::{Deserialize, Serialize};

use crate::graph::SkeletonGraph;

/// Offset added to the raw scale before the sigmoid, so a zero subnet output
/// gives `σ = sigmoid(2) ≈ 0.88`.
pub const SCALE_SHIFT: f64 = 2.0;

/// Affine coupling conditioned on the first `C_a` channels through one
/// spatial graph convolution + ReLU + temporal convolution block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `h × C_a`
    pub spatial_weights: Vec<f64>,
    /// `h`
    pub spatial_bias: Vec<f64>,
    /// `2·C_b × h × k_t`
    pub temporal_weights: Vec<f64>,
    /// `2·C_b`
    pub temporal_bias: Vec<f64>,
}

/// Shape of the coupling subnet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetDims {
    pub cond: usize,
    pub transformed: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub t: usize,
    pub n: usize,
}

impl SubnetDims {
    fn plane(&self) -> usize {
        self.t * self.n
    }

    fn out_channels(&self) -> usize {
        2 * self.transformed
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct SubnetCache {
    aggregated: Vec<f64>,
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(v))` without overflow for large `|v|`.
#[inline]
fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

impl Coupling {
    pub fn zeros(d: SubnetDims) -> Self {
        Self {
            spatial_weights: vec![0.0; d.hidden * d.cond],
            spatial_bias: vec![0.0; d.hidden],
            temporal_weights: vec![0.0; d.out_channels() * d.hidden * d.kernel],
            temporal_bias: vec![0.0; d.out_channels()],
        }
    }

    /// Spatial graph convolution over joints, ReLU, then a zero-padded temporal
    /// convolution. Returns `2·C_b` channels: raw scales then shifts.
    pub fn subnet(&self, xa: &[f64], graph: &SkeletonGraph, d: SubnetDims) -> SubnetCache {
        let (plane, n) = (d.plane(), d.n);
        let a_hat = graph.normalized();

        // aggregated[c, t, j] = Σ_m xa[c, t, m] · Â[m, j]
        let mut aggregated = vec![0.0; d.cond * plane];
        for row in 0..d.cond * d.t {
            let src = &xa[row * n..(row + 1) * n];
            let dst = &mut aggregated[row * n..(row + 1) * n];
            for (m, &v) in src.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (o, &w) in dst.iter_mut().zip(&a_hat[m * n..(m + 1) * n]) {
                    *o += v * w;
                }
            }
        }

        let mut pre_activation = vec![0.0; d.hidden * plane];
        for h in 0..d.hidden {
            let dst = &mut pre_activation[h * plane..(h + 1) * plane];
            dst.fill(self.spatial_bias[h]);
            for c in 0..d.cond {
                let w = self.spatial_weights[h * d.cond + c];
                for (o, &g) in dst.iter_mut().zip(&aggregated[c * plane..(c + 1) * plane]) {
                    *o += w * g;
                }
            }
        }
        let hidden: Vec<f64> = pre_activation.iter().map(|&u| u.max(0.0)).collect();

        let half = d.kernel / 2;
        let mut out = vec![0.0; d.out_channels() * plane];
        for o in 0..d.out_channels() {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.temporal_bias[o]);
            for h in 0..d.hidden {
                let src = &hidden[h * plane..(h + 1) * plane];
                for k in 0..d.kernel {
                    let w = self.temporal_weights[(o * d.hidden + h) * d.kernel + k];
                    if w == 0.0 {
                        continue;
                    }
                    // output frame t reads input frame t + k - half
                    let (t_lo, t_hi) = valid_frames(k, half, d.t);
                    for t in t_lo..t_hi {
                        let ts = t + k - half;
                        let o_row = &mut dst[t * n..(t + 1) * n];
                        for (ov, &hv) in o_row.iter_mut().zip(&src[ts * n..(ts + 1) * n]) {
                            *ov += w * hv;
                        }
                    }
                }
            }
        }

        SubnetCache {
            aggregated,
            pre_activation,
            hidden,
            out,
        }
    }

    /// `y_a = x_a`, `y_b = σ ⊙ (x_b + shift)` with `σ = sigmoid(s_raw + 2)`.
    pub fn forward(
        &self,
        x: &[f64],
        y: &mut [f64],
        graph: &SkeletonGraph,
        d: SubnetDims,
    ) -> (f64, SubnetCache) {
        let split = d.cond * d.plane();
        let (xa, xb) = x.split_at(split);
        let cache = self.subnet(xa, graph, d);
        let (s_raw, shift) = cache.out.split_at(d.transformed * d.plane());
        y[..split].copy_from_slice(xa);
        let mut logdet = 0.0;
        for (i, yb) in y[split..].iter_mut().enumerate() {
            let r = s_raw[i] + SCALE_SHIFT;
            *yb = sigmoid(r) * (xb[i] + shift[i]);
            logdet += log_sigmoid(r);
        }
        (logdet, cache)
    }

    pub fn inverse(&self, y: &[f64], x: &mut [f64], graph: &SkeletonGraph, d: SubnetDims) {
        let split = d.cond * d.plane();
        let (ya, yb) = y.split_at(split);
        let cache = self.subnet(ya, graph, d);
        let (s_raw, shift) = cache.out.split_at(d.transformed * d.plane());
        x[..split].copy_from_slice(ya);
        for (i, xb) in x[split..].iter_mut().enumerate() {
            *xb = yb[i] / sigmoid(s_raw[i] + SCALE_SHIFT) - shift[i];
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        cache: &SubnetCache,
        dy: &[f64],
        dx: &mut [f64],
        dlogdet: f64,
        grad: &mut Coupling,
        graph: &SkeletonGraph,
        d: SubnetDims,
    ) {
        let (plane, n) = (d.plane(), d.n);
        let split = d.cond * plane;
        let xb = &x[split..];
        let (s_raw, shift) = cache.out.split_at(d.transformed * plane);
        let (dy_a, dy_b) = dy.split_at(split);

        let mut d_out = vec![0.0; d.out_channels() * plane];
        {
            let (d_s, d_shift) = d_out.split_at_mut(d.transformed * plane);
            for i in 0..xb.len() {
                let sig = sigmoid(s_raw[i] + SCALE_SHIFT);
                let v = xb[i] + shift[i];
                dx[split + i] = dy_b[i] * sig;
                d_shift[i] = dy_b[i] * sig;
                d_s[i] = dy_b[i] * v * sig * (1.0 - sig) + dlogdet * (1.0 - sig);
            }
        }

        // temporal convolution
        let half = d.kernel / 2;
        let mut d_hidden = vec![0.0; d.hidden * plane];
        for o in 0..d.out_channels() {
            let g_row = &d_out[o * plane..(o + 1) * plane];
            grad.temporal_bias[o] += g_row.iter().sum::<f64>();
            for h in 0..d.hidden {
                let src = &cache.hidden[h * plane..(h + 1) * plane];
                let w_idx = (o * d.hidden + h) * d.kernel;
                for k in 0..d.kernel {
                    let w = self.temporal_weights[w_idx + k];
                    let (t_lo, t_hi) = valid_frames(k, half, d.t);
                    let mut acc = 0.0;
                    for t in t_lo..t_hi {
                        let ts = t + k - half;
                        let g = &g_row[t * n..(t + 1) * n];
                        let hv = &src[ts * n..(ts + 1) * n];
                        let dh = &mut d_hidden[h * plane + ts * n..h * plane + (ts + 1) * n];
                        for j in 0..n {
                            acc += g[j] * hv[j];
                            dh[j] += w * g[j];
                        }
                    }
                    grad.temporal_weights[w_idx + k] += acc;
                }
            }
        }

        // ReLU
        for (dh, &u) in d_hidden.iter_mut().zip(&cache.pre_activation) {
            if u <= 0.0 {
                *dh = 0.0;
            }
        }
        let d_pre = d_hidden;

        // channel mixing of the spatial block
        let mut d_agg = vec![0.0; d.cond * plane];
        for h in 0..d.hidden {
            let g = &d_pre[h * plane..(h + 1) * plane];
            grad.spatial_bias[h] += g.iter().sum::<f64>();
            for c in 0..d.cond {
                let agg = &cache.aggregated[c * plane..(c + 1) * plane];
                let w = self.spatial_weights[h * d.cond + c];
                let mut acc = 0.0;
                for ((da, &gv), &av) in d_agg[c * plane..(c + 1) * plane].iter_mut().zip(g).zip(agg)
                {
                    acc += gv * av;
                    *da += w * gv;
                }
                grad.spatial_weights[h * d.cond + c] += acc;
            }
        }

        // graph aggregation: d xa[c,t,m] = Σ_j d_agg[c,t,j] · Â[m,j]
        let a_hat = graph.normalized();
        for row in 0..d.cond * d.t {
            let g = &d_agg[row * n..(row + 1) * n];
            for m in 0..n {
                let a_row = &a_hat[m * n..(m + 1) * n];
                let s: f64 = g.iter().zip(a_row).map(|(gv, av)| gv * av).sum();
                dx[row * n + m] = dy_a[row * n + m] + s;
            }
        }
    }
}

/// Output frames `t` for which `t + k - half` lies inside `0..frames`.
#[inline]
fn valid_frames(k: usize, half: usize, frames: usize) -> (usize, usize) {
    let lo = half.saturating_sub(k);
    let hi = (frames + half).saturating_sub(k).min(frames);
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::AdjacencyMode;

    fn dims(cond: usize, transformed: usize, hidden: usize, kernel: usize) -> SubnetDims {
        SubnetDims {
            cond,
            transformed,
            hidden,
            kernel,
            t: 2,
            n: 2,
        }
    }

    #[test]
    fn zero_subnet_gives_constant_scale() {
        let d = dims(2, 1, 4, 3);
        let coupling = Coupling::zeros(d);
        let graph = SkeletonGraph::build(AdjacencyMode::Uniform, 2).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut y = vec![0.0; 12];
        let (logdet, cache) = coupling.forward(&x, &mut y, &graph, d);
        assert!(cache.out.iter().all(|&v| v == 0.0));
        let s = sigmoid(2.0);
        assert_eq!(&y[..8], &x[..8]);
        for i in 8..12 {
            assert!((y[i] - s * x[i]).abs() < 1e-15);
        }
        assert!((logdet - 4.0 * s.ln()).abs() < 1e-13);
    }

    #[test]
    fn hand_set_pointwise_subnet() {
        // One conditioning channel, identity graph, k_t = 1: out = w_t · relu(w_s · x + b_s) + b_t.
        let d = SubnetDims {
            cond: 1,
            transformed: 1,
            hidden: 1,
            kernel: 1,
            t: 2,
            n: 2,
        };
        let coupling = Coupling {
            spatial_weights: vec![2.0],
            spatial_bias: vec![1.0],
            temporal_weights: vec![3.0, -1.0],
            temporal_bias: vec![0.5, 0.0],
        };
        let graph = SkeletonGraph::build(AdjacencyMode::Identity, 2).unwrap();
        let xa = [1.0, -2.0, 0.0, 0.25];
        let cache = coupling.subnet(&xa, &graph, d);
        // hidden = relu(2x + 1) = [3, 0, 1, 1.5]
        assert_eq!(cache.hidden, vec![3.0, 0.0, 1.0, 1.5]);
        assert_eq!(&cache.out[..4], &[9.5, 0.5, 3.5, 5.0]);
        assert_eq!(&cache.out[4..], &[-3.0, 0.0, -1.0, -1.5]);
    }

    #[test]
    fn uniform_graph_preserves_constant_over_joints() {
        let d = SubnetDims {
            cond: 1,
            transformed: 1,
            hidden: 1,
            kernel: 1,
            t: 1,
            n: 4,
        };
        let coupling = Coupling {
            spatial_weights: vec![1.0],
            spatial_bias: vec![0.0],
            temporal_weights: vec![1.0, 0.0],
            temporal_bias: vec![0.0, 0.0],
        };
        let graph = SkeletonGraph::build(AdjacencyMode::Uniform, 4).unwrap();
        let cache = coupling.subnet(&[0.7; 4], &graph, d);
        // Row sums of Â are all 1 for the complete graph with self loops.
        for v in &cache.aggregated {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn valid_frame_ranges() {
        // kernel 3 (half 1) over 4 frames
        assert_eq!(valid_frames(0, 1, 4), (1, 4));
        assert_eq!(valid_frames(1, 1, 4), (0, 4));
        assert_eq!(valid_frames(2, 1, 4), (0, 3));
        // kernel wider than the segment
        assert_eq!(valid_frames(0, 4, 2), (4, 4));
        assert_eq!(valid_frames(8, 4, 2), (0, 0));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
