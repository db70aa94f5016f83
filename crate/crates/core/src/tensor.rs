//! Dense `channels × time × joints` tensor in row-major order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    channels: usize,
    frames: usize,
    joints: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, frames: usize, joints: usize) -> Self {
        Self {
            channels,
            frames,
            joints,
            data: vec![0.0; channels * frames * joints],
        }
    }

    /// Wraps `data` laid out as `[c][t][n]`. Panics if the length does not match the shape.
    pub fn from_vec(channels: usize, frames: usize, joints: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            channels * frames * joints,
            "tensor data length does not match shape {channels}x{frames}x{joints}"
        );
        Self {
            channels,
            frames,
            joints,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.joints)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, n: usize) -> usize {
        (c * self.frames + t) * self.joints + n
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, n: usize) -> f64 {
        self.data[self.index(c, t, n)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, n: usize, value: f64) {
        let i = self.index(c, t, n);
        self.data[i] = value;
    }

    /// All `frames × joints` values of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.frames * self.joints;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.frames * self.joints;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
