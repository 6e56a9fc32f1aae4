//! Per-channel batch normalization over the spatial extent of a batch-1 map.

use crate::tensor::Real;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics carried between training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving update with momentum 0.1. The variance tracked is
    /// the biased batch variance, the same quantity used for normalization.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Mean and biased variance of each channel.
pub(crate) fn channel_moments<T: Real>(x: &[T], channels: usize) -> (Vec<T>, Vec<T>) {
    let len = x.len() / channels;
    let n = T::from_usize(len).unwrap();
    let mut means = Vec::with_capacity(channels);
    let mut vars = Vec::with_capacity(channels);
    for chunk in x.chunks(len) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / n;
        means.push(mean);
        vars.push(var);
    }
    (means, vars)
}

/// Normalized values `(x - mean) * inv_std` per channel.
pub(crate) fn normalize<T: Real>(x: &[T], mean: &[T], inv_std: &[T]) -> Vec<T> {
    let len = x.len() / mean.len();
    let mut out = Vec::with_capacity(x.len());
    for ((chunk, &m), &s) in x.chunks(len).zip(mean).zip(inv_std) {
        out.extend(chunk.iter().map(|&v| (v - m) * s));
    }
    out
}

pub(crate) fn affine<T: Real>(xhat: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let len = xhat.len() / gamma.len();
    let mut out = Vec::with_capacity(xhat.len());
    for ((chunk, &g), &b) in xhat.chunks(len).zip(gamma).zip(beta) {
        out.extend(chunk.iter().map(|&v| g * v + b));
    }
    out
}

pub(crate) fn inv_std<T: Real>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}
