//! Group and batch normalization over `[N, C, spatial...]` activations.

use super::Tensor;
use crate::error::{Error, Result};

/// Saved statistics for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    /// One entry per normalization set: `(sample, group)` for group norm,
    /// channel for batch norm.
    pub inv_std: Vec<f64>,
}

/// Group normalization: each sample's channels are split into `groups`
/// contiguous groups, normalized to zero mean and unit variance, then scaled
/// and shifted per channel.
pub fn group_normalize(
    x: &Tensor,
    groups: usize,
    eps: f64,
    scale: &[f64],
    shift: &[f64],
) -> Result<Tensor> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels are not divisible into {groups} groups"
        )));
    }
    if scale.len() != c || shift.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "scale/shift of length {}/{} for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let (y, _) = group_norm_forward(x.data(), n, c, x.spatial_len(), groups, scale, shift, eps);
    Tensor::new(x.shape().to_vec(), y)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let cg = c / groups;
    let len = cg * s;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * s;
            let xs = &x[start..start + len];
            let mean = xs.iter().sum::<f64>() / len as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = start + ch * s;
                for i in off..off + s {
                    let h = (x[i] - mean) * inv;
                    xhat[i] = h;
                    y[i] = gamma[channel] * h + beta[channel];
                }
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns dx and accumulates dgamma/dbeta.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let cg = c / groups;
    let len = (cg * s) as f64;
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * s;
            let inv = cache.inv_std[b * groups + g];
            let (mut sum_d, mut sum_dh) = (0.0, 0.0);
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = start + ch * s;
                for i in off..off + s {
                    let h = cache.xhat[i];
                    dgamma[channel] += dy[i] * h;
                    dbeta[channel] += dy[i];
                    let d = dy[i] * gamma[channel];
                    sum_d += d;
                    sum_dh += d * h;
                }
            }
            let (mean_d, mean_dh) = (sum_d / len, sum_dh / len);
            for ch in 0..cg {
                let channel = g * cg + ch;
                let off = start + ch * s;
                for i in off..off + s {
                    let d = dy[i] * gamma[channel];
                    dx[i] = inv * (d - mean_d - cache.xhat[i] * mean_dh);
                }
            }
        }
    }
    dx
}

/// Batch statistics of a training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormCache, BatchStats) {
    let count = (n * s) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut stats = BatchStats {
        mean: vec![0.0; c],
        var: vec![0.0; c],
    };
    for ch in 0..c {
        let slices = || (0..n).map(move |b| (b * c + ch) * s);
        let mean = slices().map(|o| x[o..o + s].iter().sum::<f64>()).sum::<f64>() / count;
        let ss = slices()
            .map(|o| x[o..o + s].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>();
        let var = ss / count;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[ch] = inv;
        stats.mean[ch] = mean;
        stats.var[ch] = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
        for o in slices() {
            for i in o..o + s {
                let h = (x[i] - mean) * inv;
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std }, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let count = (n * s) as f64;
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let inv = cache.inv_std[ch];
        let (mut sum_d, mut sum_dh) = (0.0, 0.0);
        for b in 0..n {
            let o = (b * c + ch) * s;
            for i in o..o + s {
                dgamma[ch] += dy[i] * cache.xhat[i];
                dbeta[ch] += dy[i];
                let d = dy[i] * gamma[ch];
                sum_d += d;
                sum_dh += d * cache.xhat[i];
            }
        }
        let (mean_d, mean_dh) = (sum_d / count, sum_dh / count);
        for b in 0..n {
            let o = (b * c + ch) * s;
            for i in o..o + s {
                let d = dy[i] * gamma[ch];
                dx[i] = inv * (d - mean_d - cache.xhat[i] * mean_dh);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[1, 4, 2, 2, 2], 3.5);
        let y = group_normalize(&x, 2, 1e-5, &[1.0; 4], &[0.0; 4]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn instance_norm_special_case() {
        // two channels, groups = C: each channel normalized on its own
        let x = Tensor::new(vec![1, 2, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0])
            .unwrap();
        let y = group_normalize(&x, 2, 0.0, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        // channel 0: mean 2.5, var 1.25
        let s0 = 1.25f64.sqrt();
        let e0 = [-1.5 / s0, -0.5 / s0, 0.5 / s0, 1.5 / s0];
        // channel 1: mean 15, var 25
        let e1 = [-1.0, -1.0, 1.0, 1.0];
        for (a, e) in y.data().iter().zip(e0.iter().chain(&e1)) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn group_statistics_on_random_input() {
        let mut state = 17u64;
        let data: Vec<f64> = (0..2 * 8 * 27)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 40) as f64 / (1u64 << 24) as f64 * 7.0 - 2.0
            })
            .collect();
        let x = Tensor::new(vec![2, 8, 3, 3, 3], data).unwrap();
        let y = group_normalize(&x, 4, 1e-5, &[1.0; 8], &[0.0; 8]).unwrap();
        for chunk in y.data().chunks(2 * 27) {
            let m = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let v = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / chunk.len() as f64;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn indivisible_groups_are_rejected() {
        let x = Tensor::zeros(&[1, 6, 1, 1, 1]);
        assert!(group_normalize(&x, 4, 1e-5, &[1.0; 6], &[0.0; 6]).is_err());
    }
}
