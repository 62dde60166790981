//! Training objective: soft Dice (batch or per-sample) plus binary
//! cross-entropy, summed over deep-supervision heads.
//!
//! The pure functions here operate on `[B, C, spatial...]` probability and
//! target tensors. Their gradients with respect to the probabilities are
//! used by the autograd tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    /// One Dice per region over the whole minibatch.
    #[default]
    Batch,
    /// One Dice per (sample, region), averaged.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub dice_mode: DiceMode,
    pub dice_smooth: f64,
    /// One weight per output head, full resolution first. Empty means the
    /// default halving weights.
    pub ds_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_mode: DiceMode::Batch,
            dice_smooth: 1e-5,
            ds_weights: Vec::new(),
        }
    }
}

impl LossConfig {
    /// Weights for `heads` outputs, normalized to sum to one.
    pub fn weights(&self, heads: usize) -> Result<Vec<f64>> {
        let raw = if self.ds_weights.is_empty() {
            default_ds_weights(heads)
        } else {
            self.ds_weights.clone()
        };
        if raw.len() != heads {
            return Err(Error::ShapeMismatch(format!(
                "{} deep-supervision weights for {heads} heads",
                raw.len()
            )));
        }
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!("negative loss weight in {raw:?}")));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig("loss weights sum to zero".into()));
        }
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

/// `2^-h` for head `h` (h = 0 is full resolution), normalized.
pub fn default_ds_weights(heads: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..heads).map(|h| 0.5f64.powi(h as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn check_pair(probs: &Tensor, targets: &Tensor) -> Result<(usize, usize, usize)> {
    if probs.shape() != targets.shape() || probs.shape().len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    Ok((probs.shape()[0], probs.shape()[1], probs.spatial_len()))
}

#[derive(Clone, Copy, Default)]
struct DiceSums {
    inter: f64,
    pred: f64,
    target: f64,
}

impl DiceSums {
    fn add(&mut self, p: &[f64], t: &[f64]) {
        for (&p, &t) in p.iter().zip(t) {
            self.inter += p * t;
            self.pred += p;
            self.target += t;
        }
    }

    fn dice(&self, smooth: f64) -> f64 {
        let denom = self.pred + self.target + smooth;
        if denom == 0.0 {
            0.0
        } else {
            (2.0 * self.inter + smooth) / denom
        }
    }

    /// d(dice)/dp for a voxel with target t.
    fn grad(&self, t: f64, smooth: f64) -> f64 {
        let denom = self.pred + self.target + smooth;
        if denom == 0.0 {
            0.0
        } else {
            (2.0 * t * denom - (2.0 * self.inter + smooth)) / (denom * denom)
        }
    }
}

fn dice_sums(probs: &Tensor, targets: &Tensor, b: usize, c: usize, s: usize, mode: DiceMode) -> Vec<DiceSums> {
    let (p, t) = (probs.data(), targets.data());
    match mode {
        DiceMode::Batch => (0..c)
            .map(|ch| {
                let mut sums = DiceSums::default();
                for n in 0..b {
                    let o = (n * c + ch) * s;
                    sums.add(&p[o..o + s], &t[o..o + s]);
                }
                sums
            })
            .collect(),
        DiceMode::Sample => (0..b * c)
            .map(|i| {
                let mut sums = DiceSums::default();
                sums.add(&p[i * s..(i + 1) * s], &t[i * s..(i + 1) * s]);
                sums
            })
            .collect(),
    }
}

/// Soft Dice coefficient (not the loss). A region with empty prediction and
/// target and zero smoothing contributes 0.
pub fn soft_dice(probs: &Tensor, targets: &Tensor, mode: DiceMode, smooth: f64) -> Result<f64> {
    let (b, c, s) = check_pair(probs, targets)?;
    let sums = dice_sums(probs, targets, b, c, s, mode);
    Ok(sums.iter().map(|d| d.dice(smooth)).sum::<f64>() / sums.len() as f64)
}

/// Gradient of [`soft_dice`] with respect to the probabilities.
pub fn soft_dice_grad(probs: &Tensor, targets: &Tensor, mode: DiceMode, smooth: f64) -> Result<Tensor> {
    let (b, c, s) = check_pair(probs, targets)?;
    let sums = dice_sums(probs, targets, b, c, s, mode);
    let norm = sums.len() as f64;
    let t = targets.data();
    let mut grad = vec![0.0; t.len()];
    for n in 0..b {
        for ch in 0..c {
            let sum = match mode {
                DiceMode::Batch => &sums[ch],
                DiceMode::Sample => &sums[n * c + ch],
            };
            let o = (n * c + ch) * s;
            for i in o..o + s {
                grad[i] = sum.grad(t[i], smooth) / norm;
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), grad)
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1 − ε]`.
pub fn bce(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    check_pair(probs, targets)?;
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn bce_grad(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_pair(probs, targets)?;
    let n = probs.len() as f64;
    let grad = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), grad)
}

/// Per-head and weighted totals of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `Σ w_h (1 − dice_h)`.
    pub dice_term: f64,
    /// `Σ w_h bce_h`.
    pub bce_term: f64,
    /// Soft Dice of the full-resolution head.
    pub full_res_dice: f64,
}

/// `Σ_h w_h [(1 − soft_dice_h) + bce_h]`.
pub fn combined_loss(outputs: &[Tensor], targets: &[Tensor], config: &LossConfig) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} heads but {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let weights = config.weights(outputs.len())?;
    let mut out = LossBreakdown {
        total: 0.0,
        dice_term: 0.0,
        bce_term: 0.0,
        full_res_dice: 0.0,
    };
    for (h, ((p, t), w)) in outputs.iter().zip(targets).zip(&weights).enumerate() {
        let d = soft_dice(p, t, config.dice_mode, config.dice_smooth)?;
        let b = bce(p, t)?;
        if h == 0 {
            out.full_res_dice = d;
        }
        out.dice_term += w * (1.0 - d);
        out.bce_term += w * b;
    }
    out.total = out.dice_term + out.bce_term;
    Ok(out)
}

/// Nearest-neighbour downsampled targets for each head: head `h` keeps every
/// `2^h`-th voxel along each spatial axis.
pub fn deep_supervision_targets(target: &Tensor, heads: usize) -> Vec<Tensor> {
    let [n, c, d, h, w] = target.dims5();
    (0..heads)
        .map(|head| {
            let f = 1usize << head;
            let (od, oh, ow) = (d / f, h / f, w / f);
            let mut data = Vec::with_capacity(n * c * od * oh * ow);
            for nc in 0..n * c {
                for z in 0..od {
                    for y in 0..oh {
                        for x in 0..ow {
                            data.push(target.data()[((nc * d + z * f) * h + y * f) * w + x * f]);
                        }
                    }
                }
            }
            Tensor::new(vec![n, c, od, oh, ow], data).expect("consistent shape")
        })
        .collect()
}
