//! Whole-volume inference: overlapping windows blended by an importance map,
//! probability ensembling across networks, and conversion to labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::phantom::block_downsample;
use crate::segnet::SegModel;
use crate::srnet::{upscale, SRModel};
use crate::train::image_tensor;
use crate::volume::{regions_to_labels, Foreground, Geometry, LabelMap, MultiModalVolume, RegionMaskSet, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum WindowWeighting {
    Uniform,
    /// Separable Gaussian centred on the window, σ = `sigma_fraction` × patch.
    Gaussian { sigma_fraction: f64 },
}

impl Default for WindowWeighting {
    fn default() -> Self {
        WindowWeighting::Gaussian { sigma_fraction: 0.125 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Must match the networks' patch shape when given.
    pub patch_shape: Option<[usize; 3]>,
    pub overlap: f64,
    pub weighting: WindowWeighting,
    pub threshold: f64,
    /// One weight per network; empty means equal weights.
    pub ensemble_weights: Vec<f64>,
    pub normalization: Foreground,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            patch_shape: None,
            overlap: 0.5,
            weighting: WindowWeighting::default(),
            threshold: 0.5,
            ensemble_weights: Vec::new(),
            normalization: Foreground::Nonzero,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidConfig(format!("overlap {} outside [0, 1)", self.overlap)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if let WindowWeighting::Gaussian { sigma_fraction } = self.weighting {
            if !(sigma_fraction > 0.0 && sigma_fraction.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma_fraction {sigma_fraction} must be positive")));
            }
        }
        if let Some(p) = self.patch_shape {
            if p.contains(&0) {
                return Err(Error::InvalidConfig(format!("patch shape {p:?} has a zero extent")));
            }
        }
        if !self.ensemble_weights.is_empty() {
            normalized_weights(&self.ensemble_weights)?;
        }
        Ok(())
    }

    /// Normalized ensemble weights for `models` networks.
    pub fn weights_for(&self, models: usize) -> Result<Vec<f64>> {
        if self.ensemble_weights.is_empty() {
            return Ok(vec![1.0 / models as f64; models]);
        }
        if self.ensemble_weights.len() != models {
            return Err(Error::InvalidConfig(format!(
                "{} ensemble weights for {models} networks",
                self.ensemble_weights.len()
            )));
        }
        normalized_weights(&self.ensemble_weights)
    }
}

fn normalized_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidConfig(format!("ensemble weights {w:?} must be non-negative")));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidConfig("ensemble weights sum to zero".into()));
    }
    Ok(w.iter().map(|v| v / total).collect())
}

/// Anything that maps a `[N, 4, patch]` batch to `[N, 3, patch]` region
/// probabilities.
pub trait PatchPredictor: Sync {
    fn patch_shape(&self) -> [usize; 3];
    fn predict_patch(&self, input: &Tensor) -> Result<Tensor>;
}

impl PatchPredictor for SegModel {
    fn patch_shape(&self) -> [usize; 3] {
        self.config().patch_shape
    }

    fn predict_patch(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.predict(input)?.swap_remove(0))
    }
}

/// Per-voxel ET, TC and WT probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProbabilities {
    pub channels: [Volume<f32>; 3],
}

impl RegionProbabilities {
    pub fn constant(geometry: Geometry, values: [f32; 3]) -> Self {
        RegionProbabilities {
            channels: values.map(|v| Volume::filled(geometry, v)),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    /// Mean over 2×2×2 blocks, bringing an upscaled prediction back to the
    /// original grid.
    pub fn halved(&self) -> Result<Self> {
        let [a, b, c] = &self.channels;
        Ok(RegionProbabilities {
            channels: [block_downsample(a, 2)?, block_downsample(b, 2)?, block_downsample(c, 2)?],
        })
    }
}

/// Window starts along one axis: evenly spaced, first at 0 and last flush
/// with the far edge, with stride at most `patch · (1 − overlap)`. A patch
/// longer than the axis gets one centred window.
pub fn window_starts(size: usize, patch: usize, overlap: f64) -> Vec<isize> {
    if patch >= size {
        return vec![-(((patch - size) / 2) as isize)];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let span = size - patch;
    let n = span.div_ceil(stride) + 1;
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as isize)
        .collect()
}

/// Importance weights over one window, peak 1.
pub fn importance_map(patch: [usize; 3], weighting: WindowWeighting) -> Vec<f64> {
    let axis = |a: usize| -> Vec<f64> {
        match weighting {
            WindowWeighting::Uniform => vec![1.0; patch[a]],
            WindowWeighting::Gaussian { sigma_fraction } => {
                let c = (patch[a] as f64 - 1.0) / 2.0;
                let s = sigma_fraction * patch[a] as f64;
                (0..patch[a]).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp()).collect()
            }
        }
    };
    let (x, y, z) = (axis(0), axis(1), axis(2));
    let peak = x.iter().cloned().fold(0.0, f64::max) * y.iter().cloned().fold(0.0, f64::max) * z.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(patch.iter().product());
    for a in &x {
        for b in &y {
            for c in &z {
                out.push(a * b * c / peak);
            }
        }
    }
    out
}

/// Tiles the (already normalized) volume with overlapping windows and
/// returns the weight-normalized blend of the window predictions. Windows
/// are visited in a fixed order and accumulated in f64.
pub fn sliding_window_infer(
    model: &dyn PatchPredictor,
    volume: &MultiModalVolume,
    config: &InferenceConfig,
) -> Result<RegionProbabilities> {
    config.validate()?;
    let patch = model.patch_shape();
    if let Some(p) = config.patch_shape {
        if p != patch {
            return Err(Error::ShapeMismatch(format!("configured patch {p:?}, network patch {patch:?}")));
        }
    }
    let geometry = *volume.geometry();
    let shape = geometry.shape;
    let n = geometry.len();
    let importance = importance_map(patch, config.weighting);
    let starts: Vec<Vec<isize>> = (0..3).map(|a| window_starts(shape[a], patch[a], config.overlap)).collect();
    let plen: usize = patch.iter().product();
    let mut acc = vec![0.0f64; 3 * n];
    let mut weight = vec![0.0f64; n];
    for &si in &starts[0] {
        for &sj in &starts[1] {
            for &sk in &starts[2] {
                let start = [si, sj, sk];
                let window = volume.try_map(|c| c.crop(start, patch, 0.0))?;
                let out = model.predict_patch(&image_tensor(&[&window])?)?;
                if out.shape() != [&[1, 3][..], &patch[..]].concat() {
                    return Err(Error::ShapeMismatch(format!(
                        "predictor returned {:?} for patch {patch:?}",
                        out.shape()
                    )));
                }
                let probs = out.data();
                for (w, &imp) in importance.iter().enumerate() {
                    let p = [w / (patch[1] * patch[2]), (w / patch[2]) % patch[1], w % patch[2]];
                    let v = [0, 1, 2].map(|a| start[a] + p[a] as isize);
                    if (0..3).any(|a| v[a] < 0 || v[a] as usize >= shape[a]) {
                        continue;
                    }
                    let idx = geometry.index(v[0] as usize, v[1] as usize, v[2] as usize);
                    weight[idx] += imp;
                    for c in 0..3 {
                        acc[c * n + idx] += imp * probs[c * plen + w];
                    }
                }
            }
        }
    }
    assert!(
        weight.iter().all(|&w| w > 0.0),
        "every voxel is covered by at least one window"
    );
    let channels = [0, 1, 2].map(|c| {
        let data = (0..n).map(|i| (acc[c * n + i] / weight[i]).clamp(0.0, 1.0) as f32).collect();
        Volume::from_vec(geometry, data).expect("geometry matches")
    });
    Ok(RegionProbabilities { channels })
}

/// Voxelwise weighted mean; weights are normalized to sum to one.
pub fn ensemble(maps: &[RegionProbabilities], weights: &[f64]) -> Result<RegionProbabilities> {
    let first = maps.first().ok_or_else(|| Error::MissingInput("nothing to ensemble".into()))?;
    if weights.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} maps", weights.len(), maps.len())));
    }
    for m in maps {
        if !m.geometry().same_shape(first.geometry()) {
            return Err(Error::ShapeMismatch(format!(
                "probability maps of shape {:?} and {:?}",
                first.geometry().shape,
                m.geometry().shape
            )));
        }
    }
    let w = normalized_weights(weights)?;
    let geometry = *first.geometry();
    let channels = [0, 1, 2].map(|c| {
        let data = (0..geometry.len())
            .map(|i| maps.iter().zip(&w).map(|(m, &wm)| wm * m.channels[c].data()[i] as f64).sum::<f64>() as f32)
            .collect();
        Volume::from_vec(geometry, data).expect("geometry matches")
    });
    Ok(RegionProbabilities { channels })
}

/// Thresholds each region (strictly above `threshold`), repairs the
/// hierarchy and emits labels.
pub fn compose_prediction(probs: &RegionProbabilities, threshold: f64) -> Result<LabelMap> {
    let [et, tc, wt] = probs.channels.each_ref().map(|c| c.map(|&p| p as f64 > threshold));
    regions_to_labels(&RegionMaskSet::new(et, tc, wt)?, true)
}

/// Ensembled probabilities of several networks on a raw case; the volume is
/// normalized with the configured policy first.
pub fn predict_probabilities(
    models: &[&dyn PatchPredictor],
    volume: &MultiModalVolume,
    config: &InferenceConfig,
) -> Result<RegionProbabilities> {
    if models.is_empty() {
        return Err(Error::MissingInput("no networks given".into()));
    }
    let weights = config.weights_for(models.len())?;
    let normalized = volume.normalized(config.normalization);
    let maps = models
        .iter()
        .map(|m| sliding_window_infer(*m, &normalized, config))
        .collect::<Result<Vec<_>>>()?;
    if maps.len() == 1 {
        return Ok(maps.into_iter().next().expect("one map"));
    }
    ensemble(&maps, &weights)
}

pub fn predict_case(models: &[&dyn PatchPredictor], volume: &MultiModalVolume, config: &InferenceConfig) -> Result<LabelMap> {
    compose_prediction(&predict_probabilities(models, volume, config)?, config.threshold)
}

/// Inference for networks trained on super-resolved data: the case is
/// upscaled 2×, segmented, and the probabilities are averaged back onto the
/// original grid.
pub fn predict_case_sr(
    models: &[&dyn PatchPredictor],
    sr: &SRModel,
    volume: &MultiModalVolume,
    config: &InferenceConfig,
) -> Result<LabelMap> {
    let up = volume.try_map(|c| upscale(sr, c))?;
    let probs = predict_probabilities(models, &up, config)?.halved()?;
    let probs = RegionProbabilities {
        channels: probs.channels.map(|c| Volume::from_vec(*volume.geometry(), c.into_vec()).expect("same shape")),
    };
    compose_prediction(&probs, config.threshold)
}
