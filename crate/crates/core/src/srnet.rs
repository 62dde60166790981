//! Residual super-resolution network.
//!
//! A low-resolution volume is first upsampled 2× with trilinear
//! interpolation; the network then predicts a correction that is added back:
//!
//! ```text
//! x → conv+ReLU → [6 × (conv+ReLU)] +x₁ → [6 × (conv+ReLU)] +x₂ → [6 × (conv+ReLU)] +x₃ → conv → residual
//! ```
//!
//! Each block adds its own input to its output. The last convolution has a
//! single filter and no activation. One single-channel network serves every
//! modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{conv3d_forward, ConvGeom};
use crate::nn::params::{he_normal, ParamStore};
use crate::nn::{Bound, Tape, Tensor, Var};
use crate::optim::{OptimizerConfig, Sgd};
use crate::phantom::{degrade, DomainProfile};
use crate::volume::{resample, Interpolation, LabelMap, MultiModalVolume, Volume};

/// Scale applied to the He initialization of the final layer so an untrained
/// model starts close to plain interpolation.
pub const FINAL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SRNetConfig {
    /// Total convolutions: entry + `blocks · block_layers` + final.
    pub conv_layers: usize,
    pub blocks: usize,
    pub block_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub scale_factor: usize,
}

impl Default for SRNetConfig {
    /// Desk-scale width (8 filters).
    fn default() -> Self {
        SRNetConfig {
            conv_layers: 20,
            blocks: 3,
            block_layers: 6,
            filters: 8,
            kernel: 3,
            scale_factor: 2,
        }
    }
}

impl SRNetConfig {
    /// Full-width network (32 filters).
    pub fn full() -> Self {
        SRNetConfig {
            filters: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.blocks == 0 || self.block_layers == 0 || self.filters == 0 {
            return bad("blocks, block_layers and filters must be positive".into());
        }
        if self.conv_layers != 2 + self.blocks * self.block_layers {
            return bad(format!(
                "{} convolution layers do not match 1 + {} × {} + 1",
                self.conv_layers, self.blocks, self.block_layers
            ));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.scale_factor != 2 {
            return bad(format!("only 2× upscaling is supported, got {}", self.scale_factor));
        }
        Ok(())
    }

    /// Names of the convolution layers in execution order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["entry".to_string()];
        for b in 0..self.blocks {
            for j in 0..self.block_layers {
                names.push(format!("block{b}.conv{j}"));
            }
        }
        names.push("final".to_string());
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SRModel {
    config: SRNetConfig,
    params: ParamStore,
}

impl SRModel {
    pub fn build(config: SRNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (f, k) = (config.filters, config.kernel);
        let names = config.layer_names();
        for (i, name) in names.iter().enumerate() {
            let cin = if i == 0 { 1 } else { f };
            let cout = if i + 1 == names.len() { 1 } else { f };
            let fan_in = cin * k * k * k;
            let mut w = he_normal(&[cout, cin, k, k, k], fan_in, &mut rng);
            if i + 1 == names.len() {
                w.data_mut().iter_mut().for_each(|v| *v *= FINAL_INIT_SCALE);
            }
            params.insert(format!("{name}.weight"), w);
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
        Ok(SRModel { config, params })
    }

    /// The same architecture with every parameter set to zero.
    pub fn zeroed(config: SRNetConfig) -> Result<Self> {
        let mut m = Self::build(config, 0)?;
        for (_, t) in m.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn from_parts(config: SRNetConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::build(config, 0)?;
        fresh.params.check_layout(&params)?;
        Ok(SRModel {
            config: fresh.config,
            params,
        })
    }

    pub fn config(&self) -> &SRNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of convolution layers actually present.
    pub fn conv_layer_count(&self) -> usize {
        self.params.names().filter(|n| n.ends_with(".weight")).count()
    }

    /// Records `x + residual(x)` on the tape for `x: [N, 1, D, H, W]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<(Var, Bound)> {
        let shape = tape.value(x).shape();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::ShapeMismatch(format!("SR input must be [N, 1, D, H, W], got {shape:?}")));
        }
        let p = self.params.bind(tape, trainable);
        let pad = self.config.kernel / 2;
        let conv = |tape: &mut Tape, h: Var, name: &str| {
            let w = p.var(&format!("{name}.weight"));
            let b = p.var(&format!("{name}.bias"));
            tape.conv3d(h, w, Some(b), 1, pad)
        };
        let mut h = conv(tape, x, "entry")?;
        h = tape.relu(h);
        for b in 0..self.config.blocks {
            let block_in = h;
            for j in 0..self.config.block_layers {
                h = conv(tape, h, &format!("block{b}.conv{j}"))?;
                h = tape.relu(h);
            }
            h = tape.add(h, block_in)?;
        }
        let residual = conv(tape, h, "final")?;
        let out = tape.add(x, residual)?;
        Ok((out, p))
    }

    /// Network residual for a single `[D, H, W]` volume without recording a tape.
    pub fn residual(&self, x: &[f64], shape: [usize; 3]) -> Vec<f64> {
        let (f, k) = (self.config.filters, self.config.kernel);
        let conv = |h: &[f64], name: &str, cin: usize, cout: usize| {
            let g = ConvGeom {
                in_ch: cin,
                out_ch: cout,
                kernel: k,
                stride: 1,
                pad: k / 2,
                in_size: shape,
            };
            let w = self.params.get(&format!("{name}.weight")).expect("layer exists");
            let b = self.params.get(&format!("{name}.bias")).expect("layer exists");
            conv3d_forward(&g, 1, h, w.data(), b.data())
        };
        let relu = |v: &mut Vec<f64>| v.iter_mut().for_each(|a| *a = a.max(0.0));
        let mut h = conv(x, "entry", 1, f);
        relu(&mut h);
        for b in 0..self.config.blocks {
            let block_in = h.clone();
            for j in 0..self.config.block_layers {
                h = conv(&h, &format!("block{b}.conv{j}"), f, f);
                relu(&mut h);
            }
            h.iter_mut().zip(&block_in).for_each(|(a, b)| *a += b);
        }
        conv(&h, "final", f, 1)
    }
}

/// Convenience wrapper for [`SRModel::build`].
pub fn build_sr(config: SRNetConfig, seed: u64) -> Result<SRModel> {
    SRModel::build(config, seed)
}

fn trilinear_2x(volume: &Volume<f32>) -> Result<Volume<f32>> {
    resample(volume, [2.0; 3], Interpolation::Trilinear)
}

/// Trilinear 2× upsampling plus the learned residual; spacing is halved.
pub fn upscale(model: &SRModel, volume: &Volume<f32>) -> Result<Volume<f32>> {
    if !volume.is_finite() {
        return Err(Error::InvalidGeometry("cannot upscale a volume with non-finite values".into()));
    }
    let base = trilinear_2x(volume)?;
    let x: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
    let r = model.residual(&x, base.shape());
    let data = x.iter().zip(&r).map(|(a, b)| (a + b) as f32).collect();
    Volume::from_vec(*base.geometry(), data)
}

/// Mean absolute network residual on the interpolated input.
pub fn mean_abs_residual(model: &SRModel, volume: &Volume<f32>) -> Result<f64> {
    let base = trilinear_2x(volume)?;
    let x: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
    let r = model.residual(&x, base.shape());
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

fn to_tensor(v: &Volume<f32>) -> Tensor {
    let [d, h, w] = v.shape();
    Tensor::new(vec![1, 1, d, h, w], v.data().iter().map(|&a| a as f64).collect()).expect("shape matches")
}

/// Mean squared error of [`upscale`] against the high-resolution target,
/// one pair per step, pairs visited in order each epoch.
pub fn sr_train(
    mut model: SRModel,
    pairs: &[(Volume<f32>, Volume<f32>)],
    config: &OptimizerConfig,
    epochs: usize,
) -> Result<(SRModel, Vec<SrStep>)> {
    for (i, (lr, hr)) in pairs.iter().enumerate() {
        if hr.shape() != lr.shape().map(|s| 2 * s) {
            return Err(Error::ShapeMismatch(format!(
                "pair {i}: high-resolution shape {:?} is not twice {:?}",
                hr.shape(),
                lr.shape()
            )));
        }
    }
    let inputs: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|(lr, hr)| Ok((to_tensor(&trilinear_2x(lr)?), to_tensor(hr))))
        .collect::<Result<_>>()?;
    let total = epochs * pairs.len();
    let mut opt = Sgd::new(config.clone())?;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let (x, target) = &inputs[step % inputs.len()];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, bound) = model.forward(&mut tape, xv, true)?;
        let loss = tape.mse(out, target)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let mut grads = tape.backward(loss);
        let mut g = ParamStore::new();
        for (name, var) in bound.iter() {
            g.insert(name, grads.take(var).expect("every parameter is reached"));
        }
        let lr = opt.step(model.params_mut(), g, step, total)?;
        log.push(SrStep { step, lr, loss: value });
    }
    Ok((model, log))
}

/// Low/high-resolution training pairs from every channel of `images`. The
/// low-resolution side is `degrade(image, profile)`, whose downsampling
/// factor must be 2; the high-resolution side is the original cropped to
/// exactly twice that shape.
pub fn make_sr_pairs(
    images: &[&MultiModalVolume],
    profile: &DomainProfile,
    seed: u64,
) -> Result<Vec<(Volume<f32>, Volume<f32>)>> {
    if profile.downsample_factor != 2 {
        return Err(Error::InvalidConfig(format!(
            "super-resolution pairs need downsample_factor 2, got {}",
            profile.downsample_factor
        )));
    }
    let mut pairs = Vec::with_capacity(4 * images.len());
    for (i, img) in images.iter().enumerate() {
        let low = degrade(img, profile, seed.wrapping_add(i as u64))?;
        for (lr, hr) in low.channels().iter().zip(img.channels()) {
            let hr = hr.crop([0; 3], lr.shape().map(|s| 2 * s), 0.0)?;
            pairs.push((lr.clone(), hr));
        }
    }
    Ok(pairs)
}

/// Upscales every channel through the network and the labels by nearest
/// neighbour, so all five volumes share the doubled geometry.
pub fn sr_enhance_case(model: &SRModel, image: &MultiModalVolume, labels: &LabelMap) -> Result<(MultiModalVolume, LabelMap)> {
    if !image.geometry().same_shape(labels.geometry()) {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} and label shape {:?} differ",
            image.geometry().shape,
            labels.geometry().shape
        )));
    }
    let enhanced = image.try_map(|v| upscale(model, v))?;
    let labels = labels.resample([2.0; 3], Interpolation::Nearest)?;
    Ok((enhanced, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::Rng;

    fn tiny() -> SRNetConfig {
        SRNetConfig {
            filters: 2,
            ..SRNetConfig::default()
        }
    }

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new(shape, [1.0, 1.5, 2.0]).unwrap();
        Volume::from_fn(g, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn pairs_have_doubled_targets() {
        let spec = crate::phantom::PhantomSpec { shape: [9, 10, 10], r_et: [0.5, 0.6], r_tc: [0.8, 0.9], r_wt: [1.0, 1.2], ..Default::default() };
        let (img, _) = crate::phantom::generate_case(&spec).unwrap();
        let pairs = make_sr_pairs(&[&img], &DomainProfile::sr_pair(), 0).unwrap();
        assert_eq!(pairs.len(), 4);
        for (lr, hr) in &pairs {
            assert_eq!(lr.shape(), [4, 5, 5]);
            assert_eq!(hr.shape(), [8, 10, 10]);
        }
        assert!(make_sr_pairs(&[&img], &DomainProfile::low_quality(), 0).is_err());
    }

    #[test]
    fn architecture_has_twenty_convolutions_and_one_output_filter() {
        let m = build_sr(SRNetConfig::default(), 1).unwrap();
        assert_eq!(m.conv_layer_count(), 20);
        assert_eq!(m.config().layer_names().len(), 20);
        assert_eq!(m.params().get("final.weight").unwrap().shape()[0], 1);
        assert_eq!(build_sr(SRNetConfig::default(), 1).unwrap(), m);
        assert!(SRNetConfig { conv_layers: 19, ..SRNetConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_model_is_plain_interpolation() {
        let v = random_volume([8, 8, 8], 2);
        let out = upscale(&SRModel::zeroed(SRNetConfig::default()).unwrap(), &v).unwrap();
        let tri = resample(&v, [2.0; 3], Interpolation::Trilinear).unwrap();
        assert_eq!(out, tri);
        assert_eq!(out.shape(), [16, 16, 16]);
        assert_eq!(out.geometry().spacing, [0.5, 0.75, 1.0]);
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        let m = build_sr(tiny(), 3).unwrap();
        let v = random_volume([4, 5, 3], 4);
        let base = trilinear_2x(&v).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(to_tensor(&base));
        let (out, _) = m.forward(&mut tape, x, false).unwrap();
        let direct = upscale(&m, &v).unwrap();
        let diff = tape
            .value(out)
            .data()
            .iter()
            .zip(direct.data())
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn gradients_match_central_differences() {
        // Zero biases make dead regions feed exact zeros into the next ReLU,
        // where the loss has a kink; random biases keep the check smooth.
        let mut m = build_sr(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for (name, t) in m.params_mut().iter_mut() {
            if name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let x = to_tensor(&random_volume([6, 6, 6], 6));
        let target = to_tensor(&random_volume([6, 6, 6], 7));
        let loss = |m: &SRModel| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (out, b) = m.forward(&mut tape, xv, true).unwrap();
            let l = tape.mse(out, &target).unwrap();
            (tape, b, l)
        };
        let (tape, bound, root) = loss(&m);
        let grads = tape.backward(root);
        let mut worst: f64 = 0.0;
        for (name, var) in bound.iter() {
            let a = grads.get(var).unwrap();
            for i in [0, a.len() / 2, a.len() - 1] {
                let eval = |d: f64| {
                    let mut mm = m.clone();
                    mm.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                    let (t, _, l) = loss(&mm);
                    t.value(l).item()
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = a.data()[i].abs().max(fd.abs());
                if scale > 1e-8 {
                    worst = worst.max((a.data()[i] - fd).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let m = build_sr(tiny(), 8).unwrap();
        let pair = (random_volume([4; 3], 1), random_volume([8; 3], 2));
        let (after, log) = sr_train(m.clone(), &[pair], &OptimizerConfig::default(), 0).unwrap();
        assert_eq!(after, m);
        assert!(log.is_empty());
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let pair = (random_volume([4; 3], 1), random_volume([8, 8, 7], 2));
        let err = sr_train(build_sr(tiny(), 8).unwrap(), &[pair], &OptimizerConfig::default(), 1);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn loss_does_not_increase_at_small_learning_rate() {
        let pair = (random_volume([4; 3], 3), random_volume([8; 3], 4));
        let cfg = OptimizerConfig {
            lr0: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let (_, log) = sr_train(build_sr(tiny(), 9).unwrap(), &[pair], &cfg, 10).unwrap();
        assert_eq!(log.len(), 10);
        for w in log.windows(2) {
            assert!(w[1].loss.is_finite());
            assert!(w[1].loss <= w[0].loss + 1e-6, "{} -> {}", w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn enhancement_doubles_geometry_and_keeps_labels() {
        let g = Geometry::new([6, 6, 6], [1.0; 3]).unwrap();
        let labels = LabelMap::new(Volume::from_fn(g, |i, j, _| ((i + j) % 4) as u8)).unwrap();
        let image = MultiModalVolume::new(std::array::from_fn(|c| random_volume([6; 3], c as u64).with_spacing([1.0; 3]).unwrap())).unwrap();
        let (img2, lab2) = sr_enhance_case(&build_sr(tiny(), 1).unwrap(), &image, &labels).unwrap();
        assert_eq!(img2.geometry().shape, [12; 3]);
        assert_eq!(img2.geometry(), lab2.geometry());
        assert_eq!(img2.geometry().spacing, [0.5; 3]);
        let before = labels.value_set();
        assert!(lab2.value_set().iter().all(|v| before.contains(v)));
    }
}
