//! On-the-fly augmentation of training patches.
//!
//! Rotation, scaling and elastic deformation are folded into one backward
//! coordinate map, applied trilinearly to the image and by nearest neighbour
//! to the labels. Brightness and gamma touch the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::gaussian_blur;
use crate::volume::{trilinear_sample, Geometry, LabelMap, MultiModalVolume, Volume};

/// Source coordinates within this distance of an integer are snapped to it,
/// so right-angle rotations reproduce voxels exactly.
const SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationSpec {
    pub enabled: bool,
    pub probability: f64,
    /// Angle range in degrees, drawn independently for each axis.
    pub degrees: [f64; 2],
}

impl Default for RotationSpec {
    fn default() -> Self {
        RotationSpec {
            enabled: true,
            probability: 0.2,
            degrees: [-30.0, 30.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSpec {
    pub enabled: bool,
    pub probability: f64,
    /// Zoom factor range; values above 1 enlarge the content.
    pub factor: [f64; 2],
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec {
            enabled: true,
            probability: 0.2,
            factor: [0.85, 1.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticSpec {
    pub enabled: bool,
    pub probability: f64,
    /// Largest displacement in voxels.
    pub alpha: [f64; 2],
    /// Smoothing width of the displacement noise in voxels.
    pub sigma: [f64; 2],
}

impl Default for ElasticSpec {
    fn default() -> Self {
        ElasticSpec {
            enabled: true,
            probability: 0.2,
            alpha: [0.0, 2.0],
            sigma: [2.0, 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrightnessSpec {
    pub enabled: bool,
    pub probability: f64,
    pub multiplicative: [f64; 2],
    pub additive: [f64; 2],
}

impl Default for BrightnessSpec {
    fn default() -> Self {
        BrightnessSpec {
            enabled: true,
            probability: 0.3,
            multiplicative: [0.75, 1.25],
            additive: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaSpec {
    pub enabled: bool,
    pub probability: f64,
    pub exponent: [f64; 2],
}

impl Default for GammaSpec {
    fn default() -> Self {
        GammaSpec {
            enabled: true,
            probability: 0.3,
            exponent: [0.7, 1.5],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotation: RotationSpec,
    pub scaling: ScalingSpec,
    pub elastic: ElasticSpec,
    pub brightness: BrightnessSpec,
    pub gamma: GammaSpec,
    /// Mixed into the training seed so augmentation streams can be varied
    /// independently of patch sampling.
    pub seed: u64,
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::InvalidConfig(format!("{name} range {r:?} must satisfy lo <= hi")));
    }
    Ok(())
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("{name} probability {p} outside [0, 1]")));
    }
    Ok(())
}

impl AugmentationConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.rotation.enabled = false;
        c.scaling.enabled = false;
        c.elastic.enabled = false;
        c.brightness.enabled = false;
        c.gamma.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        check_range("rotation.degrees", self.rotation.degrees)?;
        check_range("scaling.factor", self.scaling.factor)?;
        check_range("elastic.alpha", self.elastic.alpha)?;
        check_range("elastic.sigma", self.elastic.sigma)?;
        check_range("brightness.multiplicative", self.brightness.multiplicative)?;
        check_range("brightness.additive", self.brightness.additive)?;
        check_range("gamma.exponent", self.gamma.exponent)?;
        if self.scaling.factor[0] <= 0.0 {
            return Err(Error::InvalidConfig("scaling factors must be positive".into()));
        }
        if self.gamma.exponent[0] <= 0.0 {
            return Err(Error::InvalidConfig("gamma exponents must be positive".into()));
        }
        if self.elastic.alpha[0] < 0.0 || self.elastic.sigma[0] < 0.0 {
            return Err(Error::InvalidConfig("elastic alpha and sigma must be non-negative".into()));
        }
        check_probability("rotation", self.rotation.probability)?;
        check_probability("scaling", self.scaling.probability)?;
        check_probability("elastic", self.elastic.probability)?;
        check_probability("brightness", self.brightness.probability)?;
        check_probability("gamma", self.gamma.probability)
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Draws the coin even for disabled transforms so that toggling one does not
/// shift the random stream of the others.
fn fires(rng: &mut impl Rng, enabled: bool, p: f64) -> bool {
    let u: f64 = rng.random();
    enabled && u < p
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

/// Rotation by `angle` radians in the plane of the two axes other than `axis`.
pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[p][p] = c;
    m[p][q] = -s;
    m[q][p] = s;
    m[q][q] = c;
    m
}

/// A backward map from output voxel to source coordinate.
#[derive(Clone, Debug)]
pub struct SpatialTransform {
    shape: [usize; 3],
    /// Applied to offsets from the centre.
    matrix: Mat3,
    displacement: Option<[Vec<f64>; 3]>,
}

impl SpatialTransform {
    pub fn identity(shape: [usize; 3]) -> Self {
        SpatialTransform {
            shape,
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            displacement: None,
        }
    }

    /// Output voxel `p` reads from `c + M (p − c)`, rotating the content by
    /// `angles` (radians per axis) about the centre `c`.
    pub fn rotation(shape: [usize; 3], angles: [f64; 3]) -> Self {
        let mut t = Self::identity(shape);
        for (axis, &a) in angles.iter().enumerate() {
            if a != 0.0 {
                t.matrix = mat_mul(&axis_rotation(axis, a), &t.matrix);
            }
        }
        t
    }

    fn is_identity(&self) -> bool {
        self.displacement.is_none() && self.matrix == Self::identity(self.shape).matrix
    }

    fn source(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let p = [i as f64, j as f64, k as f64];
        let c = self.shape.map(|s| (s as f64 - 1.0) / 2.0);
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let mut src = [0.0; 3];
        for (a, s) in src.iter_mut().enumerate() {
            *s = c[a] + (0..3).map(|b| self.matrix[a][b] * d[b]).sum::<f64>();
        }
        if let Some(disp) = &self.displacement {
            let idx = (i * self.shape[1] + j) * self.shape[2] + k;
            for (a, s) in src.iter_mut().enumerate() {
                *s += disp[a][idx];
            }
        }
        src.map(|s| if (s - s.round()).abs() < SNAP { s.round() } else { s })
    }

    pub fn apply_image(&self, volume: &Volume<f32>) -> Volume<f32> {
        if self.is_identity() {
            return volume.clone();
        }
        Volume::from_fn(*volume.geometry(), |i, j, k| trilinear_sample(volume, self.source(i, j, k), 0.0))
    }

    /// Nearest-neighbour lookup; sources outside the volume become background.
    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        if self.is_identity() {
            return labels.clone();
        }
        let v = labels.volume();
        let shape = v.shape();
        let out = Volume::from_fn(*v.geometry(), |i, j, k| {
            let src = self.source(i, j, k);
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let r = src[a].round();
                if r < 0.0 || r >= shape[a] as f64 {
                    return 0;
                }
                idx[a] = r as usize;
            }
            *v.get(idx[0], idx[1], idx[2])
        });
        LabelMap::new(out).expect("values come from a valid label map")
    }
}

/// Gaussian-smoothed uniform noise per axis, rescaled so the largest
/// displacement component equals `alpha`.
fn elastic_field(shape: [usize; 3], alpha: f64, sigma: f64, rng: &mut impl Rng) -> [Vec<f64>; 3] {
    let g = Geometry::with_shape(shape).expect("patch shape is valid");
    [0, 1, 2].map(|_| {
        let noise = Volume::from_fn(g, |_, _, _| rng.random_range(-1.0f32..=1.0));
        let smooth = gaussian_blur(&noise, sigma);
        let peak = smooth.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let scale = if peak > 0.0 { alpha / peak } else { 0.0 };
        smooth.data().iter().map(|&v| v as f64 * scale).collect()
    })
}

/// Maps each channel through `x ↦ lo + (hi − lo)·((x − lo)/(hi − lo))^γ`
/// using the channel's own range, so values stay within `[lo, hi]` and their
/// order is preserved.
pub fn gamma_transform(volume: &Volume<f32>, gamma: f64) -> Volume<f32> {
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return volume.clone();
    }
    let range = (hi - lo) as f64;
    volume.map(|&v| {
        let u = ((v - lo) as f64 / range).clamp(0.0, 1.0);
        (lo as f64 + range * u.powf(gamma)) as f32
    })
}

pub fn brightness_transform(volume: &Volume<f32>, multiplier: f64, offset: f64) -> Volume<f32> {
    volume.map(|&v| (v as f64 * multiplier + offset) as f32)
}

/// Applies each enabled transform with its probability. The random stream
/// consumed depends only on the configuration and the patch shape.
pub fn augment(
    image: &MultiModalVolume,
    labels: &LabelMap,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<(MultiModalVolume, LabelMap)> {
    config.validate()?;
    if !image.geometry().same_shape(labels.geometry()) {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} and label shape {:?} differ",
            image.geometry().shape,
            labels.geometry().shape
        )));
    }
    let shape = image.geometry().shape;
    let mut transform = SpatialTransform::identity(shape);
    if fires(rng, config.rotation.enabled, config.rotation.probability) {
        let angles = [0; 3].map(|_| uniform(rng, config.rotation.degrees).to_radians());
        transform = SpatialTransform::rotation(shape, angles);
    }
    if fires(rng, config.scaling.enabled, config.scaling.probability) {
        let zoom = uniform(rng, config.scaling.factor);
        for row in transform.matrix.iter_mut() {
            row.iter_mut().for_each(|v| *v /= zoom);
        }
    }
    if fires(rng, config.elastic.enabled, config.elastic.probability) {
        let alpha = uniform(rng, config.elastic.alpha);
        let sigma = uniform(rng, config.elastic.sigma);
        transform.displacement = Some(elastic_field(shape, alpha, sigma, rng));
    }
    let mut channels = image.channels().clone().map(|c| transform.apply_image(&c));
    let labels = transform.apply_labels(labels);

    if fires(rng, config.brightness.enabled, config.brightness.probability) {
        let m = uniform(rng, config.brightness.multiplicative);
        let a = uniform(rng, config.brightness.additive);
        channels = channels.map(|c| brightness_transform(&c, m, a));
    }
    let gamma_on = fires(rng, config.gamma.enabled, config.gamma.probability);
    for c in channels.iter_mut() {
        if gamma_on {
            let g = uniform(rng, config.gamma.exponent);
            *c = gamma_transform(c, g);
        }
    }
    Ok((MultiModalVolume::new(channels)?, labels))
}
