//! Synthetic multi-modal brain phantoms with nested spherical tumours, and
//! the degradations that turn them into a low-quality domain or into
//! low-resolution halves of super-resolution pairs.
//!
//! All randomness comes from ChaCha8 seeded with `spec.seed`; case `i` of a
//! dataset reads stream `i` of that generator, so every case is independent
//! of how many others are generated and in which order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{label, Geometry, LabelMap, MultiModalVolume, Volume};

/// Mean intensity per modality (T1, T1Gd, T2, FLAIR) for each tissue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TissueIntensities {
    pub brain: [f32; 4],
    pub snfh: [f32; 4],
    pub netc: [f32; 4],
    pub et: [f32; 4],
}

impl Default for TissueIntensities {
    fn default() -> Self {
        TissueIntensities {
            brain: [0.60, 0.55, 0.45, 0.40],
            snfh: [0.50, 0.50, 0.75, 0.95],
            netc: [0.35, 0.40, 0.85, 0.60],
            et: [0.45, 0.95, 0.65, 0.55],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub tumor_count: usize,
    /// Radius ranges `[min, max]` in voxels; each range must lie strictly
    /// below the next.
    pub r_et: [f64; 2],
    pub r_tc: [f64; 2],
    pub r_wt: [f64; 2],
    /// Minimum gap in voxels between a tumour and the brain surface.
    pub margin: f64,
    pub intensities: TissueIntensities,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [32; 3],
            spacing: [1.0; 3],
            tumor_count: 1,
            r_et: [2.0, 3.0],
            r_tc: [3.5, 5.0],
            r_wt: [5.5, 8.0],
            margin: 1.0,
            intensities: TissueIntensities::default(),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

/// Width (voxels) of the soft transition between tissues.
const EDGE_WIDTH: f64 = 0.6;
const PLACEMENT_ATTEMPTS: usize = 1000;

fn smoothstep(x: f64) -> f64 {
    1.0 / (1.0 + (-x / EDGE_WIDTH).exp())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        Geometry::new(self.shape, self.spacing)?;
        for (name, r) in [("r_et", self.r_et), ("r_tc", self.r_tc), ("r_wt", self.r_wt)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} must be a range [min, max] with 0 < min <= max, got {r:?}"));
            }
        }
        if !(self.r_et[1] < self.r_tc[0] && self.r_tc[1] < self.r_wt[0]) {
            return bad(format!(
                "radius ranges must satisfy r_et < r_tc < r_wt, got {:?} {:?} {:?}",
                self.r_et, self.r_tc, self.r_wt
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        Ok(())
    }
}

struct Tumor {
    center: [f64; 3],
    radii: [f64; 3],
}

/// Case 0 of the dataset described by `spec`.
pub fn generate_case(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelMap)> {
    generate_case_indexed(spec, 0)
}

/// Case `index` of the dataset described by `spec`.
pub fn generate_case_indexed(spec: &PhantomSpec, index: u64) -> Result<(MultiModalVolume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let geometry = Geometry::new(spec.shape, spec.spacing)?;
    let centre = spec.shape.map(|s| (s as f64 - 1.0) / 2.0);
    let semi: [f64; 3] = std::array::from_fn(|a| ((spec.shape[a] as f64) / 2.0 - 1.0) * rng.random_range(0.85..1.0));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));

    let mut tumors: Vec<Tumor> = Vec::with_capacity(spec.tumor_count);
    for t in 0..spec.tumor_count {
        let r_wt = rng.random_range(spec.r_wt[0]..=spec.r_wt[1]);
        let r_tc = rng.random_range(spec.r_tc[0]..=spec.r_tc[1]);
        let r_et = rng.random_range(spec.r_et[0]..=spec.r_et[1]);
        let room = semi.map(|a| a - r_wt - spec.margin);
        if room.iter().any(|&r| r <= 0.0) {
            return Err(Error::TumorDoesNotFit(format!(
                "tumour {t} with radius {r_wt:.2} does not fit inside brain semi-axes {semi:.2?} with margin {}",
                spec.margin
            )));
        }
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if u.iter().map(|x| x * x).sum::<f64>() > 1.0 {
                continue;
            }
            let c: [f64; 3] = std::array::from_fn(|a| centre[a] + u[a] * room[a]);
            let clear = tumors.iter().all(|o| {
                let d2: f64 = (0..3).map(|a| (c[a] - o.center[a]).powi(2)).sum();
                d2.sqrt() >= r_wt + o.radii[2]
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::TumorDoesNotFit(format!("no free position for tumour {t} after {PLACEMENT_ATTEMPTS} attempts"))
        })?;
        tumors.push(Tumor {
            center,
            radii: [r_et, r_tc, r_wt],
        });
    }

    let ti = &spec.intensities;
    let mut labels = Volume::filled(geometry, label::BACKGROUND);
    let mut channels: [Volume<f32>; 4] = std::array::from_fn(|_| Volume::zeros(geometry));
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for idx in 0..geometry.len() {
        let p = geometry.coords(idx).map(|c| c as f64);
        let rho = (0..3).map(|a| ((p[a] - centre[a]) / semi[a]).powi(2)).sum::<f64>().sqrt();
        let brain = smoothstep((1.0 - rho) * semi.iter().sum::<f64>() / 3.0);
        let shading = 1.0 + 0.05 * (0..3).map(|a| (p[a] / spec.shape[a] as f64 * 3.0 + phase[a]).sin()).sum::<f64>() / 3.0;
        let mut w = [0.0f64; 3]; // soft memberships of WT, TC, ET
        for t in &tumors {
            let d = (0..3).map(|a| (p[a] - t.center[a]).powi(2)).sum::<f64>().sqrt();
            let lab = if d <= t.radii[0] {
                label::ET
            } else if d <= t.radii[1] {
                label::NETC
            } else if d <= t.radii[2] {
                label::SNFH
            } else {
                label::BACKGROUND
            };
            let rank = |l: u8| [0, 2, 1, 3][l as usize];
            let cur = labels.data_mut();
            if rank(lab) > rank(cur[idx]) {
                cur[idx] = lab;
            }
            for (k, r) in [t.radii[2], t.radii[1], t.radii[0]].into_iter().enumerate() {
                w[k] = w[k].max(smoothstep(r - d));
            }
        }
        for (m, ch) in channels.iter_mut().enumerate() {
            let mut v = ti.brain[m] as f64;
            v += w[0] * (ti.snfh[m] - ti.brain[m]) as f64;
            v += w[1] * (ti.netc[m] - ti.snfh[m]) as f64;
            v += w[2] * (ti.et[m] - ti.netc[m]) as f64;
            v *= brain * shading;
            if spec.noise_sigma > 0.0 && brain > 0.5 {
                v += noise.sample(&mut rng);
            }
            // keep the brain strictly non-zero so foreground masks stay stable
            ch.data_mut()[idx] = if brain > 0.5 { v.max(1e-3) as f32 } else { 0.0 };
        }
    }
    Ok((MultiModalVolume::new(channels)?, LabelMap::new(labels)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainProfile {
    pub blur_sigma: f64,
    pub downsample_factor: usize,
    pub extra_noise_sigma: f64,
    pub contrast_scale: f64,
}

impl Default for DomainProfile {
    /// The identity profile.
    fn default() -> Self {
        DomainProfile {
            blur_sigma: 0.0,
            downsample_factor: 1,
            extra_noise_sigma: 0.0,
            contrast_scale: 1.0,
        }
    }
}

impl DomainProfile {
    /// Low-quality target domain: blurred, low contrast, noisy, same grid.
    pub fn low_quality() -> Self {
        DomainProfile {
            blur_sigma: 1.0,
            downsample_factor: 1,
            extra_noise_sigma: 0.05,
            contrast_scale: 0.6,
        }
    }

    /// Low-resolution half of a super-resolution training pair.
    pub fn sr_pair() -> Self {
        DomainProfile {
            blur_sigma: 0.8,
            downsample_factor: 2,
            extra_noise_sigma: 0.01,
            contrast_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad(format!("blur_sigma must be non-negative, got {}", self.blur_sigma));
        }
        if self.downsample_factor == 0 {
            return bad("downsample_factor must be at least 1".into());
        }
        if !(self.extra_noise_sigma >= 0.0 && self.extra_noise_sigma.is_finite()) {
            return bad(format!("extra_noise_sigma must be non-negative, got {}", self.extra_noise_sigma));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale.is_finite()) {
            return bad(format!("contrast_scale must be positive, got {}", self.contrast_scale));
        }
        Ok(())
    }
}

/// Separable Gaussian blur (σ in voxels, kernel truncated at 3σ, edge voxels
/// replicated).
pub fn gaussian_blur(volume: &Volume<f32>, sigma: f64) -> Volume<f32> {
    if sigma <= 0.0 {
        return volume.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let shape = volume.shape();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut data: Vec<f64> = volume.data().iter().map(|&v| v as f64).collect();
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..shape[others[0]] {
            for b in 0..shape[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..shape[axis]).map(|t| data[base + t * strides[axis]]));
                for t in 0..n {
                    let v: f64 = kernel
                        .iter()
                        .enumerate()
                        .map(|(ki, k)| k * line[(t + ki as isize - radius).clamp(0, n - 1) as usize])
                        .sum();
                    data[base + t as usize * strides[axis]] = v;
                }
            }
        }
    }
    Volume::from_vec(*volume.geometry(), data.into_iter().map(|v| v as f32).collect()).expect("same geometry")
}

/// Mean over non-overlapping `f³` blocks; shape `⌊s/f⌋`, spacing `p·f`.
pub fn block_downsample(volume: &Volume<f32>, factor: usize) -> Result<Volume<f32>> {
    if factor <= 1 {
        return Ok(volume.clone());
    }
    let g = volume.geometry();
    let shape = g.shape.map(|s| s / factor);
    let geometry = Geometry::new(shape, g.spacing.map(|p| p * factor as f64))?;
    let norm = (factor * factor * factor) as f64;
    Ok(Volume::from_fn(geometry, |i, j, k| {
        let mut acc = 0.0f64;
        for di in 0..factor {
            for dj in 0..factor {
                for dk in 0..factor {
                    acc += *volume.get(i * factor + di, j * factor + dj, k * factor + dk) as f64;
                }
            }
        }
        (acc / norm) as f32
    }))
}

/// Blur, integer downsampling, contrast scaling about the mean of non-zero
/// voxels, then additive noise on non-zero voxels; deterministic in `seed`.
pub fn degrade(volume: &MultiModalVolume, profile: &DomainProfile, seed: u64) -> Result<MultiModalVolume> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.extra_noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    volume.try_map(|ch| {
        let mut v = block_downsample(&gaussian_blur(ch, profile.blur_sigma), profile.downsample_factor)?;
        let c = profile.contrast_scale;
        if c != 1.0 {
            let nz: Vec<f64> = v.data().iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
            if !nz.is_empty() {
                let mean = nz.iter().sum::<f64>() / nz.len() as f64;
                for x in v.data_mut().iter_mut().filter(|x| **x != 0.0) {
                    *x = (mean + c * (*x as f64 - mean)) as f32;
                }
            }
        }
        if profile.extra_noise_sigma > 0.0 {
            for x in v.data_mut().iter_mut().filter(|x| **x != 0.0) {
                *x += noise.sample(&mut rng) as f32;
            }
        }
        Ok(v)
    })
}
