//! Volumetric data model shared by every stage of the pipeline.
//!
//! All volumes are stored in one canonical axis order: the NIfTI voxel axes
//! `(i, j, k)` with `k` varying fastest in memory (`index = (i * nj + j) * nk + k`).
//! Geometry carries shape and voxel spacing only; volumes are assumed to be
//! co-registered and axis aligned.

mod io;
mod resample;

pub use io::{load_labels, load_volume, save_labels, save_volume};
pub use resample::{resample, resample_nearest, trilinear_sample, Interpolation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let geometry = Geometry { shape, spacing };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Unit-spacing geometry.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidGeometry(format!(
                "shape entries must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "spacing entries must be finite and > 0, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.shape[2];
        let rest = index / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], k]
    }

    /// Length of the bounding-box diagonal in millimetres.
    pub fn diagonal_mm(&self) -> f64 {
        self.shape
            .iter()
            .zip(&self.spacing)
            .map(|(&n, &s)| (n as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_shape(&self, other: &Geometry) -> bool {
        self.shape == other.shape
    }
}

/// A dense 3D array with geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    geometry: Geometry,
    data: Vec<T>,
}

impl<T> Volume<T> {
    pub fn from_vec(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [ni, nj, nk] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.geometry.index(i, j, k)]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize, k: usize) -> &mut T {
        let idx = self.geometry.index(i, j, k);
        &mut self.data[idx]
    }

    /// Replace the spacing, keeping the data.
    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.geometry = Geometry::new(self.geometry.shape, spacing)?;
        Ok(self)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Volume<U> {
        Volume {
            geometry: self.geometry,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Volume<T> {
    pub fn filled(geometry: Geometry, value: T) -> Self {
        Volume {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    /// The box of `shape` starting at `start` (which may be negative or run
    /// past the far edge); voxels outside the volume read as `fill`.
    pub fn crop(&self, start: [isize; 3], shape: [usize; 3], fill: T) -> Result<Self> {
        let g = Geometry::new(shape, self.geometry.spacing)?;
        let src = self.geometry.shape;
        Ok(Volume::from_fn(g, |i, j, k| {
            let p = [start[0] + i as isize, start[1] + j as isize, start[2] + k as isize];
            if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < src[a]) {
                self.get(p[0] as usize, p[1] as usize, p[2] as usize).clone()
            } else {
                fill.clone()
            }
        }))
    }
}

impl Volume<f32> {
    pub fn zeros(geometry: Geometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Volume<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// The four co-registered MRI sequences, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    T1,
    T1Gd,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1Gd, Modality::T2, Modality::Flair];

    /// File stem used in case directories.
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1Gd => "t1gd",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

/// Four-channel (T1, T1Gd, T2, T2-FLAIR) intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    channels: [Volume<f32>; 4],
}

impl MultiModalVolume {
    pub fn new(channels: [Volume<f32>; 4]) -> Result<Self> {
        let geometry = *channels[0].geometry();
        for (c, channel) in channels.iter().enumerate() {
            if !channel.geometry().same_shape(&geometry) {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} has shape {:?}, channel 0 has {:?}",
                    channel.shape(),
                    geometry.shape
                )));
            }
            if !channel.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "channel {c} contains non-finite values"
                )));
            }
        }
        Ok(MultiModalVolume { channels })
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn channels(&self) -> &[Volume<f32>; 4] {
        &self.channels
    }

    pub fn channel(&self, modality: Modality) -> &Volume<f32> {
        &self.channels[modality as usize]
    }

    pub fn into_channels(self) -> [Volume<f32>; 4] {
        self.channels
    }

    /// Apply `f` to every channel.
    pub fn try_map(&self, mut f: impl FnMut(&Volume<f32>) -> Result<Volume<f32>>) -> Result<Self> {
        let [a, b, c, d] = &self.channels;
        Self::new([f(a)?, f(b)?, f(c)?, f(d)?])
    }

    /// Per-channel z-score normalization.
    pub fn normalized(&self, policy: Foreground) -> Self {
        let [a, b, c, d] = &self.channels;
        MultiModalVolume {
            channels: [
                znormalize(a, policy),
                znormalize(b, policy),
                znormalize(c, policy),
                znormalize(d, policy),
            ],
        }
    }
}

/// Canonical label values.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    /// Non-enhancing tumor core.
    pub const NETC: u8 = 1;
    /// Surrounding non-enhancing FLAIR hyperintensity.
    pub const SNFH: u8 = 2;
    /// Enhancing tumor.
    pub const ET: u8 = 3;
    /// Enhancing tumor in the legacy (pre-2023) convention.
    pub const LEGACY_ET: u8 = 4;
}

/// Integer segmentation over {background, NETC, SNFH, ET}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    volume: Volume<u8>,
}

impl LabelMap {
    pub fn new(volume: Volume<u8>) -> Result<Self> {
        if let Some(&value) = volume.data().iter().find(|&&v| v > label::ET) {
            return Err(Error::InvalidLabel { value });
        }
        Ok(LabelMap { volume })
    }

    pub fn background(geometry: Geometry) -> Self {
        LabelMap {
            volume: Volume::filled(geometry, label::BACKGROUND),
        }
    }

    /// Accepts the legacy convention, mapping label 4 to 3.
    pub fn from_legacy(mut volume: Volume<u8>) -> Result<Self> {
        for v in volume.data_mut() {
            if *v == label::LEGACY_ET {
                *v = label::ET;
            }
        }
        Self::new(volume)
    }

    pub fn volume(&self) -> &Volume<u8> {
        &self.volume
    }

    pub fn geometry(&self) -> &Geometry {
        self.volume.geometry()
    }

    pub fn into_volume(self) -> Volume<u8> {
        self.volume
    }

    /// Count of voxels carrying each label value 0..=3.
    pub fn histogram(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for &v in self.volume.data() {
            counts[v as usize] += 1;
        }
        counts
    }

    /// Distinct label values present, ascending.
    pub fn value_set(&self) -> Vec<u8> {
        let h = self.histogram();
        (0..4u8).filter(|&v| h[v as usize] > 0).collect()
    }

    pub fn has_tumor(&self) -> bool {
        self.volume.data().iter().any(|&v| v != label::BACKGROUND)
    }

    /// Resample with nearest-neighbour interpolation. Trilinear mode is
    /// rejected: it would invent label values.
    pub fn resample(&self, factor: [f64; 3], mode: Interpolation) -> Result<Self> {
        match mode {
            Interpolation::Nearest => Ok(LabelMap {
                volume: resample_nearest(&self.volume, factor)?,
            }),
            Interpolation::Trilinear => Err(Error::InvalidConfig(
                "trilinear interpolation cannot be applied to a label map".into(),
            )),
        }
    }
}

/// The three overlapping training/evaluation regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskSet {
    pub et: Volume<bool>,
    pub tc: Volume<bool>,
    pub wt: Volume<bool>,
}

/// Region index order used by network outputs and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }
}

impl RegionMaskSet {
    pub fn new(et: Volume<bool>, tc: Volume<bool>, wt: Volume<bool>) -> Result<Self> {
        if !et.geometry().same_shape(tc.geometry()) || !et.geometry().same_shape(wt.geometry()) {
            return Err(Error::ShapeMismatch(format!(
                "region masks have shapes {:?}, {:?}, {:?}",
                et.shape(),
                tc.shape(),
                wt.shape()
            )));
        }
        Ok(RegionMaskSet { et, tc, wt })
    }

    pub fn get(&self, region: Region) -> &Volume<bool> {
        match region {
            Region::Et => &self.et,
            Region::Tc => &self.tc,
            Region::Wt => &self.wt,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        self.et.geometry()
    }

    /// First voxel at which et ⊆ tc ⊆ wt fails.
    pub fn hierarchy_violation(&self) -> Option<usize> {
        self.et
            .data()
            .iter()
            .zip(self.tc.data())
            .zip(self.wt.data())
            .position(|((&et, &tc), &wt)| (et && !tc) || (tc && !wt))
    }

    pub fn is_hierarchical(&self) -> bool {
        self.hierarchy_violation().is_none()
    }

    /// Force the hierarchy: tc ← tc ∨ et, then wt ← wt ∨ tc.
    pub fn repaired(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.et.len() {
            let et = out.et.data()[i];
            let tc = out.tc.data()[i] || et;
            out.tc.data_mut()[i] = tc;
            out.wt.data_mut()[i] |= tc;
        }
        out
    }
}

/// Voxels included in intensity statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Foreground {
    #[default]
    Nonzero,
    All,
}

/// Z-score normalization over the foreground.
///
/// Mean and population standard deviation are taken over the foreground
/// voxels. Under [`Foreground::Nonzero`], background voxels are written as 0.
/// A zero-variance (or empty) foreground yields an all-zero output.
pub fn znormalize(volume: &Volume<f32>, policy: Foreground) -> Volume<f32> {
    let in_fg = |v: f32| match policy {
        Foreground::All => true,
        Foreground::Nonzero => v != 0.0,
    };
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &v in volume.data() {
        if in_fg(v) {
            n += 1;
            sum += v as f64;
        }
    }
    if n == 0 {
        return Volume::zeros(*volume.geometry());
    }
    let mean = sum / n as f64;
    let var = volume
        .data()
        .iter()
        .filter(|&&v| in_fg(v))
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Volume::zeros(*volume.geometry());
    }
    volume.map(|&v| {
        if in_fg(v) {
            ((v as f64 - mean) / std) as f32
        } else {
            0.0
        }
    })
}

/// ET = {3}, TC = {1, 3}, WT = {1, 2, 3}.
pub fn labels_to_regions(labels: &LabelMap) -> RegionMaskSet {
    let v = labels.volume();
    RegionMaskSet {
        et: v.map(|&l| l == label::ET),
        tc: v.map(|&l| l == label::ET || l == label::NETC),
        wt: v.map(|&l| l != label::BACKGROUND),
    }
}

/// Inverse of [`labels_to_regions`].
///
/// With `repair` off, masks violating et ⊆ tc ⊆ wt are rejected; with it on
/// they are first made hierarchical (see [`RegionMaskSet::repaired`]).
pub fn regions_to_labels(regions: &RegionMaskSet, repair: bool) -> Result<LabelMap> {
    let repaired;
    let regions = if repair {
        repaired = regions.repaired();
        &repaired
    } else {
        if let Some(index) = regions.hierarchy_violation() {
            return Err(Error::HierarchyViolation { index });
        }
        regions
    };
    let data = regions
        .et
        .data()
        .iter()
        .zip(regions.tc.data())
        .zip(regions.wt.data())
        .map(|((&et, &tc), &wt)| {
            if et {
                label::ET
            } else if tc {
                label::NETC
            } else if wt {
                label::SNFH
            } else {
                label::BACKGROUND
            }
        })
        .collect();
    Ok(LabelMap {
        volume: Volume::from_vec(*regions.geometry(), data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(shape: [usize; 3]) -> Geometry {
        Geometry::with_shape(shape).unwrap()
    }

    #[test]
    fn geometry_rejects_degenerate_values() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn index_and_coords_agree() {
        let g = geom([3, 4, 5]);
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn znormalize_constant_volume_is_zero() {
        let v = Volume::filled(geom([3, 3, 3]), 5.0f32);
        let out = znormalize(&v, Foreground::All);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn znormalize_nonzero_foreground() {
        // mean 2, population std sqrt(2/3)
        let v = Volume::from_vec(geom([1, 1, 5]), vec![0.0f32, 1.0, 2.0, 0.0, 3.0]).unwrap();
        let out = znormalize(&v, Foreground::Nonzero);
        let expected = [0.0, -1.2247, 0.0, 0.0, 1.2247];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-3, "{o} vs {e}");
        }
    }

    #[test]
    fn znormalize_empty_foreground() {
        let v = Volume::zeros(geom([2, 2, 2]));
        let out = znormalize(&v, Foreground::Nonzero);
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_voxel_regions() {
        let mut v = Volume::filled(geom([1, 1, 2]), 0u8);
        v.data_mut()[0] = 3;
        v.data_mut()[1] = 2;
        let r = labels_to_regions(&LabelMap::new(v).unwrap());
        assert_eq!((r.et.data()[0], r.tc.data()[0], r.wt.data()[0]), (true, true, true));
        assert_eq!((r.et.data()[1], r.tc.data()[1], r.wt.data()[1]), (false, false, true));
    }

    #[test]
    fn region_voxel_counts() {
        let mut data = vec![0u8; 30];
        data[..5].fill(1);
        data[5..12].fill(2);
        data[12..14].fill(3);
        let labels = LabelMap::new(Volume::from_vec(geom([2, 3, 5]), data).unwrap()).unwrap();
        let r = labels_to_regions(&labels);
        assert_eq!((r.et.count(), r.tc.count(), r.wt.count()), (2, 7, 14));
    }

    #[test]
    fn repair_promotes_et_only_voxel() {
        let g = geom([1, 1, 1]);
        let regions = RegionMaskSet::new(
            Volume::filled(g, true),
            Volume::filled(g, false),
            Volume::filled(g, false),
        )
        .unwrap();
        assert!(matches!(
            regions_to_labels(&regions, false),
            Err(Error::HierarchyViolation { index: 0 })
        ));
        let labels = regions_to_labels(&regions, true).unwrap();
        assert_eq!(labels.volume().data(), &[3]);
    }

    #[test]
    fn all_false_masks_are_background() {
        let g = geom([2, 2, 2]);
        let f = Volume::filled(g, false);
        let regions = RegionMaskSet::new(f.clone(), f.clone(), f).unwrap();
        let labels = regions_to_labels(&regions, false).unwrap();
        assert!(!labels.has_tumor());
    }

    #[test]
    fn legacy_et_is_remapped() {
        let v = Volume::from_vec(geom([1, 1, 3]), vec![0u8, 4, 2]).unwrap();
        assert!(LabelMap::new(v.clone()).is_err());
        let labels = LabelMap::from_legacy(v).unwrap();
        assert_eq!(labels.volume().data(), &[0, 3, 2]);
    }

    #[test]
    fn labels_reject_trilinear_resampling() {
        let labels = LabelMap::background(geom([2, 2, 2]));
        assert!(labels.resample([2.0; 3], Interpolation::Trilinear).is_err());
        let up = labels.resample([2.0; 3], Interpolation::Nearest).unwrap();
        assert_eq!(up.geometry().shape, [4, 4, 4]);
    }

    #[test]
    fn multimodal_rejects_mismatched_channels() {
        let a = Volume::zeros(geom([2, 2, 2]));
        let b = Volume::zeros(geom([2, 2, 3]));
        assert!(MultiModalVolume::new([a.clone(), a.clone(), a, b]).is_err());
    }
}
