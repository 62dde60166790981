//! NIfTI-1 ingestion and emission (`.nii` / `.nii.gz`).
//!
//! Arrays are read into the canonical `(i, j, k)` order, spacing comes from
//! `pixdim[1..=3]`. Intensity volumes are written as 32-bit float, label maps
//! as unsigned 8-bit.

use std::path::Path;

use ndarray::{Array3, ArrayD};
use nifti::{
    DataElement, IntoNdArray, NiftiError, NiftiHeader, NiftiObject, NiftiType, ReaderOptions,
    writer::WriterOptions,
};

use super::{Geometry, LabelMap, Volume};
use crate::error::{Error, Result};

/// NIfTI `xyzt_units` code for millimetres.
const UNITS_MM: u8 = 2;

fn read_array<T: DataElement + Copy>(path: &Path) -> Result<(Vec<T>, Geometry)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let object = ReaderOptions::new().read_file(path).map_err(|e| match e {
        NiftiError::Io(io) => Error::Io(io),
        other => malformed(other.to_string()),
    })?;
    let header = object.header();
    let ndim = header.dim[0] as usize;
    if ndim == 0 || ndim > 7 {
        return Err(malformed(format!("dim[0] = {ndim}")));
    }
    // Trailing singleton dimensions (e.g. a 4D file with one frame) are accepted.
    let extent = |d: usize| if d <= ndim { header.dim[d] as usize } else { 1 };
    if ndim < 3 || (4..=ndim).any(|d| extent(d) != 1) {
        return Err(Error::NotThreeDimensional {
            path: path.to_path_buf(),
            ndim,
        });
    }
    let shape = [extent(1), extent(2), extent(3)];
    let spacing = [1, 2, 3].map(|d| {
        let s = header.pixdim[d].abs() as f64;
        if s > 0.0 && s.is_finite() { s } else { 1.0 }
    });
    let geometry = Geometry::new(shape, spacing)?;
    let array: ArrayD<T> = object
        .into_volume()
        .into_ndarray::<T>()
        .map_err(|e| malformed(e.to_string()))?;
    let mut index = vec![0usize; array.ndim()];
    let mut data = Vec::with_capacity(geometry.len());
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                index[0] = i;
                index[1] = j;
                index[2] = k;
                data.push(array[index.as_slice()]);
            }
        }
    }
    Ok((data, geometry))
}

fn write_array<T: bytemuck::Pod>(
    path: &Path,
    volume: &Volume<T>,
    datatype: NiftiType,
) -> Result<()> {
    let g = volume.geometry();
    let array = Array3::from_shape_vec(g.shape, volume.data().to_vec())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut header = NiftiHeader::default();
    header.pixdim = [
        1.0,
        g.spacing[0] as f32,
        g.spacing[1] as f32,
        g.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    header.xyzt_units = UNITS_MM;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti_with_type(&array, datatype)?;
    Ok(())
}

/// Read a scalar volume as 32-bit float.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    let (data, geometry) = read_array::<f32>(path.as_ref())?;
    Volume::from_vec(geometry, data)
}

/// Write a scalar volume as 32-bit float.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume<f32>) -> Result<()> {
    write_array(path.as_ref(), volume, NiftiType::Float32)
}

/// Read a label map. Legacy label value 4 is mapped to 3.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (data, geometry) = read_array::<u8>(path.as_ref())?;
    LabelMap::from_legacy(Volume::from_vec(geometry, data)?)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_array(path.as_ref(), labels.volume(), NiftiType::Uint8)
}
