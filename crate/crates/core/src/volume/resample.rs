use serde::{Deserialize, Serialize};

use super::{Geometry, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

fn output_geometry(geometry: &Geometry, factor: [f64; 3]) -> Result<Geometry> {
    if factor.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "resampling factors must be positive, got {factor:?}"
        )));
    }
    let mut shape = [0; 3];
    let mut spacing = [0.0; 3];
    for a in 0..3 {
        shape[a] = ((geometry.shape[a] as f64 * factor[a]).round() as usize).max(1);
        spacing[a] = geometry.spacing[a] / factor[a];
    }
    Geometry::new(shape, spacing)
}

/// Source coordinate of output voxel `i` (cell-centred, half-pixel convention).
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Resample a scalar volume by `factor` per axis.
///
/// Output shape is `round(shape * factor)` and spacing is divided by
/// `factor`. Voxel centres are aligned with the half-pixel convention and
/// coordinates outside the input are clamped to the edge.
pub fn resample(volume: &Volume<f32>, factor: [f64; 3], mode: Interpolation) -> Result<Volume<f32>> {
    match mode {
        Interpolation::Nearest => resample_nearest(volume, factor),
        Interpolation::Trilinear => {
            let g_in = *volume.geometry();
            let g_out = output_geometry(&g_in, factor)?;
            if g_out.shape == g_in.shape {
                return Ok(Volume::from_vec(g_out, volume.data().to_vec())?);
            }
            let axes: Vec<Vec<(usize, usize, f64)>> = (0..3)
                .map(|a| {
                    let n = g_in.shape[a];
                    (0..g_out.shape[a])
                        .map(|i| {
                            let c = source_coord(i, n, g_out.shape[a]).clamp(0.0, (n - 1) as f64);
                            let lo = c.floor() as usize;
                            let hi = (lo + 1).min(n - 1);
                            (lo, hi, c - lo as f64)
                        })
                        .collect()
                })
                .collect();
            Ok(Volume::from_fn(g_out, |i, j, k| {
                let (i0, i1, fi) = axes[0][i];
                let (j0, j1, fj) = axes[1][j];
                let (k0, k1, fk) = axes[2][k];
                let v = |a, b, c| *volume.get(a, b, c) as f64;
                let c00 = v(i0, j0, k0) * (1.0 - fk) + v(i0, j0, k1) * fk;
                let c01 = v(i0, j1, k0) * (1.0 - fk) + v(i0, j1, k1) * fk;
                let c10 = v(i1, j0, k0) * (1.0 - fk) + v(i1, j0, k1) * fk;
                let c11 = v(i1, j1, k0) * (1.0 - fk) + v(i1, j1, k1) * fk;
                let c0 = c00 * (1.0 - fj) + c01 * fj;
                let c1 = c10 * (1.0 - fj) + c11 * fj;
                (c0 * (1.0 - fi) + c1 * fi) as f32
            }))
        }
    }
}

/// Nearest-neighbour resampling; emits only values present in the input.
pub fn resample_nearest<T: Copy>(volume: &Volume<T>, factor: [f64; 3]) -> Result<Volume<T>> {
    let g_in = *volume.geometry();
    let g_out = output_geometry(&g_in, factor)?;
    let lookup: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let n = g_in.shape[a];
            (0..g_out.shape[a])
                .map(|i| {
                    let c = source_coord(i, n, g_out.shape[a]);
                    ((c + 0.5).floor().max(0.0) as usize).min(n - 1)
                })
                .collect()
        })
        .collect();
    Ok(Volume::from_fn(g_out, |i, j, k| {
        *volume.get(lookup[0][i], lookup[1][j], lookup[2][k])
    }))
}

/// Trilinear sample at a continuous voxel coordinate. Corners outside the
/// volume contribute `fill`.
pub fn trilinear_sample(volume: &Volume<f32>, coord: [f64; 3], fill: f32) -> f32 {
    let shape = volume.shape();
    let base = [coord[0].floor(), coord[1].floor(), coord[2].floor()];
    let frac = [coord[0] - base[0], coord[1] - base[1], coord[2] - base[2]];
    if base.iter().zip(&shape).any(|(&b, &n)| b < -1.0 || b > n as f64) {
        return fill;
    }
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let offs = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let p = base[a] as i64 + offs[a] as i64;
            w *= if offs[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            if p < 0 || p >= shape[a] as i64 {
                inside = false;
            } else {
                idx[a] = p as usize;
            }
        }
        if w == 0.0 {
            continue;
        }
        let v = if inside {
            *volume.get(idx[0], idx[1], idx[2])
        } else {
            fill
        };
        acc += w * v as f64;
    }
    acc as f32
}
