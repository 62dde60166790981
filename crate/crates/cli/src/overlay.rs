//! PNG slice overlays: FLAIR in grey with NETC red, SNFH green, ET blue.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use tumorseg::volume::{label, LabelMap, Modality, MultiModalVolume};

/// The three canonical views, each fixing one axis.
pub const VIEWS: [(&str, usize); 3] = [("sagittal", 0), ("coronal", 1), ("axial", 2)];

const ALPHA: f32 = 0.5;
/// Small slices are enlarged to at least this many pixels per side.
const MIN_SIDE: usize = 128;

pub fn colour(l: u8) -> Option<[u8; 3]> {
    match l {
        label::NETC => Some([255, 0, 0]),
        label::SNFH => Some([0, 255, 0]),
        label::ET => Some([0, 0, 255]),
        _ => None,
    }
}

/// Voxel through which the slices pass: the tumour centroid, or the volume
/// centre when there is no tumour.
pub fn focus(labels: &LabelMap) -> [usize; 3] {
    let g = labels.geometry();
    let mut sum = [0usize; 3];
    let mut n = 0usize;
    for (idx, &l) in labels.volume().data().iter().enumerate() {
        if l != 0 {
            let c = g.coords(idx);
            for a in 0..3 {
                sum[a] += c[a];
            }
            n += 1;
        }
    }
    if n == 0 {
        g.shape.map(|s| s / 2)
    } else {
        sum.map(|s| s / n)
    }
}

/// Renders the slice with `axis` fixed at `index`.
pub fn render(image: &MultiModalVolume, labels: &LabelMap, axis: usize, index: usize) -> RgbImage {
    let flair = image.channel(Modality::Flair);
    let shape = flair.shape();
    let (lo, hi) = flair
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (shape[ra], shape[ca]);
    let zoom = MIN_SIDE.div_ceil(rows.min(cols)).max(1);
    RgbImage::from_fn((cols * zoom) as u32, (rows * zoom) as u32, |x, y| {
        let mut p = [0usize; 3];
        p[axis] = index;
        p[ra] = y as usize / zoom;
        p[ca] = x as usize / zoom;
        let g = ((flair.get(p[0], p[1], p[2]) - lo) / range * 255.0).clamp(0.0, 255.0);
        let px = match colour(*labels.volume().get(p[0], p[1], p[2])) {
            Some(c) => c.map(|v| ((1.0 - ALPHA) * g + ALPHA * v as f32) as u8),
            None => [g as u8; 3],
        };
        Rgb(px)
    })
}

/// Writes `{case_id}_{view}.png` for the three views and returns the paths.
pub fn write_overlays(dir: &Path, case_id: &str, image: &MultiModalVolume, labels: &LabelMap) -> std::io::Result<Vec<PathBuf>> {
    let at = focus(labels);
    VIEWS
        .iter()
        .map(|&(name, axis)| {
            let path = dir.join(format!("{case_id}_{name}.png"));
            render(image, labels, axis, at[axis])
                .save(&path)
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tumorseg::volume::{Geometry, Volume};

    #[test]
    fn colours_follow_the_figure_convention() {
        let g = Geometry::with_shape([4, 6, 8]).unwrap();
        let img = MultiModalVolume::new([0; 4].map(|_| Volume::filled(g, 0.0f32))).unwrap();
        let labels = LabelMap::new(Volume::from_fn(g, |i, j, _| match (i, j) {
            (2, 1) => label::NETC,
            (2, 2) => label::SNFH,
            (2, 3) => label::ET,
            _ => 0,
        }))
        .unwrap();
        assert_eq!(focus(&labels), [2, 2, 3]);
        let slice = render(&img, &labels, 0, 2);
        let zoom = 128usize.div_ceil(6) as u32;
        assert_eq!(slice.dimensions(), (8 * zoom, 6 * zoom));
        assert_eq!(slice.get_pixel(0, zoom).0, [127, 0, 0]);
        assert_eq!(slice.get_pixel(0, 2 * zoom).0, [0, 127, 0]);
        assert_eq!(slice.get_pixel(0, 3 * zoom).0, [0, 0, 127]);
        assert_eq!(slice.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
