use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{gradients, normalize_clip, DescriptorGrid, DescriptorKind, DescriptorParams};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HogParams {
    /// Cell side in pixels.
    pub cell: usize,
    /// Block side in cells; blocks step by one cell.
    pub block: usize,
    /// Unsigned orientation bins over [0, π).
    pub bins: usize,
    pub clip: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        Self {
            cell: 8,
            block: 2,
            bins: 9,
            clip: 0.2,
        }
    }
}

/// Per-cell orientation histograms, row-major over cells.
fn cell_histograms(gray: &ImageBuffer, p: &HogParams) -> (usize, usize, Vec<f64>) {
    let (h, w) = (gray.height(), gray.width());
    let (cy, cx) = (h / p.cell, w / p.cell);
    let (gx, gy) = gradients(gray);
    let mut hist = vec![0.0; cy * cx * p.bins];
    let bin_width = PI / p.bins as f64;
    for y in 0..cy * p.cell {
        for x in 0..cx * p.cell {
            let i = y * w + x;
            let mag = gx[i].hypot(gy[i]);
            if mag == 0.0 {
                continue;
            }
            let theta = gy[i].atan2(gx[i]).rem_euclid(PI);
            let bin = ((theta / bin_width) as usize) % p.bins;
            hist[((y / p.cell) * cx + x / p.cell) * p.bins + bin] += mag;
        }
    }
    (cy, cx, hist)
}

/// Block-normalized HOG over a grayscale (or RGB, converted by luma) image.
pub fn hog_extract(img: &ImageBuffer, p: &HogParams) -> Result<DescriptorGrid> {
    if p.cell == 0 || p.block == 0 || p.bins == 0 {
        return Err(Error::invalid("HOG cell, block and bins must be positive"));
    }
    let min = p.cell * p.block;
    if img.height() < min || img.width() < min {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the HOG block footprint; minimum size is {min}x{min}",
            img.width(),
            img.height()
        )));
    }
    let gray = img.to_gray();
    let (cy, cx, hist) = cell_histograms(&gray, p);
    let dim = p.block * p.block * p.bins;
    let (by, bx) = (cy - p.block + 1, cx - p.block + 1);
    let mut positions = Vec::with_capacity(by * bx);
    let mut descriptors = Vec::with_capacity(by * bx * dim);
    let mut v = vec![0.0; dim];
    for y in 0..by {
        for x in 0..bx {
            let mut k = 0;
            for dy in 0..p.block {
                for dx in 0..p.block {
                    let c = ((y + dy) * cx + x + dx) * p.bins;
                    v[k..k + p.bins].copy_from_slice(&hist[c..c + p.bins]);
                    k += p.bins;
                }
            }
            normalize_clip(&mut v, p.clip);
            descriptors.extend_from_slice(&v);
            let half = p.block * p.cell / 2;
            positions.push((x * p.cell + half, y * p.cell + half));
        }
    }
    Ok(DescriptorGrid {
        positions,
        descriptors,
        dim,
        kind: DescriptorKind::Hog,
        params: DescriptorParams::Hog(p.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        ImageBuffer::from_vec(h, w, 1, data).unwrap()
    }

    /// Independent brute-force HOG for one 16×16 block.
    fn oracle_block(img: &ImageBuffer) -> Vec<f64> {
        let (h, w) = (img.height(), img.width());
        let px = |y: i64, x: i64| {
            img.get(
                y.clamp(0, h as i64 - 1) as usize,
                x.clamp(0, w as i64 - 1) as usize,
                0,
            )
        };
        let mut hist = vec![0.0; 36];
        for y in 0..16i64 {
            for x in 0..16i64 {
                let gx = px(y, x + 1) - px(y, x - 1);
                let gy = px(y + 1, x) - px(y - 1, x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut deg = gy.atan2(gx).to_degrees();
                while deg < 0.0 {
                    deg += 180.0;
                }
                while deg >= 180.0 {
                    deg -= 180.0;
                }
                let bin = (deg / 20.0).floor() as usize;
                let cell = (y / 8 * 2 + x / 8) as usize;
                hist[cell * 9 + bin.min(8)] += mag;
            }
        }
        hist
    }

    #[test]
    fn constant_image_gives_zero_blocks() {
        let g = hog_extract(&gray(32, 24, |_, _| 0.4), &HogParams::default()).unwrap();
        assert_eq!(g.len(), 3 * 2);
        assert_eq!(g.dim, 36);
        assert!(g.descriptors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_mass_in_horizontal_gradient_bin() {
        let img = gray(16, 16, |_, x| if x < 7 { 0.1 } else { 0.9 });
        let raw = oracle_block(&img);
        // cells touching the edge carry ≥90% of their mass in bin 0
        for cell in 0..4 {
            let c = &raw[cell * 9..cell * 9 + 9];
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                assert!(c[0] / total >= 0.9);
            }
        }
        let total: f64 = raw.iter().sum();
        let bin0: f64 = (0..4).map(|c| raw[c * 9]).sum();
        assert!(bin0 / total >= 0.9);

        let mut expected = raw.clone();
        let n = expected.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
        expected.iter_mut().for_each(|v| *v = (*v / n).min(0.2));
        let n = expected.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
        expected.iter_mut().for_each(|v| *v /= n);
        let g = hog_extract(&img, &HogParams::default()).unwrap();
        assert_eq!(g.len(), 1);
        for (a, b) in g.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.positions, vec![(8, 8)]);
    }

    #[test]
    fn too_small_names_minimum() {
        let err = hog_extract(&gray(15, 40, |_, _| 0.0), &HogParams::default()).unwrap_err();
        assert!(err.to_string().contains("16x16"), "{err}");
    }

    #[test]
    fn rgb_input_uses_luma() {
        let rgb = ImageBuffer::from_vec(
            16,
            16,
            3,
            (0..768).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        let a = hog_extract(&rgb, &HogParams::default()).unwrap();
        let b = hog_extract(&rgb.to_gray(), &HogParams::default()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn offset_invariant_and_bounded(seed in 0u64..1000, offset in -0.5f64..0.5) {
            let img = gray(24, 32, |y, x| ((y * 31 + x * 17 + seed as usize) % 23) as f64 / 23.0);
            let shifted = gray(24, 32, |y, x| img.get(y, x, 0) + offset);
            let a = hog_extract(&img, &HogParams::default()).unwrap();
            let b = hog_extract(&shifted, &HogParams::default()).unwrap();
            for (x, y) in a.descriptors.iter().zip(&b.descriptors) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for row in a.rows() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n.is_finite() && n <= 1.0 + 1e-6);
            }
            let again = hog_extract(&img, &HogParams::default()).unwrap();
            prop_assert_eq!(a, again);
        }

        #[test]
        fn shift_by_one_cell_shifts_blocks(seed in 0u64..1000) {
            let base = |y: usize, x: usize| (((y * 7 + x * 13) ^ seed as usize) % 19) as f64 / 19.0;
            let img = gray(40, 48, base);
            let shifted = gray(40, 48, |y, x| if x >= 8 { base(y, x - 8) } else { 0.0 });
            let a = hog_extract(&img, &HogParams::default()).unwrap();
            let b = hog_extract(&shifted, &HogParams::default()).unwrap();
            let bx = 48 / 8 - 1;
            let by = 40 / 8 - 1;
            // interior blocks, away from image borders
            for y in 1..by - 1 {
                for x in 1..bx - 2 {
                    let ra = a.row(y * bx + x);
                    let rb = b.row(y * bx + x + 1);
                    for (u, v) in ra.iter().zip(rb) {
                        prop_assert!((u - v).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
