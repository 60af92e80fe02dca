use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{
    gradients, l2_normalize, normalize_clip, DescriptorGrid, DescriptorKind, DescriptorParams,
};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Dense SIFT sampling: upright descriptors on a regular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub step: usize,
    pub patch: usize,
    /// Spatial cells per side.
    pub grid: usize,
    /// Signed orientation bins over [0, 2π).
    pub bins: usize,
    pub clip: f64,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            step: 8,
            patch: 16,
            grid: 4,
            bins: 8,
            clip: 0.2,
        }
    }
}

impl SiftParams {
    pub fn dim(&self) -> usize {
        self.grid * self.grid * self.bins
    }

    fn check(&self, img: &ImageBuffer) -> Result<()> {
        if self.step == 0 || self.grid == 0 || self.bins == 0 || self.patch < self.grid {
            return Err(Error::invalid(
                "dense SIFT step, grid and bins must be positive and patch ≥ grid",
            ));
        }
        if img.height() < self.patch || img.width() < self.patch {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than the {p}x{p} SIFT patch",
                img.width(),
                img.height(),
                p = self.patch
            )));
        }
        Ok(())
    }

    fn sites(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let ys = (0..=h - self.patch).step_by(self.step);
        ys.flat_map(|y| (0..=w - self.patch).step_by(self.step).map(move |x| (x, y)))
            .collect()
    }
}

/// Raw (unnormalized) descriptors for every site of one plane.
fn raw_descriptors(plane: &ImageBuffer, p: &SiftParams, sites: &[(usize, usize)]) -> Vec<f64> {
    let (w, dim) = (plane.width(), p.dim());
    let (gx, gy) = gradients(plane);
    let sigma = p.patch as f64 / 2.0;
    let c = (p.patch as f64 - 1.0) / 2.0;
    let weight: Vec<f64> = (0..p.patch * p.patch)
        .map(|i| {
            let (dy, dx) = ((i / p.patch) as f64 - c, (i % p.patch) as f64 - c);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let bin_width = TAU / p.bins as f64;
    let mut out = vec![0.0; sites.len() * dim];
    for (s, &(x0, y0)) in sites.iter().enumerate() {
        let d = &mut out[s * dim..(s + 1) * dim];
        for py in 0..p.patch {
            for px in 0..p.patch {
                let i = (y0 + py) * w + x0 + px;
                let mag = gx[i].hypot(gy[i]) * weight[py * p.patch + px];
                if mag == 0.0 {
                    continue;
                }
                // linear vote between the two nearest orientation bins
                let t = gy[i].atan2(gx[i]).rem_euclid(TAU) / bin_width;
                let b0 = t.floor() as usize % p.bins;
                let frac = t - t.floor();
                let cell = (py * p.grid / p.patch) * p.grid + px * p.grid / p.patch;
                d[cell * p.bins + b0] += mag * (1.0 - frac);
                d[cell * p.bins + (b0 + 1) % p.bins] += mag * frac;
            }
        }
    }
    out
}

fn centers(sites: &[(usize, usize)], patch: usize) -> Vec<(usize, usize)> {
    sites
        .iter()
        .map(|&(x, y)| (x + patch / 2, y + patch / 2))
        .collect()
}

/// Dense SIFT on the luma plane.
pub fn dense_sift_extract(img: &ImageBuffer, p: &SiftParams) -> Result<DescriptorGrid> {
    p.check(img)?;
    let sites = p.sites(img.height(), img.width());
    let mut descriptors = raw_descriptors(&img.to_gray(), p, &sites);
    descriptors
        .chunks_exact_mut(p.dim())
        .for_each(|d| normalize_clip(d, p.clip));
    Ok(DescriptorGrid {
        positions: centers(&sites, p.patch),
        descriptors,
        dim: p.dim(),
        kind: DescriptorKind::Dsift,
        params: DescriptorParams::Sift(p.clone()),
    })
}

/// Dense SIFT per R, G, B plane, concatenated and renormalized jointly.
pub fn color_dense_sift_extract(img: &ImageBuffer, p: &SiftParams) -> Result<DescriptorGrid> {
    p.check(img)?;
    let img = if img.channels() == 1 {
        img.replicate(3)
    } else {
        img.clone()
    };
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "color dense SIFT expects RGB input, got {} channels",
            img.channels()
        )));
    }
    let sites = p.sites(img.height(), img.width());
    let d = p.dim();
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let mut raw = raw_descriptors(&img.channel(c), p, &sites);
            raw.chunks_exact_mut(d)
                .for_each(|v| normalize_clip(v, p.clip));
            raw
        })
        .collect();
    let mut descriptors = Vec::with_capacity(sites.len() * 3 * d);
    for s in 0..sites.len() {
        let start = descriptors.len();
        for plane in &planes {
            descriptors.extend_from_slice(&plane[s * d..(s + 1) * d]);
        }
        l2_normalize(&mut descriptors[start..]);
    }
    Ok(DescriptorGrid {
        positions: centers(&sites, p.patch),
        descriptors,
        dim: 3 * d,
        kind: DescriptorKind::ColorDsift,
        params: DescriptorParams::Sift(p.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer {
        ImageBuffer::from_vec(h, w, 1, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    fn smooth(y: usize, x: usize) -> f64 {
        0.25 + 0.1 * (x as f64 / 5.0).sin() + 0.1 * (y as f64 / 7.0).cos()
    }

    #[test]
    fn site_grid_and_dims() {
        let g = dense_sift_extract(&gray(32, 40, smooth), &SiftParams::default()).unwrap();
        assert_eq!(g.len(), 3 * 4);
        assert_eq!(g.dim, 128);
        assert_eq!(g.positions[0], (8, 8));
        assert_eq!(g.positions[1], (16, 8));
    }

    #[test]
    fn constant_image_is_zero() {
        let g = dense_sift_extract(&gray(16, 16, |_, _| 0.7), &SiftParams::default()).unwrap();
        assert!(g.descriptors.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrast_scaling_is_normalized_away() {
        let a = dense_sift_extract(&gray(32, 32, smooth), &SiftParams::default()).unwrap();
        let b = dense_sift_extract(
            &gray(32, 32, |y, x| 2.0 * smooth(y, x)),
            &SiftParams::default(),
        )
        .unwrap();
        for (u, v) in a.descriptors.iter().zip(&b.descriptors) {
            assert!((u - v).abs() < 1e-9);
        }
        // the scaled image has twice the raw gradient energy
        let p = SiftParams::default();
        let sites = p.sites(32, 32);
        let ra = raw_descriptors(&gray(32, 32, smooth), &p, &sites);
        let rb = raw_descriptors(&gray(32, 32, |y, x| 2.0 * smooth(y, x)), &p, &sites);
        for (u, v) in ra.iter().zip(&rb) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_is_an_error() {
        assert!(dense_sift_extract(&gray(15, 30, smooth), &SiftParams::default()).is_err());
        assert!(color_dense_sift_extract(&gray(30, 15, smooth), &SiftParams::default()).is_err());
    }

    #[test]
    fn replicated_gray_gives_equal_blocks() {
        let g = gray(24, 24, smooth);
        let c = color_dense_sift_extract(&g.replicate(3), &SiftParams::default()).unwrap();
        assert_eq!(c.dim, 384);
        for row in c.rows() {
            assert_eq!(&row[..128], &row[128..256]);
            assert_eq!(&row[..128], &row[256..]);
        }
    }

    #[test]
    fn red_and_green_edges_permute_blocks() {
        let edge = |channel: usize| {
            let mut img = ImageBuffer::new(16, 16, 3);
            for y in 0..16 {
                for x in 8..16 {
                    img.set(y, x, channel, 1.0);
                }
            }
            img
        };
        let r = color_dense_sift_extract(&edge(0), &SiftParams::default()).unwrap();
        let g = color_dense_sift_extract(&edge(1), &SiftParams::default()).unwrap();
        assert_eq!(&r.row(0)[..128], &g.row(0)[128..256]);
        assert_eq!(&r.row(0)[128..256], &g.row(0)[..128]);
        assert_eq!(&r.row(0)[256..], &g.row(0)[256..]);
        assert!(r.row(0)[..128].iter().any(|&v| v > 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn descriptors_bounded_and_offset_invariant(seed in 0usize..500, offset in -0.3f64..0.3) {
            let f = move |y: usize, x: usize| ((y * 13 + x * 29 + seed) % 17) as f64 / 17.0;
            let a = color_dense_sift_extract(&ImageBuffer::from_vec(24, 32, 3, (0..24 * 32 * 3).map(|i| f(i / 96, i % 96)).collect()).unwrap(), &SiftParams::default()).unwrap();
            for row in a.rows() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(n.is_finite() && n <= 1.0 + 1e-6);
            }
            let g = dense_sift_extract(&gray(24, 32, f), &SiftParams::default()).unwrap();
            let h = dense_sift_extract(&gray(24, 32, |y, x| f(y, x) + offset), &SiftParams::default()).unwrap();
            for (u, v) in g.descriptors.iter().zip(&h.descriptors) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
