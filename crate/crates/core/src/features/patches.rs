use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::corpus::PageSize;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// A square patch of a page, by top-left corner.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub page_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchRef {
    pub fn crop(&self, page: &ImageBuffer) -> Result<ImageBuffer> {
        page.crop(self.x, self.y, self.size, self.size)
    }

    /// Intersection over union with another patch on the same page.
    pub fn iou(&self, other: &PatchRef) -> f64 {
        let ix = (self.x + self.size)
            .min(other.x + other.size)
            .saturating_sub(self.x.max(other.x));
        let iy = (self.y + self.size)
            .min(other.y + other.size)
            .saturating_sub(self.y.max(other.y));
        let inter = (ix * iy) as f64;
        inter / ((self.size * self.size + other.size * other.size) as f64 - inter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Regular grid with this step.
    Stride(usize),
    /// This many uniformly placed patches per page.
    Count(usize),
}

pub fn sample_patches(
    pages: &[PageSize],
    size: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<PatchRef>> {
    if size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let mut out = Vec::new();
    for (i, page) in pages.iter().enumerate() {
        if size > page.height.min(page.width) {
            return Err(Error::invalid(format!(
                "patch size {size} exceeds page `{}` ({}x{})",
                page.page_id, page.width, page.height
            )));
        }
        let (max_x, max_y) = (page.width - size, page.height - size);
        let at = |x, y| PatchRef {
            page_id: page.page_id.clone(),
            x,
            y,
            size,
        };
        match mode {
            SampleMode::Stride(0) => return Err(Error::invalid("patch stride must be positive")),
            SampleMode::Stride(s) => {
                for y in (0..=max_y).step_by(s) {
                    out.extend((0..=max_x).step_by(s).map(|x| at(x, y)));
                }
            }
            SampleMode::Count(n) => {
                let mut rng = artifact::rng(seed, 0x9A7C_0000 + i as u64);
                out.extend(
                    (0..n).map(|_| at(rng.random_range(0..=max_x), rng.random_range(0..=max_y))),
                );
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn page(h: usize, w: usize) -> PageSize {
        PageSize {
            page_id: "p".into(),
            height: h,
            width: w,
        }
    }

    #[test]
    fn stride_grid() {
        let ps = sample_patches(&[page(128, 128)], 64, SampleMode::Stride(64), 0).unwrap();
        let xy: Vec<_> = ps.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(xy, vec![(0, 0), (64, 0), (0, 64), (64, 64)]);
    }

    #[test]
    fn count_mode_is_seeded() {
        let pages = [page(50, 70), page(90, 40)];
        let a = sample_patches(&pages, 32, SampleMode::Count(10), 5).unwrap();
        assert_eq!(
            a,
            sample_patches(&pages, 32, SampleMode::Count(10), 5).unwrap()
        );
        assert_ne!(
            a,
            sample_patches(&pages, 32, SampleMode::Count(10), 6).unwrap()
        );
        assert!(sample_patches(&pages, 32, SampleMode::Count(0), 5)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn oversize_patch_is_an_error() {
        assert!(sample_patches(&[page(30, 100)], 31, SampleMode::Stride(4), 0).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = PatchRef {
            page_id: "p".into(),
            x: 0,
            y: 0,
            size: 10,
        };
        assert_eq!(a.iou(&a), 1.0);
        let b = PatchRef { x: 5, ..a.clone() };
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        let c = PatchRef { x: 10, ..a.clone() };
        assert_eq!(a.iou(&c), 0.0);
    }

    proptest! {
        #[test]
        fn refs_in_bounds(h in 8usize..80, w in 8usize..80, size in 1usize..8, stride in 1usize..9, n in 0usize..20, seed: u64) {
            let pages = [page(h, w)];
            for mode in [SampleMode::Stride(stride), SampleMode::Count(n)] {
                for p in sample_patches(&pages, size, mode, seed).unwrap() {
                    prop_assert!(p.x + p.size <= w && p.y + p.size <= h);
                }
            }
        }
    }
}
