//! Classical local descriptors and patch sampling.

mod cache;
mod hog;
mod patches;
mod sift;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use cache::{load_descriptor_cache, save_descriptor_cache};
pub use hog::{hog_extract, HogParams};
pub use patches::{sample_patches, PatchRef, SampleMode};
pub use sift::{color_dense_sift_extract, dense_sift_extract, SiftParams};

pub const EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Hog,
    Dsift,
    ColorDsift,
}

impl DescriptorKind {
    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::Hog => "hog",
            DescriptorKind::Dsift => "dsift",
            DescriptorKind::ColorDsift => "color_dsift",
        }
    }
}

impl std::str::FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hog" => Ok(DescriptorKind::Hog),
            "dsift" => Ok(DescriptorKind::Dsift),
            "color_dsift" => Ok(DescriptorKind::ColorDsift),
            _ => Err(Error::invalid(format!(
                "unknown descriptor kind `{s}` (expected hog, dsift or color_dsift)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DescriptorParams {
    Hog(HogParams),
    Sift(SiftParams),
}

/// Descriptors sampled over an image, one row per site.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    /// Site centers as `(x, y)` pixels.
    pub positions: Vec<(usize, usize)>,
    /// Row-major `N × dim`.
    pub descriptors: Vec<f64>,
    pub dim: usize,
    pub kind: DescriptorKind,
    pub params: DescriptorParams,
}

impl DescriptorGrid {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.descriptors.chunks_exact(self.dim.max(1))
    }
}

/// Extract the descriptor family `kind` with default parameters.
pub fn extract(kind: DescriptorKind, img: &ImageBuffer) -> Result<DescriptorGrid> {
    match kind {
        DescriptorKind::Hog => hog_extract(img, &HogParams::default()),
        DescriptorKind::Dsift => dense_sift_extract(img, &SiftParams::default()),
        DescriptorKind::ColorDsift => color_dense_sift_extract(img, &SiftParams::default()),
    }
}

/// Central-difference gradients with replicated borders, as `(gx, gy)` planes.
pub(crate) fn gradients(gray: &ImageBuffer) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (gray.height(), gray.width());
    let d = gray.data();
    let at = |y: usize, x: usize| d[y * w + x];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            gx[y * w + x] = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            gy[y * w + x] = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
        }
    }
    (gx, gy)
}

/// Scale to unit L2 norm (ε-guarded), clip at `clip`, renormalize.
pub(crate) fn normalize_clip(v: &mut [f64], clip: f64) {
    l2_normalize(v);
    v.iter_mut().for_each(|x| *x = x.min(clip));
    l2_normalize(v);
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= n);
}
