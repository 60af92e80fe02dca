use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// An item paired with whether it is to be mirrored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmented<T> {
    pub item: T,
    pub flipped: bool,
}

/// Originals followed by their horizontal mirrors.
pub fn augment_flip<T: Clone>(items: &[T]) -> Vec<Augmented<T>> {
    let originals = items.iter().map(|i| Augmented {
        item: i.clone(),
        flipped: false,
    });
    let mirrors = items.iter().map(|i| Augmented {
        item: i.clone(),
        flipped: true,
    });
    originals.chain(mirrors).collect()
}

/// Per-pixel, per-channel training mean at canonical resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanImage {
    image: ImageBuffer,
}

const MEAN_MAGIC: &[u8; 8] = b"DRAWMEAN";

#[derive(Serialize, Deserialize)]
struct MeanHeader {
    height: usize,
    width: usize,
    channels: usize,
}

impl MeanImage {
    pub fn from_image(image: ImageBuffer) -> Self {
        Self { image }
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }

    pub fn resolution(&self) -> [usize; 2] {
        [self.image.height(), self.image.width()]
    }

    /// Resize to canonical resolution, then subtract the mean.
    pub fn preprocess(&self, img: &ImageBuffer) -> ImageBuffer {
        let mut out = img.resize(self.image.height(), self.image.width());
        for (v, m) in out.data_mut().iter_mut().zip(self.image.data()) {
            *v -= m;
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = MeanHeader {
            height: self.image.height(),
            width: self.image.width(),
            channels: self.image.channels(),
        };
        artifact::write_container(
            path,
            MEAN_MAGIC,
            &header,
            &artifact::f64_bytes(self.image.data().iter().copied()),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (MeanHeader, _) = artifact::read_container(path, MEAN_MAGIC)?;
        let data = artifact::take_f64(&payload, &mut 0, h.height * h.width * h.channels)?;
        Ok(Self {
            image: ImageBuffer::from_vec(h.height, h.width, h.channels, data)?,
        })
    }
}

/// Mean over `images` after resizing each to `resolution` (`[H, W]`).
pub fn compute_mean_image<I>(images: I, resolution: [usize; 2]) -> Result<MeanImage>
where
    I: IntoIterator<Item = ImageBuffer>,
{
    let [h, w] = resolution;
    let mut acc = vec![0.0; h * w * 3];
    let mut n = 0usize;
    for img in images {
        let img = if img.channels() == 1 {
            img.replicate(3)
        } else {
            img
        };
        let r = img.resize(h, w);
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::data(
            "cannot compute a mean image from zero training pages",
        ));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(MeanImage {
        image: ImageBuffer::from_vec(h, w, 3, acc)?,
    })
}
