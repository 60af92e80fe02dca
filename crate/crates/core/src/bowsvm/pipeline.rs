use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encode::{bow_encode, hellinger_map};
use super::kmeans::{kmeans_fit, Codebook, KMeansConfig};
use super::svm::{svm_predict, svm_train, LinearSvmModel, SvmConfig};
use crate::artifact;
use crate::error::{Error, Result};
use crate::features::{extract, DescriptorGrid, DescriptorKind};
use crate::image::ImageBuffer;

/// Everything needed to fit the bag-of-words baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowConfig {
    pub descriptor: DescriptorKind,
    pub kmeans: KMeansConfig,
    /// Descriptors drawn uniformly from the training pages for the codebook.
    pub pool_cap: usize,
    pub subsample_seed: u64,
    pub svm: SvmConfig,
}

impl Default for BowConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorKind::Dsift,
            kmeans: KMeansConfig::default(),
            pool_cap: 200_000,
            subsample_seed: 0,
            svm: SvmConfig::default(),
        }
    }
}

/// Codebook plus one-vs-all SVM over Hellinger-mapped histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct BowClassifier {
    pub codebook: Codebook,
    pub svm: LinearSvmModel,
}

pub fn extract_all(images: &[ImageBuffer], kind: DescriptorKind) -> Result<Vec<DescriptorGrid>> {
    images.par_iter().map(|img| extract(kind, img)).collect()
}

/// Uniform subsample of at most `cap` descriptor rows across `grids`.
pub fn descriptor_pool(grids: &[DescriptorGrid], cap: usize, seed: u64) -> (Vec<f64>, usize) {
    let dim = grids.first().map_or(0, |g| g.dim);
    let total: usize = grids.iter().map(DescriptorGrid::len).sum();
    let all = || grids.iter().flat_map(|g| g.rows());
    if total <= cap {
        return (all().flatten().copied().collect(), dim);
    }
    let mut rng = artifact::rng(seed, 0x9001);
    let mut picked = index::sample(&mut rng, total, cap).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(cap * dim);
    let mut next = picked.iter().peekable();
    for (i, row) in all().enumerate() {
        if next.peek() == Some(&&i) {
            out.extend_from_slice(row);
            next.next();
        }
    }
    (out, dim)
}

pub fn fit_codebook(grids: &[DescriptorGrid], cfg: &BowConfig) -> Result<Codebook> {
    let (pool, dim) = descriptor_pool(grids, cfg.pool_cap, cfg.subsample_seed);
    let mut cb = kmeans_fit(&pool, dim, &cfg.kmeans)?;
    cb.descriptor_kind = Some(cfg.descriptor);
    cb.subsample_seed = Some(cfg.subsample_seed);
    Ok(cb)
}

/// Hellinger-mapped BoW histogram for each grid.
pub fn encode_all(grids: &[DescriptorGrid], codebook: &Codebook) -> Result<Vec<Vec<f64>>> {
    grids
        .par_iter()
        .map(|g| hellinger_map(&bow_encode(g, codebook)?))
        .collect()
}

impl BowClassifier {
    pub fn fit(images: &[ImageBuffer], labels: &[u32], cfg: &BowConfig) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        let grids = extract_all(images, cfg.descriptor)?;
        let codebook = fit_codebook(&grids, cfg)?;
        let feats = encode_all(&grids, &codebook)?;
        let mut svm = svm_train(&feats, labels, &cfg.svm)?;
        svm.codebook_k = Some(codebook.k);
        svm.descriptor_dim = Some(codebook.dim);
        Ok(Self { codebook, svm })
    }

    pub fn descriptor(&self) -> DescriptorKind {
        self.codebook
            .descriptor_kind
            .unwrap_or(DescriptorKind::Dsift)
    }

    /// Predicted class and per-class margins.
    pub fn predict(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
        let grid = extract(self.descriptor(), img)?;
        svm_predict(
            &self.svm,
            &hellinger_map(&bow_encode(&grid, &self.codebook)?)?,
        )
    }

    pub fn predict_all(&self, images: &[ImageBuffer]) -> Result<Vec<(u32, Vec<f64>)>> {
        images.par_iter().map(|img| self.predict(img)).collect()
    }

    /// Writes the SVM to `path` and the codebook to `<path>.codebook`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.svm.save(path)?;
        self.codebook.save(&codebook_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let svm = LinearSvmModel::load(path)?;
        let codebook = Codebook::load(&codebook_path(path))?;
        if svm.dim != codebook.k {
            return Err(Error::data(format!(
                "SVM expects {} features but the codebook has {} words",
                svm.dim, codebook.k
            )));
        }
        Ok(Self { codebook, svm })
    }
}

fn codebook_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "bow".into());
    name.push(".codebook");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{default_styles, render_page};

    #[test]
    fn pool_is_capped_and_seeded() {
        let img = ImageBuffer::from_vec(
            48,
            48,
            1,
            (0..48 * 48)
                .map(|i| ((i * 31) % 97) as f64 / 97.0)
                .collect(),
        )
        .unwrap();
        let grids = extract_all(&[img.clone(), img], DescriptorKind::Hog).unwrap();
        let (all, dim) = descriptor_pool(&grids, usize::MAX, 0);
        assert_eq!(all.len(), 2 * 25 * dim);
        let (a, _) = descriptor_pool(&grids, 7, 3);
        assert_eq!(a.len(), 7 * dim);
        assert_eq!(a, descriptor_pool(&grids, 7, 3).0);
    }

    #[test]
    fn separates_two_synthetic_styles() {
        let specs = default_styles(2, 1);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (s, spec) in specs.iter().enumerate() {
            for p in 0..8 {
                images.push(render_page(spec, p % 2, p, [48, 48], 1).0);
                labels.push(s as u32 + 1);
            }
        }
        let cfg = BowConfig {
            descriptor: DescriptorKind::ColorDsift,
            kmeans: KMeansConfig {
                k: 8,
                seed: 1,
                max_iters: 20,
                tol: 1e-6,
            },
            pool_cap: 2000,
            subsample_seed: 2,
            svm: SvmConfig {
                epochs: 30,
                ..SvmConfig::default()
            },
        };
        let clf = BowClassifier::fit(&images, &labels, &cfg).unwrap();
        let correct = images
            .iter()
            .zip(&labels)
            .filter(|(img, &l)| clf.predict(img).unwrap().0 == l)
            .count();
        assert!(correct >= 14, "{correct}/16");
        assert_eq!(clf, BowClassifier::fit(&images, &labels, &cfg).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bow.bin");
        clf.save(&path).unwrap();
        assert!(dir.path().join("bow.bin.codebook").is_file());
        let back = BowClassifier::load(&path).unwrap();
        assert_eq!(
            back.predict(&images[3]).unwrap().0,
            clf.predict(&images[3]).unwrap().0
        );
    }
}
