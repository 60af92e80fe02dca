use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::bowsvm::{kmeans_fit, train_binary, BinarySvm, KMeansConfig, SvmConfig};
use crate::corpus::{MotifBox, PageSize};
use crate::error::{Error, Result};
use crate::features::{gradients, hog_extract, sample_patches, HogParams, PatchRef, SampleMode};
use crate::image::{self, ImageBuffer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub patch_size: usize,
    /// Grid step for patch sampling.
    pub stride: usize,
    /// Initial k-means clusters.
    pub clusters: usize,
    /// Cross-validation rounds (split swaps).
    pub rounds: usize,
    /// Firings kept per detector.
    pub top_m: usize,
    pub min_cluster_size: usize,
    pub negative_cap: usize,
    /// Patches whose mean luma gradient magnitude falls below this are
    /// skipped on both sides as too flat to be informative.
    pub min_gradient: f64,
    /// Firings scoring at or below this are not cluster members.
    pub member_threshold: f64,
    pub seed: u64,
    pub svm: SvmConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            stride: 16,
            clusters: 40,
            rounds: 3,
            top_m: 10,
            min_cluster_size: 3,
            negative_cap: 20_000,
            min_gradient: 0.03,
            member_threshold: -1.0,
            seed: 0,
            svm: SvmConfig {
                lambda: 1e-3,
                epochs: 10,
                seed: 0,
                eta0: 1.0,
            },
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 16 || self.stride == 0 {
            return Err(Error::invalid(
                "patch size must be at least 16 and stride positive",
            ));
        }
        if self.clusters == 0
            || self.top_m == 0
            || self.min_cluster_size == 0
            || self.negative_cap == 0
        {
            return Err(Error::invalid(
                "clusters, top_m, min_cluster_size and negative_cap must be positive",
            ));
        }
        Ok(())
    }
}

/// Firings overlapping a stronger one on the same page by more than this
/// are suppressed.
const SUPPRESS_IOU: f64 = 0.1;

/// One detection: a patch and its detector score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Firing {
    pub patch: PatchRef,
    pub score: f64,
    /// Whether the patch came from the positive set.
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub id: usize,
    pub members: Vec<PatchRef>,
    /// Linear detector over patch HOG.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub purity: f64,
    /// Positive share of all held-out patches scoring above the member
    /// threshold.
    pub discriminativeness: f64,
    pub positive_firings: usize,
    pub negative_firings: usize,
    /// Top firings on held-out positives and negatives, strongest first.
    pub firings: Vec<Firing>,
}

impl ClusterReport {
    pub fn score(&self, feature: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(feature)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }
}

/// Share of positive firings; 0 when there are none.
pub fn purity(firings: &[Firing]) -> f64 {
    if firings.is_empty() {
        return 0.0;
    }
    firings.iter().filter(|f| f.positive).count() as f64 / firings.len() as f64
}

/// HOG of one patch, flattened over its blocks.
pub fn patch_feature(page: &ImageBuffer, patch: &PatchRef) -> Result<Vec<f64>> {
    Ok(hog_extract(&patch.crop(page)?, &HogParams::default())?.descriptors)
}

/// Mean luma gradient magnitude of a patch.
pub fn gradient_energy(page: &ImageBuffer, patch: &PatchRef) -> Result<f64> {
    let gray = patch.crop(page)?.to_gray();
    let (gx, gy) = gradients(&gray);
    Ok(gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum::<f64>() / gx.len().max(1) as f64)
}

/// Intersection over union of a patch and an annotated box.
pub fn patch_box_iou(patch: &PatchRef, b: &MotifBox) -> f64 {
    let ix = (patch.x + patch.size)
        .min(b.x + b.w)
        .saturating_sub(patch.x.max(b.x));
    let iy = (patch.y + patch.size)
        .min(b.y + b.h)
        .saturating_sub(patch.y.max(b.y));
    let inter = (ix * iy) as f64;
    let union = (patch.size * patch.size + b.w * b.h) as f64 - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

struct Pool {
    refs: Vec<PatchRef>,
    feats: Vec<Vec<f64>>,
    positive: bool,
}

fn build_pool(
    pages: &[(&str, &ImageBuffer)],
    mode: SampleMode,
    cfg: &MiningConfig,
    positive: bool,
) -> Result<Pool> {
    let sizes: Vec<PageSize> = pages
        .iter()
        .map(|(id, img)| PageSize {
            page_id: (*id).to_string(),
            height: img.height(),
            width: img.width(),
        })
        .collect();
    let by_id: BTreeMap<&str, &ImageBuffer> = pages.iter().map(|(id, img)| (*id, *img)).collect();
    let sampled = sample_patches(&sizes, cfg.patch_size, mode, cfg.seed)?;
    let kept: Vec<Option<(PatchRef, Vec<f64>)>> = sampled
        .into_par_iter()
        .map(|r| {
            let page = by_id[r.page_id.as_str()];
            if gradient_energy(page, &r)? < cfg.min_gradient {
                return Ok(None);
            }
            let f = patch_feature(page, &r)?;
            Ok(Some((r, f)))
        })
        .collect::<Result<_>>()?;
    let (refs, feats) = kept.into_iter().flatten().unzip();
    Ok(Pool {
        refs,
        feats,
        positive,
    })
}

/// A page offered to patch mining. `group` (usually the book) keeps related
/// pages on the same side of the cross-validation split.
#[derive(Clone, Copy, Debug)]
pub struct MiningPage<'a> {
    pub page_id: &'a str,
    pub group: &'a str,
    pub image: &'a ImageBuffer,
}

/// Seeded halving by group, balancing page counts; falls back to halving by
/// page when there is only one group. Identical page sets split identically.
fn halves<'a>(pages: &[MiningPage<'a>], seed: u64) -> [Vec<(&'a str, &'a ImageBuffer)>; 2] {
    let mut rng = artifact::rng(seed, 0x4A1F);
    let mut groups: BTreeMap<&str, Vec<(&'a str, &'a ImageBuffer)>> = BTreeMap::new();
    for p in pages {
        groups
            .entry(p.group)
            .or_default()
            .push((p.page_id, p.image));
    }
    let mut out = [Vec::new(), Vec::new()];
    if groups.len() < 2 {
        let mut sorted: Vec<_> = pages.iter().map(|p| (p.page_id, p.image)).collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        sorted.shuffle(&mut rng);
        for (i, p) in sorted.into_iter().enumerate() {
            out[i % 2].push(p);
        }
        return out;
    }
    let mut groups: Vec<Vec<_>> = groups.into_values().collect();
    groups.shuffle(&mut rng);
    for mut g in groups {
        g.sort_by(|a, b| a.0.cmp(b.0));
        let side = usize::from(out[1].len() < out[0].len());
        out[side].extend(g);
    }
    out
}

fn train_detector(members: &[&[f64]], negatives: &Pool, cfg: &SvmConfig) -> Result<BinarySvm> {
    let mut xs: Vec<&[f64]> = members.to_vec();
    xs.extend(negatives.feats.iter().map(Vec::as_slice));
    let mut labels = vec![true; members.len()];
    labels.resize(xs.len(), false);
    let orders = crate::bowsvm::epoch_orders(xs.len(), cfg);
    train_binary(&xs, &labels, cfg, &orders)
}

/// Strongest `m` firings over the pools, suppressing patches that overlap an
/// already chosen one on the same page and side. Ties rank negatives first.
fn top_firings(det: &BinarySvm, pools: &[&Pool], m: usize) -> Vec<Firing> {
    let mut all: Vec<Firing> = pools
        .iter()
        .flat_map(|p| {
            p.refs.iter().zip(&p.feats).map(|(r, f)| Firing {
                patch: r.clone(),
                score: det.score(f),
                positive: p.positive,
            })
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.positive.cmp(&b.positive))
            .then_with(|| a.patch.cmp(&b.patch))
    });
    let mut out: Vec<Firing> = Vec::with_capacity(m);
    for f in all {
        if out.len() == m {
            break;
        }
        let overlaps = out.iter().any(|o| {
            o.positive == f.positive
                && o.patch.page_id == f.patch.page_id
                && o.patch.iou(&f.patch) > SUPPRESS_IOU
        });
        if !overlaps {
            out.push(f);
        }
    }
    out
}

/// Discriminative patch discovery against a negative set.
///
/// Positives and negatives are halved by group. Patch HOG from the first
/// positive half is clustered with k-means; each cluster then alternates
/// between training a linear detector (members vs negatives of the same
/// half) and re-forming its members from the detector's top firings on the
/// other half. Purity is the positive share of the final detector's top
/// firings on the held-out halves. Reports come back by purity, then by the
/// mean score of those firings.
///
/// Both sides are sampled on the same patch grid, so identical positive and
/// negative sets are exchangeable.
pub fn mine_discriminative_patches(
    positives: &[MiningPage<'_>],
    negatives: &[MiningPage<'_>],
    cfg: &MiningConfig,
) -> Result<Vec<ClusterReport>> {
    cfg.validate()?;
    if positives.len() < 2 || negatives.len() < 2 {
        return Err(Error::data(
            "patch mining needs at least two positive and two negative pages",
        ));
    }
    let pos_halves = halves(positives, cfg.seed);
    let neg_halves = halves(negatives, cfg.seed);
    let stride = SampleMode::Stride(cfg.stride);
    let pos: Vec<Pool> = pos_halves
        .iter()
        .map(|h| build_pool(h, stride, cfg, true))
        .collect::<Result<_>>()?;
    let neg: Vec<Pool> = neg_halves
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut pool = build_pool(h, stride, cfg, false)?;
            let cap = cfg.negative_cap / 2;
            if pool.refs.len() > cap {
                let keep = rand::seq::index::sample(
                    &mut artifact::rng(cfg.seed, 0x4E60 + i as u64),
                    pool.refs.len(),
                    cap,
                )
                .into_vec();
                let mut keep = keep;
                keep.sort_unstable();
                pool.refs = keep.iter().map(|&k| pool.refs[k].clone()).collect();
                pool.feats = keep
                    .iter()
                    .map(|&k| std::mem::take(&mut pool.feats[k]))
                    .collect();
            }
            Ok(pool)
        })
        .collect::<Result<_>>()?;
    if pos.iter().chain(&neg).any(|p| p.refs.is_empty()) {
        return Err(Error::data("no patches fit the pages"));
    }

    let dim = pos[0].feats[0].len();
    let flat: Vec<f64> = pos[0].feats.iter().flatten().copied().collect();
    let k = cfg.clusters.min(pos[0].refs.len());
    let codebook = kmeans_fit(
        &flat,
        dim,
        &KMeansConfig {
            k,
            seed: cfg.seed,
            max_iters: 30,
            tol: 1e-6,
        },
    )?;
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, f) in pos[0].feats.iter().enumerate() {
        clusters[codebook.nearest(f).0].push(i);
    }

    let min = cfg.min_cluster_size;
    let reports: Vec<Option<ClusterReport>> = clusters
        .into_par_iter()
        .enumerate()
        .map(|(id, mut members)| {
            let mut half = 0;
            for _ in 0..cfg.rounds {
                if members.len() < min {
                    return Ok(None);
                }
                let feats: Vec<&[f64]> = members
                    .iter()
                    .map(|&i| pos[half].feats[i].as_slice())
                    .collect();
                let det = train_detector(&feats, &neg[half], &cfg.svm)?;
                let other = 1 - half;
                let index: BTreeMap<&PatchRef, usize> = pos[other]
                    .refs
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r, i))
                    .collect();
                members = top_firings(&det, &[&pos[other]], cfg.top_m)
                    .into_iter()
                    .filter(|f| f.score > cfg.member_threshold)
                    .map(|f| index[&f.patch])
                    .collect();
                half = other;
            }
            if members.len() < min {
                return Ok(None);
            }
            let feats: Vec<&[f64]> = members
                .iter()
                .map(|&i| pos[half].feats[i].as_slice())
                .collect();
            let det = train_detector(&feats, &neg[half], &cfg.svm)?;
            let held = 1 - half;
            let firings = top_firings(&det, &[&pos[held], &neg[held]], cfg.top_m);
            let positive_firings = firings.iter().filter(|f| f.positive).count();
            let above = |p: &Pool| {
                p.feats
                    .iter()
                    .filter(|f| det.score(f) > cfg.member_threshold)
                    .count()
            };
            let (pa, na) = (above(&pos[held]), above(&neg[held]));
            let discriminativeness = if pa + na > 0 {
                pa as f64 / (pa + na) as f64
            } else {
                0.0
            };
            Ok(Some(ClusterReport {
                id,
                members: members.iter().map(|&i| pos[half].refs[i].clone()).collect(),
                weights: det.w,
                bias: det.b,
                purity: purity(&firings),
                discriminativeness,
                positive_firings,
                negative_firings: firings.len() - positive_firings,
                firings,
            }))
        })
        .collect::<Result<_>>()?;
    let mut reports: Vec<ClusterReport> = reports.into_iter().flatten().collect();
    let mean_score = |r: &ClusterReport| {
        r.firings.iter().map(|f| f.score).sum::<f64>() / r.firings.len().max(1) as f64
    };
    reports.sort_by(|a, b| {
        b.purity
            .total_cmp(&a.purity)
            .then_with(|| mean_score(b).total_cmp(&mean_score(a)))
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageFirings {
    pub page_id: String,
    pub count: usize,
    pub score: f64,
}

/// Rank pages by number of positive-scoring firings, then by summed score,
/// then by page id. Pages without firings come last with zeros.
pub fn rank_pages_by_firings(pages: &[String], firings: &[(String, f64)]) -> Vec<PageFirings> {
    let mut tally: BTreeMap<&str, (usize, f64)> =
        pages.iter().map(|p| (p.as_str(), (0, 0.0))).collect();
    for (page, score) in firings {
        if *score > 0.0 {
            if let Some(t) = tally.get_mut(page.as_str()) {
                t.0 += 1;
                t.1 += score;
            }
        }
    }
    let mut out: Vec<PageFirings> = tally
        .into_iter()
        .map(|(page_id, (count, score))| PageFirings {
            page_id: page_id.to_string(),
            count,
            score,
        })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| b.score.total_cmp(&a.score))
            .then_with(|| a.page_id.cmp(&b.page_id))
    });
    out
}

/// Run every detector over a grid of patches on each page and rank pages by
/// how many patches fire.
pub fn representatives_to_images(
    reports: &[ClusterReport],
    pages: &[(&str, &ImageBuffer)],
    patch_size: usize,
    stride: usize,
) -> Result<Vec<PageFirings>> {
    if reports.is_empty() {
        return Err(Error::invalid("no cluster reports to rank pages with"));
    }
    let firings: Vec<Vec<(String, f64)>> = pages
        .par_iter()
        .map(|(id, img)| {
            let size = [PageSize {
                page_id: (*id).to_string(),
                height: img.height(),
                width: img.width(),
            }];
            let mut out = Vec::new();
            for r in sample_patches(&size, patch_size, SampleMode::Stride(stride), 0)? {
                let f = patch_feature(img, &r)?;
                out.extend(reports.iter().map(|c| ((*id).to_string(), c.score(&f))));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let ids: Vec<String> = pages.iter().map(|(id, _)| (*id).to_string()).collect();
    Ok(rank_pages_by_firings(&ids, &firings.concat()))
}

/// Grid of member patches, one row per cluster.
pub fn cluster_montage(
    reports: &[ClusterReport],
    pages: &BTreeMap<String, ImageBuffer>,
    per_row: usize,
) -> Result<Option<ImageBuffer>> {
    let mut tiles = Vec::new();
    for r in reports {
        let size = r.members.first().map_or(16, |m| m.size);
        for i in 0..per_row {
            tiles.push(match r.members.get(i) {
                Some(m) => {
                    let page = pages
                        .get(&m.page_id)
                        .ok_or_else(|| Error::data(format!("page `{}` not loaded", m.page_id)))?;
                    let crop = m.crop(page)?;
                    if crop.channels() == 1 {
                        crop.replicate(3)
                    } else {
                        crop
                    }
                }
                None => ImageBuffer::filled(size, size, &[1.0, 1.0, 1.0]),
            });
        }
    }
    Ok(image::montage(&tiles, per_row.max(1), 2))
}
