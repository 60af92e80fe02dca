use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::TrainedModel;
use crate::error::{Error, Result};
use crate::evaluation::PageClassifier;
use crate::features::{color_dense_sift_extract, hog_extract, HogParams, SiftParams};
use crate::image::ImageBuffer;

/// Page-level features used to rank representatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeFeature {
    /// HOG over the whole page at canonical resolution, flattened.
    Hog,
    /// Color dense SIFT, mean-pooled over the page.
    ColorDsift,
    /// Penultimate network activations.
    Embed,
}

impl RepresentativeFeature {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hog => "hog",
            Self::ColorDsift => "color_dsift",
            Self::Embed => "embed",
        }
    }
}

impl FromStr for RepresentativeFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hog" => Ok(Self::Hog),
            "color_dsift" => Ok(Self::ColorDsift),
            "embed" => Ok(Self::Embed),
            _ => Err(Error::invalid(format!(
                "unknown feature `{s}` (expected hog, color_dsift or embed)"
            ))),
        }
    }
}

/// Feature vector of one page. `Embed` needs a model; the others resize to
/// `resolution` first so every page has the same dimension.
pub fn page_feature(
    kind: RepresentativeFeature,
    img: &ImageBuffer,
    resolution: [usize; 2],
    model: Option<&TrainedModel>,
) -> Result<Vec<f64>> {
    match kind {
        RepresentativeFeature::Hog => {
            let grid = hog_extract(
                &img.resize(resolution[0], resolution[1]),
                &HogParams::default(),
            )?;
            Ok(grid.descriptors)
        }
        RepresentativeFeature::ColorDsift => {
            let grid = color_dense_sift_extract(
                &img.resize(resolution[0], resolution[1]),
                &SiftParams::default(),
            )?;
            let mut mean = vec![0.0; grid.dim];
            for row in grid.rows() {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            let n = grid.len().max(1) as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(mean)
        }
        RepresentativeFeature::Embed => {
            let model =
                model.ok_or_else(|| Error::invalid("embed features need a trained network"))?;
            Ok(model.features(img, "embed")?.into_data())
        }
    }
}

pub fn page_features(
    kind: RepresentativeFeature,
    images: &[ImageBuffer],
    resolution: [usize; 2],
    model: Option<&TrainedModel>,
) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| page_feature(kind, img, resolution, model))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    /// Stop once this many candidates survive.
    pub target: Option<usize>,
    /// Share of survivors eliminated per round (at least one).
    pub fraction: f64,
    /// Maximum number of elimination rounds.
    pub rounds: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            target: None,
            fraction: 0.05,
            rounds: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPage {
    pub page_id: String,
    /// Negative distance to the final centroid.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EliminatedPage {
    pub page_id: String,
    /// 1-based round in which the page was dropped.
    pub round: usize,
    /// Distance to that round's centroid.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<u32>,
    pub feature: String,
    pub kept: Vec<RankedPage>,
    pub eliminated: Vec<EliminatedPage>,
    pub rounds: usize,
}

fn centroid(features: &[&[f64]]) -> Vec<f64> {
    let mut c = vec![0.0; features[0].len()];
    for f in features {
        c.iter_mut().zip(*f).for_each(|(a, v)| *a += v);
    }
    let n = features.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Iterative outlier elimination: each round drops the survivors farthest
/// from the survivors' centroid. Among equal distances the highest page id
/// goes first. Survivors are scored by negative distance to the final
/// centroid, best first.
pub fn select_representatives(
    candidates: &[(String, Vec<f64>)],
    feature: &str,
    cfg: &SelectConfig,
) -> Result<RankingReport> {
    let n = candidates.len();
    if n < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 candidates, got {n}"
        )));
    }
    let dim = candidates[0].1.len();
    if dim == 0 || candidates.iter().any(|(_, f)| f.len() != dim) {
        return Err(Error::shape(
            "select_representatives",
            "candidate features must share one nonzero dimension",
        ));
    }
    if candidates
        .iter()
        .any(|(_, f)| f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("candidate feature".into()));
    }
    if let Some(t) = cfg.target {
        if t >= n || t == 0 {
            return Err(Error::invalid(format!(
                "target size {t} must be between 1 and {} candidates",
                n - 1
            )));
        }
    }
    if !(cfg.fraction > 0.0 && cfg.fraction < 1.0) {
        return Err(Error::invalid("elimination fraction must be in (0, 1)"));
    }
    let floor = cfg.target.unwrap_or(1);
    let mut alive: Vec<usize> = (0..n).collect();
    let mut eliminated = Vec::new();
    let mut rounds = 0;
    while rounds < cfg.rounds && alive.len() > floor {
        rounds += 1;
        let feats: Vec<&[f64]> = alive.iter().map(|&i| candidates[i].1.as_slice()).collect();
        let c = centroid(&feats);
        let mut by_distance: Vec<(usize, f64)> = alive
            .iter()
            .map(|&i| (i, distance(&candidates[i].1, &c)))
            .collect();
        by_distance.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| candidates[b.0].0.cmp(&candidates[a.0].0))
        });
        let drop = ((alive.len() as f64 * cfg.fraction).ceil() as usize)
            .max(1)
            .min(alive.len() - floor);
        for &(i, d) in &by_distance[..drop] {
            eliminated.push(EliminatedPage {
                page_id: candidates[i].0.clone(),
                round: rounds,
                distance: d,
            });
        }
        let gone: Vec<usize> = by_distance[..drop].iter().map(|p| p.0).collect();
        alive.retain(|i| !gone.contains(i));
    }
    let feats: Vec<&[f64]> = alive.iter().map(|&i| candidates[i].1.as_slice()).collect();
    let c = centroid(&feats);
    let mut kept: Vec<RankedPage> = alive
        .iter()
        .map(|&i| RankedPage {
            page_id: candidates[i].0.clone(),
            score: -distance(&candidates[i].1, &c),
        })
        .collect();
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.page_id.cmp(&b.page_id))
    });
    Ok(RankingReport {
        target_class: None,
        feature: feature.to_string(),
        kept,
        eliminated,
        rounds,
    })
}

/// Number of the first `k` images (in ranked order) not classified as
/// `target`. `k` is clamped to the list length.
pub fn representative_quality<C: PageClassifier + ?Sized>(
    clf: &C,
    ranked: &[ImageBuffer],
    target: u32,
    k: usize,
) -> Result<usize> {
    let k = k.min(ranked.len());
    let preds: Vec<u32> = ranked[..k]
        .par_iter()
        .map(|img| clf.classify(img).map(|p| p.0))
        .collect::<Result<_>>()?;
    Ok(preds.iter().filter(|&&p| p != target).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cands(values: &[f64]) -> Vec<(String, Vec<f64>)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("p{i:02}"), vec![v]))
            .collect()
    }

    #[test]
    fn drops_the_far_point() {
        let cfg = SelectConfig {
            target: Some(3),
            fraction: 0.05,
            rounds: 10,
        };
        let r = select_representatives(&cands(&[0.0, 0.1, -0.1, 5.0]), "x", &cfg).unwrap();
        assert_eq!(r.eliminated.len(), 1);
        assert_eq!(r.eliminated[0].page_id, "p03");
        assert_eq!(r.kept[0].page_id, "p00");
    }

    #[test]
    fn equal_features_fall_back_to_page_id() {
        let cfg = SelectConfig {
            target: Some(3),
            fraction: 0.05,
            rounds: 10,
        };
        let r = select_representatives(&cands(&[1.0; 6]), "x", &cfg).unwrap();
        let gone: Vec<&str> = r.eliminated.iter().map(|e| e.page_id.as_str()).collect();
        assert_eq!(gone, ["p05", "p04", "p03"]);
        let kept: Vec<&str> = r.kept.iter().map(|k| k.page_id.as_str()).collect();
        assert_eq!(kept, ["p00", "p01", "p02"]);
    }

    #[test]
    fn zero_rounds_ranks_everything() {
        let cfg = SelectConfig {
            target: None,
            fraction: 0.05,
            rounds: 0,
        };
        let r = select_representatives(&cands(&[0.0, 3.0, 1.0, 2.0]), "x", &cfg).unwrap();
        assert!(r.eliminated.is_empty());
        let kept: Vec<&str> = r.kept.iter().map(|k| k.page_id.as_str()).collect();
        // centroid 1.5: distances 1.5, 1.5, 0.5, 0.5
        assert_eq!(kept, ["p02", "p03", "p00", "p01"]);
    }

    #[test]
    fn rejects_bad_requests() {
        let c = cands(&[0.0, 1.0, 2.0, 3.0]);
        let cfg = |t| SelectConfig {
            target: Some(t),
            ..Default::default()
        };
        assert!(select_representatives(&c, "x", &cfg(4)).is_err());
        assert!(select_representatives(&c[..3], "x", &SelectConfig::default()).is_err());
        assert!(select_representatives(&c, "x", &cfg(3)).is_ok());
    }

    struct ById;

    impl PageClassifier for ById {
        fn classes(&self) -> Vec<u32> {
            vec![1, 2]
        }

        fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
            Ok((if img.get(0, 0, 0) > 0.5 { 2 } else { 1 }, vec![0.5, 0.5]))
        }
    }

    #[test]
    fn quality_counts_misclassified_prefix() {
        let imgs: Vec<ImageBuffer> = [0.0, 0.0, 1.0, 0.0, 1.0]
            .iter()
            .map(|&v| ImageBuffer::filled(1, 1, &[v]))
            .collect();
        assert_eq!(representative_quality(&ById, &imgs, 1, 0).unwrap(), 0);
        assert_eq!(representative_quality(&ById, &imgs, 1, 2).unwrap(), 0);
        assert_eq!(representative_quality(&ById, &imgs, 1, 3).unwrap(), 1);
        assert_eq!(representative_quality(&ById, &imgs, 1, 99).unwrap(), 2);
    }

    proptest! {
        #[test]
        fn partition_and_monotone_scores(values in prop::collection::vec(-10.0f64..10.0, 4..40), target in 1usize..4, rounds in 0usize..6) {
            let c = cands(&values);
            let cfg = SelectConfig { target: Some(target), fraction: 0.2, rounds };
            let r = select_representatives(&c, "x", &cfg).unwrap();
            prop_assert_eq!(r.kept.len() + r.eliminated.len(), c.len());
            let mut all: Vec<&str> = r.kept.iter().map(|k| k.page_id.as_str()).chain(r.eliminated.iter().map(|e| e.page_id.as_str())).collect();
            all.sort();
            let want: Vec<String> = c.iter().map(|p| p.0.clone()).collect();
            prop_assert_eq!(all, want.iter().map(String::as_str).collect::<Vec<_>>());
            prop_assert!(r.kept.windows(2).all(|w| w[0].score >= w[1].score));
            prop_assert!(r.kept.len() >= target);
            // survivors shrink strictly each round
            for round in 1..=r.rounds {
                prop_assert!(r.eliminated.iter().any(|e| e.round == round));
            }
            prop_assert!(r.eliminated.windows(2).all(|w| w[0].round <= w[1].round));
        }
    }
}
