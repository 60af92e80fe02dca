//! Categorization protocols, metrics, and the style-capture score.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::bowsvm::{BowClassifier, SVM_MAGIC};
use crate::convnet::{TrainedModel, MODEL_MAGIC};
use crate::corpus::{BookKey, CorpusManifest, LabeledPage, Partition, SplitAssignment};
use crate::error::{Error, Result};
use crate::image::{self, ImageBuffer};

/// Anything that maps a raw page to a class id plus one confidence per class
/// (in `classes()` order).
pub trait PageClassifier: Sync {
    fn classes(&self) -> Vec<u32>;
    fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)>;
}

impl PageClassifier for TrainedModel {
    fn classes(&self) -> Vec<u32> {
        self.classes.clone()
    }

    fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
        self.classify_image(img)
    }
}

impl PageClassifier for BowClassifier {
    fn classes(&self) -> Vec<u32> {
        self.svm.classes.clone()
    }

    fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
        self.predict(img)
    }
}

/// Either trained classifier, chosen by the file's magic bytes.
pub enum AnyClassifier {
    Cnn(TrainedModel),
    Bow(BowClassifier),
}

impl AnyClassifier {
    pub fn load(path: &Path) -> Result<Self> {
        let magic = artifact::sniff_magic(path)?;
        if &magic == MODEL_MAGIC {
            Ok(AnyClassifier::Cnn(TrainedModel::load(path)?))
        } else if &magic == SVM_MAGIC {
            Ok(AnyClassifier::Bow(BowClassifier::load(path)?))
        } else {
            Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "not a network or bag-of-words model".into(),
            })
        }
    }

    /// The network, or `Invalid` for a bag-of-words model.
    pub fn network(self, path: &Path) -> Result<TrainedModel> {
        match self {
            AnyClassifier::Cnn(m) => Ok(m),
            AnyClassifier::Bow(_) => Err(Error::invalid(format!(
                "{} is a bag-of-words model; this command needs a network",
                path.display()
            ))),
        }
    }
}

impl PageClassifier for AnyClassifier {
    fn classes(&self) -> Vec<u32> {
        match self {
            AnyClassifier::Cnn(m) => m.classes(),
            AnyClassifier::Bow(m) => m.classes(),
        }
    }

    fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
        match self {
            AnyClassifier::Cnn(m) => m.classify(img),
            AnyClassifier::Bow(m) => m.classify(img),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Instance,
    BookInstance,
    Book,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub book_id: Option<String>,
    pub truth: u32,
    pub pred: u32,
    /// Confidence of the predicted class.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub id: u32,
    pub f1: f64,
    /// Recall: diagonal over row sum.
    pub acc: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub classes: Vec<u32>,
    /// Rows are truth, columns predictions, both in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub items: Vec<ItemPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    /// Confusion matrix and per-class metrics over `items`.
    pub fn from_items(
        protocol: Protocol,
        classes: &[u32],
        items: Vec<ItemPrediction>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::data(
                "nothing to evaluate: the test partition is empty",
            ));
        }
        let idx: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let pos = |c: u32| {
            idx.get(&c)
                .copied()
                .ok_or_else(|| Error::invalid(format!("class {c} is not among {classes:?}")))
        };
        let n = classes.len();
        let mut confusion = vec![vec![0usize; n]; n];
        for it in &items {
            confusion[pos(it.truth)?][pos(it.pred)?] += 1;
        }
        let total = items.len();
        let diag: usize = (0..n).map(|i| confusion[i][i]).sum();
        let per_class = (0..n)
            .map(|i| {
                let row: usize = confusion[i].iter().sum();
                let col: usize = confusion.iter().map(|r| r[i]).sum();
                let tp = confusion[i][i] as f64;
                let recall = if row > 0 { tp / row as f64 } else { 0.0 };
                let precision = if col > 0 { tp / col as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    id: classes[i],
                    f1,
                    acc: recall,
                    support: row,
                }
            })
            .collect();
        Ok(Self {
            protocol,
            classes: classes.to_vec(),
            confusion,
            accuracy: diag as f64 / total as f64,
            per_class,
            items,
            split_hash: None,
            config_hash: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::read_json(path)
    }

    /// Row-normalized confusion as a grayscale heatmap, `cell` pixels per
    /// entry; white is 1.
    pub fn heatmap(&self, cell: usize) -> ImageBuffer {
        let n = self.classes.len();
        let mut img = ImageBuffer::new(n * cell, n * cell, 1);
        for (i, row) in self.confusion.iter().enumerate() {
            let s: usize = row.iter().sum();
            for (j, &v) in row.iter().enumerate() {
                let shade = if s > 0 { v as f64 / s as f64 } else { 0.0 };
                for y in i * cell..(i + 1) * cell {
                    for x in j * cell..(j + 1) * cell {
                        img.set(y, x, 0, shade);
                    }
                }
            }
        }
        img.replicate(3)
    }

    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        image::save(&self.heatmap(16), path)
    }
}

fn confidence_of(classes: &[u32], pred: u32, conf: &[f64]) -> f64 {
    classes
        .iter()
        .position(|&c| c == pred)
        .and_then(|i| conf.get(i))
        .copied()
        .unwrap_or(f64::NAN)
}

/// Classify test pages in parallel, keeping manifest order.
fn classify_pages<C: PageClassifier + ?Sized>(
    clf: &C,
    manifest: &CorpusManifest,
    pages: &[&LabeledPage],
) -> Result<Vec<(u32, Vec<f64>)>> {
    pages
        .par_iter()
        .map(|p| clf.classify(&manifest.load_page(p)?))
        .collect()
}

/// Classify every test page once and score page-level predictions.
pub fn evaluate_instances<C: PageClassifier + ?Sized>(
    clf: &C,
    manifest: &CorpusManifest,
    split: &SplitAssignment,
    protocol: Protocol,
) -> Result<EvalReport> {
    let pages = split.pages(manifest, Partition::Test);
    if pages.is_empty() {
        return Err(Error::data(
            "nothing to evaluate: the test partition is empty",
        ));
    }
    let classes = clf.classes();
    let preds = classify_pages(clf, manifest, &pages)?;
    let items = pages
        .iter()
        .zip(preds)
        .map(|(p, (pred, conf))| ItemPrediction {
            page_id: Some(p.page_id.clone()),
            book_id: None,
            truth: p.illustrator_id,
            pred,
            confidence: confidence_of(&classes, pred, &conf),
        })
        .collect();
    let mut report = EvalReport::from_items(protocol, &classes, items)?;
    report.split_hash = split.config_hash.clone();
    Ok(report)
}

/// Majority vote over page predictions. Ties go to the class with the highest
/// summed confidence over the book, then to the lowest class id. Returns the
/// class and its summed confidence.
pub fn book_vote(classes: &[u32], pages: &[(u32, Vec<f64>)]) -> (u32, f64) {
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    for (pred, _) in pages {
        *votes.entry(*pred).or_default() += 1;
    }
    let summed = |c: u32| {
        pages
            .iter()
            .map(|(_, conf)| confidence_of(classes, c, conf))
            .sum::<f64>()
    };
    let top = votes.values().copied().max().unwrap_or(0);
    let mut best: Option<(u32, f64)> = None;
    for (&c, &n) in &votes {
        if n != top {
            continue;
        }
        let s = summed(c);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((c, s));
        }
    }
    best.unwrap_or((classes.first().copied().unwrap_or(0), 0.0))
}

fn book_label(manifest: &CorpusManifest, key: &BookKey) -> String {
    let name = manifest
        .illustrators
        .iter()
        .find(|i| i.id == key.illustrator_id)
        .map_or_else(|| key.illustrator_id.to_string(), |i| i.name.clone());
    format!("{name}/{}", key.book_id)
}

/// Book-level protocol: vote each test book's page predictions.
pub fn evaluate_books<C: PageClassifier + ?Sized>(
    clf: &C,
    manifest: &CorpusManifest,
    split: &SplitAssignment,
) -> Result<EvalReport> {
    let pages = split.pages(manifest, Partition::Test);
    if pages.is_empty() {
        return Err(Error::data(
            "nothing to evaluate: the test partition is empty",
        ));
    }
    let classes = clf.classes();
    let preds = classify_pages(clf, manifest, &pages)?;
    let mut books: BTreeMap<BookKey, Vec<(u32, Vec<f64>)>> = BTreeMap::new();
    for (p, pred) in pages.iter().zip(preds) {
        books.entry(p.book_key()).or_default().push(pred);
    }
    let items = books
        .iter()
        .map(|(key, preds)| {
            let (pred, confidence) = book_vote(&classes, preds);
            ItemPrediction {
                page_id: None,
                book_id: Some(book_label(manifest, key)),
                truth: key.illustrator_id,
                pred,
                confidence,
            }
        })
        .collect();
    let mut report = EvalReport::from_items(Protocol::Book, &classes, items)?;
    report.split_hash = split.config_hash.clone();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureVerdict {
    pub index: usize,
    pub target: u32,
    pub pred: u32,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureReport {
    pub rate: f64,
    pub verdicts: Vec<CaptureVerdict>,
}

/// Fraction of stylized images classified as their style source's class.
pub fn style_capture_rate<C: PageClassifier + ?Sized>(
    clf: &C,
    stylized: &[(ImageBuffer, u32)],
) -> Result<CaptureReport> {
    if stylized.is_empty() {
        return Err(Error::data("no stylized images to score"));
    }
    let verdicts: Vec<CaptureVerdict> = stylized
        .par_iter()
        .enumerate()
        .map(|(index, (img, target))| {
            let (pred, _) = clf.classify(img)?;
            Ok(CaptureVerdict {
                index,
                target: *target,
                pred,
                correct: pred == *target,
            })
        })
        .collect::<Result<_>>()?;
    let rate = verdicts.iter().filter(|v| v.correct).count() as f64 / verdicts.len() as f64;
    Ok(CaptureReport { rate, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(truth: &[u32], pred: &[u32]) -> Vec<ItemPrediction> {
        truth
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&t, &p))| ItemPrediction {
                page_id: Some(format!("p{i}")),
                book_id: None,
                truth: t,
                pred: p,
                confidence: 1.0,
            })
            .collect()
    }

    #[test]
    fn hand_computed_metrics() {
        let r = EvalReport::from_items(Protocol::Instance, &[1, 2], items(&[1, 1, 2], &[1, 2, 2]))
            .unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((r.per_class[0].acc, r.per_class[1].acc), (0.5, 1.0));
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn perfect_classifier() {
        let t = [1, 2, 3, 3, 2, 1, 1];
        let r = EvalReport::from_items(Protocol::Instance, &[1, 2, 3], items(&t, &t)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(
            r.confusion,
            vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]
        );
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0 && m.acc == 1.0));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(EvalReport::from_items(Protocol::Instance, &[1, 2], vec![]).is_err());
    }

    #[test]
    fn votes() {
        let p = |c: u32, conf: [f64; 3]| (c, conf.to_vec());
        let classes = [3, 5, 7];
        assert_eq!(
            book_vote(
                &classes,
                &[
                    p(3, [0.5, 0.2, 0.3]),
                    p(3, [0.6, 0.2, 0.2]),
                    p(7, [0.1, 0.1, 0.8])
                ]
            )
            .0,
            3
        );
        // one vote each: summed confidence decides
        let ab = [p(3, [0.6, 0.0, 0.4]), p(7, [0.3, 0.0, 0.4])];
        assert_eq!(book_vote(&classes, &ab), (3, 0.8999999999999999));
        // full tie falls to the lowest id
        let tie = [p(5, [0.0, 0.5, 0.5]), p(7, [0.0, 0.5, 0.5])];
        assert_eq!(book_vote(&classes, &tie).0, 5);
    }

    /// Exact probability that a 5-page vote is right when each page is right
    /// with probability `p` and errors spread evenly over the other classes.
    fn enumerate_vote_accuracy(p: f64, num_classes: u32) -> f64 {
        let classes: Vec<u32> = (1..=num_classes).collect();
        let q = (1.0 - p) / (num_classes - 1) as f64;
        let mut total = 0.0;
        let outcomes = (num_classes as usize).pow(5);
        for code in 0..outcomes {
            let mut c = code;
            let mut prob = 1.0;
            let mut preds = Vec::new();
            for _ in 0..5 {
                let pred = (c % num_classes as usize) as u32 + 1;
                c /= num_classes as usize;
                prob *= if pred == 1 { p } else { q };
                // uninformative confidences: ties fall to the id rule
                preds.push((pred, vec![0.0; num_classes as usize]));
            }
            if book_vote(&classes, &preds).0 == 1 {
                total += prob;
            }
        }
        total
    }

    #[test]
    fn five_page_votes_beat_page_accuracy() {
        for classes in [2u32, 3, 4] {
            for p in [0.51, 0.6, 0.75, 0.9] {
                let book = enumerate_vote_accuracy(p, classes);
                assert!(book >= p, "C={classes} p={p}: book {book}");
            }
        }
        // two classes at p = 0.6: Σ_{k≥3} C(5,k) 0.6^k 0.4^(5−k)
        let direct: f64 = [(10.0, 3), (5.0, 4), (1.0, 5)]
            .iter()
            .map(|&(c, k)| c * 0.6f64.powi(k) * 0.4f64.powi(5 - k))
            .sum();
        assert!((enumerate_vote_accuracy(0.6, 2) - direct).abs() < 1e-12);
    }

    struct Fixed(Vec<u32>);

    impl PageClassifier for Fixed {
        fn classes(&self) -> Vec<u32> {
            vec![1, 2, 3]
        }

        fn classify(&self, img: &ImageBuffer) -> Result<(u32, Vec<f64>)> {
            let k = (img.get(0, 0, 0) * 10.0).round() as usize;
            Ok((self.0[k], vec![0.0; 3]))
        }
    }

    #[test]
    fn capture_rate_counts_matches() {
        let clf = Fixed(vec![1, 1, 2, 3, 1]);
        let pairs: Vec<(ImageBuffer, u32)> = (0..5)
            .map(|k| (ImageBuffer::filled(2, 2, &[k as f64 / 10.0; 3]), 1))
            .collect();
        // predictions 1,1,2,3,1 against target 1 → 3/5
        let r = style_capture_rate(&clf, &pairs).unwrap();
        assert_eq!(r.rate, 0.6);
        let pairs: Vec<(ImageBuffer, u32)> = (0..5)
            .map(|k| {
                (
                    ImageBuffer::filled(2, 2, &[k as f64 / 10.0; 3]),
                    [1, 1, 2, 3, 2][k],
                )
            })
            .collect();
        assert_eq!(style_capture_rate(&clf, &pairs).unwrap().rate, 0.8);
        assert!(style_capture_rate(&clf, &[]).is_err());
    }

    #[test]
    fn heatmap_shades_rows() {
        let r = EvalReport::from_items(Protocol::Instance, &[1, 2], items(&[1, 1, 2], &[1, 2, 2]))
            .unwrap();
        let h = r.heatmap(4);
        assert_eq!((h.height(), h.width()), (8, 8));
        assert_eq!(h.get(0, 0, 0), 0.5);
        assert_eq!(h.get(4, 4, 1), 1.0);
        assert_eq!(h.get(4, 0, 2), 0.0);
    }

    proptest! {
        #[test]
        fn confusion_margins_and_permutation(pairs in prop::collection::vec((1u32..=4, 1u32..=4), 1..60)) {
            let (t, p): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
            let classes = [1, 2, 3, 4];
            let r = EvalReport::from_items(Protocol::Instance, &classes, items(&t, &p)).unwrap();
            let total: usize = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total, t.len());
            for (i, &c) in classes.iter().enumerate() {
                prop_assert_eq!(r.confusion[i].iter().sum::<usize>(), t.iter().filter(|&&x| x == c).count());
                prop_assert_eq!(r.confusion.iter().map(|row| row[i]).sum::<usize>(), p.iter().filter(|&&x| x == c).count());
                // recall recomputed from the item list
                let support = r.items.iter().filter(|it| it.truth == c).count();
                let hits = r.items.iter().filter(|it| it.truth == c && it.pred == c).count();
                let want = if support > 0 { hits as f64 / support as f64 } else { 0.0 };
                prop_assert!((r.per_class[i].acc - want).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.per_class[i].f1));
            }
            let trace: usize = (0..4).map(|i| r.confusion[i][i]).sum();
            prop_assert!((r.accuracy - trace as f64 / total as f64).abs() < 1e-12);

            let perm = [0u32, 3, 1, 4, 2];
            let tp: Vec<u32> = t.iter().map(|&c| perm[c as usize]).collect();
            let pp: Vec<u32> = p.iter().map(|&c| perm[c as usize]).collect();
            let rp = EvalReport::from_items(Protocol::Instance, &classes, items(&tp, &pp)).unwrap();
            prop_assert_eq!(rp.accuracy, r.accuracy);
            for i in 0..4 {
                for j in 0..4 {
                    let (pi, pj) = (perm[i + 1] as usize - 1, perm[j + 1] as usize - 1);
                    prop_assert_eq!(rp.confusion[pi][pj], r.confusion[i][j]);
                }
            }
        }

        #[test]
        fn vote_ignores_page_order(preds in prop::collection::vec((1u32..=3, prop::collection::vec(0.0f64..1.0, 3)), 1..9), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let classes = [1, 2, 3];
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut artifact::rng(seed, 0));
            prop_assert_eq!(book_vote(&classes, &preds).0, book_vote(&classes, &shuffled).0);
        }
    }
}
