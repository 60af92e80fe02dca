use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{BookKey, CorpusManifest, LabeledPage};
use crate::artifact;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Instance,
    BookBased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// Disjoint train/validation/test page-id sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Manifest the split was drawn from, when persisted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl SplitAssignment {
    pub fn partition(&self, which: Partition) -> &[String] {
        match which {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn partition_of(&self, page_id: &str) -> Option<Partition> {
        [Partition::Train, Partition::Val, Partition::Test]
            .into_iter()
            .find(|&p| self.partition(p).iter().any(|id| id == page_id))
    }

    /// Pages of a partition resolved against the manifest, in manifest order.
    pub fn pages<'m>(
        &self,
        manifest: &'m CorpusManifest,
        which: Partition,
    ) -> Vec<&'m LabeledPage> {
        let ids: BTreeSet<&str> = self.partition(which).iter().map(String::as_str).collect();
        manifest
            .pages
            .iter()
            .filter(|p| ids.contains(p.page_id.as_str()))
            .collect()
    }

    /// Coverage and disjointness against `manifest`; for book-based splits,
    /// also that no book spans partitions and every illustrator has a test book.
    pub fn validate(&self, manifest: &CorpusManifest) -> Result<()> {
        let mut owner: BTreeMap<&str, Partition> = BTreeMap::new();
        for which in [Partition::Train, Partition::Val, Partition::Test] {
            for id in self.partition(which) {
                if owner.insert(id.as_str(), which).is_some() {
                    return Err(Error::data(format!(
                        "page `{id}` assigned to more than one partition"
                    )));
                }
            }
        }
        let all: BTreeSet<&str> = manifest.pages.iter().map(|p| p.page_id.as_str()).collect();
        if owner.len() != all.len() || owner.keys().any(|k| !all.contains(k)) {
            return Err(Error::data("split does not cover the manifest exactly"));
        }
        if self.kind == SplitKind::BookBased {
            let mut book_part: BTreeMap<BookKey, Partition> = BTreeMap::new();
            for p in &manifest.pages {
                let part = owner[p.page_id.as_str()];
                if let Some(prev) = book_part.insert(p.book_key(), part) {
                    if prev != part {
                        return Err(Error::data(format!(
                            "book `{}` spans partitions",
                            p.book_id
                        )));
                    }
                }
            }
            for ill in &manifest.illustrators {
                let has_test = book_part
                    .iter()
                    .any(|(k, &v)| k.illustrator_id == ill.id && v == Partition::Test);
                if !has_test {
                    return Err(Error::data(format!(
                        "illustrator `{}` has no test book",
                        ill.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::read_json(path)
    }
}

/// Partition sizes for `n` items by largest remainder; nonzero-fraction
/// partitions get at least one item when `n` allows.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (sizes[j], std::cmp::Reverse(j)))
                .unwrap();
            if sizes[donor] > 1 {
                sizes[donor] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    Ok(())
}

/// Page-level split stratified by illustrator.
pub fn make_instance_split(
    manifest: &CorpusManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    check_fractions(fractions)?;
    let parts = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut rng = artifact::rng(seed, 0x5011);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for ill in &manifest.illustrators {
        let mut ids: Vec<&str> = manifest
            .pages
            .iter()
            .filter(|p| p.illustrator_id == ill.id)
            .map(|p| p.page_id.as_str())
            .collect();
        if ids.len() < parts {
            return Err(Error::data(format!(
                "illustrator `{}` has {} pages, fewer than the {} partitions",
                ill.name,
                ids.len(),
                parts
            )));
        }
        ids.shuffle(&mut rng);
        let sizes = apportion(ids.len(), fractions);
        let mut it = ids.into_iter();
        for (bucket, size) in out.iter_mut().zip(sizes) {
            bucket.extend(it.by_ref().take(size).map(str::to_string));
        }
    }
    let [train, val, test] = out;
    Ok(SplitAssignment {
        kind: SplitKind::Instance,
        seed,
        train,
        val,
        test,
        manifest: None,
        config_hash: None,
    })
}

/// Whole-book split: per illustrator, a seeded share of books goes to test
/// (at least one, never all), then validation takes the smallest remaining
/// books (ties by book id) until `val_fraction` of the remaining pages is met.
pub fn make_book_split(
    manifest: &CorpusManifest,
    test_book_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(0.0..=1.0).contains(&test_book_fraction) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid("book split fractions out of range"));
    }
    let books = manifest.books();
    let mut rng = artifact::rng(seed, 0xB00C);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for ill in &manifest.illustrators {
        let mut own: Vec<(&BookKey, &Vec<&LabeledPage>)> = books
            .iter()
            .filter(|(k, _)| k.illustrator_id == ill.id)
            .collect();
        if own.len() < 2 {
            return Err(Error::data(format!(
                "illustrator `{}` has {} book(s); book-based splits need at least 2",
                ill.name,
                own.len()
            )));
        }
        own.shuffle(&mut rng);
        let n_test =
            ((test_book_fraction * own.len() as f64).round() as usize).clamp(1, own.len() - 1);
        let (test_books, rest) = own.split_at(n_test);
        let mut rest = rest.to_vec();
        rest.sort_by(|a, b| {
            a.1.len()
                .cmp(&b.1.len())
                .then_with(|| a.0.book_id.cmp(&b.0.book_id))
        });
        let rest_pages: usize = rest.iter().map(|(_, p)| p.len()).sum();
        let target = val_fraction * rest_pages as f64;
        let mut val_pages = 0usize;
        let mut val_books = 0usize;
        while (val_pages as f64) < target && val_books + 1 < rest.len() {
            val_pages += rest[val_books].1.len();
            val_books += 1;
        }
        let ids = |books: &[(&BookKey, &Vec<&LabeledPage>)]| -> Vec<String> {
            books
                .iter()
                .flat_map(|(_, pages)| pages.iter().map(|p| p.page_id.clone()))
                .collect()
        };
        test.extend(ids(test_books));
        val.extend(ids(&rest[..val_books]));
        train.extend(ids(&rest[val_books..]));
    }
    // manifest order inside each partition
    let order = manifest.index();
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by_key(|id| order[id.as_str()]);
    }
    Ok(SplitAssignment {
        kind: SplitKind::BookBased,
        seed,
        train,
        val,
        test,
        manifest: None,
        config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_manifest(books_per: &[usize], pages_per_book: usize) -> CorpusManifest {
        let mut pages = Vec::new();
        let mut names = Vec::new();
        for (i, &nb) in books_per.iter().enumerate() {
            names.push(format!("ill{i:02}"));
            for b in 0..nb {
                for p in 0..pages_per_book {
                    pages.push(LabeledPage {
                        page_id: format!("ill{i:02}/b{b:02}/p{p:03}"),
                        illustrator_id: i as u32 + 1,
                        book_id: format!("b{b:02}"),
                        path: PathBuf::from("unused"),
                    });
                }
            }
        }
        CorpusManifest::from_pages(&names, pages, [128, 128], PathBuf::new())
    }

    #[test]
    fn hundred_pages_split_70_10_20() {
        let m = toy_manifest(&[4], 25);
        let s = make_instance_split(&m, [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        s.validate(&m).unwrap();
    }

    #[test]
    fn degenerate_fractions_put_everything_in_train() {
        let m = toy_manifest(&[2, 3], 5);
        let s = make_instance_split(&m, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(s.train.len(), 25);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn same_seed_same_split() {
        let m = toy_manifest(&[3, 3], 7);
        assert_eq!(
            make_instance_split(&m, [0.7, 0.1, 0.2], 9).unwrap(),
            make_instance_split(&m, [0.7, 0.1, 0.2], 9).unwrap()
        );
        assert_ne!(
            make_instance_split(&m, [0.7, 0.1, 0.2], 9).unwrap(),
            make_instance_split(&m, [0.7, 0.1, 0.2], 10).unwrap()
        );
    }

    #[test]
    fn too_few_pages_names_illustrator() {
        let m = toy_manifest(&[1, 1], 2);
        let err = make_instance_split(&m, [0.7, 0.1, 0.2], 0).unwrap_err();
        assert!(err.to_string().contains("ill00"), "{err}");
    }

    #[test]
    fn two_books_one_test_one_train() {
        let m = toy_manifest(&[2, 2, 2], 6);
        let s = make_book_split(&m, 0.25, 0.1, 4).unwrap();
        s.validate(&m).unwrap();
        for ill in 1..=3u32 {
            let books = |ids: &[String]| -> BTreeSet<String> {
                ids.iter()
                    .filter(|id| id.starts_with(&format!("ill{:02}", ill - 1)))
                    .map(|id| id[..9].to_string())
                    .collect()
            };
            assert_eq!(books(&s.test).len(), 1);
            assert_eq!(books(&s.train).len(), 1);
            assert!(books(&s.val).is_empty());
        }
    }

    #[test]
    fn single_book_illustrator_is_rejected() {
        let m = toy_manifest(&[3, 1], 4);
        let err = make_book_split(&m, 0.3, 0.1, 0).unwrap_err();
        assert!(err.to_string().contains("ill01"), "{err}");
    }

    #[test]
    fn validation_takes_smallest_books_first() {
        let mut m = toy_manifest(&[5], 4);
        // make b03 the smallest book
        m.pages
            .retain(|p| !(p.book_id == "b03" && p.page_id.ends_with("p003")));
        let names = vec!["ill00".to_string()];
        let m = CorpusManifest::from_pages(&names, m.pages, [128, 128], PathBuf::new());
        for seed in 0..20 {
            let s = make_book_split(&m, 0.2, 0.05, seed).unwrap();
            let val_books: BTreeSet<&str> = s.val.iter().map(|id| &id[6..9]).collect();
            let test_books: BTreeSet<&str> = s.test.iter().map(|id| &id[6..9]).collect();
            assert_eq!(val_books.len(), 1);
            if !test_books.contains("b03") {
                assert!(val_books.contains("b03"));
            }
        }
    }

    proptest! {
        #[test]
        fn instance_split_disjoint_covering_and_proportional(
            counts in proptest::collection::vec(3usize..40, 1..6),
            seed in 0u64..1000,
        ) {
            let mut pages = Vec::new();
            let names: Vec<String> = (0..counts.len()).map(|i| format!("i{i}")).collect();
            for (i, &n) in counts.iter().enumerate() {
                for p in 0..n {
                    pages.push(LabeledPage {
                        page_id: format!("i{i}/b/p{p}"),
                        illustrator_id: i as u32 + 1,
                        book_id: "b".into(),
                        path: PathBuf::new(),
                    });
                }
            }
            let m = CorpusManifest::from_pages(&names, pages, [8, 8], PathBuf::new());
            let fr = [0.7, 0.1, 0.2];
            let s = make_instance_split(&m, fr, seed).unwrap();
            s.validate(&m).unwrap();
            for (i, &n) in counts.iter().enumerate() {
                let prefix = format!("i{i}/");
                for (k, part) in [&s.train, &s.val, &s.test].into_iter().enumerate() {
                    let have = part.iter().filter(|id| id.starts_with(&prefix)).count() as f64;
                    let want = fr[k] * n as f64;
                    if fr.iter().all(|f| f * n as f64 >= 1.0) {
                        prop_assert!((have - want).abs() <= 1.0, "illustrator {} partition {} has {} want {}", i, k, have, want);
                    }
                }
            }
        }

        #[test]
        fn book_split_never_shares_books(
            books in proptest::collection::vec(2usize..7, 1..6),
            pages in 1usize..6,
            frac in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let m = toy_manifest(&books, pages);
            let s = make_book_split(&m, frac, 0.1, seed).unwrap();
            prop_assert!(s.validate(&m).is_ok());
            prop_assert!(!s.train.is_empty());
        }
    }
}
