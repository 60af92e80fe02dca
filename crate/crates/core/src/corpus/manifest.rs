use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::image::{self, ImageBuffer};

pub const MANIFEST_VERSION: u32 = 1;

/// One page of one book by one illustrator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPage {
    pub page_id: String,
    /// 1-based.
    pub illustrator_id: u32,
    pub book_id: String,
    /// Relative to the manifest root unless absolute.
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IllustratorEntry {
    pub id: u32,
    pub name: String,
    pub book_count: usize,
    pub image_count: usize,
}

/// Book key: books are only unique within an illustrator.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BookKey {
    pub illustrator_id: u32,
    pub book_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    /// `[height, width]`
    pub canonical_resolution: [usize; 2],
    pub illustrators: Vec<IllustratorEntry>,
    pub pages: Vec<LabeledPage>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    /// Build a manifest from pages, tallying illustrator counts. `names[i]`
    /// names illustrator `i + 1`.
    pub fn from_pages(
        names: &[String],
        pages: Vec<LabeledPage>,
        canonical_resolution: [usize; 2],
        root: PathBuf,
    ) -> Self {
        let illustrators = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let id = i as u32 + 1;
                let own: Vec<&LabeledPage> =
                    pages.iter().filter(|p| p.illustrator_id == id).collect();
                let books: BTreeSet<&str> = own.iter().map(|p| p.book_id.as_str()).collect();
                IllustratorEntry {
                    id,
                    name: name.clone(),
                    book_count: books.len(),
                    image_count: own.len(),
                }
            })
            .collect();
        Self {
            version: MANIFEST_VERSION,
            canonical_resolution,
            illustrators,
            pages,
            root,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.illustrators.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.illustrators.iter().map(|i| i.id).collect()
    }

    pub fn num_books(&self) -> usize {
        self.books().len()
    }

    /// Pages grouped by book, in key order.
    pub fn books(&self) -> BTreeMap<BookKey, Vec<&LabeledPage>> {
        let mut out: BTreeMap<BookKey, Vec<&LabeledPage>> = BTreeMap::new();
        for p in &self.pages {
            out.entry(p.book_key()).or_default().push(p);
        }
        out
    }

    pub fn page(&self, page_id: &str) -> Option<&LabeledPage> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }

    /// Index from page id to position in `pages`.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.pages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.page_id.as_str(), i))
            .collect()
    }

    pub fn page_path(&self, page: &LabeledPage) -> PathBuf {
        if page.path.is_absolute() {
            page.path.clone()
        } else {
            self.root.join(&page.path)
        }
    }

    pub fn load_page(&self, page: &LabeledPage) -> Result<ImageBuffer> {
        image::load(&self.page_path(page))
    }

    /// Check the structural invariants: unique page ids, valid illustrator
    /// ids, and illustrator tallies equal to the page list.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::data(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for p in &self.pages {
            if !seen.insert(p.page_id.as_str()) {
                return Err(Error::data(format!("duplicate page id `{}`", p.page_id)));
            }
            if p.illustrator_id == 0 || p.illustrator_id as usize > self.illustrators.len() {
                return Err(Error::data(format!(
                    "page `{}` has invalid illustrator id {}",
                    p.page_id, p.illustrator_id
                )));
            }
        }
        let names: Vec<String> = self.illustrators.iter().map(|i| i.name.clone()).collect();
        let expect = Self::from_pages(
            &names,
            self.pages.clone(),
            self.canonical_resolution,
            self.root.clone(),
        );
        for (have, want) in self.illustrators.iter().zip(&expect.illustrators) {
            if have != want {
                return Err(Error::data(format!(
                    "illustrator {} counts ({} books, {} images) disagree with pages ({} books, {} images)",
                    have.id, have.book_count, have.image_count, want.book_count, want.image_count
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, self)
    }

    /// Load and validate; relative page paths resolve against the manifest's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: CorpusManifest = artifact::read_json(path)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }
}

impl LabeledPage {
    pub fn book_key(&self) -> BookKey {
        BookKey {
            illustrator_id: self.illustrator_id,
            book_id: self.book_id.clone(),
        }
    }
}
