use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, LabeledPage};
use crate::error::{Error, Result};
use crate::image;

pub const DEFAULT_RESOLUTION: [usize; 2] = [128, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageSize {
    pub page_id: String,
    pub height: usize,
    pub width: usize,
}

/// What ingestion saw: accepted pages at their original size, and files that
/// were skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: Vec<PageSize>,
    pub skipped: Vec<SkippedFile>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn is_page_image(p: &Path) -> bool {
    p.is_file()
        && matches!(
            p.extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref(),
            Some("ppm" | "png")
        )
}

/// Scan `root/<illustrator>/<book>/<page>.(ppm|png)` into a manifest.
///
/// Directories are ordered lexicographically; illustrator ids follow that
/// order starting at 1. Pages that fail to decode are skipped and reported.
pub fn ingest_corpus(root: &Path) -> Result<(CorpusManifest, IngestReport)> {
    ingest_corpus_with(root, DEFAULT_RESOLUTION)
}

pub fn ingest_corpus_with(
    root: &Path,
    canonical_resolution: [usize; 2],
) -> Result<(CorpusManifest, IngestReport)> {
    let illustrator_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if illustrator_dirs.is_empty() {
        return Err(Error::data(format!(
            "no illustrator directories under {}",
            root.display()
        )));
    }
    let mut names = Vec::new();
    let mut candidates = Vec::new();
    for (i, dir) in illustrator_dirs.iter().enumerate() {
        let name = file_name(dir);
        let id = i as u32 + 1;
        let mut any = false;
        for book in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
            let book_id = file_name(&book);
            for page in sorted_entries(&book)?
                .into_iter()
                .filter(|p| is_page_image(p))
            {
                let stem = page
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let rel = page.strip_prefix(root).unwrap_or(&page).to_path_buf();
                candidates.push(LabeledPage {
                    page_id: format!("{name}/{book_id}/{stem}"),
                    illustrator_id: id,
                    book_id: book_id.clone(),
                    path: rel,
                });
                any = true;
            }
        }
        if !any {
            return Err(Error::data(format!(
                "illustrator directory `{name}` contains no page images"
            )));
        }
        names.push(name);
    }

    let decoded: Vec<std::result::Result<PageSize, SkippedFile>> = candidates
        .par_iter()
        .map(|p| {
            let path = root.join(&p.path);
            match image::load(&path) {
                Ok(img) => Ok(PageSize {
                    page_id: p.page_id.clone(),
                    height: img.height(),
                    width: img.width(),
                }),
                Err(e) => Err(SkippedFile {
                    path: p.path.clone(),
                    reason: e.to_string(),
                }),
            }
        })
        .collect();

    let mut report = IngestReport::default();
    let mut pages = Vec::new();
    for (page, result) in candidates.into_iter().zip(decoded) {
        match result {
            Ok(size) => {
                report.accepted.push(size);
                pages.push(page);
            }
            Err(skip) => report.skipped.push(skip),
        }
    }
    for (i, name) in names.iter().enumerate() {
        if !pages.iter().any(|p| p.illustrator_id == i as u32 + 1) {
            return Err(Error::data(format!(
                "illustrator `{name}` has no readable pages"
            )));
        }
    }
    let manifest =
        CorpusManifest::from_pages(&names, pages, canonical_resolution, root.to_path_buf());
    manifest.validate()?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{encode_ppm, ImageBuffer};

    fn write_corpus(root: &Path, illustrators: usize, books: usize, pages: usize) {
        for i in 0..illustrators {
            for b in 0..books {
                let dir = root.join(format!("artist{i}")).join(format!("book{b}"));
                fs::create_dir_all(&dir).unwrap();
                for p in 0..pages {
                    let img = ImageBuffer::filled(
                        4,
                        5,
                        &[i as f64 / 3.0, b as f64 / 3.0, p as f64 / 5.0],
                    );
                    fs::write(dir.join(format!("p{p}.ppm")), encode_ppm(&img)).unwrap();
                }
            }
        }
    }

    #[test]
    fn counts_pages_books_illustrators() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 2, 3);
        let (m, report) = ingest_corpus(dir.path()).unwrap();
        assert_eq!(m.pages.len(), 12);
        assert!(report.skipped.is_empty());
        for ill in &m.illustrators {
            assert_eq!((ill.book_count, ill.image_count), (2, 6));
        }
        assert_eq!(
            m.books().values().map(Vec::len).collect::<Vec<_>>(),
            vec![3; 4]
        );
        assert_eq!(report.accepted[0].height, 4);
        // lexicographic, stable ordering
        assert_eq!(m.pages[0].page_id, "artist0/book0/p0");
        assert_eq!(m.pages[11].page_id, "artist1/book1/p2");
    }

    #[test]
    fn corrupt_page_is_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 2, 3);
        let bad = dir.path().join("artist1/book0/p1.ppm");
        fs::write(&bad, b"P6\n4 5\n255\n\x00\x01").unwrap();
        let (m, report) = ingest_corpus(dir.path()).unwrap();
        assert_eq!(m.pages.len(), 11);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(
            report.skipped[0].path,
            PathBuf::from("artist1/book0/p1.ppm")
        );
        assert_eq!(m.illustrators[1].image_count, 5);
    }

    #[test]
    fn empty_illustrator_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 1, 1, 2);
        fs::create_dir_all(dir.path().join("empty_artist")).unwrap();
        let err = ingest_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty_artist"), "{err}");
    }

    #[test]
    fn manifest_json_roundtrip_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 1, 2);
        let (m, _) = ingest_corpus(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        for key in [
            "\"version\": 1",
            "canonical_resolution",
            "illustrators",
            "page_id",
            "illustrator_id",
            "book_id",
            "\"path\"",
        ] {
            assert!(text.contains(key), "missing {key}");
        }
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(back.pages, m.pages);
        assert!(back.load_page(&back.pages[0]).is_ok());
    }
}
