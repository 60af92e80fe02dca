//! Labeled illustration pages: ingestion, splits, preprocessing, and the
//! synthetic corpus generator.

pub mod ingest;
pub mod manifest;
pub mod preprocess;
pub mod split;
pub mod synth;

pub use ingest::{
    ingest_corpus, ingest_corpus_with, IngestReport, PageSize, SkippedFile, DEFAULT_RESOLUTION,
};
pub use manifest::{BookKey, CorpusManifest, IllustratorEntry, LabeledPage};
pub use preprocess::{augment_flip, compute_mean_image, Augmented, MeanImage};
pub use split::{make_book_split, make_instance_split, Partition, SplitAssignment, SplitKind};
pub use synth::{
    default_styles, generate_synthetic_corpus, render_corpus, render_page, Glyph, MotifBox,
    PageMotifs, SynthConfig, SyntheticCorpus, SyntheticStyleSpec,
};
