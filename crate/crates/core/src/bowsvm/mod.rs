//! Bag-of-visual-words baseline: k-means vocabulary, histogram encoding,
//! Hellinger map, and one-vs-all linear SVMs.

mod encode;
mod kmeans;
mod pipeline;
mod svm;

pub use encode::{bow_encode, hellinger_map};
pub use kmeans::{kmeans_fit, Codebook, KMeansConfig, CODEBOOK_MAGIC};
pub use pipeline::{
    descriptor_pool, encode_all, extract_all, fit_codebook, BowClassifier, BowConfig,
};
pub(crate) use svm::epoch_orders;
pub use svm::{
    svm_predict, svm_train, train_binary, BinarySvm, LinearSvmModel, SvmConfig, SVM_MAGIC,
};
