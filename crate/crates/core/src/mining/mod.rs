//! Representative page selection and discriminative patch discovery.

mod discover;
mod select;

pub use discover::{
    cluster_montage, gradient_energy, mine_discriminative_patches, patch_box_iou, patch_feature,
    purity, rank_pages_by_firings, representatives_to_images, ClusterReport, Firing, MiningConfig,
    MiningPage, PageFirings,
};
pub use select::{
    page_feature, page_features, representative_quality, select_representatives, EliminatedPage,
    RankedPage, RankingReport, RepresentativeFeature, SelectConfig,
};
