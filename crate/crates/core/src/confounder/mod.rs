//! Per-modality confounder dictionaries: scene features, PCA reduction and
//! K-Means++/Lloyd clustering.

mod dictionary;
mod features;
mod kmeans;
mod pca;

pub use dictionary::{
    build_dictionary, build_dictionary_with, build_from_features, content_hash, ConfounderDictionary,
    DictionaryBuild, DictionaryParams, DEFAULT_DIM, DEFAULT_SIZE,
};
pub use features::{
    FrozenConvExtractor, Modality, SceneFeatureExtractor, SceneFeatureSet, EXTRACTOR_SEED, HISTOGRAM_BINS,
};
pub use kmeans::{kmeanspp_seed, lloyd, ClusterAssignment, INERTIA_TOLERANCE, MAX_ITERATIONS};
pub use pca::{pca_fit, PcaModel};
