//! Active open-set annotation over pre-extracted features.
//!
//! A pool mixes samples of known classes with samples of classes nobody
//! wants labeled. Each round the engine keeps only pool samples whose K
//! nearest labeled neighbours all carry known classes, ranks them by how much
//! the classifier disagrees with that neighbourhood, and queries the top of
//! the ranking. [`protocol::run_protocol`] drives the whole loop;
//! [`theory`] evaluates and checks the detection-error bound.

pub mod class_map;
pub mod cli;
pub mod config;
pub mod detection;
pub mod error;
pub mod feature_store;
mod io;
pub mod knn;
pub mod model;
pub mod protocol;
pub mod scoring;
pub mod strategies;
pub mod theory;

pub use class_map::ClassMap;
pub use detection::{detect_known, CandidateSet};
pub use error::{Error, Result};
pub use feature_store::{
    generate_synthetic, load_feature_store, save_feature_store, ClassId, FeatureStore, PartitionState,
    SampleId, SampleRecord, SyntheticSpec,
};
pub use knn::{cosine_distance, Annotation, KnnIndex, Neighbor, NeighborList};
pub use model::{train_classifier, Classifier, TrainConfig};
pub use protocol::{run_protocol, ProtocolConfig, RoundReport};
pub use scoring::inconsistency_score;
pub use strategies::{Prefilter, QueryBatch, StrategyKind};
pub use theory::{detection_error_bound, BoundParams};
