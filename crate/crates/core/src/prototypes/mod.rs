//! Prototype explainability heads over a frozen convolutional feature extractor.
//!
//! All three heads (PPNet, EPPNet, ProtoPool) score a feature map with the same
//! squared-distance similarity, so influence and faithfulness numbers are
//! comparable across heads.

mod bank;
mod explain;
mod extractor;
mod features;
mod heads;

pub use bank::{
    alignment_loss, assign_samples, diversity_loss, max_similarity, nis, pool_assign, similarity_map, HeadKind,
    PoolAssignment, Provenance, PrototypeBank,
};
pub use explain::{explain, explain_features, ExplanationReport, PrototypeRecord};
pub use extractor::{train_extractor, ExtractorConfig, ExtractorReport, FeatureExtractor};
pub use features::{sq_dist, FeatureMap, FeatureSet};
pub use heads::{fit_prototypes, head_objective, objective_value, push_prototypes, train_head, HeadConfig, HeadReport};
