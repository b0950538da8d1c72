//! Dataset ingestion, zero-shot class splits and synthetic data.

pub mod features;
pub mod semantics;
pub mod split;
pub mod synth;

pub use features::{
    load_features, write_features, FeatureItem, FeatureSet, FeatureStore, Modality,
};
pub use semantics::{load_semantics, write_semantics, SemanticTable};
pub use split::{make_split, ZeroShotSplit};
pub use synth::{synth_dataset, SynthParams, Synthetic};
