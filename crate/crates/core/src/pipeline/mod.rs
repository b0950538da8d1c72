//! Batching, the ZSIH network, checkpoints and the training loop.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use batch::{build_adjacency, sample_batch, TrainingSet, TripletBatch};
pub use checkpoint::{load_checkpoint, write_checkpoint, Checkpoint};
pub use config::{FusionMode, ZsihConfig};
pub use model::{encode_batch, encode_features, forward_multimodal, ModelParams};
pub use train::{metrics_line, train, StopReason, TrainOutcome, Trainer};

use crate::data::FeatureSet;
use crate::error::Result;
use crate::retrieval::{binarize, CodeMatrix};

/// Out-of-sample codes for a feature set with the single-modality encoder.
pub fn encode_codes(params: &ModelParams, set: &FeatureSet) -> Result<CodeMatrix> {
    let soft = encode_features(params, set)?;
    binarize(&soft, set.labels(), set.modality)
}

/// Encodes unseen sketches as queries against unseen images and scores the
/// Hamming ranking.
pub fn evaluate_zero_shot(
    params: &ModelParams,
    sketches: &FeatureSet,
    images: &FeatureSet,
    ks: &[usize],
) -> Result<crate::retrieval::RetrievalReport> {
    let queries = encode_codes(params, sketches)?;
    let gallery = encode_codes(params, images)?;
    crate::retrieval::evaluate(&queries, &gallery, ks)
}
