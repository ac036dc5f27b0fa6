//! Losses, the SGD trainer and distillation targets.

pub mod loss;
pub mod manifest;
pub mod train;

pub use loss::{cross_entropy, kdep_loss, logits_kd_loss};
pub use manifest::{EpochRecord, RunManifest};
pub use train::{train, Mode, Schedule, TrainConfig, TrainData, TrainOutcome};

use crate::align::{apply_alignment, AlignmentArtifact};
use crate::error::Result;
use crate::linalg::FeatureMatrix;
use crate::transform::{apply_transform, TargetTransform};

/// Aligns and transforms raw teacher features once, before training.
pub fn precompute_targets(
    teacher_features: &FeatureMatrix,
    alignment: &AlignmentArtifact,
    transform: &TargetTransform,
) -> Result<FeatureMatrix> {
    apply_transform(transform, &apply_alignment(alignment, teacher_features)?)
}

/// Teacher pre-ReLU features for every row, computed in chunks.
pub fn extract_features(net: &crate::nn::Network, inputs: &FeatureMatrix, chunk: usize) -> Result<FeatureMatrix> {
    Ok(forward_chunked(net, inputs, chunk)?.0)
}

/// Features and (if the network has a head) logits, in chunks of `chunk` rows.
pub fn forward_chunked(
    net: &crate::nn::Network,
    inputs: &FeatureMatrix,
    chunk: usize,
) -> Result<(FeatureMatrix, Option<FeatureMatrix>)> {
    let idx: Vec<usize> = (0..inputs.rows()).collect();
    let mut feats = Vec::with_capacity(inputs.rows() * net.feature_dim());
    let mut logits: Option<(usize, Vec<f64>)> = None;
    for part in idx.chunks(chunk.max(1)) {
        let out = net.forward(&inputs.select_rows(part))?;
        feats.extend_from_slice(out.features.values());
        if let Some(l) = out.logits {
            let entry = logits.get_or_insert_with(|| (l.cols(), Vec::new()));
            entry.1.extend_from_slice(l.values());
        }
    }
    let f = FeatureMatrix::new(inputs.rows(), net.feature_dim(), feats)?;
    let l = match logits {
        Some((c, v)) => Some(FeatureMatrix::new(inputs.rows(), c, v)?),
        None => None,
    };
    Ok((f, l))
}
