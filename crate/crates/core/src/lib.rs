//! Knowledge distillation as pre-training, at desk scale.
//!
//! A trained teacher's penultimate features (taken before the final ReLU)
//! become the only supervision for a narrower student. The teacher width is
//! reduced to the student width by a fixed, fitted map, SVD projection being
//! the main one, and the spread of the resulting target channels is evened
//! out by a target transform, power temperature scaling being the main one.
//! The student then regresses the transformed targets with a plain squared
//! error loss.
//!
//! Modules, bottom up:
//!
//! - [`linalg`]: matrices, Jacobi SVD, channel statistics.
//! - [`data`]: synthetic datasets and the binary tensor container.
//! - [`align`]: teacher-to-student width maps.
//! - [`transform`]: target corrections (SN, SM, PTS).
//! - [`nn`]: layers, forward/backward, gradient checking.
//! - [`distill`]: losses, the SGD trainer and run manifests.
//! - [`eval`]: probes, compactness, the channel-loss Monte-Carlo check.
//! - [`experiment`]: the end-to-end method comparison.

pub mod align;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::{ChannelStats, FeatureMatrix, SvdFactors};
