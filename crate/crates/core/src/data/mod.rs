//! Synthetic datasets and the on-disk tensor container.

pub mod container;
mod synth;

pub use container::{write_atomic, Payload, Section, TensorContainer};
pub use synth::{class_centroids, generate, subsample, Dataset, DatasetSpec, InputShape, Role};
