//! Fixtures shared by the criterion benches.

use kdep::nn::{Network, NetworkSpec};
use kdep::rng::Rng;
use kdep::FeatureMatrix;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = Rng::new(seed);
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sized")
}

/// The default experiment's student: 32 -> 64 -> 16.
pub fn student() -> Network {
    Network::init(NetworkSpec::mlp(32, &[64], 16, None), 0).expect("valid spec")
}

/// A small image backbone, 8x8x3 -> conv 8 -> conv 16 -> gap -> 16.
pub fn conv_student() -> Network {
    Network::init(NetworkSpec::conv(8, 8, 3, &[8, 16], 16, None), 0).expect("valid spec")
}
