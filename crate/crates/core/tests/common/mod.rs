#![allow(dead_code)]

use kdep::rng::Rng;
use kdep::FeatureMatrix;
use nalgebra::DMatrix;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = Rng::new(seed);
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn to_nalgebra(x: &FeatureMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.rows(), x.cols(), x.values())
}

/// Singular values of `x`, descending, zero-padded to one per column.
pub fn reference_singular_values(x: &FeatureMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(x).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.resize(x.cols(), 0.0);
    s
}

/// Best rank-`k` squared reconstruction error: the sum of the trailing
/// squared singular values.
pub fn reference_truncation_error(x: &FeatureMatrix, k: usize) -> f64 {
    reference_singular_values(x)[k..].iter().map(|s| s * s).sum()
}

/// `||X - X V Vᵀ||²` for orthonormal `V` (D x k).
pub fn projection_error(x: &FeatureMatrix, v: &FeatureMatrix) -> f64 {
    let recon = x.matmul(v).unwrap().matmul(&v.transpose()).unwrap();
    x.sub(&recon).unwrap().frobenius_norm_sq()
}

/// `||X - X_S||²` where `X_S` keeps the columns in `keep` and zeroes the rest.
pub fn selection_error(x: &FeatureMatrix, keep: &[usize]) -> f64 {
    (0..x.cols())
        .filter(|c| !keep.contains(c))
        .map(|c| x.column(c).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// `rows` samples whose channels have exactly zero mean and the given
/// (population) standard deviations.
pub fn scaled_channels(rows: usize, stds: &[f64], seed: u64) -> FeatureMatrix {
    let raw = gaussian(rows, stds.len(), seed);
    let mut out = vec![0.0; rows * stds.len()];
    for (c, &s) in stds.iter().enumerate() {
        let col = raw.column(c);
        let mean = col.iter().sum::<f64>() / rows as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
        for r in 0..rows {
            out[r * stds.len() + c] = (col[r] - mean) / sd * s;
        }
    }
    FeatureMatrix::new(rows, stds.len(), out).unwrap()
}

pub fn random_labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(classes)).collect()
}
