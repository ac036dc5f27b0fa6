//! Downstream probes, feature compactness and the channel-loss Monte-Carlo check.

use std::fmt::Write as _;

use crate::distill::{forward_chunked, train, Mode, Schedule, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::nn::Network;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Backbone frozen, only the new classifier trains.
    Linear,
    Finetune,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Linear => "linear",
            ProbeMode::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mode: ProbeMode::Linear,
            epochs: 50,
            lr_grid: vec![0.01, 0.001],
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub mode: ProbeMode,
    pub seeds: Vec<u64>,
    /// Learning rate of the reported (best) run.
    pub lr: f64,
}

impl ProbeResult {
    pub const CSV_HEADER: &'static str = "mode,lr,seed,top1";

    pub fn csv_row(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("{},{},{},{}", self.mode.name(), self.lr, seeds.join(";"), self.top1)
    }
}

/// Top-1 accuracy overall and per class. Ties go to the lowest class index.
pub fn accuracy(logits: &FeatureMatrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    let c = logits.cols();
    let mut hit = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        seen[y] += 1;
        if best == y {
            hit[y] += 1;
        }
    }
    let per_class = hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect();
    Ok((hit.iter().sum::<usize>() as f64 / labels.len().max(1) as f64, per_class))
}

/// Adds a fresh classifier to `backbone`, trains it on the downstream train
/// split once per learning rate in the grid and reports the best test top-1.
///
/// The training uses the same SGD loop as distillation with the step
/// schedule. The head is initialized from `config.seed`.
pub fn linear_probe(
    backbone: &Network,
    train_inputs: &FeatureMatrix,
    train_labels: &[usize],
    test_inputs: &FeatureMatrix,
    test_labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if config.lr_grid.is_empty() {
        return Err(Error::Config("probe lr grid is empty".into()));
    }
    if classes < 2 {
        return Err(Error::Config(format!("probe needs >= 2 classes, got {classes}")));
    }
    if let Some(&y) = train_labels.iter().chain(test_labels).find(|&&y| y >= classes) {
        return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
    }
    let width = backbone.spec.input.flat_len();
    if train_inputs.cols() != width || test_inputs.cols() != width {
        return Err(Error::Config(format!(
            "probe inputs have {}/{} columns, backbone expects {width}",
            train_inputs.cols(),
            test_inputs.cols()
        )));
    }

    let spec = backbone.spec.with_head(classes);
    let mut net = Network::init(spec, config.seed)?;
    let keep = backbone.head_offset();
    net.params[..keep].copy_from_slice(&backbone.params[..keep]);
    net.seed = backbone.seed;

    let mut best: Option<ProbeResult> = None;
    for &lr in &config.lr_grid {
        let tc = TrainConfig {
            lr0: lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: config.seed,
            schedule: Schedule::StepThirds,
            mode: Mode::Supervised,
            freeze_backbone: config.mode == ProbeMode::Linear,
            ..TrainConfig::default()
        };
        let data = TrainData {
            labels: Some(train_labels),
            ..TrainData::new(train_inputs)
        };
        let trained = train(&tc, &net, data)?.network;
        let (_, logits) = forward_chunked(&trained, test_inputs, 256)?;
        let (top1, per_class) = accuracy(&logits.expect("probe network has a head"), test_labels)?;
        if best.as_ref().map_or(true, |b| top1 > b.top1) {
            best = Some(ProbeResult {
                top1,
                per_class,
                mode: config.mode,
                seeds: vec![config.seed],
                lr,
            });
        }
    }
    Ok(best.expect("non-empty grid"))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance of each sample to its class centroid divided by the mean
/// pairwise distance between class centroids. Lower is more compact.
///
/// Needs at least two classes with at least two samples each; labels must be
/// `0..C` with every class present.
pub fn compactness(features: &FeatureMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), features.rows())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.cols();
    let mut counts = vec![0usize; classes];
    let mut centroids = vec![vec![0.0; d]; classes];
    for (r, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (c, v) in centroids[y].iter_mut().zip(features.row(r)) {
            *c += v;
        }
    }
    if classes < 2 || counts.iter().any(|&n| n < 2) {
        return Err(Error::Dimension(format!(
            "compactness needs >= 2 classes with >= 2 samples each, got counts {counts:?}"
        )));
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n as f64;
        }
    }

    let mut between = 0.0;
    let mut pairs = 0usize;
    for i in 0..classes {
        for j in i + 1..classes {
            if centroids[i] == centroids[j] {
                return Err(Error::Degenerate(format!("centroids of classes {i} and {j} coincide")));
            }
            between += distance(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    let within: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| distance(features.row(r), &centroids[y]))
        .sum::<f64>()
        / labels.len() as f64;
    Ok(within / (between / pairs as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCheckConfig {
    pub sigmas: Vec<f64>,
    pub sigma_s: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for VarianceCheckConfig {
    fn default() -> Self {
        VarianceCheckConfig {
            sigmas: vec![0.5, 1.0, 2.0, 4.0],
            sigma_s: 1.0,
            samples: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceCheckRow {
    pub sigma: f64,
    pub estimate: f64,
    pub analytic: f64,
    pub stderr: f64,
    pub pass: bool,
}

/// Estimates `E[(T - S)^2]` for independent `T ~ N(0, σ²)`, `S ~ N(0, σ_s²)`
/// and compares it with `σ² + σ_s²`.
///
/// A row passes when the estimate is within four standard errors of the
/// analytic value and above the previous row's estimate (when the grid is
/// ascending in σ). Each σ uses its own random stream.
pub fn verify_variance_identity(cfg: &VarianceCheckConfig) -> Result<Vec<VarianceCheckRow>> {
    if cfg.sigmas.is_empty() || cfg.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("sigmas must be positive, got {:?}", cfg.sigmas)));
    }
    if !(cfg.sigma_s > 0.0 && cfg.sigma_s.is_finite()) {
        return Err(Error::Config(format!("sigma_s must be positive, got {}", cfg.sigma_s)));
    }
    if cfg.samples < 10_000 {
        return Err(Error::Config(format!("samples must be >= 10000, got {}", cfg.samples)));
    }
    let n = cfg.samples as f64;
    let mut rows: Vec<VarianceCheckRow> = Vec::with_capacity(cfg.sigmas.len());
    for (i, &sigma) in cfg.sigmas.iter().enumerate() {
        let mut rng = Rng::derived(cfg.seed, i as u64);
        // Welford keeps the variance accurate at 10^6 samples.
        let (mut mean, mut m2) = (0.0, 0.0);
        for k in 0..cfg.samples {
            let t = sigma * rng.normal();
            let s = cfg.sigma_s * rng.normal();
            let x = (t - s) * (t - s);
            let delta = x - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (x - mean);
        }
        let stderr = (m2 / (n - 1.0)).sqrt() / n.sqrt();
        let analytic = sigma * sigma + cfg.sigma_s * cfg.sigma_s;
        rows.push(VarianceCheckRow {
            sigma,
            estimate: mean,
            analytic,
            stderr,
            pass: (mean - analytic).abs() <= 4.0 * stderr,
        });
    }
    // Estimates must rise strictly with sigma, whatever order sigmas were given in.
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].sigma.total_cmp(&rows[b].sigma));
    for w in order.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if rows[hi].sigma > rows[lo].sigma && rows[hi].estimate <= rows[lo].estimate {
            rows[hi].pass = false;
        }
    }
    Ok(rows)
}

pub const VARIANCE_CHECK_CSV_HEADER: &str = "sigma,estimate,analytic,stderr,pass";

pub fn variance_check_csv(rows: &[VarianceCheckRow]) -> String {
    let mut s = format!("{VARIANCE_CHECK_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.sigma, r.estimate, r.analytic, r.stderr, r.pass);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, NetworkSpec};
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn m(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn collapsed_classes_are_perfectly_compact() {
        let f = m(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], &[3.0, 4.0]]);
        assert_eq!(compactness(&f, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn compactness_hand_value() {
        // Centroids (0,0) and (4,0) at distance 4; every sample 1 away.
        let f = m(&[&[0.0, 1.0], &[0.0, -1.0], &[4.0, 1.0], &[4.0, -1.0]]);
        assert!((compactness(&f, &[0, 0, 1, 1]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn coincident_centroids_are_degenerate() {
        let f = m(&[&[1.0], &[-1.0], &[2.0], &[-2.0]]);
        assert!(matches!(compactness(&f, &[0, 0, 1, 1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn compactness_needs_two_per_class() {
        let f = m(&[&[1.0], &[2.0], &[3.0]]);
        assert!(matches!(compactness(&f, &[0, 0, 1]), Err(Error::Dimension(_))));
    }

    fn random_orthogonal(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        // Gram-Schmidt on a Gaussian matrix.
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        q
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn compactness_rotation_and_scale_invariant(seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let (n, d) = (12, 4);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let vals: Vec<f64> = (0..n * d).map(|i| rng.normal() + (labels[i / d] * 3) as f64).collect();
            let f = FeatureMatrix::new(n, d, vals).unwrap();
            let q = random_orthogonal(d, &mut rng);
            let qm = FeatureMatrix::from_rows(&q).unwrap();
            let rotated = f.matmul(&qm).unwrap();
            let base = compactness(&f, &labels).unwrap();
            prop_assert!((compactness(&rotated, &labels).unwrap() - base).abs() < 1e-8);
            prop_assert!((compactness(&f.scale(scale), &labels).unwrap() - base).abs() < 1e-8);
        }
    }

    #[test]
    fn accuracy_counts_and_ties() {
        let logits = m(&[&[1.0, 1.0], &[0.0, 2.0], &[3.0, 0.0]]);
        let (top1, per) = accuracy(&logits, &[0, 1, 1]).unwrap();
        assert!((top1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per, vec![1.0, 0.5]);
    }

    #[test]
    fn theorem_analytic_values() {
        let cfg = VarianceCheckConfig {
            sigmas: vec![1.0, 2.0],
            samples: 10_000,
            ..VarianceCheckConfig::default()
        };
        let rows = verify_variance_identity(&cfg).unwrap();
        assert_eq!(rows[0].analytic, 2.0);
        assert_eq!(rows[1].analytic, 5.0);
        assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    }

    #[test]
    fn theorem_monotonicity_ignores_input_order() {
        let cfg = |sigmas: Vec<f64>| VarianceCheckConfig { sigmas, samples: 10_000, ..VarianceCheckConfig::default() };
        assert!(verify_variance_identity(&cfg(vec![4.0, 0.5, 2.0])).unwrap().iter().all(|r| r.pass));
        // Unresolvable gap: one of the two rows must come out out of order.
        let rows = verify_variance_identity(&cfg(vec![1.0, 1.000001])).unwrap();
        assert_eq!(rows[1].pass, rows[1].estimate > rows[0].estimate);
    }

    #[test]
    fn theorem_config_checks() {
        let bad = [
            VarianceCheckConfig { sigmas: vec![], ..VarianceCheckConfig::default() },
            VarianceCheckConfig { sigmas: vec![0.0], ..VarianceCheckConfig::default() },
            VarianceCheckConfig { sigma_s: -1.0, ..VarianceCheckConfig::default() },
            VarianceCheckConfig { samples: 9_999, ..VarianceCheckConfig::default() },
        ];
        for c in bad {
            assert!(verify_variance_identity(&c).is_err());
        }
    }

    #[test]
    fn theorem_csv_shape() {
        let rows = [VarianceCheckRow { sigma: 2.0, estimate: 5.01, analytic: 5.0, stderr: 0.01, pass: true }];
        assert_eq!(variance_check_csv(&rows), "sigma,estimate,analytic,stderr,pass\n2,5.01,5,0.01,true\n");
    }

    fn two_blobs(per: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..per {
                let centre = if c == 0 { -2.0 } else { 2.0 };
                vals.push(centre + 0.3 * rng.normal());
                vals.push(0.3 * rng.normal());
                labels.push(c);
            }
        }
        (FeatureMatrix::new(2 * per, 2, vals).unwrap(), labels)
    }

    #[test]
    fn probe_separable_and_deterministic() {
        let backbone = init_network(&NetworkSpec::mlp(2, &[8], 4, None), 3).unwrap();
        let (x, y) = two_blobs(40, 1);
        let (xt, yt) = two_blobs(40, 2);
        let cfg = ProbeConfig { mode: ProbeMode::Finetune, epochs: 20, ..ProbeConfig::default() };
        let a = linear_probe(&backbone, &x, &y, &xt, &yt, 2, &cfg).unwrap();
        let b = linear_probe(&backbone, &x, &y, &xt, &yt, 2, &cfg).unwrap();
        assert!(a.top1 > 0.95, "{a:?}");
        assert_eq!(a, b);
        let weighted: f64 = a.per_class.iter().sum::<f64>() / 2.0;
        assert!((weighted - a.top1).abs() < 1e-12);
    }

    #[test]
    fn constant_backbone_gives_chance() {
        // All-zero backbone weights: features are constant, only the bias can learn.
        let mut backbone = init_network(&NetworkSpec::mlp(2, &[4], 3, None), 0).unwrap();
        backbone.params.iter_mut().for_each(|p| *p = 0.0);
        let (x, y) = two_blobs(20, 3);
        let (xt, yt) = two_blobs(20, 4);
        let r = linear_probe(&backbone, &x, &y, &xt, &yt, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 0.5);
    }
}
