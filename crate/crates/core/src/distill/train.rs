use std::time::Instant;

use crate::align::{HeadPosition, ParametricHead};
use crate::distill::loss::{cross_entropy, kdep_loss, logits_kd_loss};
use crate::distill::manifest::{EpochRecord, RunManifest};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::nn::Network;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Regress precomputed aligned targets.
    Kdep,
    /// Cross-entropy on labels.
    Supervised,
    /// Match temperature-softened teacher logits.
    LogitsKd,
    /// Regress raw teacher features through a jointly trained head.
    ParametricKdep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Kdep => "kdep",
            Mode::Supervised => "supervised",
            Mode::LogitsKd => "logits_kd",
            Mode::ParametricKdep => "parametric_kdep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Divide the rate by 10 at one third and two thirds of the epochs.
    StepThirds,
}

impl Schedule {
    pub fn lr(self, lr0: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => lr0,
            Schedule::StepThirds => {
                let drops = ((3 * epoch) / epochs.max(1)).min(2);
                lr0 * [1.0, 0.1, 0.01][drops]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weight: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub mode: Mode,
    /// Softmax temperature for logits KD.
    pub temperature: f64,
    /// Parametric head input position (parametric mode only).
    pub head_position: HeadPosition,
    /// Train only the classifier head; everything before it stays fixed.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 64,
            loss_weight: 1.0,
            seed: 0,
            schedule: Schedule::StepThirds,
            mode: Mode::Kdep,
            temperature: 4.0,
            head_position: HeadPosition::PreRelu,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            return bad(format!("loss weight must be > 0, got {}", self.loss_weight));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.mode == Mode::LogitsKd && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// `key=value` pairs recorded in the run manifest.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("train.mode".into(), self.mode.name().into()),
            ("train.lr0".into(), self.lr0.to_string()),
            ("train.momentum".into(), self.momentum.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.loss_weight".into(), self.loss_weight.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            (
                "train.schedule".into(),
                match self.schedule {
                    Schedule::Constant => "constant",
                    Schedule::StepThirds => "step_thirds",
                }
                .into(),
            ),
        ];
        if self.mode == Mode::LogitsKd {
            v.push(("train.temperature".into(), self.temperature.to_string()));
        }
        if self.mode == Mode::ParametricKdep {
            v.push((
                "train.head_position".into(),
                match self.head_position {
                    HeadPosition::PreRelu => "pre_relu",
                    HeadPosition::PostRelu => "post_relu",
                }
                .into(),
            ));
        }
        if self.freeze_backbone {
            v.push(("train.freeze_backbone".into(), "true".into()));
        }
        v
    }
}

/// Inputs plus whatever supervision the mode needs, all row-aligned.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub inputs: &'a FeatureMatrix,
    pub targets: Option<&'a FeatureMatrix>,
    pub labels: Option<&'a [usize]>,
    pub teacher_logits: Option<&'a FeatureMatrix>,
    pub teacher_features: Option<&'a FeatureMatrix>,
}

impl<'a> TrainData<'a> {
    pub fn new(inputs: &'a FeatureMatrix) -> Self {
        TrainData {
            inputs,
            targets: None,
            labels: None,
            teacher_logits: None,
            teacher_features: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// The jointly trained head in parametric mode; not part of the student.
    pub head: Option<ParametricHead>,
    pub manifest: RunManifest,
}

fn require<'a, T: ?Sized>(v: Option<&'a T>, what: &str, mode: Mode) -> Result<&'a T> {
    v.ok_or_else(|| Error::Config(format!("{} mode needs {what}", mode.name())))
}

fn check_rows(n: usize, rows: usize, what: &str) -> Result<()> {
    if rows != n {
        return Err(Error::Shape(format!("{what} has {rows} rows for {n} inputs")));
    }
    Ok(())
}

/// SGD with momentum over seeded per-epoch shuffles.
///
/// Per step: `v <- m v + g + wd θ`, `θ <- θ - lr v`, with the learning rate
/// from the schedule for the current epoch. The last partial batch is kept.
/// Head normalization scale and shift get no weight decay.
pub fn train(config: &TrainConfig, student: &Network, data: TrainData<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let n = data.inputs.rows();
    let mode = config.mode;

    match mode {
        Mode::Kdep => {
            let t = require(data.targets, "targets", mode)?;
            check_rows(n, t.rows(), "targets")?;
            if t.cols() != student.feature_dim() {
                return Err(Error::Shape(format!(
                    "targets have {} channels, student features {}",
                    t.cols(),
                    student.feature_dim()
                )));
            }
        }
        Mode::Supervised => {
            let l = require(data.labels, "labels", mode)?;
            check_rows(n, l.len(), "labels")?;
            if student.spec.classes().is_none() {
                return Err(Error::Config("supervised training needs a classifier head".into()));
            }
        }
        Mode::LogitsKd => {
            let t = require(data.teacher_logits, "teacher logits", mode)?;
            check_rows(n, t.rows(), "teacher logits")?;
            if student.spec.classes() != Some(t.cols()) {
                return Err(Error::Shape(format!(
                    "student head has {:?} classes, teacher logits {}",
                    student.spec.classes(),
                    t.cols()
                )));
            }
        }
        Mode::ParametricKdep => {
            let t = require(data.teacher_features, "teacher features", mode)?;
            check_rows(n, t.rows(), "teacher features")?;
        }
    }

    let mut net = student.clone();
    let mut head = match mode {
        Mode::ParametricKdep => {
            let dt = data.teacher_features.expect("checked").cols();
            let mut h = ParametricHead::new(net.feature_dim(), dt, config.head_position)?;
            h.initialize(config.seed);
            Some(h)
        }
        _ => None,
    };
    let frozen = if config.freeze_backbone { net.head_offset() } else { 0 };
    let mut velocity = vec![0.0; net.params.len()];
    let mut head_velocity = vec![0.0; head.as_ref().map_or(0, ParametricHead::param_count)];

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let lr = config.schedule.lr(config.lr0, epoch, config.epochs);
        Rng::derived(config.seed, 1000 + epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let x = data.inputs.select_rows(batch_idx);
            let out = net.forward(&x)?;
            let b = batch_idx.len() as f64;
            let (loss, grads, head_grads) = match mode {
                Mode::Kdep => {
                    let t = data.targets.expect("checked").select_rows(batch_idx);
                    let (l, g) = kdep_loss(&out.features, &t, config.loss_weight)?;
                    (l, net.backward(&out.cache, Some(&g), None)?, None)
                }
                Mode::Supervised => {
                    let labels = data.labels.expect("checked");
                    let y: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();
                    let (l, g) = cross_entropy(out.logits.as_ref().expect("head"), &y)?;
                    (l, net.backward(&out.cache, None, Some(&g))?, None)
                }
                Mode::LogitsKd => {
                    let t = data.teacher_logits.expect("checked").select_rows(batch_idx);
                    let (l, g) = logits_kd_loss(out.logits.as_ref().expect("head"), &t, config.temperature)?;
                    (l, net.backward(&out.cache, None, Some(&g))?, None)
                }
                Mode::ParametricKdep => {
                    let h = head.as_mut().expect("parametric head");
                    let t = data.teacher_features.expect("checked").select_rows(batch_idx);
                    let head_in = h.head_input(&out.features);
                    let (pred, cache) = h.forward_train(&head_in)?;
                    let (l, g) = kdep_loss(&pred, &t, config.loss_weight)?;
                    let (hg, mut dfeat) = h.backward(&cache, &g)?;
                    if h.position == HeadPosition::PostRelu {
                        dfeat = mask_relu(&out.features, &dfeat);
                    }
                    (l, net.backward(&out.cache, Some(&dfeat), None)?, Some(hg))
                }
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            loss_sum += loss * b;

            sgd_step(&mut net.params[frozen..], &mut velocity[frozen..], &grads[frozen..], lr, config, None);
            if let (Some(h), Some(hg)) = (head.as_mut(), head_grads) {
                let exempt = h.norm_param_range();
                sgd_step(&mut h.params, &mut head_velocity, &hg, lr, config, Some(exempt));
            }
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            lr,
        });
    }

    let mut manifest = RunManifest::new(config.entries());
    manifest.epochs = epochs;
    manifest.set_hash("student", &net.to_container().content_hash()?);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        network: net,
        head,
        manifest,
    })
}

fn sgd_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    config: &TrainConfig,
    no_decay: Option<std::ops::Range<usize>>,
) {
    for i in 0..params.len() {
        let wd = match &no_decay {
            Some(r) if r.contains(&i) => 0.0,
            _ => config.weight_decay,
        };
        velocity[i] = config.momentum * velocity[i] + grads[i] + wd * params[i];
        params[i] -= lr * velocity[i];
    }
}

fn mask_relu(pre: &FeatureMatrix, grad: &FeatureMatrix) -> FeatureMatrix {
    let vals = pre
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    FeatureMatrix::from_raw(grad.rows(), grad.cols(), vals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InputShape;
    use crate::nn::{init_network, Layer, NetworkSpec};

    fn linear(d_in: usize, d_out: usize, params: Vec<f64>) -> Network {
        Network::from_params(
            NetworkSpec {
                input: InputShape::Vector(d_in),
                layers: vec![Layer::Dense { inputs: d_in, outputs: d_out }],
                tap: 0,
            },
            params,
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_step_moves_by_lr() {
        // loss = w * (θ·1 - t)^2 with target chosen so the gradient is 1:
        // 2 * (θ - t) = 1 at θ = 0 means t = -0.5. Bias is the second param.
        let net = linear(1, 1, vec![0.0, 0.0]);
        let x = FeatureMatrix::new(1, 1, vec![1.0]).unwrap();
        let t = FeatureMatrix::new(1, 1, vec![-0.5]).unwrap();
        let cfg = TrainConfig {
            lr0: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 1,
            schedule: Schedule::Constant,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &net, TrainData { targets: Some(&t), ..TrainData::new(&x) }).unwrap();
        assert!((out.network.params[0] - -0.1).abs() < 1e-15);
    }

    #[test]
    fn step_schedule_thirds() {
        let lrs: Vec<f64> = (0..9).map(|e| Schedule::StepThirds.lr(0.3, e, 9)).collect();
        let expect = [0.3, 0.3, 0.3, 0.3 * 0.1, 0.3 * 0.1, 0.3 * 0.1, 0.3 * 0.01, 0.3 * 0.01, 0.3 * 0.01];
        assert_eq!(lrs, expect);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { loss_weight: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { mode: Mode::LogitsKd, temperature: 0.0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let net = init_network(&NetworkSpec::mlp(2, &[3], 2, Some(2)), 0).unwrap();
        let x = FeatureMatrix::zeros(4, 2);
        for mode in [Mode::Kdep, Mode::Supervised, Mode::LogitsKd, Mode::ParametricKdep] {
            let cfg = TrainConfig { mode, ..TrainConfig::default() };
            assert!(matches!(train(&cfg, &net, TrainData::new(&x)), Err(Error::Config(_))));
        }
    }

    #[test]
    fn frozen_backbone_only_moves_head() {
        let net = init_network(&NetworkSpec::mlp(3, &[4], 2, Some(2)), 1).unwrap();
        let mut rng = Rng::new(2);
        let x = FeatureMatrix::new(8, 3, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let cfg = TrainConfig {
            mode: Mode::Supervised,
            freeze_backbone: true,
            epochs: 3,
            batch_size: 4,
            lr0: 0.1,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &net, TrainData { labels: Some(&labels), ..TrainData::new(&x) }).unwrap();
        let h = net.head_offset();
        assert_eq!(out.network.params[..h], net.params[..h]);
        assert_ne!(out.network.params[h..], net.params[h..]);
    }
}
