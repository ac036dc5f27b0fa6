//! The end-to-end method comparison: one teacher, one pretraining corpus, a
//! set of student pretraining methods with equal step budgets, and a linear
//! probe on a shifted downstream task.

use std::fmt::Write as _;

use crate::align::{fit_svd_projector, HeadPosition};
use crate::data::{generate, subsample, Dataset, DatasetSpec, InputShape, Role};
use crate::distill::{
    forward_chunked, precompute_targets, train, Mode, RunManifest, Schedule, TrainConfig, TrainData,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, compactness, linear_probe, ProbeConfig};
use crate::linalg::{channel_stats, std_ratio, ChannelStats, FeatureMatrix};
use crate::nn::{Network, NetworkSpec};
use crate::transform::{fit_transform, TransformKind};

/// Denominator floor for reported std ratios.
pub const STD_RATIO_EPS: f64 = 1e-12;
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    RandomInit,
    SupervisedPretrain,
    Parametric,
    Svd,
    SvdSn,
    SvdSm,
    SvdPts,
    LogitsKd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::RandomInit,
        Method::SupervisedPretrain,
        Method::Parametric,
        Method::Svd,
        Method::SvdSn,
        Method::SvdSm,
        Method::SvdPts,
        Method::LogitsKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RandomInit => "random-init",
            Method::SupervisedPretrain => "SP-baseline",
            Method::Parametric => "parametric-1x1",
            Method::Svd => "SVD",
            Method::SvdSn => "SVD+SN",
            Method::SvdSm => "SVD+SM",
            Method::SvdPts => "SVD+PTS",
            Method::LogitsKd => "logits-KD",
        }
    }

    /// Accepts the report names case-insensitively.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == s)
            .or(match s.as_str() {
                "parametric-1×1" | "parametric" => Some(Method::Parametric),
                "sp" => Some(Method::SupervisedPretrain),
                _ => None,
            })
    }

    /// Trained from teacher outputs (as opposed to labels or nothing).
    pub fn is_distilled(self) -> bool {
        !matches!(self, Method::RandomInit | Method::SupervisedPretrain)
    }

    pub fn transform(self) -> Option<TransformKind> {
        match self {
            Method::Svd => Some(TransformKind::Identity),
            Method::SvdSn => Some(TransformKind::ScaleNormalize),
            Method::SvdSm => Some(TransformKind::StdMatch),
            Method::SvdPts => Some(TransformKind::Pts),
            _ => None,
        }
    }

    fn student_has_head(self) -> bool {
        matches!(self, Method::SupervisedPretrain | Method::LogitsKd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub data_seed: u64,
    pub pretrain_per_class: usize,
    /// Fraction of the pretraining corpus used for student pretraining.
    pub data_fraction: f64,
    pub centroid_shift: f64,
    pub downstream_train_per_class: usize,
    pub downstream_test_per_class: usize,

    pub teacher_hidden: Vec<usize>,
    pub d_teacher: usize,
    pub teacher_train: TrainConfig,

    pub student_hidden: Vec<usize>,
    pub d_student: usize,
    /// Shared by every pretraining method; `mode` is set per method.
    pub student_train: TrainConfig,

    pub pts_temperature: f64,
    pub pts_exponent: f64,
    pub logits_temperature: f64,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classes: 10,
            input_dim: 32,
            spread: 0.3,
            data_seed: 0,
            pretrain_per_class: 200,
            data_fraction: 1.0,
            centroid_shift: 2.0,
            downstream_train_per_class: 100,
            downstream_test_per_class: 100,
            teacher_hidden: vec![128],
            d_teacher: 64,
            teacher_train: TrainConfig {
                lr0: 0.05,
                epochs: 30,
                batch_size: 64,
                weight_decay: 1e-4,
                mode: Mode::Supervised,
                ..TrainConfig::default()
            },
            student_hidden: vec![64],
            d_student: 16,
            student_train: TrainConfig {
                lr0: 0.01,
                epochs: 30,
                batch_size: 64,
                weight_decay: 1e-4,
                ..TrainConfig::default()
            },
            pts_temperature: crate::transform::DEFAULT_TEMPERATURE,
            pts_exponent: crate::transform::DEFAULT_EXPONENT,
            logits_temperature: 4.0,
            probe: ProbeConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn dataset_spec(&self, role: Role) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            shape: InputShape::Vector(self.input_dim),
            per_class: match role {
                Role::PretrainUnlabeled => self.pretrain_per_class,
                Role::DownstreamTrain => self.downstream_train_per_class,
                Role::DownstreamTest => self.downstream_test_per_class,
            },
            spread: self.spread,
            seed: self.data_seed,
            role,
            centroid_shift: self.centroid_shift,
        }
    }

    pub fn teacher_spec(&self) -> NetworkSpec {
        NetworkSpec::mlp(self.input_dim, &self.teacher_hidden, self.d_teacher, Some(self.classes))
    }

    pub fn student_spec(&self, with_head: bool) -> NetworkSpec {
        NetworkSpec::mlp(
            self.input_dim,
            &self.student_hidden,
            self.d_student,
            with_head.then_some(self.classes),
        )
    }

    /// Training config for one method and seed.
    pub fn method_train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let mode = match method {
            Method::SupervisedPretrain => Mode::Supervised,
            Method::LogitsKd => Mode::LogitsKd,
            Method::Parametric => Mode::ParametricKdep,
            _ => Mode::Kdep,
        };
        TrainConfig {
            mode,
            seed,
            temperature: self.logits_temperature,
            head_position: HeadPosition::PreRelu,
            schedule: Schedule::StepThirds,
            ..self.student_train.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    /// Labels hidden; the class ids are used only to train the teacher.
    pub pretrain: Dataset,
    /// The part of `pretrain` the students see.
    pub student_pretrain: Dataset,
    pub downstream_train: Dataset,
    pub downstream_test: Dataset,
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let pretrain = generate(&cfg.dataset_spec(Role::PretrainUnlabeled))?;
    let student_pretrain = subsample(&pretrain, cfg.data_fraction, cfg.data_seed)?;
    Ok(Corpus {
        pretrain,
        student_pretrain,
        downstream_train: generate(&cfg.dataset_spec(Role::DownstreamTrain))?,
        downstream_test: generate(&cfg.dataset_spec(Role::DownstreamTest))?,
    })
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub network: Network,
    pub manifest: RunManifest,
    /// Top-1 on the pretraining corpus with its hidden class ids.
    pub pretrain_accuracy: f64,
}

/// Supervised teacher on the pretraining corpus (the teacher is the one
/// model allowed to see its class ids).
pub fn train_teacher(cfg: &ExperimentConfig, pretrain: &Dataset) -> Result<Teacher> {
    let net = Network::init(cfg.teacher_spec(), cfg.teacher_train.seed)?;
    let tc = TrainConfig {
        mode: Mode::Supervised,
        ..cfg.teacher_train.clone()
    };
    let out = train(
        &tc,
        &net,
        TrainData {
            labels: Some(&pretrain.class_ids),
            ..TrainData::new(&pretrain.inputs)
        },
    )?;
    let (_, logits) = forward_chunked(&out.network, &pretrain.inputs, CHUNK)?;
    let (acc, _) = accuracy(&logits.expect("teacher has a head"), &pretrain.class_ids)?;
    Ok(Teacher {
        network: out.network,
        manifest: out.manifest,
        pretrain_accuracy: acc,
    })
}

/// Teacher outputs on the student pretraining set.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub features: FeatureMatrix,
    pub logits: FeatureMatrix,
    pub stats: ChannelStats,
}

pub fn teacher_outputs(teacher: &Network, data: &Dataset) -> Result<TeacherOutputs> {
    let (features, logits) = forward_chunked(teacher, &data.inputs, CHUNK)?;
    let logits = logits.ok_or_else(|| Error::Config("teacher needs a classifier head".into()))?;
    let stats = channel_stats(&features);
    Ok(TeacherOutputs { features, logits, stats })
}

/// Regression targets for an SVD-family method, with the std ratio before
/// and after the transform.
pub fn svd_targets(
    cfg: &ExperimentConfig,
    outputs: &TeacherOutputs,
    kind: TransformKind,
) -> Result<(FeatureMatrix, f64, f64)> {
    let artifact = fit_svd_projector(&outputs.features, cfg.d_student)?;
    let aligned = crate::align::apply_alignment(&artifact, &outputs.features)?;
    let transform = fit_transform(
        &aligned,
        kind,
        Some(&outputs.stats),
        cfg.pts_temperature,
        cfg.pts_exponent,
    )?;
    let targets = precompute_targets(&outputs.features, &artifact, &transform)?;
    let before = std_ratio(&channel_stats(&aligned), STD_RATIO_EPS);
    let after = std_ratio(&channel_stats(&targets), STD_RATIO_EPS);
    Ok((targets, before, after))
}

#[derive(Debug, Clone)]
pub struct PretrainedStudent {
    pub network: Network,
    /// Absent for random init.
    pub manifest: Option<RunManifest>,
    pub std_ratio_before: Option<f64>,
    pub std_ratio_after: Option<f64>,
}

pub fn pretrain_student(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    corpus: &Corpus,
    outputs: &TeacherOutputs,
) -> Result<PretrainedStudent> {
    let student = Network::init(cfg.student_spec(method.student_has_head()), seed)?;
    let inputs = &corpus.student_pretrain.inputs;
    let tc = cfg.method_train_config(method, seed);
    let mut ratios = (None, None);
    let targets;
    let data = match method {
        Method::RandomInit => {
            return Ok(PretrainedStudent {
                network: student,
                manifest: None,
                std_ratio_before: None,
                std_ratio_after: None,
            })
        }
        Method::SupervisedPretrain => TrainData {
            labels: Some(&corpus.student_pretrain.class_ids),
            ..TrainData::new(inputs)
        },
        Method::LogitsKd => TrainData {
            teacher_logits: Some(&outputs.logits),
            ..TrainData::new(inputs)
        },
        Method::Parametric => {
            let r = std_ratio(&outputs.stats, STD_RATIO_EPS);
            ratios = (Some(r), Some(r));
            TrainData {
                teacher_features: Some(&outputs.features),
                ..TrainData::new(inputs)
            }
        }
        _ => {
            let kind = method.transform().expect("svd family");
            let (t, before, after) = svd_targets(cfg, outputs, kind)?;
            targets = t;
            ratios = (Some(before), Some(after));
            TrainData {
                targets: Some(&targets),
                ..TrainData::new(inputs)
            }
        }
    };
    let out = train(&tc, &student, data)?;
    let mut manifest = out.manifest;
    manifest.config.insert(0, ("method".into(), method.name().into()));
    Ok(PretrainedStudent {
        network: out.network,
        manifest: Some(manifest),
        std_ratio_before: ratios.0,
        std_ratio_after: ratios.1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// A [`Method`] name, or a free-form label for other combinations.
    pub method: String,
    pub data_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    pub probe_top1: f64,
    pub std_ratio_before: Option<f64>,
    pub std_ratio_after: Option<f64>,
    pub compactness_teacher: f64,
}

pub const REPORT_CSV_HEADER: &str =
    "method,data_fraction,epochs,seed,probe_top1,std_ratio_before,std_ratio_after,compactness_teacher";

impl ReportRow {
    /// Missing ratios are written as empty fields.
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.data_fraction,
            self.epochs,
            self.seed,
            self.probe_top1,
            opt(self.std_ratio_before),
            opt(self.std_ratio_after),
            self.compactness_teacher
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |what: &str| Error::Config(format!("report row {line:?}: bad {what}"));
        if f.len() != 8 {
            return Err(bad("column count"));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let opt = |s: &str, what: &str| if s.is_empty() { Ok(None) } else { num(s, what).map(Some) };
        Ok(ReportRow {
            method: if f[0].is_empty() { return Err(bad("method")) } else { f[0].to_string() },
            data_fraction: num(f[1], "data_fraction")?,
            epochs: f[2].parse().map_err(|_| bad("epochs"))?,
            seed: f[3].parse().map_err(|_| bad("seed"))?,
            probe_top1: num(f[4], "probe_top1")?,
            std_ratio_before: opt(f[5], "std_ratio_before")?,
            std_ratio_after: opt(f[6], "std_ratio_after")?,
            compactness_teacher: num(f[7], "compactness_teacher")?,
        })
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Mean probe top-1 per method label: known methods in [`Method::ALL`]
/// order, then other labels in order of first appearance.
pub fn method_means(rows: &[ReportRow]) -> Vec<(String, f64)> {
    let mut labels: Vec<String> = Method::ALL
        .iter()
        .map(|m| m.name().to_string())
        .filter(|n| rows.iter().any(|r| &r.method == n))
        .collect();
    for r in rows {
        if !labels.contains(&r.method) {
            labels.push(r.method.clone());
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let v: Vec<f64> = rows.iter().filter(|r| r.method == label).map(|r| r.probe_top1).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (label, mean)
        })
        .collect()
}

/// The directional ordering the comparison is meant to show.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub pts_ge_svd: bool,
    pub svd_ge_parametric: bool,
    /// Distilled methods whose mean does not beat random init.
    pub not_above_random: Vec<Method>,
    /// Mean SVD+PTS minus mean parametric, in accuracy points.
    pub margin_points: f64,
    pub pass: bool,
}

pub fn check_trend(rows: &[ReportRow], min_margin_points: f64) -> Result<TrendCheck> {
    let means = method_means(rows);
    let get = |m: Method| {
        means
            .iter()
            .find(|(k, _)| k == m.name())
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("report has no {} rows", m.name())))
    };
    let (random, param, svd, pts) = (
        get(Method::RandomInit)?,
        get(Method::Parametric)?,
        get(Method::Svd)?,
        get(Method::SvdPts)?,
    );
    let not_above_random: Vec<Method> = means
        .iter()
        .filter_map(|(label, v)| Method::parse(label).map(|m| (m, *v)))
        .filter(|(m, v)| m.is_distilled() && *v <= random)
        .map(|(m, _)| m)
        .collect();
    let margin_points = 100.0 * (pts - param);
    let pts_ge_svd = pts >= svd;
    let svd_ge_parametric = svd >= param;
    Ok(TrendCheck {
        pts_ge_svd,
        svd_ge_parametric,
        pass: pts_ge_svd && svd_ge_parametric && not_above_random.is_empty() && margin_points >= min_margin_points,
        not_above_random,
        margin_points,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub teacher_accuracy: f64,
    pub teacher_hash: String,
    pub rows: Vec<ReportRow>,
    /// One per trained student, in row order.
    pub manifests: Vec<RunManifest>,
}

/// Runs every method in `methods` for every configured seed.
pub fn run_experiment(cfg: &ExperimentConfig, methods: &[Method]) -> Result<ExperimentOutcome> {
    let corpus = build_corpus(cfg)?;
    let teacher = train_teacher(cfg, &corpus.pretrain)?;
    let outputs = teacher_outputs(&teacher.network, &corpus.student_pretrain)?;
    let (down_feats, _) = forward_chunked(&teacher.network, &corpus.downstream_train.inputs, CHUNK)?;
    let compact = compactness(&down_feats, &corpus.downstream_train.class_ids)?;

    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    for &seed in &cfg.seeds {
        for &method in methods {
            let student = pretrain_student(cfg, method, seed, &corpus, &outputs)?;
            let probe = linear_probe(
                &student.network,
                &corpus.downstream_train.inputs,
                &corpus.downstream_train.class_ids,
                &corpus.downstream_test.inputs,
                &corpus.downstream_test.class_ids,
                cfg.classes,
                &ProbeConfig { seed, ..cfg.probe.clone() },
            )?;
            rows.push(ReportRow {
                method: method.name().to_string(),
                data_fraction: cfg.data_fraction,
                epochs: if method == Method::RandomInit { 0 } else { cfg.student_train.epochs },
                seed,
                probe_top1: probe.top1,
                std_ratio_before: student.std_ratio_before,
                std_ratio_after: student.std_ratio_after,
                compactness_teacher: compact,
            });
            if let Some(m) = student.manifest {
                manifests.push(m);
            }
        }
    }
    Ok(ExperimentOutcome {
        teacher_accuracy: teacher.pretrain_accuracy,
        teacher_hash: teacher.network.to_container().content_hash()?,
        rows,
        manifests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("svd+pts"), Some(Method::SvdPts));
        assert_eq!(Method::parse("parametric-1×1"), Some(Method::Parametric));
        assert_eq!(Method::parse("nope"), None);
    }

    #[test]
    fn report_row_round_trip() {
        let row = ReportRow {
            method: "SVD+PTS".into(),
            data_fraction: 0.5,
            epochs: 30,
            seed: 2,
            probe_top1: 0.8125,
            std_ratio_before: Some(12.5),
            std_ratio_after: None,
            compactness_teacher: 0.3,
        };
        assert_eq!(row.csv(), "SVD+PTS,0.5,30,2,0.8125,12.5,,0.3");
        assert_eq!(ReportRow::parse_csv(&row.csv()).unwrap(), row);
        assert!(report_csv(&[row]).starts_with(REPORT_CSV_HEADER));
    }

    fn row(method: Method, top1: f64) -> ReportRow {
        ReportRow {
            method: method.name().into(),
            data_fraction: 1.0,
            epochs: 1,
            seed: 0,
            probe_top1: top1,
            std_ratio_before: None,
            std_ratio_after: None,
            compactness_teacher: 0.0,
        }
    }

    #[test]
    fn trend_logic() {
        let rows = [
            row(Method::RandomInit, 0.5),
            row(Method::Parametric, 0.6),
            row(Method::Svd, 0.65),
            row(Method::SvdPts, 0.62),
            row(Method::LogitsKd, 0.5),
        ];
        let t = check_trend(&rows, 1.0).unwrap();
        assert!(!t.pts_ge_svd && t.svd_ge_parametric);
        assert_eq!(t.not_above_random, vec![Method::LogitsKd]);
        assert!((t.margin_points - 2.0).abs() < 1e-9);
        assert!(!t.pass);
        assert!(check_trend(&rows[..2], 1.0).is_err());
    }
}
