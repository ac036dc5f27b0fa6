use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use kdep::align::SelectMode;
use kdep::distill::{Mode, Schedule, TrainConfig};
use kdep::eval::{ProbeConfig, ProbeMode, VarianceCheckConfig};
use kdep::experiment::ExperimentConfig;
use kdep::transform::TransformKind;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Count,
    Seed,
    Real,
    Reals,
    Counts,
    Choice(&'static [&'static str]),
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub help: &'static str,
}

const ALIGN_KINDS: &[&str] = &["svd", "cs_var", "cs_rand", "interp"];
const TRANSFORM_KINDS: &[&str] = &["identity", "sn", "sm", "pts"];
const TRAIN_MODES: &[&str] = &["none", "kdep", "supervised", "logits_kd", "parametric_kdep"];
const PROBE_MODES: &[&str] = &["linear", "finetune"];

macro_rules! key {
    ($name:literal, $default:literal, $kind:expr, $help:literal) => {
        Key { name: $name, default: $default, kind: $kind, help: $help }
    };
}

pub const KEYS: &[Key] = &[
    key!("data.classes", "10", Kind::Count, "number of classes"),
    key!("data.input_dim", "32", Kind::Count, "input vector width"),
    key!("data.spread", "0.3", Kind::Real, "per-coordinate noise std around unit centroids"),
    key!("data.seed", "0", Kind::Seed, "dataset seed (centroids and noise streams)"),
    key!("data.pretrain_per_class", "200", Kind::Count, "pretraining samples per class"),
    key!("data.fraction", "1", Kind::Real, "stratified fraction of the pretraining set given to students"),
    key!("data.centroid_shift", "2", Kind::Real, "downstream centroid perturbation size"),
    key!("data.downstream_train_per_class", "100", Kind::Count, "labelled downstream train samples per class"),
    key!("data.downstream_test_per_class", "100", Kind::Count, "downstream test samples per class"),
    key!("teacher.hidden", "128", Kind::Counts, "teacher hidden widths, comma separated"),
    key!("teacher.dim", "64", Kind::Count, "teacher feature width D_t"),
    key!("teacher.lr0", "0.05", Kind::Real, "teacher initial learning rate"),
    key!("teacher.epochs", "30", Kind::Count, "teacher epochs"),
    key!("teacher.batch_size", "64", Kind::Count, "teacher batch size"),
    key!("teacher.momentum", "0.9", Kind::Real, "teacher SGD momentum"),
    key!("teacher.weight_decay", "0.0001", Kind::Real, "teacher weight decay"),
    key!("teacher.seed", "0", Kind::Seed, "teacher init and shuffle seed"),
    key!("student.hidden", "64", Kind::Counts, "student hidden widths, comma separated"),
    key!("student.dim", "16", Kind::Count, "student feature width D_s"),
    key!("align.kind", "svd", Kind::Choice(ALIGN_KINDS), "teacher-to-student width map"),
    key!("align.seed", "0", Kind::Seed, "seed for random channel selection"),
    key!("transform.kind", "pts", Kind::Choice(TRANSFORM_KINDS), "target transform"),
    key!("transform.T", "0.1", Kind::Real, "PTS temperature"),
    key!("transform.n", "3", Kind::Real, "PTS exponent"),
    key!("train.mode", "kdep", Kind::Choice(TRAIN_MODES), "student pretraining mode (none = random init)"),
    key!("train.lr0", "0.01", Kind::Real, "student initial learning rate"),
    key!("train.momentum", "0.9", Kind::Real, "student SGD momentum"),
    key!("train.weight_decay", "0.0001", Kind::Real, "student weight decay"),
    key!("train.epochs", "30", Kind::Count, "student epochs"),
    key!("train.batch_size", "64", Kind::Count, "student batch size"),
    key!("train.w", "1", Kind::Real, "feature loss weight"),
    key!("train.tau", "4", Kind::Real, "logits KD temperature"),
    key!("run.seed", "0", Kind::Seed, "student init, shuffle and probe seed"),
    key!("probe.mode", "linear", Kind::Choice(PROBE_MODES), "linear (frozen backbone) or finetune"),
    key!("probe.epochs", "50", Kind::Count, "probe epochs per learning rate"),
    key!("probe.lr_grid", "0.01,0.001", Kind::Reals, "probe learning rates; best is reported"),
    key!("probe.weight_decay", "0.0005", Kind::Real, "probe weight decay"),
    key!("probe.momentum", "0.9", Kind::Real, "probe SGD momentum"),
    key!("probe.batch_size", "32", Kind::Count, "probe batch size"),
    key!("theorem.sigmas", "0.5,1,2,4", Kind::Reals, "teacher channel stds to check"),
    key!("theorem.sigma_s", "1", Kind::Real, "student channel std"),
    key!("theorem.samples", "1000000", Kind::Count, "Monte-Carlo samples per sigma"),
    key!("theorem.seed", "0", Kind::Seed, "Monte-Carlo seed"),
];

pub fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_value(key: &Key, value: &str) -> Result<(), String> {
    let ok = match key.kind {
        Kind::Count => value.parse::<usize>().is_ok(),
        Kind::Seed => value.parse::<u64>().is_ok(),
        Kind::Real => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Reals => value.split(',').all(|v| v.trim().parse::<f64>().is_ok_and(f64::is_finite)),
        Kind::Counts => value.split(',').all(|v| v.trim().parse::<usize>().is_ok()),
        Kind::Choice(options) => options.contains(&value),
    };
    if ok {
        return Ok(());
    }
    Err(match key.kind {
        Kind::Choice(options) => format!("`{}` must be one of {}, got `{value}`", key.name, options.join("|")),
        _ => format!("`{}` has invalid value `{value}`", key.name),
    })
}

/// Every registered key with its resolved value.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    values: BTreeMap<&'static str, String>,
}

impl Resolved {
    pub fn defaults() -> Self {
        Resolved {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let key = lookup(name).ok_or_else(|| ConfigError(format!("unknown config key `{name}`")))?;
        let value = value.trim();
        check_value(key, value).map_err(ConfigError)?;
        self.values.insert(key.name, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).unwrap_or_else(|| panic!("unregistered key {name}"))
    }

    pub fn count(&self, name: &str) -> usize {
        self.get(name).parse().expect("validated")
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.get(name).parse().expect("validated")
    }

    pub fn real(&self, name: &str) -> f64 {
        self.get(name).parse().expect("validated")
    }

    pub fn reals(&self, name: &str) -> Vec<f64> {
        self.get(name).split(',').map(|v| v.trim().parse().expect("validated")).collect()
    }

    pub fn counts(&self, name: &str) -> Vec<usize> {
        self.get(name).split(',').map(|v| v.trim().parse().expect("validated")).collect()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Short hash over `stage` and the keys matching any of `prefixes`
    /// (a prefix ending without a dot matches that exact key).
    pub fn hash(&self, stage: &str, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            let hit = prefixes
                .iter()
                .any(|p| if p.ends_with('.') { k.starts_with(p) } else { k == p });
            if hit {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn train_mode(&self) -> Option<Mode> {
        match self.get("train.mode") {
            "none" => None,
            "kdep" => Some(Mode::Kdep),
            "supervised" => Some(Mode::Supervised),
            "logits_kd" => Some(Mode::LogitsKd),
            _ => Some(Mode::ParametricKdep),
        }
    }

    pub fn transform_kind(&self) -> TransformKind {
        TransformKind::parse(self.get("transform.kind")).expect("validated")
    }

    pub fn select_mode(&self) -> Option<SelectMode> {
        match self.get("align.kind") {
            "cs_var" => Some(SelectMode::Var),
            "cs_rand" => Some(SelectMode::Rand),
            _ => None,
        }
    }

    /// Report label of the configured student.
    pub fn method_label(&self) -> String {
        match self.train_mode() {
            None => "random-init".into(),
            Some(Mode::Supervised) => "SP-baseline".into(),
            Some(Mode::LogitsKd) => "logits-KD".into(),
            Some(Mode::ParametricKdep) => "parametric-1x1".into(),
            Some(Mode::Kdep) => {
                let base = match self.get("align.kind") {
                    "svd" => "SVD",
                    "cs_var" => "CS.var",
                    "cs_rand" => "CS.rand",
                    _ => "interp",
                };
                let suffix = match self.transform_kind() {
                    TransformKind::Identity => "",
                    TransformKind::ScaleNormalize => "+SN",
                    TransformKind::StdMatch => "+SM",
                    TransformKind::Pts => "+PTS",
                };
                format!("{base}{suffix}")
            }
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let seed = self.seed("run.seed");
        ExperimentConfig {
            classes: self.count("data.classes"),
            input_dim: self.count("data.input_dim"),
            spread: self.real("data.spread"),
            data_seed: self.seed("data.seed"),
            pretrain_per_class: self.count("data.pretrain_per_class"),
            data_fraction: self.real("data.fraction"),
            centroid_shift: self.real("data.centroid_shift"),
            downstream_train_per_class: self.count("data.downstream_train_per_class"),
            downstream_test_per_class: self.count("data.downstream_test_per_class"),
            teacher_hidden: self.counts("teacher.hidden"),
            d_teacher: self.count("teacher.dim"),
            teacher_train: TrainConfig {
                lr0: self.real("teacher.lr0"),
                momentum: self.real("teacher.momentum"),
                weight_decay: self.real("teacher.weight_decay"),
                epochs: self.count("teacher.epochs"),
                batch_size: self.count("teacher.batch_size"),
                seed: self.seed("teacher.seed"),
                schedule: Schedule::StepThirds,
                mode: Mode::Supervised,
                ..TrainConfig::default()
            },
            student_hidden: self.counts("student.hidden"),
            d_student: self.count("student.dim"),
            student_train: TrainConfig {
                lr0: self.real("train.lr0"),
                momentum: self.real("train.momentum"),
                weight_decay: self.real("train.weight_decay"),
                epochs: self.count("train.epochs"),
                batch_size: self.count("train.batch_size"),
                loss_weight: self.real("train.w"),
                seed,
                schedule: Schedule::StepThirds,
                temperature: self.real("train.tau"),
                ..TrainConfig::default()
            },
            pts_temperature: self.real("transform.T"),
            pts_exponent: self.real("transform.n"),
            logits_temperature: self.real("train.tau"),
            probe: ProbeConfig {
                mode: if self.get("probe.mode") == "linear" { ProbeMode::Linear } else { ProbeMode::Finetune },
                epochs: self.count("probe.epochs"),
                lr_grid: self.reals("probe.lr_grid"),
                weight_decay: self.real("probe.weight_decay"),
                momentum: self.real("probe.momentum"),
                batch_size: self.count("probe.batch_size"),
                seed,
            },
            seeds: vec![seed],
        }
    }

    pub fn theorem(&self) -> VarianceCheckConfig {
        VarianceCheckConfig {
            sigmas: self.reals("theorem.sigmas"),
            sigma_s: self.real("theorem.sigma_s"),
            samples: self.count("theorem.samples"),
            seed: self.seed("theorem.seed"),
        }
    }
}
