use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use kdep::align::{
    apply_alignment, fit_channel_select, fit_svd_projector, make_interpolator, reconstruction_mse, AlignmentArtifact,
};
use kdep::data::{write_atomic, Dataset, Section, TensorContainer};
use kdep::distill::{forward_chunked, precompute_targets, train, Mode, RunManifest, TrainData};
use kdep::eval::{compactness, linear_probe, variance_check_csv, verify_variance_identity, ProbeResult};
use kdep::experiment::{build_corpus, train_teacher, ReportRow, Method, report_csv, method_means, STD_RATIO_EPS};
use kdep::linalg::{channel_stats, std_ratio};
use kdep::nn::Network;
use kdep::transform::{fit_transform, TargetTransform};
use kdep::{Error, Result};

use sha2::{Digest, Sha256};

use crate::config::Resolved;

const CHUNK: usize = 512;

const DATA_KEYS: &[&str] = &["data."];
const TEACHER_KEYS: &[&str] = &["data.", "teacher."];
const ALIGN_KEYS: &[&str] = &["data.", "teacher.", "student.dim", "align.", "transform."];
const THEOREM_KEYS: &[&str] = &["theorem."];

pub struct Pipeline {
    pub root: PathBuf,
    pub cfg: Resolved,
    /// Run directories already resolved by this process (logged once).
    seen: RefCell<BTreeSet<PathBuf>>,
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn kv_value(entries: &[(String, String)], key: &str) -> Option<f64> {
    entries.iter().find(|(k, _)| k == key).and_then(|(_, v)| v.parse().ok())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

impl Pipeline {
    pub fn new(root: PathBuf, cfg: Resolved) -> Self {
        Pipeline {
            root,
            cfg,
            seen: RefCell::default(),
        }
    }

    /// Returns the run directory for `stage`, building it with `build` into a
    /// temporary directory and renaming it into place when it does not exist.
    fn cached(&self, stage: &str, hash: &str, build: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dir = self.root.join(format!("{stage}-{hash}"));
        if self.seen.borrow().contains(&dir) {
            return Ok(dir);
        }
        if dir.is_dir() {
            eprintln!("cache hit: {stage} {}", dir.display());
            self.seen.borrow_mut().insert(dir.clone());
            return Ok(dir);
        }
        fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))?;
        let tmp = self.root.join(format!(".{stage}-{hash}.tmp{}", std::process::id()));
        if tmp.exists() {
            let _ = fs::remove_dir_all(&tmp);
        }
        fs::create_dir(&tmp).map_err(|e| io_err(&tmp, e))?;
        if let Err(e) = build(&tmp) {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
        if let Err(e) = fs::rename(&tmp, &dir) {
            let _ = fs::remove_dir_all(&tmp);
            // Another process published the same run first.
            if !dir.is_dir() {
                return Err(io_err(&dir, e));
            }
        }
        eprintln!("wrote {stage} {}", dir.display());
        self.seen.borrow_mut().insert(dir.clone());
        Ok(dir)
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::new(self.cfg.entries())
    }

    pub fn data(&self) -> Result<PathBuf> {
        let exp = self.cfg.experiment();
        self.cached("data", &self.cfg.hash("data", DATA_KEYS), |dir| {
            let corpus = build_corpus(&exp)?;
            let mut m = self.manifest();
            for (name, ds) in [
                ("pretrain", &corpus.pretrain),
                ("student_pretrain", &corpus.student_pretrain),
                ("downstream_train", &corpus.downstream_train),
                ("downstream_test", &corpus.downstream_test),
            ] {
                let c = ds.to_container();
                c.write(&dir.join(format!("{name}.kdt")))?;
                m.set_hash(name, &c.content_hash()?);
            }
            for role in [
                kdep::data::Role::PretrainUnlabeled,
                kdep::data::Role::DownstreamTrain,
                kdep::data::Role::DownstreamTest,
            ] {
                write_text(&dir.join(format!("{}.txt", role.name())), &exp.dataset_spec(role).manifest())?;
            }
            write_text(&dir.join("manifest.txt"), &m.render())
        })
    }

    fn dataset(&self, name: &str) -> Result<Dataset> {
        Dataset::from_container(&TensorContainer::read(&self.data()?.join(format!("{name}.kdt")))?)
    }

    pub fn teacher(&self) -> Result<PathBuf> {
        let data = self.data()?;
        let exp = self.cfg.experiment();
        self.cached("teacher", &self.cfg.hash("teacher", TEACHER_KEYS), |dir| {
            let pretrain = Dataset::from_container(&TensorContainer::read(&data.join("pretrain.kdt"))?)?;
            let t = train_teacher(&exp, &pretrain)?;
            let c = t.network.to_container();
            c.write(&dir.join("teacher.kdt"))?;
            let mut m = t.manifest;
            m.config = self.cfg.entries();
            m.set_hash("teacher", &c.content_hash()?);
            write_text(&dir.join("manifest.txt"), &m.render())?;
            eprintln!("teacher pretrain top-1 {}", t.pretrain_accuracy);
            write_text(&dir.join("summary.txt"), &format!("pretrain_top1={}\n", t.pretrain_accuracy))
        })
    }

    fn teacher_network(&self) -> Result<Network> {
        Network::from_container(&TensorContainer::read(&self.teacher()?.join("teacher.kdt"))?)
    }

    /// Teacher features and logits on the student pretraining set, plus
    /// features on the downstream train split for the compactness score.
    pub fn extract(&self) -> Result<PathBuf> {
        let teacher = self.teacher_network()?;
        let pretrain = self.dataset("student_pretrain")?;
        let down = self.dataset("downstream_train")?;
        self.cached("features", &self.cfg.hash("features", TEACHER_KEYS), |dir| {
            let (features, logits) = forward_chunked(&teacher, &pretrain.inputs, CHUNK)?;
            let logits = logits.ok_or_else(|| Error::Config("teacher has no classifier head".into()))?;
            let (down_features, _) = forward_chunked(&teacher, &down.inputs, CHUNK)?;
            let c = TensorContainer::new(vec![
                Section::matrix("features", &features),
                Section::matrix("logits", &logits),
                Section::matrix("downstream_features", &down_features),
            ]);
            c.write(&dir.join("features.kdt"))?;
            let stats = channel_stats(&features);
            let summary = format!(
                "teacher_std_ratio={}\ncompactness_teacher={}\n",
                std_ratio(&stats, STD_RATIO_EPS),
                compactness(&down_features, &down.class_ids)?
            );
            write_text(&dir.join("summary.txt"), &summary)
        })
    }

    fn features(&self) -> Result<TensorContainer> {
        TensorContainer::read(&self.extract()?.join("features.kdt"))
    }

    /// Fits the alignment and transform and caches the regression targets.
    pub fn fit_align(&self) -> Result<PathBuf> {
        let feats = self.features()?;
        let cfg = &self.cfg;
        self.cached("align", &cfg.hash("align", ALIGN_KEYS), |dir| {
            let raw = feats.matrix("features")?;
            let ds = cfg.count("student.dim");
            let artifact = match (cfg.get("align.kind"), cfg.select_mode()) {
                ("svd", _) => fit_svd_projector(&raw, ds)?,
                (_, Some(mode)) => fit_channel_select(&raw, ds, mode, cfg.seed("align.seed"))?,
                _ => make_interpolator(raw.cols(), ds)?,
            };
            let aligned = apply_alignment(&artifact, &raw)?;
            let transform = fit_transform(
                &aligned,
                cfg.transform_kind(),
                Some(&channel_stats(&raw)),
                cfg.real("transform.T"),
                cfg.real("transform.n"),
            )?;
            let targets = precompute_targets(&raw, &artifact, &transform)?;
            artifact.to_container().write(&dir.join("alignment.kdt"))?;
            transform.to_container().write(&dir.join("transform.kdt"))?;
            TensorContainer::new(vec![Section::matrix("targets", &targets)]).write(&dir.join("targets.kdt"))?;
            let summary = format!(
                "std_ratio_before={}\nstd_ratio_after={}\nreconstruction_mse={}\n",
                std_ratio(&channel_stats(&aligned), STD_RATIO_EPS),
                std_ratio(&channel_stats(&targets), STD_RATIO_EPS),
                reconstruction_mse(&artifact, &raw)?
            );
            write_text(&dir.join("summary.txt"), &summary)
        })
    }

    fn student_keys(&self) -> Vec<&'static str> {
        let mut keys = vec!["data.", "student.", "run.seed", "train.mode"];
        let Some(mode) = self.cfg.train_mode() else {
            return keys;
        };
        keys.extend([
            "train.lr0",
            "train.momentum",
            "train.weight_decay",
            "train.epochs",
            "train.batch_size",
        ]);
        match mode {
            Mode::Supervised => {}
            Mode::LogitsKd => keys.extend(["teacher.", "train.tau"]),
            Mode::ParametricKdep => keys.extend(["teacher.", "train.w"]),
            Mode::Kdep => keys.extend(["teacher.", "align.", "transform.", "train.w"]),
        }
        keys
    }

    pub fn distill(&self) -> Result<PathBuf> {
        let exp = self.cfg.experiment();
        let mode = self.cfg.train_mode();
        let seed = self.cfg.seed("run.seed");
        let with_head = matches!(mode, Some(Mode::Supervised | Mode::LogitsKd));
        let student = Network::init(exp.student_spec(with_head), seed)?;
        let pretrain = self.dataset("student_pretrain")?;
        let mut hashes = Vec::new();
        let mut ratios = (None, None);

        let features = match mode {
            Some(Mode::LogitsKd | Mode::ParametricKdep | Mode::Kdep) => {
                hashes.push(("teacher", self.hash_of(&self.teacher()?.join("teacher.kdt"))?));
                Some(self.features()?)
            }
            _ => None,
        };
        let mut targets = None;
        if mode == Some(Mode::Kdep) {
            let dir = self.fit_align()?;
            for name in ["alignment", "transform", "targets"] {
                hashes.push((name, self.hash_of(&dir.join(format!("{name}.kdt")))?));
            }
            targets = Some(TensorContainer::read(&dir.join("targets.kdt"))?.matrix("targets")?);
            let s = read_kv(&dir.join("summary.txt"))?;
            ratios = (kv_value(&s, "std_ratio_before"), kv_value(&s, "std_ratio_after"));
        }
        if mode == Some(Mode::ParametricKdep) {
            let s = read_kv(&self.extract()?.join("summary.txt"))?;
            let r = kv_value(&s, "teacher_std_ratio");
            ratios = (r, r);
        }

        let keys = self.student_keys();
        let label = self.cfg.method_label();
        self.cached("student", &self.cfg.hash("student", &keys), |dir| {
            let mut manifest = self.manifest();
            let network = match mode {
                None => student,
                Some(mode) => {
                    let tc = kdep::distill::TrainConfig {
                        mode,
                        ..exp.student_train.clone()
                    };
                    let logits;
                    let raw;
                    let mut data = TrainData::new(&pretrain.inputs);
                    match mode {
                        Mode::Supervised => data.labels = Some(&pretrain.class_ids),
                        Mode::LogitsKd => {
                            logits = features.as_ref().expect("loaded").matrix("logits")?;
                            data.teacher_logits = Some(&logits);
                        }
                        Mode::ParametricKdep => {
                            raw = features.as_ref().expect("loaded").matrix("features")?;
                            data.teacher_features = Some(&raw);
                        }
                        Mode::Kdep => data.targets = targets.as_ref(),
                    }
                    let out = train(&tc, &student, data)?;
                    if let Some(head) = out.head {
                        AlignmentArtifact::ParametricHead(head).to_container().write(&dir.join("head.kdt"))?;
                    }
                    manifest.epochs = out.manifest.epochs;
                    manifest.wall_clock_seconds = out.manifest.wall_clock_seconds;
                    out.network
                }
            };
            let c = network.to_container();
            c.write(&dir.join("student.kdt"))?;
            for (k, v) in &hashes {
                manifest.set_hash(k, v);
            }
            manifest.set_hash("student", &c.content_hash()?);
            write_text(&dir.join("manifest.txt"), &manifest.render())?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            write_text(
                &dir.join("summary.txt"),
                &format!(
                    "method={label}\nstd_ratio_before={}\nstd_ratio_after={}\n",
                    opt(ratios.0),
                    opt(ratios.1)
                ),
            )
        })
    }

    fn hash_of(&self, path: &Path) -> Result<String> {
        TensorContainer::read(path)?.content_hash()
    }

    pub fn probe(&self) -> Result<PathBuf> {
        let student_dir = self.distill()?;
        let compact = read_kv(&self.extract()?.join("summary.txt"))?;
        let mut keys = self.student_keys();
        keys.extend(["probe.", "teacher."]);
        let exp = self.cfg.experiment();
        let train_set = self.dataset("downstream_train")?;
        let test_set = self.dataset("downstream_test")?;
        self.cached("probe", &self.cfg.hash("probe", &keys), |dir| {
            let student = Network::from_container(&TensorContainer::read(&student_dir.join("student.kdt"))?)?;
            let r = linear_probe(
                &student,
                &train_set.inputs,
                &train_set.class_ids,
                &test_set.inputs,
                &test_set.class_ids,
                exp.classes,
                &exp.probe,
            )?;
            write_text(&dir.join("probe.csv"), &format!("{}\n{}\n", ProbeResult::CSV_HEADER, r.csv_row()))?;
            let summary = read_kv(&student_dir.join("summary.txt"))?;
            let row = ReportRow {
                method: self.cfg.method_label(),
                data_fraction: exp.data_fraction,
                epochs: if self.cfg.train_mode().is_some() { exp.student_train.epochs } else { 0 },
                seed: self.cfg.seed("run.seed"),
                probe_top1: r.top1,
                std_ratio_before: kv_value(&summary, "std_ratio_before"),
                std_ratio_after: kv_value(&summary, "std_ratio_after"),
                compactness_teacher: kv_value(&compact, "compactness_teacher")
                    .ok_or_else(|| Error::Config("features summary lacks compactness".into()))?,
            };
            eprintln!("{} probe top-1 {}", row.method, row.probe_top1);
            write_text(&dir.join("row.csv"), &report_csv(&[row]))
        })
    }

    /// Collects every probe row under the run root into one CSV plus a
    /// gnuplot-style per-method summary.
    pub fn report(&self) -> Result<(PathBuf, String)> {
        let mut rows = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) => return Err(io_err(&self.root, e)),
        };
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("probe-")))
            .collect();
        dirs.sort();
        for d in dirs {
            let text = fs::read_to_string(d.join("row.csv")).map_err(|e| io_err(&d, e))?;
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                rows.push(ReportRow::parse_csv(line)?);
            }
        }
        if rows.is_empty() {
            return Err(Error::Config(format!("no probe results under {}", self.root.display())));
        }
        let order = |label: &str| Method::parse(label).and_then(|m| Method::ALL.iter().position(|x| *x == m));
        rows.sort_by(|a, b| {
            (order(&a.method).unwrap_or(usize::MAX), &a.method, a.seed, a.data_fraction.to_bits(), a.epochs).cmp(&(
                order(&b.method).unwrap_or(usize::MAX),
                &b.method,
                b.seed,
                b.data_fraction.to_bits(),
                b.epochs,
            ))
        });
        let csv = report_csv(&rows);
        let hash = hex::encode(&Sha256::digest(csv.as_bytes())[..8]);
        let mut plot = String::from("# index mean_probe_top1 method\n");
        for (i, (label, mean)) in method_means(&rows).iter().enumerate() {
            plot.push_str(&format!("{i} {mean} \"{label}\"\n"));
        }
        let dir = self.cached("report", &hash, |dir| {
            write_text(&dir.join("report.csv"), &csv)?;
            write_text(&dir.join("report.dat"), &plot)
        })?;
        Ok((dir, csv))
    }

    /// Returns the run directory, the CSV table, and whether every row passed.
    pub fn verify_theorem(&self) -> Result<(PathBuf, String, bool)> {
        let rows = verify_variance_identity(&self.cfg.theorem())?;
        let csv = variance_check_csv(&rows);
        let dir = self.cached("theorem", &self.cfg.hash("theorem", THEOREM_KEYS), |dir| {
            write_text(&dir.join("theorem.csv"), &csv)
        })?;
        let csv = fs::read_to_string(dir.join("theorem.csv")).map_err(|e| io_err(&dir, e))?;
        Ok((dir, csv.clone(), rows.iter().all(|r| r.pass)))
    }

    /// Std-ratio diagnostic of the raw, aligned and transformed targets.
    pub fn stats(&self) -> Result<(PathBuf, String)> {
        let align = self.fit_align()?;
        let feats = self.features()?;
        let extract = read_kv(&self.extract()?.join("summary.txt"))?;
        let summary = read_kv(&align.join("summary.txt"))?;
        let raw = feats.matrix("features")?;
        let artifact = AlignmentArtifact::from_container(&TensorContainer::read(&align.join("alignment.kdt"))?)?;
        let transform = TargetTransform::from_container(&TensorContainer::read(&align.join("transform.kdt"))?)?;
        let aligned = apply_alignment(&artifact, &raw)?;
        let targets = TensorContainer::read(&align.join("targets.kdt"))?.matrix("targets")?;
        let mut text = String::new();
        for (k, v) in extract.iter().chain(&summary) {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!("transform={}\n", transform.kind().name()));
        text.push_str("channel,aligned_std,target_std\n");
        let (a, t) = (channel_stats(&aligned), channel_stats(&targets));
        for c in 0..a.channels() {
            text.push_str(&format!("{c},{},{}\n", a.stds[c], t.stds[c]));
        }
        let dir = self.cached("stats", &self.cfg.hash("stats", ALIGN_KEYS), |dir| {
            write_text(&dir.join("stats.txt"), &text)
        })?;
        Ok((dir, text))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
