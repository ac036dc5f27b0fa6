use std::fmt;

use crate::data::container::{Section, TensorContainer};
use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Vector(usize),
    Image { h: usize, w: usize, ch: usize },
}

impl InputShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputShape::Vector(d) => d,
            InputShape::Image { h, w, ch } => h * w * ch,
        }
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputShape::Vector(d) => write!(f, "vector({d})"),
            InputShape::Image { h, w, ch } => write!(f, "image({h},{w},{ch})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    PretrainUnlabeled,
    DownstreamTrain,
    DownstreamTest,
}

impl Role {
    fn stream(self) -> u64 {
        match self {
            Role::PretrainUnlabeled => 100,
            Role::DownstreamTrain => 101,
            Role::DownstreamTest => 102,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::PretrainUnlabeled => "pretrain_unlabeled",
            Role::DownstreamTrain => "downstream_train",
            Role::DownstreamTest => "downstream_test",
        }
    }
}

const CENTROID_STREAM: u64 = 1;
const SHIFT_STREAM: u64 = 2;

/// Gaussian clusters around unit-norm class centroids.
///
/// Centroids depend only on `seed`, so a pretraining corpus and downstream
/// splits generated from the same seed share class geometry. Downstream roles
/// additionally move each centroid by `centroid_shift` times a seeded random
/// direction and renormalize, which makes the downstream task related to but
/// distinct from the pretraining one. Per-sample noise comes from a stream
/// keyed by role, so roles never share draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub shape: InputShape,
    pub per_class: usize,
    /// Per-coordinate noise std.
    pub spread: f64,
    pub seed: u64,
    pub role: Role,
    pub centroid_shift: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Spec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class < 1 {
            return Err(Error::Spec("per_class must be at least 1".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Spec(format!("spread must be > 0, got {}", self.spread)));
        }
        if !(self.centroid_shift >= 0.0 && self.centroid_shift.is_finite()) {
            return Err(Error::Spec("centroid_shift must be >= 0".into()));
        }
        if self.shape.flat_len() == 0 {
            return Err(Error::Spec("input shape has zero size".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        format!(
            "classes={}\nshape={}\nper_class={}\nspread={}\nseed={}\nrole={}\ncentroid_shift={}\n",
            self.classes,
            self.shape,
            self.per_class,
            self.spread,
            self.seed,
            self.role.name(),
            self.centroid_shift
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: FeatureMatrix,
    /// Class of every sample; hidden (used only for stratification and
    /// diagnostics) when `labeled` is false.
    pub class_ids: Vec<usize>,
    pub num_classes: usize,
    pub labeled: bool,
    pub shape: InputShape,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labeled.then_some(self.class_ids.as_slice())
    }

    pub fn to_container(&self) -> TensorContainer {
        let shape = match self.shape {
            InputShape::Vector(d) => vec![0, d as i64, 0, 0],
            InputShape::Image { h, w, ch } => vec![1, h as i64, w as i64, ch as i64],
        };
        TensorContainer::new(vec![
            Section::matrix("inputs", &self.inputs),
            Section::ints("class_ids", self.class_ids.iter().map(|&c| c as i64).collect()),
            Section::ints(
                "meta",
                vec![self.num_classes as i64, self.labeled as i64],
            ),
            Section::ints("shape", shape),
        ])
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let inputs = c.matrix("inputs")?;
        let class_ids: Vec<usize> = c.i64s("class_ids")?.iter().map(|&v| v as usize).collect();
        let meta = c.i64s("meta")?;
        let shape = c.i64s("shape")?;
        if meta.len() != 2 || shape.len() != 4 || class_ids.len() != inputs.rows() {
            return Err(Error::format(0, "malformed dataset container"));
        }
        let shape = match shape[0] {
            0 => InputShape::Vector(shape[1] as usize),
            1 => InputShape::Image {
                h: shape[1] as usize,
                w: shape[2] as usize,
                ch: shape[3] as usize,
            },
            t => return Err(Error::format(0, format!("unknown input shape tag {t}"))),
        };
        Ok(Dataset {
            inputs,
            class_ids,
            num_classes: meta[0] as usize,
            labeled: meta[1] != 0,
            shape,
        })
    }
}

pub fn class_centroids(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let dim = spec.shape.flat_len();
    let mut rng = Rng::derived(spec.seed, CENTROID_STREAM);
    let mut centroids: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| unit_vector(&mut rng, dim))
        .collect();
    if spec.role != Role::PretrainUnlabeled && spec.centroid_shift > 0.0 {
        let mut shift_rng = Rng::derived(spec.seed, SHIFT_STREAM);
        for c in &mut centroids {
            let dir = unit_vector(&mut shift_rng, dim);
            for (x, d) in c.iter_mut().zip(&dir) {
                *x += spec.centroid_shift * d;
            }
            normalize(c);
        }
    }
    centroids
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.shape.flat_len();
    let centroids = class_centroids(spec);
    let mut noise = Rng::derived(spec.seed, spec.role.stream());
    let n = spec.classes * spec.per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut class_ids = Vec::with_capacity(n);
    for (class, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.per_class {
            values.extend(centroid.iter().map(|&c| c + spec.spread * noise.normal()));
            class_ids.push(class);
        }
    }
    Ok(Dataset {
        inputs: FeatureMatrix::new(n, dim, values)?,
        class_ids,
        num_classes: spec.classes,
        labeled: spec.role != Role::PretrainUnlabeled,
        shape: spec.shape,
    })
}

/// Per-class stratified sample of `ceil(fraction * class_count)` items; the
/// kept samples stay in their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Spec(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = Rng::derived(seed, 7);
    let mut keep = Vec::new();
    for class in 0..dataset.num_classes {
        let members: Vec<usize> = dataset
            .class_ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64).ceil() as usize).min(members.len());
        keep.extend(
            rng.sample_indices(members.len(), take)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    Ok(Dataset {
        inputs: dataset.inputs.select_rows(&keep),
        class_ids: keep.iter().map(|&i| dataset.class_ids[i]).collect(),
        num_classes: dataset.num_classes,
        labeled: dataset.labeled,
        shape: dataset.shape,
    })
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(role: Role) -> DatasetSpec {
        DatasetSpec {
            classes: 2,
            shape: InputShape::Vector(4),
            per_class: 3,
            spread: 0.5,
            seed: 9,
            role,
            centroid_shift: 0.0,
        }
    }

    #[test]
    fn counts_and_labels() {
        let d = generate(&spec(Role::DownstreamTrain)).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.labels().unwrap(), &[0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn pretrain_hides_labels() {
        let d = generate(&spec(Role::PretrainUnlabeled)).unwrap();
        assert!(d.labels().is_none());
        assert_eq!(d.class_ids, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn roles_use_disjoint_noise() {
        let a = generate(&spec(Role::DownstreamTrain)).unwrap();
        let b = generate(&spec(Role::DownstreamTest)).unwrap();
        assert_ne!(a.inputs, b.inputs);
        assert_eq!(class_centroids(&spec(Role::DownstreamTrain)), class_centroids(&spec(Role::DownstreamTest)));
    }

    #[test]
    fn tiny_spread_collapses_to_centroids() {
        let mut s = spec(Role::DownstreamTrain);
        s.spread = 1e-300;
        let d = generate(&s).unwrap();
        let c = class_centroids(&s);
        for (i, &cls) in d.class_ids.iter().enumerate() {
            assert_eq!(d.inputs.row(i), c[cls].as_slice());
        }
    }

    #[test]
    fn shift_moves_downstream_centroids_only() {
        let mut s = spec(Role::DownstreamTrain);
        s.centroid_shift = 0.3;
        let mut p = s.clone();
        p.role = Role::PretrainUnlabeled;
        let (cs, cp) = (class_centroids(&s), class_centroids(&p));
        assert_ne!(cs, cp);
        for c in &cs {
            let n: f64 = c.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(Role::DownstreamTrain);
        s.classes = 1;
        assert!(matches!(generate(&s), Err(Error::Spec(_))));
        let mut s = spec(Role::DownstreamTrain);
        s.spread = 0.0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn subsample_fraction_rules() {
        let mut s = spec(Role::DownstreamTrain);
        s.per_class = 100;
        let d = generate(&s).unwrap();
        assert_eq!(subsample(&d, 1.0, 1).unwrap(), d);
        let tenth = subsample(&d, 0.1, 1).unwrap();
        for class in 0..2 {
            assert_eq!(tenth.class_ids.iter().filter(|&&c| c == class).count(), 10);
        }
        assert_eq!(tenth, subsample(&d, 0.1, 1).unwrap());
        assert!(subsample(&d, 0.0, 1).is_err());
        assert!(subsample(&d, 1.5, 1).is_err());
    }

    #[test]
    fn container_round_trip() {
        let d = generate(&spec(Role::PretrainUnlabeled)).unwrap();
        let back = Dataset::from_container(&d.to_container()).unwrap();
        assert_eq!(back, d);
    }
}
