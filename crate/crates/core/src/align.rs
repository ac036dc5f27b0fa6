//! Teacher-to-student feature width alignment.
//!
//! The non-parametric aligners (SVD projection, channel selection,
//! interpolation) are fitted once on teacher features and then applied as
//! fixed maps from `D_t` to `D_s` channels. The parametric head goes the other
//! way, mapping student features up to `D_t`, and is trained jointly with the
//! student; it is kept here as the baseline it is compared against.

use crate::data::{Section, TensorContainer};
use crate::error::{Error, Result};
use crate::linalg::{channel_means, channel_stats, svd_topk, FeatureMatrix, SvdFactors};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignKind {
    SvdProject,
    ChannelSelectVar,
    ChannelSelectRand,
    Interpolate,
    ParametricHead,
}

impl AlignKind {
    pub fn tag(self) -> i64 {
        match self {
            AlignKind::SvdProject => 1,
            AlignKind::ChannelSelectVar => 2,
            AlignKind::ChannelSelectRand => 3,
            AlignKind::Interpolate => 4,
            AlignKind::ParametricHead => 5,
        }
    }

    pub fn from_tag(tag: i64) -> Result<Self> {
        Ok(match tag {
            1 => AlignKind::SvdProject,
            2 => AlignKind::ChannelSelectVar,
            3 => AlignKind::ChannelSelectRand,
            4 => AlignKind::Interpolate,
            5 => AlignKind::ParametricHead,
            t => return Err(Error::format(0, format!("unknown alignment tag {t}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AlignKind::SvdProject => "svd",
            AlignKind::ChannelSelectVar => "cs_var",
            AlignKind::ChannelSelectRand => "cs_rand",
            AlignKind::Interpolate => "interp",
            AlignKind::ParametricHead => "parametric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Var,
    Rand,
}

/// Which student activation the parametric head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPosition {
    PreRelu,
    PostRelu,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentArtifact {
    SvdProject {
        mean: Vec<f64>,
        factors: SvdFactors,
    },
    ChannelSelect {
        mode: SelectMode,
        d_teacher: usize,
        indices: Vec<usize>,
        seed: u64,
    },
    Interpolate {
        d_teacher: usize,
        d_student: usize,
    },
    ParametricHead(ParametricHead),
}

impl AlignmentArtifact {
    pub fn kind(&self) -> AlignKind {
        match self {
            AlignmentArtifact::SvdProject { .. } => AlignKind::SvdProject,
            AlignmentArtifact::ChannelSelect { mode: SelectMode::Var, .. } => {
                AlignKind::ChannelSelectVar
            }
            AlignmentArtifact::ChannelSelect { mode: SelectMode::Rand, .. } => {
                AlignKind::ChannelSelectRand
            }
            AlignmentArtifact::Interpolate { .. } => AlignKind::Interpolate,
            AlignmentArtifact::ParametricHead(_) => AlignKind::ParametricHead,
        }
    }

    pub fn d_teacher(&self) -> usize {
        match self {
            AlignmentArtifact::SvdProject { mean, .. } => mean.len(),
            AlignmentArtifact::ChannelSelect { d_teacher, .. } => *d_teacher,
            AlignmentArtifact::Interpolate { d_teacher, .. } => *d_teacher,
            AlignmentArtifact::ParametricHead(h) => h.d_teacher,
        }
    }

    pub fn d_student(&self) -> usize {
        match self {
            AlignmentArtifact::SvdProject { factors, .. } => factors.rank(),
            AlignmentArtifact::ChannelSelect { indices, .. } => indices.len(),
            AlignmentArtifact::Interpolate { d_student, .. } => *d_student,
            AlignmentArtifact::ParametricHead(h) => h.d_student,
        }
    }

    /// Teacher channel feeding each student channel, for the gather-style kinds.
    pub fn gather_indices(&self) -> Option<Vec<usize>> {
        match self {
            AlignmentArtifact::ChannelSelect { indices, .. } => Some(indices.clone()),
            AlignmentArtifact::Interpolate {
                d_teacher,
                d_student,
            } => Some(interpolation_indices(*d_teacher, *d_student)),
            _ => None,
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::default();
        c.push(Section::ints(
            "kind",
            vec![self.kind().tag(), self.d_teacher() as i64, self.d_student() as i64],
        ));
        match self {
            AlignmentArtifact::SvdProject { mean, factors } => {
                c.push(Section::vector("mean", mean.clone()));
                c.push(Section::vector("singular_values", factors.singular_values.clone()));
                c.push(Section::matrix("right_vectors", &factors.right_vectors));
            }
            AlignmentArtifact::ChannelSelect { indices, seed, .. } => {
                c.push(Section::ints("indices", indices.iter().map(|&i| i as i64).collect()));
                c.push(Section::ints("seed", vec![*seed as i64]));
            }
            AlignmentArtifact::Interpolate { .. } => {}
            AlignmentArtifact::ParametricHead(h) => h.write_sections(&mut c),
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let kind = c.i64s("kind")?;
        if kind.len() != 3 {
            return Err(Error::format(0, "malformed alignment kind section"));
        }
        let (dt, ds) = (kind[1] as usize, kind[2] as usize);
        let indices = || -> Result<Vec<usize>> {
            Ok(c.i64s("indices")?.iter().map(|&i| i as usize).collect())
        };
        let artifact = match AlignKind::from_tag(kind[0])? {
            AlignKind::SvdProject => AlignmentArtifact::SvdProject {
                mean: c.f64s("mean")?.to_vec(),
                factors: SvdFactors {
                    singular_values: c.f64s("singular_values")?.to_vec(),
                    right_vectors: c.matrix("right_vectors")?,
                },
            },
            AlignKind::ChannelSelectVar => AlignmentArtifact::ChannelSelect {
                mode: SelectMode::Var,
                d_teacher: dt,
                indices: indices()?,
                seed: c.i64s("seed")?[0] as u64,
            },
            AlignKind::ChannelSelectRand => AlignmentArtifact::ChannelSelect {
                mode: SelectMode::Rand,
                d_teacher: dt,
                indices: indices()?,
                seed: c.i64s("seed")?[0] as u64,
            },
            AlignKind::Interpolate => AlignmentArtifact::Interpolate {
                d_teacher: dt,
                d_student: ds,
            },
            AlignKind::ParametricHead => {
                AlignmentArtifact::ParametricHead(ParametricHead::read_sections(c, ds, dt)?)
            }
        };
        if artifact.d_teacher() != dt || artifact.d_student() != ds {
            return Err(Error::format(0, "alignment dims disagree with payload"));
        }
        Ok(artifact)
    }
}

fn check_widths(d_teacher: usize, d_student: usize) -> Result<()> {
    if d_student == 0 || d_student > d_teacher {
        return Err(Error::Dimension(format!(
            "student width {d_student} must be in 1..={d_teacher}"
        )));
    }
    Ok(())
}

/// Centers the teacher features and keeps the top `d_student` right singular
/// vectors of the centered matrix. Applying the artifact to its fitting set
/// gives channels with zero mean.
pub fn fit_svd_projector(teacher: &FeatureMatrix, d_student: usize) -> Result<AlignmentArtifact> {
    check_widths(teacher.cols(), d_student)?;
    if teacher.rows() < d_student {
        return Err(Error::Dimension(format!(
            "{} samples cannot support {d_student} components",
            teacher.rows()
        )));
    }
    let mean = channel_means(teacher);
    let centered = teacher.sub_row_vector(&mean)?;
    let factors = svd_topk(&centered, d_student)?;
    Ok(AlignmentArtifact::SvdProject { mean, factors })
}

pub fn fit_channel_select(
    teacher: &FeatureMatrix,
    d_student: usize,
    mode: SelectMode,
    seed: u64,
) -> Result<AlignmentArtifact> {
    check_widths(teacher.cols(), d_student)?;
    let mut indices = match mode {
        SelectMode::Var => top_variance_channels(&channel_stats(teacher).variances(), d_student),
        SelectMode::Rand => Rng::new(seed).sample_indices(teacher.cols(), d_student),
    };
    indices.sort_unstable();
    Ok(AlignmentArtifact::ChannelSelect {
        mode,
        d_teacher: teacher.cols(),
        indices,
        seed,
    })
}

/// Indices of the `k` largest variances; equal variances rank lower index first.
pub fn top_variance_channels(variances: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn make_interpolator(d_teacher: usize, d_student: usize) -> Result<AlignmentArtifact> {
    check_widths(d_teacher, d_student)?;
    Ok(AlignmentArtifact::Interpolate {
        d_teacher,
        d_student,
    })
}

/// Half-pixel nearest neighbour: output channel `j` reads input channel
/// `floor((j + 0.5) * d_teacher / d_student)`, computed in integers.
pub fn interpolation_indices(d_teacher: usize, d_student: usize) -> Vec<usize> {
    (0..d_student)
        .map(|j| (2 * j + 1) * d_teacher / (2 * d_student))
        .collect()
}

pub fn apply_alignment(artifact: &AlignmentArtifact, feats: &FeatureMatrix) -> Result<FeatureMatrix> {
    if artifact.kind() == AlignKind::ParametricHead {
        return Err(Error::Kind("parametric"));
    }
    if feats.cols() != artifact.d_teacher() {
        return Err(Error::Dimension(format!(
            "alignment expects {} teacher channels, got {}",
            artifact.d_teacher(),
            feats.cols()
        )));
    }
    match artifact {
        AlignmentArtifact::SvdProject { mean, factors } => {
            feats.sub_row_vector(mean)?.matmul(&factors.right_vectors)
        }
        _ => Ok(feats.select_columns(&artifact.gather_indices().expect("gather kind"))),
    }
}

/// Mean per-sample squared error of reconstructing centered teacher features
/// from the aligned ones: `V Vᵀ` for SVD, zero-filling for gathers.
pub fn reconstruction_mse(artifact: &AlignmentArtifact, feats: &FeatureMatrix) -> Result<f64> {
    let n = feats.rows() as f64;
    match artifact {
        AlignmentArtifact::SvdProject { mean, factors } => {
            let centered = feats.sub_row_vector(mean)?;
            let v = &factors.right_vectors;
            let recon = centered.matmul(v)?.matmul(&v.transpose())?;
            Ok(centered.sub(&recon)?.frobenius_norm_sq() / n)
        }
        AlignmentArtifact::ParametricHead(_) => Err(Error::Kind("parametric")),
        _ => {
            let centered = feats.sub_row_vector(&channel_means(feats))?;
            let keep = artifact.gather_indices().expect("gather kind");
            let mut kept = vec![false; feats.cols()];
            keep.iter().for_each(|&i| kept[i] = true);
            let err = (0..feats.cols())
                .filter(|&c| !kept[c])
                .map(|c| centered.column(c).iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>();
            Ok(err / n)
        }
    }
}

pub const HEAD_NORM_EPS: f64 = 1e-5;
pub const HEAD_RUNNING_MOMENTUM: f64 = 0.9;

/// Learnable `D_s -> D_t` linear map followed by per-channel normalization
/// with learnable scale and shift. On pooled feature vectors this is exactly
/// a 1x1 convolution plus batch normalization.
///
/// Parameters are packed as `[weight (D_s x D_t, row-major), bias, scale,
/// shift]`. Training normalizes with batch statistics and folds them into
/// running averages; evaluation uses the running averages. The normalizer
/// divides by `max(std, HEAD_NORM_EPS)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricHead {
    pub d_student: usize,
    pub d_teacher: usize,
    pub position: HeadPosition,
    pub params: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Values saved by [`ParametricHead::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: FeatureMatrix,
    normalized: Vec<f64>,
    denom: Vec<f64>,
    clamped: Vec<bool>,
}

pub fn make_parametric_head(
    d_student: usize,
    d_teacher: usize,
    position: HeadPosition,
) -> Result<AlignmentArtifact> {
    Ok(AlignmentArtifact::ParametricHead(ParametricHead::new(
        d_student, d_teacher, position,
    )?))
}

impl ParametricHead {
    /// Zero weights, unit scales; call [`ParametricHead::initialize`] before training.
    pub fn new(d_student: usize, d_teacher: usize, position: HeadPosition) -> Result<Self> {
        if d_student == 0 || d_teacher == 0 {
            return Err(Error::Dimension("head widths must be positive".into()));
        }
        let mut params = vec![0.0; d_student * d_teacher + 3 * d_teacher];
        let scale_at = d_student * d_teacher + d_teacher;
        params[scale_at..scale_at + d_teacher].fill(1.0);
        Ok(ParametricHead {
            d_student,
            d_teacher,
            position,
            params,
            running_mean: vec![0.0; d_teacher],
            running_var: vec![1.0; d_teacher],
        })
    }

    pub fn identity(d: usize, position: HeadPosition) -> Result<Self> {
        let mut h = ParametricHead::new(d, d, position)?;
        for i in 0..d {
            h.params[i * d + i] = 1.0;
        }
        Ok(h)
    }

    /// He-normal weights from `seed`; bias and shift stay zero.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = Rng::derived(seed, 0x4845_4144);
        let std = (2.0 / self.d_student as f64).sqrt();
        let n = self.d_student * self.d_teacher;
        self.params[..n].iter_mut().for_each(|w| *w = std * rng.normal());
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn weight(&self) -> &[f64] {
        &self.params[..self.d_student * self.d_teacher]
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w = self.d_student * self.d_teacher;
        (w, w + self.d_teacher, w + 2 * self.d_teacher)
    }

    pub fn bias(&self) -> &[f64] {
        let (b, s, _) = self.offsets();
        &self.params[b..s]
    }

    pub fn scale(&self) -> &[f64] {
        let (_, s, t) = self.offsets();
        &self.params[s..t]
    }

    pub fn shift(&self) -> &[f64] {
        let (_, _, t) = self.offsets();
        &self.params[t..]
    }

    /// Index range of scale and shift, which are exempt from weight decay.
    pub fn norm_param_range(&self) -> std::ops::Range<usize> {
        let (_, s, _) = self.offsets();
        s..self.params.len()
    }

    fn linear(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.cols() != self.d_student {
            return Err(Error::Shape(format!(
                "head expects {} inputs, got {}",
                self.d_student,
                x.cols()
            )));
        }
        let (dt, w, b) = (self.d_teacher, self.weight(), self.bias());
        let mut y = Vec::with_capacity(x.rows() * dt);
        for r in 0..x.rows() {
            let mut out = b.to_vec();
            for (i, &xi) in x.row(r).iter().enumerate() {
                for (o, wij) in out.iter_mut().zip(&w[i * dt..(i + 1) * dt]) {
                    *o += xi * wij;
                }
            }
            y.extend(out);
        }
        Ok(y)
    }

    /// Student activation as seen by the head.
    pub fn head_input(&self, pre_relu_features: &FeatureMatrix) -> FeatureMatrix {
        match self.position {
            HeadPosition::PreRelu => pre_relu_features.clone(),
            HeadPosition::PostRelu => {
                FeatureMatrix::from_raw(
                    pre_relu_features.rows(),
                    pre_relu_features.cols(),
                    pre_relu_features.values().iter().map(|v| v.max(0.0)).collect(),
                )
            }
        }
    }

    pub fn forward_eval(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let dt = self.d_teacher;
        let mut y = self.linear(x)?;
        let (scale, shift) = (self.scale(), self.shift());
        for row in y.chunks_exact_mut(dt) {
            for c in 0..dt {
                let denom = self.running_var[c].sqrt().max(HEAD_NORM_EPS);
                row[c] = scale[c] * (row[c] - self.running_mean[c]) / denom + shift[c];
            }
        }
        FeatureMatrix::checked(x.rows(), dt, y)
    }

    /// Batch-statistics forward; also updates the running averages.
    pub fn forward_train(&mut self, x: &FeatureMatrix) -> Result<(FeatureMatrix, HeadCache)> {
        let (b, dt) = (x.rows(), self.d_teacher);
        let y = self.linear(x)?;
        let mut mean = vec![0.0; dt];
        for row in y.chunks_exact(dt) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; dt];
        for row in y.chunks_exact(dt) {
            for c in 0..dt {
                var[c] += (row[c] - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let clamped: Vec<bool> = var.iter().map(|v| v.sqrt() <= HEAD_NORM_EPS).collect();
        let denom: Vec<f64> = var.iter().map(|v| v.sqrt().max(HEAD_NORM_EPS)).collect();

        let mut normalized = vec![0.0; b * dt];
        let mut out = vec![0.0; b * dt];
        let (scale, shift) = (self.scale().to_vec(), self.shift().to_vec());
        for r in 0..b {
            for c in 0..dt {
                let z = (y[r * dt + c] - mean[c]) / denom[c];
                normalized[r * dt + c] = z;
                out[r * dt + c] = scale[c] * z + shift[c];
            }
        }
        let m = HEAD_RUNNING_MOMENTUM;
        for c in 0..dt {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c];
        }
        Ok((
            FeatureMatrix::checked(b, dt, out)?,
            HeadCache {
                input: x.clone(),
                normalized,
                denom,
                clamped,
            },
        ))
    }

    /// Returns `(param_grads, input_grads)` for upstream gradient `d_out`.
    pub fn backward(&self, cache: &HeadCache, d_out: &FeatureMatrix) -> Result<(Vec<f64>, FeatureMatrix)> {
        let (b, ds, dt) = (cache.input.rows(), self.d_student, self.d_teacher);
        if d_out.shape() != (b, dt) {
            return Err(Error::Shape(format!(
                "head gradient shape {:?}, expected {:?}",
                d_out.shape(),
                (b, dt)
            )));
        }
        let mut grads = vec![0.0; self.param_count()];
        let (b_at, s_at, t_at) = self.offsets();
        let scale = self.scale();
        let g = d_out.values();
        let z = &cache.normalized;
        let bf = b as f64;

        // d/dy through the normalizer, per channel.
        let mut dy = vec![0.0; b * dt];
        for c in 0..dt {
            let mut sum_g = 0.0;
            let mut sum_gz = 0.0;
            for r in 0..b {
                sum_g += g[r * dt + c];
                sum_gz += g[r * dt + c] * z[r * dt + c];
            }
            grads[s_at + c] = sum_gz;
            grads[t_at + c] = sum_g;
            let k = scale[c] / cache.denom[c];
            for r in 0..b {
                let gi = g[r * dt + c];
                dy[r * dt + c] = if cache.clamped[c] {
                    k * (gi - sum_g / bf)
                } else {
                    k * (gi - sum_g / bf - z[r * dt + c] * sum_gz / bf)
                };
            }
        }

        let mut dx = vec![0.0; b * ds];
        let w = self.weight();
        for r in 0..b {
            let xr = cache.input.row(r);
            let dyr = &dy[r * dt..(r + 1) * dt];
            for i in 0..ds {
                let wrow = &w[i * dt..(i + 1) * dt];
                let gw = &mut grads[i * dt..(i + 1) * dt];
                let mut acc = 0.0;
                for c in 0..dt {
                    gw[c] += xr[i] * dyr[c];
                    acc += wrow[c] * dyr[c];
                }
                dx[r * ds + i] = acc;
            }
            for c in 0..dt {
                grads[b_at + c] += dyr[c];
            }
        }
        Ok((grads, FeatureMatrix::checked(b, ds, dx)?))
    }

    fn write_sections(&self, c: &mut TensorContainer) {
        let pos = match self.position {
            HeadPosition::PreRelu => 0,
            HeadPosition::PostRelu => 1,
        };
        c.push(Section::ints("position", vec![pos]));
        c.push(Section::vector("head_params", self.params.clone()));
        c.push(Section::vector("running_mean", self.running_mean.clone()));
        c.push(Section::vector("running_var", self.running_var.clone()));
    }

    fn read_sections(c: &TensorContainer, ds: usize, dt: usize) -> Result<Self> {
        let position = match c.i64s("position")?.first() {
            Some(0) => HeadPosition::PreRelu,
            Some(1) => HeadPosition::PostRelu,
            _ => return Err(Error::format(0, "bad head position")),
        };
        let mut head = ParametricHead::new(ds, dt, position)?;
        let params = c.f64s("head_params")?;
        if params.len() != head.params.len() {
            return Err(Error::format(0, "head parameter count mismatch"));
        }
        head.params = params.to_vec();
        head.running_mean = c.f64s("running_mean")?.to_vec();
        head.running_var = c.f64s("running_var")?.to_vec();
        Ok(head)
    }
}
