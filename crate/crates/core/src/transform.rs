//! Corrections applied to aligned teacher targets before regression.
//!
//! After SVD projection the channel stds of the targets differ by orders of
//! magnitude, and the squared-error loss per channel grows with the target
//! std, so the largest channels dominate training. Scale normalization and
//! std matching rescale each channel independently; power temperature
//! scaling (PTS) instead applies one odd, nondecreasing map to every value,
//! which shrinks the spread while keeping the global order of values.

use crate::data::{Section, TensorContainer};
use crate::error::{Error, Result};
use crate::linalg::{channel_stats, ChannelStats, FeatureMatrix};

pub const STD_FLOOR: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_EXPONENT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    ScaleNormalize,
    StdMatch,
    Pts,
}

impl TransformKind {
    pub fn tag(self) -> i64 {
        match self {
            TransformKind::Identity => 0,
            TransformKind::ScaleNormalize => 1,
            TransformKind::StdMatch => 2,
            TransformKind::Pts => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::ScaleNormalize => "sn",
            TransformKind::StdMatch => "sm",
            TransformKind::Pts => "pts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" | "none" => TransformKind::Identity,
            "sn" => TransformKind::ScaleNormalize,
            "sm" => TransformKind::StdMatch,
            "pts" => TransformKind::Pts,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetTransform {
    Identity,
    ScaleNormalize { stds: Vec<f64> },
    StdMatch { source_stds: Vec<f64>, target_stds: Vec<f64> },
    Pts { temperature: f64, exponent: f64 },
}

fn check_pts(temperature: f64, exponent: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Param(format!("PTS temperature must be > 0, got {temperature}")));
    }
    if !(exponent >= 1.0 && exponent.is_finite()) {
        return Err(Error::Param(format!("PTS exponent must be >= 1, got {exponent}")));
    }
    Ok(())
}

/// `sign(f) * |f / T|^(1/n)`, with `sign(0) = 0`.
pub fn pts_value(f: f64, temperature: f64, exponent: f64) -> f64 {
    if f == 0.0 {
        return 0.0;
    }
    let mag = (f / temperature).abs();
    // cbrt is exact on perfect cubes where powf(1/3) is not.
    let root = if exponent == 3.0 { mag.cbrt() } else { mag.powf(1.0 / exponent) };
    root.copysign(f)
}

pub fn pts(values: &FeatureMatrix, temperature: f64, exponent: f64) -> Result<FeatureMatrix> {
    check_pts(temperature, exponent)?;
    values.map(|f| pts_value(f, temperature, exponent))
}

fn columnwise(values: &FeatureMatrix, factors: &[f64]) -> Result<FeatureMatrix> {
    if factors.len() != values.cols() {
        return Err(Error::Dimension(format!(
            "{} per-channel factors for {} channels",
            factors.len(),
            values.cols()
        )));
    }
    let out = values
        .values()
        .chunks_exact(values.cols())
        .flat_map(|row| row.iter().zip(factors).map(|(v, f)| v * f))
        .collect();
    FeatureMatrix::checked(values.rows(), values.cols(), out)
}

/// Divides column `j` by `max(stds[j], 1e-12)`.
pub fn scale_normalize(values: &FeatureMatrix, stds: &[f64]) -> Result<FeatureMatrix> {
    if stds.len() != values.cols() {
        return Err(Error::Dimension(format!(
            "{} stds for {} channels",
            stds.len(),
            values.cols()
        )));
    }
    let out = values
        .values()
        .chunks_exact(values.cols())
        .flat_map(|row| row.iter().zip(stds).map(|(v, s)| v / s.max(STD_FLOOR)))
        .collect();
    FeatureMatrix::checked(values.rows(), values.cols(), out)
}

/// Multiplies column `j` by `target[j] / max(source[j], 1e-12)`.
pub fn std_match(values: &FeatureMatrix, source_stds: &[f64], target_stds: &[f64]) -> Result<FeatureMatrix> {
    if source_stds.len() != target_stds.len() {
        return Err(Error::Dimension(format!(
            "source has {} stds, target {}",
            source_stds.len(),
            target_stds.len()
        )));
    }
    let factors: Vec<f64> = source_stds
        .iter()
        .zip(target_stds)
        .map(|(s, t)| t / s.max(STD_FLOOR))
        .collect();
    columnwise(values, &factors)
}

/// Fits a transform on the aligned teacher features.
///
/// `pre_align_stats` are the channel statistics of the raw teacher features
/// and are only needed for std matching, whose target is the `D_s` largest
/// raw stds in descending order.
pub fn fit_transform(
    aligned: &FeatureMatrix,
    kind: TransformKind,
    pre_align_stats: Option<&ChannelStats>,
    temperature: f64,
    exponent: f64,
) -> Result<TargetTransform> {
    Ok(match kind {
        TransformKind::Identity => TargetTransform::Identity,
        TransformKind::ScaleNormalize => TargetTransform::ScaleNormalize {
            stds: floored(channel_stats(aligned).stds),
        },
        TransformKind::StdMatch => {
            let pre = pre_align_stats.ok_or(Error::MissingStats)?;
            let ds = aligned.cols();
            if pre.stds.len() < ds {
                return Err(Error::Dimension(format!(
                    "{} teacher channels cannot supply {ds} target stds",
                    pre.stds.len()
                )));
            }
            let mut target = pre.stds.clone();
            target.sort_by(|a, b| b.total_cmp(a));
            target.truncate(ds);
            TargetTransform::StdMatch {
                source_stds: floored(channel_stats(aligned).stds),
                target_stds: floored(target),
            }
        }
        TransformKind::Pts => {
            check_pts(temperature, exponent)?;
            TargetTransform::Pts {
                temperature,
                exponent,
            }
        }
    })
}

fn floored(stds: Vec<f64>) -> Vec<f64> {
    stds.into_iter().map(|s| s.max(STD_FLOOR)).collect()
}

impl TargetTransform {
    pub fn kind(&self) -> TransformKind {
        match self {
            TargetTransform::Identity => TransformKind::Identity,
            TargetTransform::ScaleNormalize { .. } => TransformKind::ScaleNormalize,
            TargetTransform::StdMatch { .. } => TransformKind::StdMatch,
            TargetTransform::Pts { .. } => TransformKind::Pts,
        }
    }

    pub fn apply(&self, values: &FeatureMatrix) -> Result<FeatureMatrix> {
        apply_transform(self, values)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new(vec![Section::ints("kind", vec![self.kind().tag()])]);
        match self {
            TargetTransform::Identity => {}
            TargetTransform::ScaleNormalize { stds } => c.push(Section::vector("stds", stds.clone())),
            TargetTransform::StdMatch {
                source_stds,
                target_stds,
            } => {
                c.push(Section::vector("source_stds", source_stds.clone()));
                c.push(Section::vector("target_stds", target_stds.clone()));
            }
            TargetTransform::Pts {
                temperature,
                exponent,
            } => c.push(Section::vector("pts", vec![*temperature, *exponent])),
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let tag = *c
            .i64s("kind")?
            .first()
            .ok_or_else(|| Error::format(0, "empty transform kind"))?;
        Ok(match tag {
            0 => TargetTransform::Identity,
            1 => TargetTransform::ScaleNormalize {
                stds: c.f64s("stds")?.to_vec(),
            },
            2 => TargetTransform::StdMatch {
                source_stds: c.f64s("source_stds")?.to_vec(),
                target_stds: c.f64s("target_stds")?.to_vec(),
            },
            3 => {
                let p = c.f64s("pts")?;
                if p.len() != 2 {
                    return Err(Error::format(0, "PTS section needs (T, n)"));
                }
                check_pts(p[0], p[1])?;
                TargetTransform::Pts {
                    temperature: p[0],
                    exponent: p[1],
                }
            }
            t => return Err(Error::format(0, format!("unknown transform tag {t}"))),
        })
    }
}

pub fn apply_transform(t: &TargetTransform, values: &FeatureMatrix) -> Result<FeatureMatrix> {
    match t {
        TargetTransform::Identity => Ok(values.clone()),
        TargetTransform::ScaleNormalize { stds } => scale_normalize(values, stds),
        TargetTransform::StdMatch {
            source_stds,
            target_stds,
        } => std_match(values, source_stds, target_stds),
        TargetTransform::Pts {
            temperature,
            exponent,
        } => pts(values, *temperature, *exponent),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::std_ratio;

    fn row(v: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn pts_examples() {
        assert_eq!(pts_value(0.0, 0.1, 3.0), 0.0);
        assert_eq!(pts_value(0.0, 7.0, 1.5), 0.0);
        assert_eq!(pts_value(0.1, 0.1, 3.0), 1.0);
        assert_eq!(pts_value(-0.8, 0.1, 3.0), -2.0);
    }

    #[test]
    fn pts_rejects_bad_params() {
        let x = row(&[1.0]);
        assert!(matches!(pts(&x, 0.0, 3.0), Err(Error::Param(_))));
        assert!(matches!(pts(&x, -1.0, 3.0), Err(Error::Param(_))));
        assert!(matches!(pts(&x, 0.1, 0.5), Err(Error::Param(_))));
    }

    #[test]
    fn sn_examples() {
        let out = scale_normalize(&row(&[10.0, 2.0, 2.0]), &[50.0, 5.0, 1.0]).unwrap();
        let expect = [0.2, 0.4, 2.0];
        for (a, b) in out.values().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12);
        }
        let x = row(&[1.0, -3.0]);
        assert_eq!(scale_normalize(&x, &[1.0, 1.0]).unwrap(), x);
        assert_eq!(scale_normalize(&row(&[3.0]), &[3.0]).unwrap().values(), &[1.0]);
        assert!(matches!(scale_normalize(&x, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn sm_examples() {
        let out = std_match(&row(&[10.0, 2.0, 2.0]), &[50.0, 5.0, 1.0], &[4.0, 3.0, 2.0]).unwrap();
        for (a, b) in out.values().iter().zip([0.8, 1.2, 4.0]) {
            assert!((a - b).abs() <= 1e-12);
        }
        let x = row(&[5.0, 6.0]);
        assert_eq!(std_match(&x, &[2.0, 3.0], &[2.0, 3.0]).unwrap(), x);
        assert_eq!(std_match(&row(&[1.0, 1.0]), &[1.0, 2.0], &[2.0, 2.0]).unwrap().values(), &[2.0, 1.0]);
    }

    #[test]
    fn sn_inverts_cross_channel_order() {
        let out = scale_normalize(&row(&[10.0, 2.0, 2.0]), &[50.0, 5.0, 1.0]).unwrap();
        // 10 > 2 before, but 0.2 < 2 after.
        assert!(out.get(0, 0) < out.get(0, 2));
    }

    #[test]
    fn fit_sm_targets_top_raw_stds() {
        let pre = ChannelStats {
            means: vec![0.0; 4],
            stds: vec![2.0, 4.0, 3.0, 1.0],
        };
        let aligned = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        match fit_transform(&aligned, TransformKind::StdMatch, Some(&pre), 0.1, 3.0).unwrap() {
            TargetTransform::StdMatch {
                source_stds,
                target_stds,
            } => {
                assert_eq!(target_stds, vec![4.0, 3.0, 2.0]);
                assert_eq!(source_stds, vec![1.0, 2.0, 3.0]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            fit_transform(&aligned, TransformKind::StdMatch, None, 0.1, 3.0),
            Err(Error::MissingStats)
        ));
    }

    #[test]
    fn fit_sn_on_unit_channels_is_identity() {
        let x = FeatureMatrix::new(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let t = fit_transform(&x, TransformKind::ScaleNormalize, None, 0.1, 3.0).unwrap();
        assert_eq!(t, TargetTransform::ScaleNormalize { stds: vec![1.0, 1.0] });
        assert_eq!(t.apply(&x).unwrap(), x);
    }

    #[test]
    fn fit_pts_defaults() {
        let x = row(&[1.0]);
        let t = fit_transform(&x, TransformKind::Pts, None, DEFAULT_TEMPERATURE, DEFAULT_EXPONENT).unwrap();
        assert_eq!(t, TargetTransform::Pts { temperature: 0.1, exponent: 3.0 });
    }

    #[test]
    fn apply_dispatch() {
        let x = FeatureMatrix::new(1, 2, vec![0.1, -0.8]).unwrap();
        assert_eq!(TargetTransform::Identity.apply(&x).unwrap(), x);
        let p = TargetTransform::Pts { temperature: 0.1, exponent: 3.0 };
        assert_eq!(p.apply(&x).unwrap().values(), &[1.0, -2.0]);
        let sn = TargetTransform::ScaleNormalize { stds: vec![50.0, 5.0, 1.0] };
        let out = sn.apply(&row(&[10.0, 2.0, 2.0])).unwrap();
        assert!((out.get(0, 1) - 0.4).abs() < 1e-12);
        assert!(matches!(sn.apply(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn sn_and_sm_hit_their_target_stds() {
        let mut rng = crate::rng::Rng::new(5);
        let x = FeatureMatrix::new(200, 3, (0..600).map(|i| rng.normal() * [50.0, 5.0, 1.0][i % 3]).collect()).unwrap();
        let sn = fit_transform(&x, TransformKind::ScaleNormalize, None, 0.1, 3.0).unwrap();
        for s in channel_stats(&sn.apply(&x).unwrap()).stds {
            assert!((s - 1.0).abs() < 1e-10);
        }
        let pre = ChannelStats { means: vec![0.0; 4], stds: vec![2.0, 4.0, 3.0, 1.0] };
        let sm = fit_transform(&x, TransformKind::StdMatch, Some(&pre), 0.1, 3.0).unwrap();
        for (s, t) in channel_stats(&sm.apply(&x).unwrap()).stds.iter().zip([4.0, 3.0, 2.0]) {
            assert!((s - t).abs() < 1e-10);
        }
        assert!(std_ratio(&channel_stats(&pts(&x, 0.1, 3.0).unwrap()), 1e-12) < std_ratio(&channel_stats(&x), 1e-12));
    }

    #[test]
    fn container_round_trip() {
        for t in [
            TargetTransform::Identity,
            TargetTransform::ScaleNormalize { stds: vec![1.0, 2.0] },
            TargetTransform::StdMatch { source_stds: vec![1.0], target_stds: vec![3.0] },
            TargetTransform::Pts { temperature: 0.1, exponent: 3.0 },
        ] {
            let bytes = t.to_container().encode().unwrap();
            assert_eq!(TargetTransform::from_container(&TensorContainer::decode(&bytes).unwrap()).unwrap(), t);
        }
    }
}
