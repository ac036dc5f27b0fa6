use crate::error::{Error, Result};
use crate::linalg::FeatureMatrix;

fn same_shape(a: &FeatureMatrix, b: &FeatureMatrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Feature regression loss `w / B * sum_i ||f_i - t_i||^2` (mean over the
/// batch, sum over channels) and its gradient `2w / B * (f - t)`.
pub fn kdep_loss(student: &FeatureMatrix, targets: &FeatureMatrix, weight: f64) -> Result<(f64, FeatureMatrix)> {
    same_shape(student, targets, "student features vs targets")?;
    let b = student.rows() as f64;
    let diff = student.sub(targets)?;
    let loss = weight * diff.frobenius_norm_sq() / b;
    Ok((loss, diff.scale(2.0 * weight / b)))
}

fn softmax_rows(logits: &FeatureMatrix, temperature: f64) -> Vec<f64> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.values().len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - max) / temperature).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    debug_assert_eq!(out.len(), logits.rows() * c);
    out
}

fn log_softmax_rows(logits: &FeatureMatrix, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.values().len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| (v - max) / temperature - lse));
    }
    out
}

/// Temperature-softened distillation loss
/// `tau^2 / B * sum_i KL(softmax(t_i / tau) || softmax(s_i / tau))`, with no
/// label term. Gradient with respect to the student logits is
/// `tau / B * (p_s - p_t)`.
pub fn logits_kd_loss(student: &FeatureMatrix, teacher: &FeatureMatrix, tau: f64) -> Result<(f64, FeatureMatrix)> {
    same_shape(student, teacher, "student vs teacher logits")?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    let b = student.rows() as f64;
    let p_t = softmax_rows(teacher, tau);
    let log_p_t = log_softmax_rows(teacher, tau);
    let log_p_s = log_softmax_rows(student, tau);
    let p_s = softmax_rows(student, tau);
    let mut kl = 0.0;
    for i in 0..p_t.len() {
        if p_t[i] > 0.0 {
            kl += p_t[i] * (log_p_t[i] - log_p_s[i]);
        }
    }
    let grads = p_s.iter().zip(&p_t).map(|(s, t)| tau * (s - t) / b).collect();
    Ok((
        tau * tau * kl / b,
        FeatureMatrix::checked(student.rows(), student.cols(), grads)?,
    ))
}

/// Mean softmax cross-entropy against integer labels.
pub fn cross_entropy(logits: &FeatureMatrix, labels: &[usize]) -> Result<(f64, FeatureMatrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }
    let b = logits.rows() as f64;
    let logp = log_softmax_rows(logits, 1.0);
    let mut grads: Vec<f64> = logp.iter().map(|l| l.exp() / b).collect();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= logp[r * c + y];
        grads[r * c + y] -= 1.0 / b;
    }
    Ok((loss / b, FeatureMatrix::checked(logits.rows(), c, grads)?))
}
