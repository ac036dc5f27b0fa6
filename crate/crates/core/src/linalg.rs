//! Dense 64-bit matrices, truncated SVD and per-channel statistics.

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of finite values.
///
/// Rows are samples and columns are feature channels when the matrix holds
/// penultimate features, which is the common case across the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at row {}, col {}",
                values[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        FeatureMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = FeatureMatrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        FeatureMatrix::new(n, d, rows.concat())
    }

    /// Wraps values produced by crate internals that are finite by construction.
    pub(crate) fn from_raw(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        FeatureMatrix { rows, cols, values }
    }

    /// Rejects results that overflowed during a computation.
    pub(crate) fn checked(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        FeatureMatrix::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        FeatureMatrix::from_raw(idx.len(), self.cols, out)
    }

    pub fn select_columns(&self, idx: &[usize]) -> FeatureMatrix {
        let mut out = Vec::with_capacity(idx.len() * self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            out.extend(idx.iter().map(|&c| row[c]));
        }
        FeatureMatrix::from_raw(self.rows, idx.len(), out)
    }

    pub fn transpose(&self) -> FeatureMatrix {
        let mut out = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        FeatureMatrix::from_raw(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for r in 0..self.rows {
            let dst = &mut out[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        FeatureMatrix::checked(self.rows, other.cols, out)
    }

    /// Subtracts `offsets[c]` from every entry of column `c`.
    pub fn sub_row_vector(&self, offsets: &[f64]) -> Result<FeatureMatrix> {
        if offsets.len() != self.cols {
            return Err(Error::Dimension(format!(
                "offset vector has {} entries for {} columns",
                offsets.len(),
                self.cols
            )));
        }
        let values = self
            .values
            .chunks_exact(self.cols)
            .flat_map(|row| row.iter().zip(offsets).map(|(v, o)| v - o))
            .collect();
        Ok(FeatureMatrix::from_raw(self.rows, self.cols, values))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<FeatureMatrix> {
        FeatureMatrix::checked(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, c: f64) -> FeatureMatrix {
        FeatureMatrix::from_raw(
            self.rows,
            self.cols,
            self.values.iter().map(|v| v * c).collect(),
        )
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn sub(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(FeatureMatrix::from_raw(
            self.rows,
            self.cols,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.means.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.stds.iter().map(|s| s * s).collect()
    }
}

pub fn channel_means(x: &FeatureMatrix) -> Vec<f64> {
    let n = x.rows() as f64;
    let mut sums = vec![0.0; x.cols()];
    for row in x.values().chunks_exact(x.cols()) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums.into_iter().map(|s| s / n).collect()
}

/// Two-pass mean and population (divide by N) standard deviation per column.
pub fn channel_stats(x: &FeatureMatrix) -> ChannelStats {
    let n = x.rows() as f64;
    let means = channel_means(x);
    let mut ss = vec![0.0; x.cols()];
    for row in x.values().chunks_exact(x.cols()) {
        for ((s, v), m) in ss.iter_mut().zip(row).zip(&means) {
            let d = v - m;
            *s += d * d;
        }
    }
    let stds = ss.into_iter().map(|s| (s / n).sqrt()).collect();
    ChannelStats { means, stds }
}

/// Largest channel std over the smallest, with the denominator floored at `eps`.
pub fn std_ratio(stats: &ChannelStats, eps: f64) -> f64 {
    let max = stats.stds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = stats.stds.iter().copied().fold(f64::INFINITY, f64::min);
    max / min.max(eps)
}

pub const SVD_MAX_SWEEPS: usize = 30;
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Top-`k` singular values and right singular vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub singular_values: Vec<f64>,
    /// `D x k`, orthonormal columns.
    pub right_vectors: FeatureMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }
}

/// Truncated SVD by one-sided (Hestenes) Jacobi.
///
/// Columns of a working copy of `x` are rotated pairwise until mutually
/// orthogonal; each rotation is computed from the 2x2 Gram block of the pair
/// and accumulated into `V`. Afterwards the column norms are the singular
/// values. Sweeps run in fixed cyclic order, so the result depends only on
/// the input bits.
///
/// Conventions: values sorted nonincreasing, with values within
/// [`SVD_TOLERANCE`] of each other kept in column order; every vector has its
/// largest-magnitude entry nonnegative (first such entry on exact ties);
/// vectors belonging to zero singular values are replaced by the canonical
/// basis vectors, lowest index first, orthogonalized against those already
/// chosen.
pub fn svd_topk(x: &FeatureMatrix, k: usize) -> Result<SvdFactors> {
    let d = x.cols();
    if k < 1 || k > d {
        return Err(Error::Dimension(format!(
            "rank {k} requested for a matrix with {d} columns"
        )));
    }

    // Column-major working copy so column pairs are contiguous.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|c| x.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|c| {
            let mut e = vec![0.0; d];
            e[c] = 1.0;
            e
        })
        .collect();

    // Columns below this squared norm are rounding noise of a rank-deficient
    // input; rotating them never settles.
    let negligible = (SVD_TOLERANCE * SVD_TOLERANCE) * x.frobenius_norm_sq();
    let mut converged = d < 2;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha.min(beta) <= negligible
                    || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge within {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("singular value overflowed".into()));
    }

    // Repeated selection of the largest remaining value; near-ties go to the
    // lowest column index.
    let mut remaining: Vec<usize> = (0..d).collect();
    let mut order = Vec::with_capacity(d);
    while !remaining.is_empty() {
        let max = remaining.iter().map(|&i| sigma[i]).fold(f64::NEG_INFINITY, f64::max);
        let pos = remaining
            .iter()
            .position(|&i| sigma[i] >= max - SVD_TOLERANCE)
            .expect("nonempty");
        order.push(remaining.remove(pos));
    }

    let top = sigma[order[0]];
    let zero_cut = SVD_TOLERANCE * top.max(f64::MIN_POSITIVE);

    let mut singular_values = Vec::with_capacity(k);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        if top == 0.0 || sigma[idx] <= zero_cut {
            singular_values.push(0.0);
            basis.push(canonical_completion(&basis, d));
        } else {
            singular_values.push(sigma[idx]);
            basis.push(v[idx].clone());
        }
    }

    for col in &mut basis {
        fix_sign(col);
    }

    let mut right = vec![0.0; d * k];
    for (j, col) in basis.iter().enumerate() {
        for (i, &val) in col.iter().enumerate() {
            right[i * k + j] = val;
        }
    }
    Ok(SvdFactors {
        singular_values,
        right_vectors: FeatureMatrix::from_raw(d, k, right),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(vs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vs.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// First canonical basis vector not (numerically) in the span of `basis`,
/// orthonormalized against it by two rounds of Gram-Schmidt.
fn canonical_completion(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        if norm > 1e-8 {
            e.iter_mut().for_each(|x| *x /= norm);
            return e;
        }
    }
    unreachable!("fewer than d vectors always leave a canonical direction uncovered")
}

fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        col.iter_mut().for_each(|x| *x = -*x);
    }
    // Avoid -0.0 leaking into serialized artifacts.
    col.iter_mut().for_each(|x| {
        if *x == 0.0 {
            *x = 0.0
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(FeatureMatrix::new(0, 2, vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn svd_diagonal_example() {
        // XᵀX = diag(9, 1): characteristic polynomial (λ-9)(λ-1), top
        // eigenvector e0, so σ = 3 with v = [1, 0].
        let x = m(&[&[3.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let f = svd_topk(&x, 1).unwrap();
        assert_eq!(f.singular_values, vec![3.0]);
        assert_eq!(f.right_vectors.values(), &[1.0, 0.0]);
    }

    #[test]
    fn svd_identity() {
        let f = svd_topk(&FeatureMatrix::identity(2), 2).unwrap();
        assert_eq!(f.singular_values, vec![1.0, 1.0]);
        assert_eq!(f.right_vectors, FeatureMatrix::identity(2));
    }

    #[test]
    fn svd_zero_matrix_canonical_completion() {
        let f = svd_topk(&FeatureMatrix::zeros(3, 2), 1).unwrap();
        assert_eq!(f.singular_values, vec![0.0]);
        assert_eq!(f.right_vectors.values(), &[1.0, 0.0]);
    }

    #[test]
    fn svd_rank_deficient_completion_is_orthonormal() {
        // Rank one; the second direction must be completed.
        let x = m(&[&[1.0, 1.0, 0.0], &[2.0, 2.0, 0.0]]);
        let f = svd_topk(&x, 3).unwrap();
        assert!((f.singular_values[0] - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(&f.singular_values[1..], &[0.0, 0.0]);
        let vtv = f.right_vectors.transpose().matmul(&f.right_vectors).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((vtv.get(i, j) - expect).abs() < 1e-9);
            }
        }
        // e0 orthogonalized against [1,1,0]/√2 gives [1,-1,0]/√2, sign-fixed
        // on its first max-magnitude entry.
        let c1 = f.right_vectors.column(1);
        let h = 0.5f64.sqrt();
        assert!((c1[0] - h).abs() < 1e-12 && (c1[1] + h).abs() < 1e-12);
        assert_eq!(f.right_vectors.column(2), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn svd_rank_bounds() {
        let x = FeatureMatrix::identity(3);
        assert!(matches!(svd_topk(&x, 0), Err(Error::Dimension(_))));
        assert!(matches!(svd_topk(&x, 4), Err(Error::Dimension(_))));
    }

    #[test]
    fn sign_convention_on_negated_input() {
        let x = m(&[&[0.0, -2.0], &[-1.0, 0.0]]);
        let f = svd_topk(&x, 2).unwrap();
        assert_eq!(f.singular_values, vec![2.0, 1.0]);
        assert_eq!(f.right_vectors.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn channel_stats_examples() {
        let s = channel_stats(&m(&[&[1.0], &[3.0]]));
        assert_eq!(s.means, vec![2.0]);
        assert_eq!(s.stds, vec![1.0]);
        assert_eq!(channel_stats(&m(&[&[5.0, 5.0], &[5.0, 5.0]])).stds, vec![0.0, 0.0]);
        assert_eq!(channel_stats(&m(&[&[1.0, 10.0], &[3.0, 30.0]])).stds, vec![1.0, 10.0]);
    }

    #[test]
    fn std_ratio_examples() {
        let stats = |stds: Vec<f64>| ChannelStats {
            means: vec![0.0; stds.len()],
            stds,
        };
        assert_eq!(std_ratio(&stats(vec![4.0, 2.0, 1.0]), 1e-12), 4.0);
        assert_eq!(std_ratio(&stats(vec![7.0, 7.0]), 1e-12), 1.0);
        assert_eq!(std_ratio(&stats(vec![50.0, 5.0, 1.0]), 1e-12), 50.0);
        assert_eq!(std_ratio(&stats(vec![1.0, 0.0]), 1e-6), 1e6);
    }
}
