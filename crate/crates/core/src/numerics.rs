//! Dense row-major matrices and the handful of primitives the rest of the
//! crate is built on: row normalization, cosine Gram products, a stabilized
//! row softmax and a row cross-entropy with `0 * log 0 = 0`.
//!
//! Everything is `f64` and every reduction runs in a fixed left-to-right
//! order, so results are bit-reproducible for a given build.

use serde::{Deserialize, Serialize};

use crate::error::{OtterError, Result};

/// Row norms below this are treated as zero.
pub const MIN_ROW_NORM: f64 = 1e-30;

/// Rows whose norm is this close to 1 are already unit length and are left
/// bit-for-bit unchanged.
const UNIT_NORM_SLACK: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(OtterError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n = rows.len();
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n,
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self + s * other`, elementwise.
    pub fn add_scaled(&self, other: &Matrix, s: f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add_scaled(other, -1.0)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Plain matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(OtterError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`: dot products between rows of both matrices.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(OtterError::DimensionMismatch(format!(
                "row length {} vs {}",
                self.cols, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(OtterError::DimensionMismatch(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                for (oj, &bkj) in out.row_mut(i).iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(OtterError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials, as in
/// Python's `math.fsum`). The result does not depend on summation order.
pub fn fsum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        let y = partials[n - 1];
        n -= 1;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even across the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// A batch of row embeddings. `normalized` records whether every row is unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Matrix,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps raw rows without normalizing them.
    pub fn raw(matrix: Matrix) -> Self {
        Self {
            matrix,
            normalized: false,
        }
    }

    /// Wraps rows that the caller asserts are already unit length; the claim
    /// is checked to within 1e-12.
    pub fn assume_normalized(matrix: Matrix) -> Result<Self> {
        for (i, r) in matrix.row_iter().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-12 {
                return Err(OtterError::NotNormalized(i));
            }
        }
        Ok(Self {
            matrix,
            normalized: true,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<EmbeddingBatch> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n >= MIN_ROW_NORM) || !n.is_finite() {
            return Err(OtterError::ZeroRowNorm(i));
        }
        // Already-unit rows are left untouched so normalizing twice is a bitwise no-op.
        if (n - 1.0).abs() > UNIT_NORM_SLACK {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(EmbeddingBatch {
        matrix: out,
        normalized: true,
    })
}

/// Dot products between all rows of `a` and all rows of `b`; cosine
/// similarities when both batches are normalized.
pub fn gram(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Matrix> {
    if a.dim() != b.dim() {
        return Err(OtterError::DimensionMismatch(format!(
            "embedding dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if !a.is_normalized() || !b.is_normalized() {
        return Err(OtterError::DimensionMismatch(
            "gram expects normalized batches".into(),
        ));
    }
    a.matrix.matmul_t(&b.matrix)
}

/// Softmax of `inv_temp * row` for every row, with per-row max subtraction.
pub fn row_softmax(m: &Matrix, inv_temp: f64) -> Matrix {
    assert!(inv_temp > 0.0, "inverse temperature must be positive");
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_into(m.row(i), inv_temp, out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_into(logits: &[f64], inv_temp: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) * inv_temp).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `-(1/N) Σ_ij target_ij · ln prob_ij`, skipping zero-target terms.
pub fn cross_entropy_rows(target: &Matrix, prob: &Matrix) -> Result<f64> {
    if target.shape() != prob.shape() {
        return Err(OtterError::ShapeMismatch(format!(
            "target {:?} vs prob {:?}",
            target.shape(),
            prob.shape()
        )));
    }
    let n = target.rows();
    if n == 0 {
        return Err(OtterError::ShapeMismatch("empty matrices".into()));
    }
    let mut acc = 0.0;
    for (t, p) in target.as_slice().iter().zip(prob.as_slice()) {
        if *t != 0.0 {
            acc += t * p.ln();
        }
    }
    let loss = -acc / n as f64;
    if !loss.is_finite() {
        return Err(OtterError::NonFiniteLoss);
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let z = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_abs_diff_eq!(z.matrix().as_slice(), &[0.6, 0.8][..], epsilon = 1e-15);
        assert!(z.is_normalized());

        let id = Matrix::identity(2);
        assert_eq!(l2_normalize_rows(&id).unwrap().matrix(), &id);

        let z = l2_normalize_rows(&Matrix::from_rows(&[[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert_eq!(z.matrix().as_slice(), &[0.5; 4]);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(l2_normalize_rows(&m), Err(OtterError::ZeroRowNorm(1)));
    }

    #[test]
    fn gram_examples() {
        let e = l2_normalize_rows(&Matrix::identity(2)).unwrap();
        assert_eq!(gram(&e, &e).unwrap(), Matrix::identity(2));

        let a = l2_normalize_rows(&Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        let b = l2_normalize_rows(&Matrix::from_rows(&[[3.0, 4.0]])).unwrap();
        assert_abs_diff_eq!(gram(&a, &b).unwrap()[(0, 0)], 0.6, epsilon = 1e-15);

        let c = l2_normalize_rows(&Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]])).unwrap();
        let g = gram(&c, &c).unwrap();
        assert_abs_diff_eq!(g.as_slice(), &[1.0; 4][..], epsilon = 1e-12);
    }

    #[test]
    fn gram_dimension_mismatch() {
        let a = l2_normalize_rows(&Matrix::identity(2)).unwrap();
        let b = l2_normalize_rows(&Matrix::identity(3)).unwrap();
        assert!(matches!(
            gram(&a, &b),
            Err(OtterError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = row_softmax(&Matrix::zeros(1, 3), 7.0);
        assert_abs_diff_eq!(p.as_slice(), &[1.0 / 3.0; 3][..], epsilon = 1e-15);

        let p = row_softmax(&Matrix::from_rows(&[[3f64.ln(), 0.0]]), 1.0);
        assert_abs_diff_eq!(p.as_slice(), &[0.75, 0.25][..], epsilon = 1e-15);
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        // exp(-100) / (1 + exp(-100)) evaluated analytically: the second entry
        // is ~3.72e-44 and the first rounds to exactly 1 in f64.
        let p = row_softmax(&Matrix::from_rows(&[[10.0, 0.0]]), 10.0);
        assert!(p.is_finite());
        assert!(p[(0, 0)] >= 1.0 - 1e-40);
        assert_abs_diff_eq!(p[(0, 1)], 3.720075976020836e-44, epsilon = 1e-57);
    }

    #[test]
    fn cross_entropy_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(cross_entropy_rows(&i2, &i2).unwrap(), 0.0);

        let half = Matrix::filled(2, 2, 0.5);
        assert_abs_diff_eq!(
            cross_entropy_rows(&i2, &half).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );

        let t = Matrix::from_rows(&[[0.5, 0.5]]);
        let p = Matrix::from_rows(&[[0.25, 0.75]]);
        let expected = -0.5 * (0.25f64.ln() + 0.75f64.ln());
        assert_abs_diff_eq!(
            cross_entropy_rows(&t, &p).unwrap(),
            expected,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(expected, 0.836988, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_errors() {
        let a = Matrix::identity(2);
        let b = Matrix::identity(3);
        assert!(matches!(
            cross_entropy_rows(&a, &b),
            Err(OtterError::ShapeMismatch(_))
        ));
        let p = Matrix::from_rows(&[[0.0, 1.0]]);
        let t = Matrix::from_rows(&[[1.0, 0.0]]);
        assert_eq!(cross_entropy_rows(&t, &p), Err(OtterError::NonFiniteLoss));
    }

    fn matrix_strategy(
        max_rows: usize,
        max_cols: usize,
        mag: f64,
    ) -> impl Strategy<Value = Matrix> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
            prop::collection::vec(-mag..mag, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy(6, 9, 1e3), t in 0.01f64..50.0) {
            let p = row_softmax(&m, t);
            prop_assert!(p.is_finite());
            for s in p.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            // order preserving within each row
            for i in 0..m.rows() {
                for a in 0..m.cols() {
                    for b in 0..m.cols() {
                        if m[(i, a)] > m[(i, b)] {
                            prop_assert!(p[(i, a)] >= p[(i, b)]);
                        }
                    }
                }
            }
        }

        #[test]
        fn gram_symmetric_unit_diagonal(m in matrix_strategy(6, 5, 10.0)) {
            prop_assume!(m.row_iter().all(|r| norm(r) > 1e-6));
            let z = l2_normalize_rows(&m).unwrap();
            let g = gram(&z, &z).unwrap();
            prop_assert!(g.max_abs_diff(&g.transpose()).unwrap() <= 1e-12);
            for d in g.diagonal() {
                prop_assert!((d - 1.0).abs() <= 1e-12);
            }
            for v in g.as_slice() {
                prop_assert!(v.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(m in matrix_strategy(6, 5, 10.0)) {
            prop_assume!(m.row_iter().all(|r| norm(r) > 1e-6));
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(once.matrix()).unwrap();
            prop_assert_eq!(once.matrix().as_slice(), twice.matrix().as_slice());
        }

        #[test]
        fn self_cross_entropy_nonnegative(m in matrix_strategy(5, 5, 3.0)) {
            // With two or more columns no softmax row is one-hot.
            prop_assume!(m.cols() >= 2);
            let t = row_softmax(&m, 1.0);
            prop_assert!(cross_entropy_rows(&t, &t).unwrap() > 0.0);
        }
    }

    #[test]
    fn fsum_is_exact() {
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum([0.1; 10]), 1.0);
        assert_eq!(fsum(std::iter::empty()), 0.0);
        assert_eq!(fsum([1.0, 1e-16, 1e-16]), 1.0000000000000002);
    }

    proptest! {
        #[test]
        fn fsum_order_independent(mut v in prop::collection::vec(-1e6f64..1e6, 0..40), seed in any::<u64>()) {
            let a = fsum(v.iter().copied());
            // deterministic shuffle
            let mut state = seed | 1;
            for i in (1..v.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                v.swap(i, (state % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(a.to_bits(), fsum(v.iter().copied()).to_bits());
        }
    }

    #[test]
    fn self_cross_entropy_zero_iff_one_hot() {
        let t = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(cross_entropy_rows(&t, &t).unwrap(), 0.0);
        let t = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]]);
        assert!(cross_entropy_rows(&t, &t).unwrap() > 0.0);
    }
}
