//! Numeric kernels shared by every stage of the adaptation loop.
//!
//! Everything here is a pure function of its inputs and works in `f64`.
//! Logarithms are natural; entropies are in nats.

use std::ops::{Deref, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm or division.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the simplex sum accepted by [`ProbVector::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Dense row-major matrix.
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
                context: "matrix buffer length",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                    context: "matrix row length",
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
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

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// A probability vector on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to one within [`SIMPLEX_TOL`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "probability entry {v} outside [0, 1]"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    /// Divides nonnegative finite weights by their sum.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self(v)
    }

    /// Wraps values the caller has already normalized.
    pub(crate) fn from_normalized_unchecked(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// A K×K matrix with K ≥ 2 and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(Matrix);

impl SquareMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                expected: m.rows(),
                actual: m.cols(),
                context: "square matrix columns",
            });
        }
        if m.rows() < 2 {
            return Err(Error::InvalidInput("square matrix needs K >= 2".into()));
        }
        if !m.is_finite() {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl Deref for SquareMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite {what}")))
    }
}

/// Max-subtracted softmax written into `out`. The caller guarantees finiteness.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-softmax written into `out`, via log-sum-exp.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    check_finite(logits, "logit")?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// Row-wise softmax of an n×K logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    check_finite(logits.as_slice(), "logit")?;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    Ok(out)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// Entropy of the two-point distribution `[p, 1 - p]`.
pub fn binary_entropy(p: f64) -> f64 {
    entropy(&[p, 1.0 - p])
}

/// `max(p) - min(p)`.
pub fn margin(p: &[f64]) -> f64 {
    let (lo, hi) = p
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Symmetric n×n matrix of Euclidean distances between rows, zero diagonal.
pub fn pairwise_l2(rows: &Matrix) -> Matrix {
    let n = rows.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = l2_distance(rows.row(i), rows.row(j));
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    out
}

/// Solves `(C + λI) x = b` by Gaussian elimination with partial pivoting.
pub fn solve_regularized(c: &SquareMatrix, b: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let k = c.dim();
    if b.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: b.len(),
            context: "right-hand side length",
        });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "regularization must be finite and >= 0, got {lambda}"
        )));
    }
    check_finite(b, "right-hand side")?;

    let mut a = c.matrix().clone();
    for i in 0..k {
        a[(i, i)] += lambda;
    }
    let mut x = b.to_vec();
    let scale = a.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tiny = scale * k as f64 * f64::EPSILON;

    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        if a[(pivot, col)].abs() <= tiny {
            return Err(Error::SingularMatrix);
        }
        if pivot != col {
            for j in 0..k {
                let tmp = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = tmp;
            }
            x.swap(col, pivot);
        }
        for i in (col + 1)..k {
            let f = a[(i, col)] / a[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..k {
                a[(i, j)] -= f * a[(col, j)];
            }
            x[i] -= f * x[col];
        }
    }
    for i in (0..k).rev() {
        let mut s = x[i];
        for j in (i + 1)..k {
            s -= a[(i, j)] * x[j];
        }
        x[i] = s / a[(i, i)];
    }
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::SingularMatrix)
    }
}

/// `KL(p ‖ q)` in nats, with `q` floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Euclidean distance between two label distributions.
pub fn l2_label_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
            context: "label distribution length",
        });
    }
    Ok(l2_distance(p, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!(close(entropy(&[0.5, 0.5]), 2f64.ln(), 1e-15));
        // The default confidence threshold: -0.7 ln 0.7 - 0.3 ln 0.3.
        assert!(close(entropy(&[0.7, 0.3]), 0.6108643020548935, 1e-15));
        assert!(close(binary_entropy(0.7), 0.611, 5e-4));
    }

    #[test]
    fn margin_examples() {
        assert!(close(margin(&[0.9, 0.1]), 0.8, 1e-15));
        assert_eq!(margin(&[0.25; 4]), 0.0);
        assert!(close(margin(&[0.5, 0.3, 0.2]), 0.3, 1e-15));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_l2(&Matrix::from_rows(&[[0.0], [1.0], [4.0]]).unwrap());
        assert_eq!((d[(0, 1)], d[(0, 2)], d[(1, 2)]), (1.0, 4.0, 3.0));
        let same = pairwise_l2(&Matrix::from_rows(&[[2.0, 1.0]; 3]).unwrap());
        assert!(same.as_slice().iter().all(|&v| v == 0.0));
        let d = pairwise_l2(&Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap());
        assert_eq!(d[(0, 1)], 5.0);
    }

    #[test]
    fn solve_examples() {
        let eye = SquareMatrix::new(Matrix::identity(2)).unwrap();
        assert_eq!(
            solve_regularized(&eye, &[0.85, 0.15], 0.0).unwrap(),
            vec![0.85, 0.15]
        );

        // Analytic 2x2 inverse: [[a,b],[c,d]]^-1 = [[d,-b],[-c,a]] / (ad - bc).
        let (a, b, c, d) = (0.8, 0.2, 0.2, 0.8);
        let det = a * d - b * c;
        let rhs = [0.8, 0.2];
        let oracle = [
            (d * rhs[0] - b * rhs[1]) / det,
            (-c * rhs[0] + a * rhs[1]) / det,
        ];
        let m = SquareMatrix::from_rows(&[[a, b], [c, d]]).unwrap();
        let x = solve_regularized(&m, &rhs, 0.0).unwrap();
        for (xi, oi) in x.iter().zip(oracle) {
            assert!(close(*xi, oi, 1e-10 * oi.abs().max(1.0)));
        }
        assert!(close(x[0], 1.0, 1e-12) && close(x[1], 0.0, 1e-12));

        let flat = SquareMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(matches!(
            solve_regularized(&flat, &[0.8, 0.2], 0.0),
            Err(Error::SingularMatrix)
        ));
        let x = solve_regularized(&flat, &[0.8, 0.2], 1e-3).unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
        // Regularized oracle: (A + λI) x = b checked by substitution.
        let back = [
            (0.5 + 1e-3) * x[0] + 0.5 * x[1],
            0.5 * x[0] + (0.5 + 1e-3) * x[1],
        ];
        assert!(close(back[0], 0.8, 1e-9) && close(back[1], 0.2, 1e-9));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!(close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln(), 1e-15));
        let direct = 0.8 * (0.8f64 / 0.2).ln() + 0.2 * (0.2f64 / 0.8).ln();
        assert!(close(kl_divergence(&[0.8, 0.2], &[0.2, 0.8]), direct, 1e-15));
        assert!(close(direct, 0.8318, 1e-4));
    }

    #[test]
    fn l2_label_examples() {
        let p = |v: &[f64]| ProbVector::new(v.to_vec()).unwrap();
        assert_eq!(l2_label_distance(&p(&[0.5, 0.5]), &p(&[0.5, 0.5])).unwrap(), 0.0);
        assert!(close(
            l2_label_distance(&p(&[1.0, 0.0]), &p(&[0.0, 1.0])).unwrap(),
            2f64.sqrt(),
            1e-15
        ));
        assert!(close(
            l2_label_distance(&p(&[0.6, 0.4]), &p(&[0.5, 0.5])).unwrap(),
            0.1414,
            1e-4
        ));
        assert!(l2_label_distance(&p(&[1.0, 0.0]), &p(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.25, 0.75]).is_ok());
        assert!(serde_json::from_str::<ProbVector>("[0.9, 0.9]").is_err());
    }

    fn naive_pairwise(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; rows.len()]; rows.len()];
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i != j {
                    let mut s = 0.0;
                    for k in 0..rows[i].len() {
                        s += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
                    }
                    out[i][j] = s.sqrt();
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn softmax_is_valid_and_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 2..8),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&z).unwrap();
            prop_assert!(ProbVector::new(p.to_vec()).is_ok());
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_by_uniform(w in prop::collection::vec(0.0f64..1.0, 2..8)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let p = ProbVector::normalized(w).unwrap();
            let h = entropy(&p);
            let k = p.len();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= entropy(&ProbVector::uniform(k)) + 1e-12);
        }

        #[test]
        fn entropy_zero_only_on_one_hot(k in 2usize..8, class in 0usize..8) {
            let class = class % k;
            prop_assert_eq!(entropy(&ProbVector::one_hot(k, class)), 0.0);
            let mut v = vec![0.0; k];
            v[class] = 0.999;
            v[(class + 1) % k] = 0.001;
            prop_assert!(entropy(&v) > 0.0);
        }

        #[test]
        fn pairwise_matches_naive_loop(
            n in 1usize..40,
            d in 1usize..6,
            seed in prop::collection::vec(-5.0f64..5.0, 240),
        ) {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..d).map(|j| seed[(i * d + j) % seed.len()] * (1.0 + i as f64 * 0.1)).collect())
                .collect();
            let fast = pairwise_l2(&Matrix::from_rows(&rows).unwrap());
            let slow = naive_pairwise(&rows);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(fast[(i, j)], slow[i][j]);
                }
            }
        }

        #[test]
        fn kl_nonnegative_and_zero_on_equal(
            a in prop::collection::vec(0.01f64..1.0, 3),
            b in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let p = ProbVector::normalized(a).unwrap();
            let q = ProbVector::normalized(b).unwrap();
            prop_assert!(kl_divergence(&p, &q) >= 0.0);
            prop_assert!(kl_divergence(&p, &p).abs() <= 1e-15);
        }

        #[test]
        fn solve_reproduces_analytic_inverse(
            a in 1.0f64..3.0, b in -0.5f64..0.5, c in -0.5f64..0.5, d in 1.0f64..3.0,
            r0 in -1.0f64..1.0, r1 in -1.0f64..1.0,
        ) {
            let det = a * d - b * c;
            let oracle = [(d * r0 - b * r1) / det, (-c * r0 + a * r1) / det];
            let m = SquareMatrix::from_rows(&[[a, b], [c, d]]).unwrap();
            let x = solve_regularized(&m, &[r0, r1], 0.0).unwrap();
            for (xi, oi) in x.iter().zip(oracle) {
                prop_assert!((xi - oi).abs() <= 1e-10 * oi.abs().max(1e-3));
            }
        }
    }
}
