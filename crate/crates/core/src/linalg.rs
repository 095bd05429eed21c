//! Dense small-matrix numerics: log-softmax, Shannon entropy, a one-sided
//! Jacobi SVD, and the nuclear norm with its `U·Vᵀ` subgradient.
//!
//! Matrices here are tiny (at most `(K·r) × d_in`), so everything is plain
//! row-major `Vec<f64>` storage without BLAS.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values at or below this are treated as zero by the subgradient.
pub const SUBGRADIENT_RANK_TOL: f64 = 1e-10;

/// Dense row-major matrix of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += yr * a;
            }
        }
        out
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            for (a, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *a += s * vc;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Matrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// Copies rows `start..start + count` into a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with a common column count on top of each other.
    pub fn vstack<'a>(blocks: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for b in blocks {
            match cols {
                None => cols = Some(b.cols),
                Some(c) if c != b.cols => {
                    return Err(Error::Shape(format!(
                        "vstack column mismatch: {c} vs {}",
                        b.cols
                    )))
                }
                _ => {}
            }
            rows += b.rows;
            data.extend_from_slice(&b.data);
        }
        Ok(Matrix {
            rows,
            cols: cols.unwrap_or(0),
            data,
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logarithm base for entropies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Natural,
    Two,
}

/// Probability vector over a finite alphabet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "negative probability {p} at index {i}"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// Softmax of a logit vector.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let lp = log_softmax(logits)?;
        Ok(Self {
            probs: lp.into_iter().map(f64::exp).collect(),
        })
    }

    /// Exponentiates log-probabilities that already come from a softmax.
    pub(crate) fn from_log_probs_unchecked(log_probs: &[f64]) -> Self {
        Self {
            probs: log_probs.iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Equal-weight mixture of the given members.
    pub fn mixture(members: &[Distribution]) -> Result<Distribution> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture of zero members".into()))?;
        let n = first.len();
        let mut probs = vec![0.0; n];
        for m in members {
            if m.len() != n {
                return Err(Error::Shape(format!(
                    "alphabet sizes differ: {n} vs {}",
                    m.len()
                )));
            }
            for (acc, p) in probs.iter_mut().zip(&m.probs) {
                *acc += p;
            }
        }
        let k = members.len() as f64;
        probs.iter_mut().for_each(|p| *p /= k);
        Ok(Distribution { probs })
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Shannon entropy with `0 · log 0 = 0`.
pub fn entropy(dist: &Distribution, base: LogBase) -> f64 {
    let h: f64 = -dist
        .probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    let h = h.max(0.0);
    match base {
        LogBase::Natural => h,
        LogBase::Two => h / std::f64::consts::LN_2,
    }
}

/// Thin singular value decomposition `W = U · diag(S) · Vᵀ`.
///
/// For an `m × n` input with `p = min(m, n)`, `left_vectors` is `m × p`,
/// `right_vectors` is `n × p` and both have orthonormal columns.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vec<f64>,
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (m, p) = self.left_vectors.shape();
        let n = self.right_vectors.rows();
        Matrix::from_fn(m, n, |i, j| {
            (0..p)
                .map(|k| {
                    self.left_vectors[(i, k)]
                        * self.singular_values[k]
                        * self.right_vectors[(j, k)]
                })
                .sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(m: &Matrix) -> SvdResult {
    if m.rows < m.cols {
        let t = svd(&m.transpose());
        return SvdResult {
            left_vectors: t.right_vectors,
            singular_values: t.singular_values,
            right_vectors: t.left_vectors,
        };
    }
    let (rows, cols) = m.shape();
    if cols == 0 {
        return SvdResult {
            left_vectors: Matrix::zeros(rows, 0),
            singular_values: Vec::new(),
            right_vectors: Matrix::zeros(0, 0),
        };
    }

    // Column-major working copies: u[j] is column j of the rotated matrix.
    let mut u: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| m[(r, c)]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..cols).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    const TOL: f64 = 1e-15;
    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = u.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let sigma_max = norms[order[0]];
    let zero_tol = sigma_max * (rows.max(cols) as f64) * f64::EPSILON;

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut values = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        values.push(sigma);
        right.push(v[j].clone());
        if sigma > zero_tol && sigma > 0.0 {
            left.push(u[j].iter().map(|x| x / sigma).collect());
        } else {
            left.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut left, &deficient, rows);

    SvdResult {
        left_vectors: columns_to_matrix(&left, rows),
        singular_values: values,
        right_vectors: columns_to_matrix(&right, cols),
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], fill: &[usize], dim: usize) {
    let mut candidate = 0;
    for &slot in fill {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of modified Gram-Schmidt.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let proj = dot(&e, col);
                    if proj != 0.0 {
                        e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = e;
                break;
            }
        }
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

/// Sum of singular values.
pub fn nuclear_norm(m: &Matrix) -> f64 {
    svd(m).singular_values.iter().sum()
}

/// `U·Vᵀ` over the retained spectrum, plus whether any singular value was
/// dropped (in which case the subdifferential is not a singleton).
#[derive(Clone, Debug)]
pub struct Subgradient {
    pub gradient: Matrix,
    pub nonunique: bool,
}

pub fn nuclear_norm_subgradient(m: &Matrix) -> Subgradient {
    let s = svd(m);
    let (rows, cols) = m.shape();
    let mut gradient = Matrix::zeros(rows, cols);
    let mut nonunique = false;
    for (k, &sigma) in s.singular_values.iter().enumerate() {
        if sigma <= SUBGRADIENT_RANK_TOL {
            nonunique = true;
            continue;
        }
        for i in 0..rows {
            let uik = s.left_vectors[(i, k)];
            if uik == 0.0 {
                continue;
            }
            for j in 0..cols {
                gradient[(i, j)] += uik * s.right_vectors[(j, k)];
            }
        }
    }
    Subgradient {
        gradient,
        nonunique,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gram(m: &Matrix) -> Matrix {
        m.transpose().matmul(m).unwrap()
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let lp = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((lp[0] + std::f64::consts::LN_2).abs() < 1e-15);
        assert!((lp[1] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_large_gap_does_not_overflow() {
        let lp = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(lp[0].abs() < 1e-300);
        assert!((lp[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rejects_nan() {
        assert!(matches!(
            log_softmax(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn entropy_reference_values() {
        let one_hot = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot, LogBase::Natural), 0.0);
        assert!((entropy(&Distribution::uniform(4), LogBase::Two) - 2.0).abs() < 1e-12);
        let d = Distribution::new(vec![0.8, 0.2]).unwrap();
        // -(0.8 ln 0.8 + 0.2 ln 0.2)
        assert!((entropy(&d, LogBase::Natural) - 0.500_402_423_538_188_4).abs() < 1e-12);
    }

    #[test]
    fn negative_probability_is_rejected() {
        assert!(Distribution::new(vec![1.2, -0.2]).is_err());
        assert!(Distribution::new(vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn svd_of_diagonals() {
        let s = svd(&Matrix::identity(2));
        assert_eq!(s.singular_values, vec![1.0, 1.0]);
        let s = svd(&Matrix::diag(&[1.0, 3.0]));
        assert!((s.singular_values[0] - 3.0).abs() < 1e-15);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn svd_random_10x6_orthonormal_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 10, 6);
        let s = svd(&m);
        assert!(gram(&s.left_vectors).max_abs_diff(&Matrix::identity(6)) < 1e-8);
        assert!(gram(&s.right_vectors).max_abs_diff(&Matrix::identity(6)) < 1e-8);
        let err = s.reconstruct().max_abs_diff(&m);
        assert!(err < 1e-12, "reconstruction error {err}");
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rank_deficient_still_orthonormal() {
        // Two identical rows: rank 1.
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        let s = svd(&m);
        assert!(s.singular_values[1] < 1e-12);
        assert!(gram(&s.left_vectors).max_abs_diff(&Matrix::identity(2)) < 1e-12);
        assert!(s.reconstruct().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn nuclear_norm_basics() {
        assert_eq!(nuclear_norm(&Matrix::zeros(3, 4)), 0.0);
        assert!((nuclear_norm(&Matrix::identity(3)) - 3.0).abs() < 1e-14);
        // Two orthogonal unit-norm rank-1 blocks: K c sqrt(r) = 2.
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((nuclear_norm(&w) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn subgradient_of_diagonals_is_identity() {
        let g = nuclear_norm_subgradient(&Matrix::identity(3));
        assert!(!g.nonunique);
        assert!(g.gradient.max_abs_diff(&Matrix::identity(3)) < 1e-14);
        let g = nuclear_norm_subgradient(&Matrix::diag(&[3.0, 1.0]));
        assert!(g.gradient.max_abs_diff(&Matrix::identity(2)) < 1e-14);
    }

    #[test]
    fn subgradient_flags_rank_deficiency() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let g = nuclear_norm_subgradient(&m);
        assert!(g.nonunique);
        assert_eq!(g.gradient.shape(), (2, 2));
    }

    #[test]
    fn mixture_entropy_dominates_member_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let members: Vec<Distribution> = (0..4)
                .map(|_| {
                    let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                    Distribution::from_logits(&logits).unwrap()
                })
                .collect();
            let mix = Distribution::mixture(&members).unwrap();
            let mean: f64 = members
                .iter()
                .map(|m| entropy(m, LogBase::Natural))
                .sum::<f64>()
                / 4.0;
            assert!(entropy(&mix, LogBase::Natural) >= mean - 1e-12);
        }
    }

    #[test]
    fn nuclear_norm_cauchy_schwarz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let rows = rng.random_range(1..8);
            let cols = rng.random_range(1..8);
            let m = random_matrix(&mut rng, rows, cols);
            let bound = (rows.min(cols) as f64).sqrt() * m.frobenius_norm();
            assert!(nuclear_norm(&m) <= bound * (1.0 + 1e-12));
        }
        // Equality when all singular values are equal.
        let q = Matrix::identity(4);
        assert!((nuclear_norm(&q) - 2.0 * q.frobenius_norm()).abs() < 1e-12);
    }
}
