//! Vector and matrix primitives shared by every other module.
//!
//! Everything here works at double precision. Embeddings that feed memory
//! operations are wrapped in [`UnitVector`], probability reads in
//! [`ProbVector`].

use serde::{Deserialize, Serialize};

use crate::error::{MmnError, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// An embedding of unit Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Normalizes `v`, failing on (near-)zero input.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        l2_normalize(&v)
    }

    /// Wraps values that are already unit-norm (or deliberately zero, for
    /// unwritten memory slots). Callers own the invariant.
    pub(crate) fn from_raw(v: Vec<f64>) -> Self {
        UnitVector(v)
    }

    pub fn zeros(dim: usize) -> Self {
        UnitVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Scalar knobs of the memory losses. Defaults are the published settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Read temperature, in (0, 1].
    pub alpha1: f64,
    /// Soft-weight temperature.
    pub alpha2: f64,
    /// Fixed write momentum; the trainer overrides it with its schedule.
    pub rho: f64,
    /// Part rectification strength.
    pub gamma: f64,
    /// Source/target balance of the total loss.
    pub lambda: f64,
    /// Weight of the domain-level loss.
    pub beta: f64,
    /// Neighbors selected per query.
    pub k: usize,
    pub triplet_margin: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha1: 0.05,
            alpha2: 2.0,
            rho: 0.0,
            gamma: 0.2,
            lambda: 0.3,
            beta: 1.0,
            k: 10,
            triplet_margin: 0.3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MmnError::config(name, format!("{v} not in [0, 1]")))
            }
        };
        if !(self.alpha1 > 0.0 && self.alpha1 <= 1.0) {
            return Err(MmnError::config("alpha1", format!("{} not in (0, 1]", self.alpha1)));
        }
        if !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return Err(MmnError::config("alpha2", "must be finite and >= 0"));
        }
        unit("rho", self.rho)?;
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MmnError::config("beta", "must be finite and >= 0"));
        }
        if self.k == 0 {
            return Err(MmnError::config("k", "must be positive"));
        }
        if !(self.triplet_margin >= 0.0 && self.triplet_margin.is_finite()) {
            return Err(MmnError::config("triplet_margin", "must be finite and >= 0"));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if !(n >= NORM_EPS) {
        return Err(MmnError::ZeroVector);
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine similarity of two unit vectors divided by the temperature.
pub fn cosine_score(u: &UnitVector, v: &UnitVector, alpha1: f64) -> f64 {
    u.dot(v) / alpha1
}

pub fn softmax(scores: &[f64]) -> Result<ProbVector> {
    if scores.is_empty() {
        return Err(MmnError::EmptyInput);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// `log softmax(scores)[index]`, computed without forming the probabilities.
pub fn log_softmax_at(scores: &[f64], index: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    scores[index] - lse
}

/// Maps values affinely onto [0, 1]. A constant input maps to all zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MmnError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        out
    }

    /// `self += scale · a bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (w, bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap().as_slice(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), Err(MmnError::ZeroVector));
    }

    #[test]
    fn cosine_examples() {
        let e0 = UnitVector::new(vec![1.0, 0.0]).unwrap();
        let e1 = UnitVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_score(&e0, &e0, 1.0), 1.0);
        assert_eq!(cosine_score(&e0, &e1, 0.05), 0.0);
        assert!(close(cosine_score(&e0, &e0, 0.05), 20.0, 1e-12));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[5.0]).unwrap().as_slice(), &[1.0]);
        let p = softmax(&[2.5, 2.5, 2.5]).unwrap();
        for &x in p.as_slice() {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
        // e/(e+1) and 1/(e+1)
        let e = 1f64.exp();
        let p = softmax(&[1.0, 0.0]).unwrap();
        assert!(close(p[0], e / (e + 1.0), 1e-15));
        assert!(close(p[0], 0.731059, 1e-6));
        assert!(close(p[1], 0.268941, 1e-6));
        assert_eq!(softmax(&[]), Err(MmnError::EmptyInput));
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let s = [0.3, -1.2, 4.0, 2.2];
        let p = softmax(&s).unwrap();
        for i in 0..s.len() {
            assert!(close(log_softmax_at(&s, i), p[i].ln(), 1e-12));
        }
    }

    #[test]
    fn minmax_examples() {
        assert_eq!(minmax_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(minmax_normalize(&[7.0, 7.0]), vec![0.0, 0.0]);
        let out = minmax_normalize(&[0.1, 0.9, 0.5]);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!(close(out[2], 0.5, 1e-15));
    }

    #[test]
    fn hyperparams_ranges() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            alpha1: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            gamma: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(scores in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let p = softmax(&scores).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn cosine_symmetric_and_scaled(
            a in prop::collection::vec(-5f64..5.0, 6),
            b in prop::collection::vec(-5f64..5.0, 6),
            alpha in 0.01f64..1.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let u = UnitVector::new(a).unwrap();
            let v = UnitVector::new(b).unwrap();
            let s = cosine_score(&u, &v, alpha);
            prop_assert_eq!(s, cosine_score(&v, &u, alpha));
            prop_assert!((s * alpha - cosine_score(&u, &v, 1.0)).abs() <= 1e-12);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(once.as_slice()).unwrap();
            prop_assert!((norm(once.as_slice()) - 1.0).abs() <= 1e-9);
            for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }

        #[test]
        fn minmax_in_unit_interval(v in prop::collection::vec(-1e6f64..1e6, 1..30)) {
            prop_assert!(minmax_normalize(&v).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
