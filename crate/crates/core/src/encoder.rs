//! Trainable feature extractor: three linear heads (global, upper half, bottom
//! half of the input), each followed by ReLU and L2 normalization, plus a
//! linear source classifier on the global embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_math::{l2_normalize, norm, Matrix, UnitVector};
use crate::error::{MmnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w_g: Matrix,
    pub w_u: Matrix,
    pub w_b: Matrix,
    pub classifier: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTriple {
    pub f_g: UnitVector,
    pub f_pu: UnitVector,
    pub f_pb: UnitVector,
}

impl EmbeddingTriple {
    /// `f_g ⊕ f_pu ⊕ f_pb`
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.f_g.dim());
        v.extend_from_slice(self.f_g.as_slice());
        v.extend_from_slice(self.f_pu.as_slice());
        v.extend_from_slice(self.f_pb.as_slice());
        v
    }
}

/// Per-head intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct HeadCache {
    pre: Vec<f64>,
    act_norm: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embeddings: EmbeddingTriple,
    heads: [HeadCache; 3],
}

/// Upstream gradients with respect to the three embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrads {
    pub f_g: Vec<f64>,
    pub f_pu: Vec<f64>,
    pub f_pb: Vec<f64>,
}

impl EmbeddingGrads {
    pub fn zeros(dim: usize) -> Self {
        EmbeddingGrads {
            f_g: vec![0.0; dim],
            f_pu: vec![0.0; dim],
            f_pb: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub w_g: Matrix,
    pub w_u: Matrix,
    pub w_b: Matrix,
    pub classifier: Matrix,
}

impl ParamGrads {
    pub fn zeros_like(p: &EncoderParams) -> Self {
        ParamGrads {
            w_g: Matrix::zeros(p.w_g.rows, p.w_g.cols),
            w_u: Matrix::zeros(p.w_u.rows, p.w_u.cols),
            w_b: Matrix::zeros(p.w_b.rows, p.w_b.cols),
            classifier: Matrix::zeros(p.classifier.rows, p.classifier.cols),
        }
    }

    fn parts(&self) -> [&Matrix; 4] {
        [&self.w_g, &self.w_u, &self.w_b, &self.classifier]
    }

    fn parts_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_g, &mut self.w_u, &mut self.w_b, &mut self.classifier]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.parts_mut().into_iter().zip(other.parts()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|m| m.is_finite())
    }

    /// All gradient entries in a fixed order (for finite-difference checks).
    pub fn flatten(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|m| m.data.iter().copied()).collect()
    }
}

impl EncoderParams {
    /// Heads drawn uniformly from `[−1/√d_in, 1/√d_in]`; classifier from
    /// `[−1/√D, 1/√D]`.
    pub fn init<R: Rng>(d_in: usize, dim: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        if d_in == 0 || d_in % 2 != 0 {
            return Err(MmnError::config("d_in", format!("must be even and positive, got {d_in}")));
        }
        if dim == 0 {
            return Err(MmnError::config("embedding_dim", "must be positive"));
        }
        let mut fill = |rows: usize, cols: usize, bound: f64| {
            let mut m = Matrix::zeros(rows, cols);
            m.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
            m
        };
        let b_in = 1.0 / (d_in as f64).sqrt();
        Ok(EncoderParams {
            w_g: fill(dim, d_in, b_in),
            w_u: fill(dim, d_in / 2, b_in),
            w_b: fill(dim, d_in / 2, b_in),
            classifier: fill(num_classes, dim, 1.0 / (dim as f64).sqrt()),
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_g.cols
    }

    pub fn dim(&self) -> usize {
        self.w_g.rows
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows
    }

    fn parts(&self) -> [&Matrix; 4] {
        [&self.w_g, &self.w_u, &self.w_b, &self.classifier]
    }

    fn parts_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_g, &mut self.w_u, &mut self.w_b, &mut self.classifier]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|m| m.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.parts().iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    /// Mutable access to the `index`-th entry of [`flatten`](Self::flatten).
    pub fn flat_entry_mut(&mut self, mut index: usize) -> &mut f64 {
        for m in self.parts_mut() {
            if index < m.data.len() {
                return &mut m.data[index];
            }
            index -= m.data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<EmbeddingTriple> {
        Ok(self.forward_pass(x)?.embeddings)
    }

    pub fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.d_in() {
            return Err(MmnError::DimensionMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let half = x.len() / 2;
        let (g, cg) = head(&self.w_g, x)?;
        let (u, cu) = head(&self.w_u, &x[..half])?;
        let (b, cb) = head(&self.w_b, &x[half..])?;
        Ok(ForwardPass {
            embeddings: EmbeddingTriple { f_g: g, f_pu: u, f_pb: b },
            heads: [cg, cu, cb],
        })
    }

    pub fn logits(&self, f_g: &UnitVector) -> Vec<f64> {
        self.classifier.matvec(f_g.as_slice())
    }

    /// Chains embedding gradients through normalization, ReLU and the linear
    /// heads, accumulating into `out`.
    pub fn backward(&self, x: &[f64], pass: &ForwardPass, upstream: &EmbeddingGrads, out: &mut ParamGrads) {
        let half = x.len() / 2;
        let e = &pass.embeddings;
        head_backward(&pass.heads[0], &e.f_g, &upstream.f_g, x, &mut out.w_g);
        head_backward(&pass.heads[1], &e.f_pu, &upstream.f_pu, &x[..half], &mut out.w_u);
        head_backward(&pass.heads[2], &e.f_pb, &upstream.f_pb, &x[half..], &mut out.w_b);
    }

    /// Given `∂L/∂logits`, accumulates the classifier gradient into `out` and
    /// returns `∂L/∂f_g`.
    pub fn classifier_backward(&self, f_g: &UnitVector, d_logits: &[f64], out: &mut ParamGrads) -> Vec<f64> {
        out.classifier.add_outer(d_logits, f_g.as_slice(), 1.0);
        self.classifier.matvec_t(d_logits)
    }
}

/// One of the three embedding heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Global,
    Upper,
    Bottom,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Global, Head::Upper, Head::Bottom];

    fn input<'x>(self, x: &'x [f64]) -> &'x [f64] {
        let half = x.len() / 2;
        match self {
            Head::Global => x,
            Head::Upper => &x[..half],
            Head::Bottom => &x[half..],
        }
    }
}

impl EncoderParams {
    pub fn head_weights(&self, head: Head) -> &Matrix {
        match head {
            Head::Global => &self.w_g,
            Head::Upper => &self.w_u,
            Head::Bottom => &self.w_b,
        }
    }

    fn head_weights_mut(&mut self, head: Head) -> &mut Matrix {
        match head {
            Head::Global => &mut self.w_g,
            Head::Upper => &mut self.w_u,
            Head::Bottom => &mut self.w_b,
        }
    }

    /// Heads whose ReLU output is entirely zero on `x`.
    pub fn dead_heads(&self, x: &[f64]) -> Vec<Head> {
        Head::ALL
            .into_iter()
            .filter(|&h| self.head_weights(h).matvec(h.input(x)).iter().all(|&a| a <= 0.0))
            .collect()
    }

    /// Redraws the unit of `head` closest to firing on `x` from the init
    /// distribution, negated if needed so that it fires on `x`. Returns the
    /// row index, or `None` when `x` is zero on that head's input.
    pub fn revive_unit<R: Rng>(&mut self, head: Head, x: &[f64], rng: &mut R) -> Option<usize> {
        let input = head.input(x);
        let bound = 1.0 / (self.d_in() as f64).sqrt();
        let w = self.head_weights_mut(head);
        let pre = w.matvec(input);
        let row = (0..pre.len()).fold(0, |best, r| if pre[r] > pre[best] { r } else { best });
        let fresh: Vec<f64> = (0..w.cols).map(|_| rng.random_range(-bound..=bound)).collect();
        let a: f64 = fresh.iter().zip(input).map(|(u, v)| u * v).sum();
        if a == 0.0 {
            return None;
        }
        let sign = a.signum();
        w.row_mut(row).iter_mut().zip(&fresh).for_each(|(t, f)| *t = sign * f);
        Some(row)
    }
}

fn head(w: &Matrix, x: &[f64]) -> Result<(UnitVector, HeadCache)> {
    let pre = w.matvec(x);
    let act: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let act_norm = norm(&act);
    let f = l2_normalize(&act)?;
    Ok((f, HeadCache { pre, act_norm }))
}

fn head_backward(cache: &HeadCache, f: &UnitVector, g: &[f64], x: &[f64], out: &mut Matrix) {
    if g.iter().all(|&v| v == 0.0) {
        return;
    }
    let f = f.as_slice();
    let radial: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum();
    let d_pre: Vec<f64> = g
        .iter()
        .zip(f)
        .zip(&cache.pre)
        .map(|((gi, fi), &a)| if a > 0.0 { (gi - fi * radial) / cache.act_norm } else { 0.0 })
        .collect();
    out.add_outer(&d_pre, x, 1.0);
}

/// Classical momentum SGD with L2 weight decay:
/// `v ← μ v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ParamGrads>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn velocity(&self) -> Option<&ParamGrads> {
        self.velocity.as_ref()
    }

    /// Clears the momentum of one head row (after that unit is redrawn).
    pub fn reset_row(&mut self, head: Head, row: usize) {
        if let Some(v) = self.velocity.as_mut() {
            let m = match head {
                Head::Global => &mut v.w_g,
                Head::Upper => &mut v.w_u,
                Head::Bottom => &mut v.w_b,
            };
            m.row_mut(row).iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads, learning_rate: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = self.velocity.get_or_insert_with(|| ParamGrads::zeros_like(params));
        for ((p, g), v) in params
            .parts_mut()
            .into_iter()
            .zip(grads.parts())
            .zip(velocity.parts_mut())
        {
            for ((pi, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= learning_rate * *vi;
            }
        }
    }
}
