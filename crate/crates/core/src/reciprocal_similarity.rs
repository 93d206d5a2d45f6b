//! k-reciprocal similarity over the target domain and neighbor selection on
//! top of it.
//!
//! `S = 1 − d*` where `d*` mixes the Jaccard distance between
//! Gaussian-weighted reciprocal-neighbor encodings with the rescaled cosine
//! distance `(1 − u·v)/2`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_math::UnitVector;
use crate::error::{MmnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReRankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda_r: f64,
}

impl Default for ReRankConfig {
    fn default() -> Self {
        ReRankConfig {
            k1: 20,
            k2: 6,
            lambda_r: 0.3,
        }
    }
}

impl ReRankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 {
            return Err(MmnError::config("rerank.k1", "must be positive"));
        }
        if self.k2 == 0 {
            return Err(MmnError::config("rerank.k2", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_r) {
            return Err(MmnError::config("rerank.lambda_r", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Dense symmetric `N × N` similarity with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
    pub epoch_built: usize,
}

impl SimilarityMatrix {
    /// Wraps precomputed rows. No symmetry check is made.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(MmnError::DimensionMismatch {
                    expected: n,
                    got: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(SimilarityMatrix {
            n,
            values,
            epoch_built: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Rescaled cosine distance in [0, 1].
fn cosine_distance(u: &UnitVector, v: &UnitVector) -> f64 {
    ((1.0 - u.dot(v)) / 2.0).clamp(0.0, 1.0)
}

/// Row `i` ranked by ascending distance, self first among ties, then index.
fn rank_row(dist: &[f64], i: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .partial_cmp(&dist[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| (a != i).cmp(&(b != i)))
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Forward `k`-neighborhood of `i` (self included): the first `k + 1` ranked
/// entries plus anything tied with the last of them.
fn neighborhood<'a>(dist: &[Vec<f64>], rank: &'a [Vec<usize>], i: usize, k: usize) -> &'a [usize] {
    let row = &rank[i];
    let cut = dist[i][row[k.min(row.len() - 1)]];
    let len = row.partition_point(|&j| dist[i][j] <= cut);
    &row[..len]
}

/// `R(i, k)`: members of the forward `k`-neighborhood of `i` whose own
/// `k`-neighborhood contains `i`. Sorted ascending.
fn reciprocal_set(dist: &[Vec<f64>], rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = neighborhood(dist, rank, i, k)
        .iter()
        .copied()
        .filter(|&q| neighborhood(dist, rank, q, k).contains(&i))
        .collect();
    out.sort_unstable();
    out
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut x, mut y, mut n) = (0, 0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            Ordering::Less => x += 1,
            Ordering::Greater => y += 1,
            Ordering::Equal => {
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    n
}

type SparseRow = Vec<(usize, f64)>;

/// Builds the k-reciprocal similarity matrix from unit features.
pub fn build_similarity(features: &[UnitVector], cfg: &ReRankConfig) -> Result<SimilarityMatrix> {
    cfg.validate()?;
    let n = features.len();
    if n < 2 || n <= cfg.k1 {
        return Err(MmnError::InsufficientSamples {
            needed: cfg.k1.max(1),
            have: n,
        });
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != dim) {
        return Err(MmnError::DimensionMismatch {
            expected: dim,
            got: bad.dim(),
        });
    }

    let dist: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 0.0 } else { cosine_distance(&features[i], &features[j]) })
                .collect()
        })
        .collect();
    let rank: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| rank_row(&dist[i], i)).collect();

    let half = (cfg.k1 as f64 / 2.0).round_ties_even() as usize;
    let v: Vec<SparseRow> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = reciprocal_set(&dist, &rank, i, cfg.k1);
            let mut expanded = base.clone();
            for &q in &base {
                let cand = reciprocal_set(&dist, &rank, q, half);
                if 3 * sorted_intersection_len(&base, &cand) >= 2 * cand.len() {
                    expanded.extend_from_slice(&cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i][j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            expanded.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect()
        })
        .collect();

    let v: Vec<SparseRow> = if cfg.k2 > 1 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let expansion = neighborhood(&dist, &rank, i, cfg.k2 - 1);
                let mut acc = vec![0.0; n];
                for &q in expansion {
                    for &(c, x) in &v[q] {
                        acc[c] += x;
                    }
                }
                acc.iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(c, &x)| (c, x / expansion.len() as f64))
                    .collect()
            })
            .collect()
    } else {
        v
    };

    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate() {
        for &(c, x) in row {
            inverted[c].push((r, x));
        }
    }
    let mass: Vec<f64> = v.iter().map(|row| row.iter().map(|(_, x)| x).sum()).collect();

    let lambda = cfg.lambda_r;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut shared = vec![0.0; n];
            for &(c, x) in &v[i] {
                for &(r, y) in &inverted[c] {
                    shared[r] += x.min(y);
                }
            }
            (0..n)
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    let union = mass[i] + mass[j] - shared[j];
                    let jaccard = if union > 0.0 { 1.0 - shared[j] / union } else { 1.0 };
                    1.0 - ((1.0 - lambda) * jaccard + lambda * dist[i][j])
                })
                .collect()
        })
        .collect();

    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let s = 0.5 * (rows[i][j] + rows[j][i]);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        epoch_built: 0,
    })
}

/// Ordered neighbor set of one query with its per-neighbor weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSelection {
    pub query: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NeighborSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Top-`m` of a similarity row: descending similarity, self first among ties,
/// then ascending index.
fn top_by_similarity(row: &[f64], query: usize, m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    let key = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| (*a != query).cmp(&(*b != query)))
            .then_with(|| a.cmp(b))
    };
    if m < order.len() {
        order.select_nth_unstable_by(m, key);
        order.truncate(m);
    }
    order.sort_by(key);
    order
}

/// Domain-guided selection: take the query's `2k` most similar samples,
/// reorder them by how many of their own `2k` most similar samples they
/// share with the query (then by similarity, then index), and keep `k`. The
/// query itself always comes first. Weights are set to 1; see
/// [`soft_weights`].
pub fn reorder_and_select(s: &SimilarityMatrix, query: usize, k: usize) -> Result<NeighborSelection> {
    let n = s.len();
    if k == 0 || 2 * k > n {
        return Err(MmnError::InsufficientSamples { needed: 2 * k, have: n });
    }
    if query >= n {
        return Err(MmnError::IndexOutOfRange { index: query, len: n });
    }
    let m = 2 * k;
    let mut own = top_by_similarity(s.row(query), query, m);
    let mut own_sorted = own.clone();
    own_sorted.sort_unstable();

    let overlap = |j: usize| -> usize {
        if j == query {
            return m;
        }
        let mut theirs = top_by_similarity(s.row(j), j, m);
        theirs.sort_unstable();
        sorted_intersection_len(&own_sorted, &theirs)
    };
    let mut keyed: Vec<(usize, usize)> = own.drain(..).map(|j| (j, overlap(j))).collect();
    let row = s.row(query);
    keyed.sort_by(|&(a, oa), &(b, ob)| {
        (a != query)
            .cmp(&(b != query))
            .then_with(|| ob.cmp(&oa))
            .then_with(|| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal))
            .then_with(|| a.cmp(&b))
    });
    let indices: Vec<usize> = keyed.into_iter().take(k).map(|(j, _)| j).collect();
    Ok(NeighborSelection {
        query,
        weights: vec![1.0; indices.len()],
        indices,
    })
}

/// Plain top-`k` selection from instance-memory scores with hard weights.
/// The query comes first; the remaining `k − 1` are the highest-scoring
/// eligible slots (ties by index). Slots for which `eligible` is false (not
/// yet written) are never selected.
pub fn raw_topk_select(
    scores: &[f64],
    query: usize,
    k: usize,
    eligible: impl Fn(usize) -> bool,
) -> Result<NeighborSelection> {
    if query >= scores.len() {
        return Err(MmnError::IndexOutOfRange {
            index: query,
            len: scores.len(),
        });
    }
    if k == 0 {
        return Err(MmnError::InsufficientSamples { needed: 1, have: 0 });
    }
    let mut others: Vec<usize> = (0..scores.len()).filter(|&j| j != query && eligible(j)).collect();
    let key = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.cmp(b))
    };
    let want = (k - 1).min(others.len());
    if want < others.len() {
        if want > 0 {
            others.select_nth_unstable_by(want, key);
        }
        others.truncate(want);
    }
    others.sort_by(key);
    let mut indices = Vec::with_capacity(k);
    indices.push(query);
    indices.extend(others);
    Ok(NeighborSelection {
        query,
        weights: vec![1.0; indices.len()],
        indices,
    })
}

/// `w_j = exp(−α₂ (1 − S[query, j]))` for each selected `j`.
pub fn soft_weights(s: &SimilarityMatrix, query: usize, selection: &NeighborSelection, alpha2: f64) -> Vec<f64> {
    selection
        .indices
        .iter()
        .map(|&j| {
            if j == query {
                1.0
            } else {
                (-alpha2 * (1.0 - s.get(query, j))).exp()
            }
        })
        .collect()
}
