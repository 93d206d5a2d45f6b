//! Training objectives with analytic gradients.
//!
//! All batch losses are means over the batch. Memory slots are constants
//! here: gradients flow only into the query embeddings (and logits for the
//! source branch).

use serde::{Deserialize, Serialize};

use crate::core_math::{log_softmax_at, minmax_normalize, softmax, ProbVector, UnitVector};
use crate::error::{MmnError, Result};
use crate::memory_bank::MemoryBank;
use crate::reciprocal_similarity::NeighborSelection;

/// `ln(1e-300)`; selected log-probabilities below this are treated as collapse.
const MIN_LOG_PROB: f64 = -690.7755278982137;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_source: f64,
    pub l_instance: f64,
    /// Cross-entropy against the domain bank plus `l_triplet`.
    pub l_domain: f64,
    pub l_triplet: f64,
    pub total: f64,
}

/// Gradient of a batch loss with respect to each of its row inputs
/// (embeddings, or logits for the source loss).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub rows: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(n: usize, dim: usize) -> Self {
        GradientSet {
            rows: vec![vec![0.0; dim]; n],
        }
    }

    pub fn scale(&mut self, t: f64) {
        self.rows.iter_mut().flatten().for_each(|g| *g *= t);
    }

    /// `self += t · other`
    pub fn add_scaled(&mut self, other: &GradientSet, t: f64) {
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += t * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: GradientSet,
}

/// Blends min-max normalized part reads into the neighbor weights:
/// `w_j ← (1−γ) w_j + γ (P̂_PU(j) + P̂_PB(j))`.
pub fn rectify_weights(
    weights: &[f64],
    p_pu: &ProbVector,
    p_pb: &ProbVector,
    selection: &NeighborSelection,
    gamma: f64,
) -> Vec<f64> {
    if gamma == 0.0 {
        return weights.to_vec();
    }
    let upper = minmax_normalize(p_pu.as_slice());
    let bottom = minmax_normalize(p_pb.as_slice());
    weights
        .iter()
        .zip(&selection.indices)
        .map(|(&w, &j)| (1.0 - gamma) * w + gamma * (upper[j] + bottom[j]))
        .collect()
}

/// Weighted multi-label cross-entropy against the instance bank.
///
/// For query `i` with selected slots `K̃ᵢ` and weights `wᵢⱼ`, the loss is
/// `−Σⱼ wᵢⱼ log P(xᵢ, j)` averaged over the batch.
pub fn instance_loss(
    bank: &MemoryBank,
    queries: &[UnitVector],
    selections: &[NeighborSelection],
    weights: &[Vec<f64>],
    alpha1: f64,
) -> Result<LossGrad> {
    if queries.len() != selections.len() || queries.len() != weights.len() {
        return Err(MmnError::DimensionMismatch {
            expected: queries.len(),
            got: selections.len().min(weights.len()),
        });
    }
    if queries.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grads: GradientSet::default(),
        });
    }
    let batch = queries.len() as f64;
    let dim = bank.dim();
    let mut value = 0.0;
    let mut grads = GradientSet::zeros(queries.len(), dim);
    for (b, ((f, sel), w)) in queries.iter().zip(selections).zip(weights).enumerate() {
        let scores = bank.scores(f, alpha1)?;
        let p = softmax(&scores)?;
        let mut weight_sum = 0.0;
        let g = &mut grads.rows[b];
        for (&j, &wj) in sel.indices.iter().zip(w) {
            let log_p = log_softmax_at(&scores, j);
            if log_p < MIN_LOG_PROB {
                return Err(MmnError::NonPositiveProbability { sample: sel.query, slot: j });
            }
            value -= wj * log_p;
            weight_sum += wj;
            for (gd, m) in g.iter_mut().zip(bank.slot(j)) {
                *gd -= wj * m;
            }
        }
        // d/df of weight_sum · logsumexp(scores)
        for (n, &pn) in p.as_slice().iter().enumerate() {
            let c = weight_sum * pn;
            if c == 0.0 {
                continue;
            }
            for (gd, m) in g.iter_mut().zip(bank.slot(n)) {
                *gd += c * m;
            }
        }
        g.iter_mut().for_each(|x| *x /= alpha1 * batch);
    }
    Ok(LossGrad {
        value: value / batch,
        grads,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss on Euclidean distances.
///
/// Each anchor uses its farthest same-label sample and closest other-label
/// sample (ties to the lower index) in `[margin + d_p − d_n]₊`. The result is
/// averaged over anchors that have both; anchors lacking either add nothing.
pub fn batch_hard_triplet<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize], margin: f64) -> LossGrad {
    let n = embeddings.len();
    let dim = embeddings.first().map_or(0, |e| e.as_ref().len());
    let mut grads = GradientSet::zeros(n, dim);
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut active = Vec::new();
    for a in 0..n {
        let ea = embeddings[a].as_ref();
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = euclidean(ea, embeddings[j].as_ref());
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            anchors += 1;
            let hinge = margin + p.1 - q.1;
            if hinge > 0.0 {
                total += hinge;
                active.push((a, p, q));
            }
        }
    }
    if anchors == 0 {
        return LossGrad { value: 0.0, grads };
    }
    let scale = 1.0 / anchors as f64;
    for (a, (p, dp), (q, dn)) in active {
        let ea = embeddings[a].as_ref().to_vec();
        let ep = embeddings[p].as_ref();
        let eq = embeddings[q].as_ref();
        for t in 0..dim {
            if dp > 0.0 {
                let u = scale * (ea[t] - ep[t]) / dp;
                grads.rows[a][t] += u;
                grads.rows[p][t] -= u;
            }
            if dn > 0.0 {
                let v = scale * (ea[t] - eq[t]) / dn;
                grads.rows[a][t] -= v;
                grads.rows[q][t] += v;
            }
        }
    }
    LossGrad {
        value: total * scale,
        grads,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainLoss {
    pub cross_entropy: f64,
    pub triplet: f64,
    /// Gradient of `cross_entropy + triplet` per embedding; unlabeled rows are
    /// zero.
    pub grads: GradientSet,
}

impl DomainLoss {
    pub fn value(&self) -> f64 {
        self.cross_entropy + self.triplet
    }
}

/// Cross-entropy against the domain bank plus batch-hard triplet, over the
/// samples that carry a cluster label (`None` marks noise).
pub fn domain_loss(
    bank: &MemoryBank,
    embeddings: &[UnitVector],
    labels: &[Option<usize>],
    alpha1: f64,
    margin: f64,
) -> Result<DomainLoss> {
    if embeddings.len() != labels.len() {
        return Err(MmnError::DimensionMismatch {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    let included: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if included.is_empty() {
        return Err(MmnError::EmptyBatch);
    }
    let dim = bank.dim();
    let count = included.len() as f64;
    let mut grads = GradientSet::zeros(embeddings.len(), dim);
    let mut ce = 0.0;
    for &i in &included {
        let c = labels[i].unwrap_or_default();
        if c >= bank.len() {
            return Err(MmnError::InvalidLabel {
                label: c,
                num_classes: bank.len(),
            });
        }
        let scores = bank.scores(&embeddings[i], alpha1)?;
        ce -= log_softmax_at(&scores, c);
        let p = softmax(&scores)?;
        let g = &mut grads.rows[i];
        for (n, &pn) in p.as_slice().iter().enumerate() {
            let coef = (pn - if n == c { 1.0 } else { 0.0 }) / (alpha1 * count);
            if coef == 0.0 {
                continue;
            }
            for (gd, m) in g.iter_mut().zip(bank.slot(n)) {
                *gd += coef * m;
            }
        }
    }
    let sub_embeddings: Vec<&[f64]> = included.iter().map(|&i| embeddings[i].as_slice()).collect();
    let sub_labels: Vec<usize> = included.iter().map(|&i| labels[i].unwrap_or_default()).collect();
    let triplet = batch_hard_triplet(&sub_embeddings, &sub_labels, margin);
    for (row, &i) in triplet.grads.rows.iter().zip(&included) {
        for (g, t) in grads.rows[i].iter_mut().zip(row) {
            *g += t;
        }
    }
    Ok(DomainLoss {
        cross_entropy: ce / count,
        triplet: triplet.value,
        grads,
    })
}

/// Mean softmax cross-entropy; gradients are with respect to the logits.
pub fn source_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<LossGrad> {
    if logits.len() != labels.len() {
        return Err(MmnError::DimensionMismatch {
            expected: logits.len(),
            got: labels.len(),
        });
    }
    if logits.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grads: GradientSet::default(),
        });
    }
    let batch = logits.len() as f64;
    let mut value = 0.0;
    let mut rows = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(MmnError::InvalidLabel {
                label: y,
                num_classes: z.len(),
            });
        }
        value -= log_softmax_at(z, y);
        let p = softmax(z)?;
        rows.push(
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(c, &pc)| (pc - if c == y { 1.0 } else { 0.0 }) / batch)
                .collect(),
        );
    }
    Ok(LossGrad {
        value: value / batch,
        grads: GradientSet { rows },
    })
}

/// `total = (1−λ) L_s + λ (L_I + β L_D)`.
pub fn total_loss(l_source: f64, l_instance: f64, l_domain: f64, l_triplet: f64, lambda: f64, beta: f64) -> LossReport {
    LossReport {
        l_source,
        l_instance,
        l_domain,
        l_triplet,
        total: (1.0 - lambda) * l_source + lambda * (l_instance + beta * l_domain),
    }
}

/// Coefficients `(source, instance, domain)` that [`total_loss`] applies; the
/// trainer scales component gradients by the same numbers.
pub fn total_coefficients(lambda: f64, beta: f64) -> (f64, f64, f64) {
    (1.0 - lambda, lambda, lambda * beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::softmax;
    use crate::memory_bank::Level;

    fn uv(v: &[f64]) -> UnitVector {
        UnitVector::new(v.to_vec()).unwrap()
    }

    fn sel(query: usize, indices: &[usize]) -> NeighborSelection {
        NeighborSelection {
            query,
            indices: indices.to_vec(),
            weights: vec![1.0; indices.len()],
        }
    }

    #[test]
    fn rectify_examples() {
        let p = softmax(&[0.0, 1.0, 2.0]).unwrap();
        let s = sel(0, &[0, 1]);
        assert_eq!(rectify_weights(&[0.3, 0.9], &p, &p, &s, 0.0), vec![0.3, 0.9]);
        // index 0 holds the minimum of both part reads, so it normalizes to 0
        assert_eq!(rectify_weights(&[0.3], &p, &p, &sel(0, &[0]), 1.0), vec![0.0]);
    }

    #[test]
    fn rectify_scalar_example() {
        // P̂_PU = [0, 1, 0], P̂_PB = [0, 0.5, 1]; at index 1: 0.8·0.6 + 0.2·1.5
        let pu = softmax(&[0.0, 9.0, 0.0]).unwrap();
        let pb = softmax(&[0.2f64.ln(), 0.3f64.ln(), 0.4f64.ln()]).unwrap();
        let w = rectify_weights(&[0.6], &pu, &pb, &sel(0, &[1]), 0.2);
        assert!((w[0] - 0.78).abs() < 1e-12, "{}", w[0]);
    }

    fn two_slot_bank() -> MemoryBank {
        MemoryBank::from_slots(Level::Instance, &[uv(&[1.0, 0.0]), uv(&[0.0, 1.0])]).unwrap()
    }

    #[test]
    fn instance_loss_examples() {
        let one = MemoryBank::from_slots(Level::Instance, &[uv(&[1.0, 0.0])]).unwrap();
        let r = instance_loss(&one, &[uv(&[0.0, 1.0])], &[sel(0, &[0])], &[vec![1.0]], 0.05).unwrap();
        assert_eq!(r.value, 0.0);

        let r = instance_loss(&two_slot_bank(), &[uv(&[1.0, 0.0])], &[sel(0, &[0])], &[vec![1.0]], 1.0).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((r.value - expect).abs() < 1e-12);
        assert!((r.value - 0.313262).abs() < 1e-6);

        let r2 = instance_loss(&two_slot_bank(), &[uv(&[1.0, 0.0])], &[sel(0, &[0])], &[vec![2.0]], 1.0).unwrap();
        assert_eq!(r2.value, 2.0 * r.value);
        for (a, b) in r2.grads.rows[0].iter().zip(&r.grads.rows[0]) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn instance_loss_detects_collapse() {
        let r = instance_loss(&two_slot_bank(), &[uv(&[1.0, 0.0])], &[sel(0, &[0, 1])], &[vec![1.0, 1.0]], 0.001);
        assert!(matches!(r, Err(MmnError::NonPositiveProbability { slot: 1, .. })));
    }

    #[test]
    fn triplet_example() {
        let e = [vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        let r = batch_hard_triplet(&e, &[0, 0, 1], 0.3);
        assert!((r.value - 1.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_inactive_when_separated() {
        let e = [vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        let r = batch_hard_triplet(&e, &[0, 0, 1, 1], 0.3);
        assert_eq!(r.value, 0.0);
        assert!(r.grads.rows.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn domain_loss_single_sample() {
        let bank = MemoryBank::from_slots(Level::Domain, &[uv(&[1.0, 0.0])]).unwrap();
        let r = domain_loss(&bank, &[uv(&[0.0, 1.0])], &[Some(0)], 0.05, 0.3).unwrap();
        assert_eq!(r.cross_entropy, 0.0);
        assert_eq!(r.triplet, 0.0);
    }

    #[test]
    fn domain_loss_requires_labels() {
        let bank = MemoryBank::from_slots(Level::Domain, &[uv(&[1.0, 0.0])]).unwrap();
        assert_eq!(
            domain_loss(&bank, &[uv(&[0.0, 1.0])], &[None], 0.05, 0.3),
            Err(MmnError::EmptyBatch)
        );
    }

    #[test]
    fn source_loss_examples() {
        let r = source_loss(&[vec![20.0, 0.0, 0.0]], &[0]).unwrap();
        assert!(r.value < 1e-3);
        let r = source_loss(&[vec![0.7; 4]], &[2]).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);
        let r = source_loss(&[vec![1.0, 0.0]], &[0]).unwrap();
        assert!((r.value - 0.313262).abs() < 1e-6);
        assert!(matches!(
            source_loss(&[vec![1.0, 0.0]], &[2]),
            Err(MmnError::InvalidLabel { label: 2, num_classes: 2 })
        ));
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(2.0, 1.0, 0.5, 0.1, 0.0, 1.0).total, 2.0);
        assert_eq!(total_loss(2.0, 1.0, 0.5, 0.1, 1.0, 3.0).total, 1.0 + 3.0 * 0.5);
        assert!((total_loss(2.0, 1.0, 0.5, 0.0, 0.3, 1.0).total - 1.85).abs() < 1e-12);
    }

    #[test]
    fn total_beta_linearity() {
        let base = total_loss(2.0, 1.0, 0.5, 0.0, 0.3, 1.0);
        let scaled = total_loss(2.0, 1.0, 0.5, 0.0, 0.3, 4.0);
        let without = total_loss(2.0, 1.0, 0.5, 0.0, 0.3, 0.0);
        assert!(((scaled.total - without.total) - 4.0 * (base.total - without.total)).abs() < 1e-12);
    }
}
