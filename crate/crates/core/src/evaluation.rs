//! Retrieval and clustering metrics against held-out identities.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_math::{dot, norm};
use crate::density_clustering::PseudoLabeling;
use crate::error::{MmnError, Result};
use crate::reciprocal_similarity::NeighborSelection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub rank1: f64,
    /// AP of every query that had at least one valid match, in query order.
    pub per_query_ap: Vec<f64>,
    /// Queries without any cross-camera match, excluded from the averages.
    pub skipped_queries: Vec<usize>,
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Single-shot retrieval: each query ranks the whole gallery by cosine
/// similarity (ties by gallery index). Gallery entries with the query's id
/// and camera are dropped from that query's ranking.
pub fn evaluate_retrieval<Q: AsRef<[f64]> + Sync, G: AsRef<[f64]> + Sync>(
    query_embeddings: &[Q],
    gallery_embeddings: &[G],
    query_ids: &[usize],
    gallery_ids: &[usize],
    query_cams: &[usize],
    gallery_cams: &[usize],
) -> Result<RetrievalResult> {
    let nq = query_embeddings.len();
    let ng = gallery_embeddings.len();
    if query_ids.len() != nq || query_cams.len() != nq {
        return Err(MmnError::DimensionMismatch {
            expected: nq,
            got: query_ids.len().min(query_cams.len()),
        });
    }
    if gallery_ids.len() != ng || gallery_cams.len() != ng {
        return Err(MmnError::DimensionMismatch {
            expected: ng,
            got: gallery_ids.len().min(gallery_cams.len()),
        });
    }
    let gallery: Vec<Vec<f64>> = gallery_embeddings.iter().map(|g| unit(g.as_ref())).collect();

    let outcomes: Vec<Option<(f64, bool)>> = (0..nq)
        .into_par_iter()
        .map(|q| {
            let qv = unit(query_embeddings[q].as_ref());
            let mut order: Vec<(usize, f64)> = (0..ng)
                .filter(|&g| !(gallery_ids[g] == query_ids[q] && gallery_cams[g] == query_cams[q]))
                .map(|g| (g, dot(&qv, &gallery[g])))
                .collect();
            order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            let relevant: Vec<bool> = order.iter().map(|&(g, _)| gallery_ids[g] == query_ids[q]).collect();
            average_precision(&relevant).map(|ap| (ap, relevant[0]))
        })
        .collect();

    let mut per_query_ap = Vec::new();
    let mut skipped_queries = Vec::new();
    let mut hits = 0usize;
    for (q, o) in outcomes.into_iter().enumerate() {
        match o {
            Some((ap, top)) => {
                per_query_ap.push(ap);
                hits += usize::from(top);
            }
            None => skipped_queries.push(q),
        }
    }
    if per_query_ap.is_empty() {
        return Err(MmnError::NoValidQueries);
    }
    let valid = per_query_ap.len() as f64;
    Ok(RetrievalResult {
        map: per_query_ap.iter().sum::<f64>() / valid,
        rank1: hits as f64 / valid,
        per_query_ap,
        skipped_queries,
    })
}

/// Mean fraction of each selection (self excluded) sharing the query's true
/// identity. A selection holding only the query scores 1.
pub fn neighbor_precision(selections: &[NeighborSelection], true_ids: &[usize]) -> f64 {
    if selections.is_empty() {
        return 0.0;
    }
    let total: f64 = selections
        .iter()
        .map(|s| {
            let others: Vec<usize> = s.indices.iter().copied().filter(|&j| j != s.query).collect();
            if others.is_empty() {
                1.0
            } else {
                let hits = others.iter().filter(|&&j| true_ids[j] == true_ids[s.query]).count();
                hits as f64 / others.len() as f64
            }
        })
        .sum();
    total / selections.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub purity: f64,
    pub noise_fraction: f64,
}

/// `Σ_c max_id |c ∩ id| / Σ_c |c|` over non-noise clusters.
pub fn cluster_purity(labeling: &PseudoLabeling, true_ids: &[usize]) -> Result<ClusterQuality> {
    if labeling.num_clusters() == 0 {
        return Err(MmnError::NoClusters);
    }
    let mut majority = 0usize;
    let mut clustered = 0usize;
    for members in labeling.members() {
        let mut ids: Vec<usize> = members.iter().map(|&i| true_ids[i]).collect();
        ids.sort_unstable();
        let best = ids
            .chunk_by(|a, b| a == b)
            .map(<[usize]>::len)
            .max()
            .unwrap_or(0);
        majority += best;
        clustered += members.len();
    }
    Ok(ClusterQuality {
        purity: majority as f64 / clustered as f64,
        noise_fraction: labeling.noise_fraction(),
    })
}
