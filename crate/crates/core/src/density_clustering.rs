//! DBSCAN over the re-ranked distance `1 − S`, producing pseudo-classes.

use std::collections::VecDeque;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmnError, Result};
use crate::reciprocal_similarity::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl ClusterLabel {
    pub fn cluster(self) -> Option<usize> {
        match self {
            ClusterLabel::Cluster(c) => Some(c),
            ClusterLabel::Noise => None,
        }
    }

    /// CSV encoding: the cluster id, or -1 for noise.
    pub fn as_i64(self) -> i64 {
        match self {
            ClusterLabel::Cluster(c) => c as i64,
            ClusterLabel::Noise => -1,
        }
    }
}

impl fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i64())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    labels: Vec<ClusterLabel>,
    members: Vec<Vec<usize>>,
}

impl PseudoLabeling {
    /// Builds a labeling from per-sample labels. Cluster ids must be
    /// contiguous from 0 and every id must be used.
    pub fn from_labels(labels: Vec<ClusterLabel>) -> Result<Self> {
        let num = labels
            .iter()
            .filter_map(|l| l.cluster())
            .max()
            .map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); num];
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l.cluster() {
                members[c].push(i);
            }
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(MmnError::EmptyCluster(c));
        }
        Ok(PseudoLabeling { labels, members })
    }

    pub fn labels(&self) -> &[ClusterLabel] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> ClusterLabel {
        self.labels[i]
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == ClusterLabel::Noise).count()
    }

    pub fn noise_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.noise_count() as f64 / self.labels.len() as f64
        }
    }

    /// `sample_id,cluster_id` rows, noise as -1.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sample_id,cluster_id")?;
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            eps: 0.6,
            min_cluster_size: 4,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(MmnError::config("cluster.eps", "must lie in (0, 1)"));
        }
        if self.min_cluster_size == 0 {
            return Err(MmnError::config("cluster.min_cluster_size", "must be positive"));
        }
        Ok(())
    }
}

/// DBSCAN on `d = 1 − S`.
///
/// A point is core when at least `min_cluster_size` points (itself included)
/// lie within `eps`. Clusters are connected components of core points. A
/// non-core point within `eps` of some core point joins the cluster of its
/// nearest such core point (ties to the lower index); everything else is
/// noise. Clusters that end up below `min_cluster_size` are dissolved into
/// noise. Ids follow the lowest member index.
pub fn cluster(s: &SimilarityMatrix, eps: f64, min_cluster_size: usize) -> Result<PseudoLabeling> {
    ClusterConfig { eps, min_cluster_size }.validate()?;
    let n = s.len();
    if n < min_cluster_size {
        return Err(MmnError::InsufficientSamples {
            needed: min_cluster_size,
            have: n,
        });
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| 1.0 - s.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_cluster_size).collect();

    let mut component = vec![usize::MAX; n];
    let mut num_components = 0;
    for start in 0..n {
        if !core[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = num_components;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if core[q] && component[q] == usize::MAX {
                    component[q] = num_components;
                    queue.push_back(q);
                }
            }
        }
        num_components += 1;
    }

    for i in 0..n {
        if core[i] {
            continue;
        }
        let nearest = neighbors[i]
            .iter()
            .copied()
            .filter(|&j| core[j])
            .min_by(|&a, &b| {
                let (da, db) = (1.0 - s.get(i, a), 1.0 - s.get(i, b));
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
        if let Some(j) = nearest {
            component[i] = component[j];
        }
    }

    let mut sizes = vec![0usize; num_components];
    let mut first_member = vec![usize::MAX; num_components];
    for (i, &c) in component.iter().enumerate() {
        if c != usize::MAX {
            sizes[c] += 1;
            first_member[c] = first_member[c].min(i);
        }
    }
    let mut kept: Vec<usize> = (0..num_components).filter(|&c| sizes[c] >= min_cluster_size).collect();
    if kept.is_empty() {
        return Err(MmnError::NoClusters);
    }
    kept.sort_by_key(|&c| first_member[c]);
    let mut relabel = vec![None; num_components];
    for (new_id, &c) in kept.iter().enumerate() {
        relabel[c] = Some(new_id);
    }
    let labels = component
        .iter()
        .map(|&c| match relabel.get(c).copied().flatten() {
            Some(id) => ClusterLabel::Cluster(id),
            None => ClusterLabel::Noise,
        })
        .collect();
    PseudoLabeling::from_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim_from_dist(d: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(&d.iter().map(|r| r.iter().map(|x| 1.0 - x).collect()).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn identical_points_one_cluster() {
        let s = SimilarityMatrix::from_rows(&vec![vec![1.0; 5]; 5]).unwrap();
        let l = cluster(&s, 0.1, 2).unwrap();
        assert_eq!(l.num_clusters(), 1);
        assert_eq!(l.members()[0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn isolated_point_is_noise() {
        let d = vec![
            vec![0.0, 0.01, 0.9],
            vec![0.01, 0.0, 0.9],
            vec![0.9, 0.9, 0.0],
        ];
        let l = cluster(&sim_from_dist(&d), 0.1, 2).unwrap();
        assert_eq!(l.labels(), &[ClusterLabel::Cluster(0), ClusterLabel::Cluster(0), ClusterLabel::Noise]);
        assert!((l.noise_fraction() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_tight_groups() {
        // groups {0,2,4} and {1,3,5}
        let group = |i: usize| i % 2;
        let d: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                (0..6)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else if group(i) == group(j) {
                            0.05
                        } else {
                            0.9
                        }
                    })
                    .collect()
            })
            .collect();
        let l = cluster(&sim_from_dist(&d), 0.1, 2).unwrap();
        assert_eq!(l.num_clusters(), 2);
        assert_eq!(l.members()[0], vec![0, 2, 4]);
        assert_eq!(l.members()[1], vec![1, 3, 5]);
    }

    #[test]
    fn all_noise_is_an_error() {
        let d: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.0 } else { 0.9 }).collect()).collect();
        assert_eq!(cluster(&sim_from_dist(&d), 0.1, 2), Err(MmnError::NoClusters));
    }

    #[test]
    fn border_point_joins_nearest_core() {
        // 0,1,2 dense; 3 is border of that group; 4,5,6 dense elsewhere.
        let mut d = vec![vec![0.9; 7]; 7];
        for i in 0..7 {
            d[i][i] = 0.0;
        }
        let mut set = |a: usize, b: usize, v: f64| {
            d[a][b] = v;
            d[b][a] = v;
        };
        set(0, 1, 0.02);
        set(0, 2, 0.02);
        set(1, 2, 0.02);
        set(2, 3, 0.08);
        set(4, 5, 0.02);
        set(4, 6, 0.02);
        set(5, 6, 0.02);
        let l = cluster(&sim_from_dist(&d), 0.1, 3).unwrap();
        assert_eq!(l.label(3), ClusterLabel::Cluster(0));
        assert_eq!(l.members()[1], vec![4, 5, 6]);
    }

    #[test]
    fn labeling_rejects_gaps() {
        let labels = vec![ClusterLabel::Cluster(1), ClusterLabel::Noise];
        assert_eq!(PseudoLabeling::from_labels(labels), Err(MmnError::EmptyCluster(0)));
    }

    #[test]
    fn csv_marks_noise() {
        let l = PseudoLabeling::from_labels(vec![ClusterLabel::Cluster(0), ClusterLabel::Noise]).unwrap();
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sample_id,cluster_id\n0,0\n1,-1\n");
    }
}
