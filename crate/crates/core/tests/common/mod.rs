//! Slow, direct reference implementations and randomized comparisons
//! against the library. Shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mmn::core_math::l2_normalize;
use mmn::{build_similarity, cluster, evaluate_retrieval, reorder_and_select, ReRankConfig, SimilarityMatrix, UnitVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Points on a coarse grid so that distance ties actually occur.
pub fn gridded_unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

// k-reciprocal reference, written from the definitions with dense vectors.

fn dist(a: &UnitVector, b: &UnitVector) -> f64 {
    ((1.0 - a.dot(b)) / 2.0).clamp(0.0, 1.0)
}

fn dist_matrix(f: &[UnitVector]) -> Vec<Vec<f64>> {
    (0..f.len())
        .map(|i| (0..f.len()).map(|j| if i == j { 0.0 } else { dist(&f[i], &f[j]) }).collect())
        .collect()
}

/// Everything at least as close as the (k+1)-th smallest distance.
fn knn(d: &[Vec<f64>], i: usize, k: usize) -> BTreeSet<usize> {
    let mut sorted = d[i].clone();
    sorted.sort_by(f64::total_cmp);
    let cut = sorted[k.min(sorted.len() - 1)];
    (0..d.len()).filter(|&j| d[i][j] <= cut).collect()
}

fn reciprocal(d: &[Vec<f64>], i: usize, k: usize) -> BTreeSet<usize> {
    knn(d, i, k).into_iter().filter(|&j| knn(d, j, k).contains(&i)).collect()
}

pub fn reference_similarity(f: &[UnitVector], k1: usize, k2: usize, lambda: f64) -> Vec<Vec<f64>> {
    let n = f.len();
    let d = dist_matrix(f);
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r = reciprocal(&d, i, k1);
        let mut set = r.clone();
        for &q in &r {
            let rq = reciprocal(&d, q, half);
            let common = rq.intersection(&r).count() as f64;
            if common >= 2.0 / 3.0 * rq.len() as f64 {
                set.extend(rq);
            }
        }
        let z: f64 = set.iter().map(|&j| (-d[i][j]).exp()).sum();
        for &j in &set {
            v[i][j] = (-d[i][j]).exp() / z;
        }
    }
    if k2 > 1 {
        let mut qe = vec![vec![0.0; n]; n];
        for i in 0..n {
            let nb = knn(&d, i, k2 - 1);
            for &q in &nb {
                for j in 0..n {
                    qe[i][j] += v[q][j] / nb.len() as f64;
                }
            }
        }
        v = qe;
    }
    let mut s = vec![vec![0.0; n]; n];
    let one_sided = |i: usize, j: usize| {
        let (mut mn, mut mx) = (0.0, 0.0);
        for c in 0..n {
            mn += v[i][c].min(v[j][c]);
            mx += v[i][c].max(v[j][c]);
        }
        let jac = if mx > 0.0 { 1.0 - mn / mx } else { 1.0 };
        1.0 - ((1.0 - lambda) * jac + lambda * d[i][j])
    };
    for i in 0..n {
        for j in 0..n {
            s[i][j] = if i == j { 1.0 } else { 0.5 * (one_sided(i, j) + one_sided(j, i)) };
        }
    }
    s
}

/// Entrywise comparison of the similarity matrix on `cases` random inputs.
pub fn similarity_vs_reference(cases: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.random_range(8..=50);
        let dim = rng.random_range(2..=6);
        let k1 = rng.random_range(1..n.min(12));
        let k2 = rng.random_range(1..=k1.min(6));
        let lambda = rng.random_range(0.0..=1.0);
        let feats: Vec<UnitVector> = if case % 2 == 0 {
            (0..n).map(|_| random_unit(&mut rng, dim)).collect()
        } else {
            (0..n).map(|_| gridded_unit(&mut rng, dim)).collect()
        };
        let cfg = ReRankConfig { k1, k2, lambda_r: lambda };
        let got = build_similarity(&feats, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let want = reference_similarity(&feats, k1, k2, lambda);
        for i in 0..n {
            for j in 0..n {
                let diff = (got.get(i, j) - want[i][j]).abs();
                worst = worst.max(diff);
                if diff > 1e-9 {
                    return Err(format!("case {case} ({i},{j}): {} vs {}", got.get(i, j), want[i][j]));
                }
            }
        }
    }
    Ok(worst)
}

// Guided selection reference: score every admissible subset.

fn sim_order(s: &SimilarityMatrix, q: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..s.len()).collect();
    all.sort_by(|&a, &b| {
        s.get(q, b)
            .total_cmp(&s.get(q, a))
            .then((a != q).cmp(&(b != q)))
            .then(a.cmp(&b))
    });
    all
}

pub fn exhaustive_select(s: &SimilarityMatrix, q: usize, k: usize) -> Vec<usize> {
    let m = 2 * k;
    let cand: Vec<usize> = sim_order(s, q)[..m].to_vec();
    let own: BTreeSet<usize> = cand.iter().copied().collect();
    let overlap = |j: usize| -> usize {
        if j == q {
            return m;
        }
        sim_order(s, j)[..m].iter().filter(|x| own.contains(x)).count()
    };
    // Higher key = preferred. The query always ranks first.
    let key = |j: usize| (j == q, overlap(j), s.get(q, j), std::cmp::Reverse(j));
    let others: Vec<usize> = cand.iter().copied().filter(|&j| j != q).collect();
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << others.len()) {
        if mask.count_ones() as usize != k - 1 {
            continue;
        }
        let mut chosen: Vec<usize> = vec![q];
        chosen.extend((0..others.len()).filter(|b| mask & (1 << b) != 0).map(|b| others[b]));
        chosen.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap());
        let better = match &best {
            None => true,
            Some(cur) => {
                let a: Vec<_> = chosen.iter().map(|&j| key(j)).collect();
                let b: Vec<_> = cur.iter().map(|&j| key(j)).collect();
                a.partial_cmp(&b).unwrap().is_gt()
            }
        };
        if better {
            best = Some(chosen);
        }
    }
    best.unwrap()
}

pub fn random_similarity(rng: &mut ChaCha8Rng, n: usize, levels: Option<u32>) -> SimilarityMatrix {
    let mut rows = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let x = match levels {
                Some(l) => rng.random_range(0..l) as f64 / l as f64,
                None => rng.random_range(0.0..1.0),
            };
            rows[i][j] = x;
            rows[j][i] = x;
        }
    }
    SimilarityMatrix::from_rows(&rows).unwrap()
}

pub fn selection_vs_exhaustive(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(4..=30);
        let k = rng.random_range(1..=5.min(n / 2));
        let levels = (case % 3 == 0).then_some(4);
        let s = random_similarity(&mut rng, n, levels);
        let q = rng.random_range(0..n);
        let got = reorder_and_select(&s, q, k).map_err(|e| format!("case {case}: {e}"))?;
        let want = exhaustive_select(&s, q, k);
        if got.indices != want {
            return Err(format!("case {case}: {:?} vs {want:?}", got.indices));
        }
    }
    Ok(())
}

// Retrieval reference: rank by counting, AP from its definition.

pub fn reference_retrieval(
    emb: &[Vec<f64>],
    ids: &[usize],
    cams: &[usize],
) -> (f64, f64) {
    let n = emb.len();
    let cos = |a: usize, b: usize| {
        let (ua, ub) = (l2_normalize(&emb[a]).unwrap(), l2_normalize(&emb[b]).unwrap());
        ua.dot(&ub)
    };
    let (mut ap_sum, mut hits, mut valid) = (0.0, 0, 0);
    for q in 0..n {
        let gallery: Vec<usize> = (0..n).filter(|&g| !(ids[g] == ids[q] && cams[g] == cams[q])).collect();
        let rank_of = |g: usize| {
            gallery
                .iter()
                .filter(|&&h| cos(q, h) > cos(q, g) || (cos(q, h) == cos(q, g) && h < g))
                .count()
                + 1
        };
        let relevant: Vec<usize> = gallery.iter().copied().filter(|&g| ids[g] == ids[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        valid += 1;
        let mut ranks: Vec<usize> = relevant.iter().map(|&g| rank_of(g)).collect();
        ranks.sort_unstable();
        let ap: f64 = ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
        ap_sum += ap;
        if ranks[0] == 1 {
            hits += 1;
        }
    }
    (ap_sum / valid as f64, hits as f64 / valid as f64)
}

pub fn retrieval_vs_reference(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(4..=40);
        let dim = rng.random_range(2..=5);
        let num_ids = rng.random_range(1..=6);
        let emb: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2i32..=2) as f64 + 0.01).collect())
            .collect();
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_ids)).collect();
        let cams: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let got = evaluate_retrieval(&emb, &emb, &ids, &ids, &cams, &cams);
        let (map, r1) = reference_retrieval(&emb, &ids, &cams);
        match got {
            Ok(r) if r.map == map && r.rank1 == r1 => {}
            Ok(r) => return Err(format!("case {case}: ({}, {}) vs ({map}, {r1})", r.map, r.rank1)),
            Err(_) if map.is_nan() => {}
            Err(e) => return Err(format!("case {case}: evaluator refused a valid instance: {e}")),
        }
    }
    Ok(())
}

// Density clustering reference: union-find over the eps-graph of core points.

fn find(parent: &mut [usize], x: usize) -> usize {
    if parent[x] != x {
        let r = find(parent, parent[x]);
        parent[x] = r;
    }
    parent[x]
}

pub fn reference_cluster(s: &SimilarityMatrix, eps: f64, min_size: usize) -> Option<Vec<i64>> {
    let n = s.len();
    let near = |i: usize, j: usize| 1.0 - s.get(i, j) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_size).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut root: Vec<Option<usize>> = (0..n).map(|i| core[i].then(|| find(&mut parent, i))).collect();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if core[j] && near(i, j) {
                let d = 1.0 - s.get(i, j);
                if best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                    best = Some((d, j));
                }
            }
        }
        root[i] = best.map(|(_, j)| find(&mut parent, j));
    }
    let size = |r: usize| root.iter().filter(|&&x| x == Some(r)).count();
    let mut roots: Vec<usize> = root.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    roots.retain(|&r| size(r) >= min_size);
    if roots.is_empty() {
        return None;
    }
    let first = |r: usize| root.iter().position(|&x| x == Some(r)).unwrap();
    roots.sort_by_key(|&r| first(r));
    Some(
        root.iter()
            .map(|x| match x.and_then(|r| roots.iter().position(|&q| q == r)) {
                Some(id) => id as i64,
                None => -1,
            })
            .collect(),
    )
}

pub fn clustering_vs_reference(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(5..=40);
        let dim = rng.random_range(2..=4);
        let feats: Vec<UnitVector> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { feats[i].dot(&feats[j]) }).collect())
            .collect();
        let s = SimilarityMatrix::from_rows(&rows).unwrap();
        let eps = rng.random_range(0.02..0.4);
        let min_size = rng.random_range(1..=5);
        let want = reference_cluster(&s, eps, min_size);
        match cluster(&s, eps, min_size) {
            Ok(l) => {
                let got: Vec<i64> = l.labels().iter().map(|x| x.as_i64()).collect();
                if Some(&got) != want.as_ref() {
                    return Err(format!("case {case}: {got:?} vs {want:?}"));
                }
            }
            Err(e) if want.is_none() => drop(e),
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    Ok(())
}

// Invariant sweeps over random inputs.

use mmn::losses::rectify_weights;
use mmn::reciprocal_similarity::{raw_topk_select, soft_weights};
use mmn::trainer::write_metrics_csv;
use mmn::{Level, MemoryBank, ProbVector, RunResult, SynthConfig, TrainConfig, Variant};

fn random_bank(rng: &mut ChaCha8Rng, len: usize, dim: usize, written: f64) -> MemoryBank {
    let mut b = MemoryBank::zeros(Level::Instance, len, dim);
    for j in 0..len {
        if rng.random_bool(written) {
            b.write_slot(j, &random_unit(rng, dim), 0.0).unwrap();
        }
    }
    b
}

pub fn simplex_reads(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (len, dim) = (rng.random_range(1..60), rng.random_range(1..8));
        let written = rng.random_range(0.0..=1.0);
        let bank = random_bank(&mut rng, len, dim, written);
        let alpha1 = rng.random_range(0.01..=1.0);
        let p = bank.read_probabilities(&random_unit(&mut rng, dim), alpha1).map_err(|e| e.to_string())?;
        let total: f64 = p.as_slice().iter().sum();
        if (total - 1.0).abs() > 1e-9 || p.as_slice().iter().any(|&x| x < 0.0) {
            return Err(format!("case {case}: sum {total}"));
        }
    }
    Ok(())
}

pub fn unit_norm_after_write(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let (len, dim) = (rng.random_range(1..20), rng.random_range(1..8));
        let mut bank = random_bank(&mut rng, len, dim, 0.5);
        for _ in 0..10 {
            let j = rng.random_range(0..len);
            let rho = rng.random_range(0.0..0.99);
            match bank.write_slot(j, &random_unit(&mut rng, dim), rho) {
                Ok(()) => {
                    let n = mmn::core_math::norm(bank.slot(j));
                    if (n - 1.0).abs() > 1e-9 {
                        return Err(format!("case {case}: slot norm {n}"));
                    }
                }
                // Exact cancellation of old slot and feature.
                Err(mmn::MmnError::ZeroVector) => {}
                Err(e) => return Err(format!("case {case}: {e}")),
            }
        }
    }
    Ok(())
}

pub fn selection_contains_self(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(2..40);
        let k = rng.random_range(1..=n / 2);
        let s = random_similarity(&mut rng, n, (case % 2 == 0).then_some(3));
        let q = rng.random_range(0..n);
        let guided = reorder_and_select(&s, q, k).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw = raw_topk_select(&scores, q, k, |_| true).map_err(|e| e.to_string())?;
        for sel in [&guided, &raw] {
            let distinct: BTreeSet<usize> = sel.indices.iter().copied().collect();
            if sel.indices.first() != Some(&q) || sel.len() != k || distinct.len() != k {
                return Err(format!("case {case}: {:?} for query {q}", sel.indices));
            }
        }
    }
    Ok(())
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> ProbVector {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
    mmn::core_math::softmax(&v).unwrap()
}

pub fn weights_in_range(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n = rng.random_range(6..30);
        let feats: Vec<UnitVector> = (0..n).map(|_| random_unit(&mut rng, 4)).collect();
        let cfg = ReRankConfig {
            k1: rng.random_range(1..5),
            k2: rng.random_range(1..3),
            lambda_r: rng.random_range(0.0..=1.0),
        };
        let s = build_similarity(&feats, &cfg).map_err(|e| e.to_string())?;
        let q = rng.random_range(0..n);
        let sel = reorder_and_select(&s, q, rng.random_range(1..=n / 2)).map_err(|e| e.to_string())?;
        let alpha2 = rng.random_range(0.0..10.0);
        let w = soft_weights(&s, q, &sel, alpha2);
        if w.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return Err(format!("case {case}: soft weights {w:?}"));
        }
        let gamma = rng.random_range(0.0..=1.0);
        let r = rectify_weights(&w, &random_probs(&mut rng, n), &random_probs(&mut rng, n), &sel, gamma);
        if r.iter().any(|&x| !(0.0..=2.0).contains(&x)) {
            return Err(format!("case {case}: rectified {r:?}"));
        }
    }
    Ok(())
}

// Small end-to-end training setups.

/// A few hundred target samples; one run takes well under a second.
pub fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.synth = SynthConfig {
        num_ids_source: 10,
        num_ids_target: 10,
        imgs_per_id: 8,
        d_in: 16,
        num_cameras: 2,
        ..SynthConfig::default()
    };
    c.schedule.total_epochs = 8;
    c.schedule.domain_start_epoch = 3;
    c.schedule.lr_decay_epoch = 6;
    c.hyper.k = 4;
    c.rerank.k1 = 8;
    c.rerank.k2 = 3;
    c.cluster.min_cluster_size = 3;
    c.embedding_dim = 16;
    c.batch_size = 16;
    c.learning_rate = 0.01;
    c
}

pub fn train(config: &TrainConfig, variant: Variant) -> Result<RunResult, String> {
    let (source, target) = mmn::generate(&config.synth).map_err(|e| e.to_string())?;
    mmn::run(config, variant, &source, &target).map_err(|e| e.to_string())
}

pub fn metrics_csv(r: &RunResult) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &r.metrics).unwrap();
    buf
}

/// L_D is zero before the domain phase and becomes active after it.
pub fn schedule_gating(config: &TrainConfig) -> Result<(), String> {
    let r = train(config, Variant::Full)?;
    let start = config.schedule.domain_start_epoch;
    for m in &r.metrics {
        let domain = m.l_domain != 0.0 || m.l_triplet != 0.0;
        if m.epoch < start && domain {
            return Err(format!("epoch {}: L_D = {} before epoch {start}", m.epoch, m.l_domain));
        }
        if m.refreshed && m.epoch < start {
            return Err(format!("epoch {}: similarity refreshed before epoch {start}", m.epoch));
        }
    }
    if !r.metrics.iter().any(|m| m.epoch >= start && m.l_domain > 0.0) {
        return Err("domain loss never became active".into());
    }
    Ok(())
}

/// Identical seeds give byte-identical metric CSVs, with one worker thread
/// or several.
pub fn determinism(config: &TrainConfig) -> Result<(), String> {
    let in_pool = |threads: usize, v: Variant| -> Result<Vec<u8>, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        pool.install(|| train(config, v)).map(|r| metrics_csv(&r))
    };
    for v in [Variant::Baseline, Variant::Full] {
        let a = in_pool(1, v)?;
        let b = in_pool(1, v)?;
        let c = in_pool(4, v)?;
        if a != b || a != c {
            return Err(format!("{v}: metric CSVs differ between identical runs"));
        }
    }
    Ok(())
}
