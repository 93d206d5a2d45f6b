//! Central-difference checks of every analytic gradient on random
//! configurations.
//!
//! Configurations that land within reach of a non-differentiable point
//! (a ReLU pre-activation or triplet hinge near zero, a near-tie in the
//! batch-hard argmax) are redrawn; the finite difference is meaningless there.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::core_math::{norm, Hyperparams, UnitVector};
use crate::density_clustering::{ClusterLabel, PseudoLabeling};
use crate::encoder::{EmbeddingGrads, EncoderParams, ParamGrads};
use crate::error::{MmnError, Result};
use crate::losses::{batch_hard_triplet, domain_loss, instance_loss, source_loss, total_coefficients, total_loss};
use crate::memory_bank::{Level, MemoryBank};
use crate::reciprocal_similarity::{NeighborSelection, SimilarityMatrix};
use crate::synth_data::{generate, Batch, SynthConfig};
use crate::trainer::{DomainState, TargetSupervision, TrainConfig, Trainer, Variant};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance from any kink for a configuration to be used.
const KINK_CLEARANCE: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Instance,
    Domain,
    Triplet,
    Source,
    Total,
    Encoder,
    EndToEnd,
}

impl GradTarget {
    pub const ALL: [GradTarget; 7] = [
        GradTarget::Instance,
        GradTarget::Domain,
        GradTarget::Triplet,
        GradTarget::Source,
        GradTarget::Total,
        GradTarget::Encoder,
        GradTarget::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Instance => "instance",
            GradTarget::Domain => "domain",
            GradTarget::Triplet => "triplet",
            GradTarget::Source => "source",
            GradTarget::Total => "total",
            GradTarget::Encoder => "encoder",
            GradTarget::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = MmnError;
    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| MmnError::config("gradcheck target", format!("unknown target `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub configs: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient of this target by 0.1%, so the check
    /// must fail. Used to test the checker itself.
    pub corrupt: Option<GradTarget>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            configs: 100,
            step: STEP,
            tolerance: TOLERANCE,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub target: GradTarget,
    pub configs: usize,
    pub max_rel_error: f64,
    pub worst_config: usize,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both
/// gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Analytic and central-difference gradients of one configuration.
struct Checked {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

fn finish(x: &[f64], analytic: Vec<f64>, h: f64, objective: impl Fn(&[f64]) -> Result<f64>) -> Result<Option<Checked>> {
    Ok(Some(Checked {
        numeric: numeric_gradient(x, h, objective)?,
        analytic,
    }))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        if let Ok(u) = UnitVector::new(gaussian(rng, dim)) {
            return u;
        }
    }
}

fn random_bank(rng: &mut ChaCha8Rng, level: Level, len: usize, dim: usize, zero_prob: f64) -> Result<MemoryBank> {
    let slots: Vec<UnitVector> = (0..len)
        .map(|_| {
            if rng.random_bool(zero_prob) {
                UnitVector::zeros(dim)
            } else {
                random_unit(rng, dim)
            }
        })
        .collect();
    MemoryBank::from_slots(level, &slots)
}

fn random_selection(rng: &mut ChaCha8Rng, query: usize, n: usize, k: usize) -> NeighborSelection {
    let mut indices = vec![query];
    let others: Vec<usize> = (0..n).filter(|&j| j != query).collect();
    for pick in sample(rng, others.len(), (k - 1).min(others.len())) {
        indices.push(others[pick]);
    }
    let weights = (0..indices.len()).map(|_| rng.random_range(0.0..2.0)).collect();
    NeighborSelection { query, indices, weights }
}

fn units_from_flat(x: &[f64], dim: usize) -> Vec<UnitVector> {
    // The perturbed rows are deliberately off the sphere: the losses are
    // differentiated as functions of raw embedding coordinates.
    x.chunks(dim).map(|c| UnitVector::from_raw(c.to_vec())).collect()
}

fn flatten_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Whether every batch-hard choice and hinge is at least `clearance` away
/// from switching.
fn triplet_is_smooth<E: AsRef<[f64]>>(embeddings: &[E], labels: &[usize], margin: f64, clearance: f64) -> bool {
    let n = embeddings.len();
    for a in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in (0..n).filter(|&j| j != a) {
            let d = embeddings[a]
                .as_ref()
                .iter()
                .zip(embeddings[j].as_ref())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if d < clearance {
                return false;
            }
            if labels[j] == labels[a] {
                pos.push(d);
            } else {
                neg.push(d);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        pos.sort_by(|x, y| y.total_cmp(x));
        neg.sort_by(|x, y| x.total_cmp(y));
        if pos.len() > 1 && pos[0] - pos[1] < clearance {
            return false;
        }
        if neg.len() > 1 && neg[1] - neg[0] < clearance {
            return false;
        }
        if (margin + pos[0] - neg[0]).abs() < clearance {
            return false;
        }
    }
    true
}

fn relu_is_smooth(params: &EncoderParams, xs: &[&[f64]], clearance: f64) -> bool {
    xs.iter().all(|x| {
        let half = x.len() / 2;
        [
            params.w_g.matvec(x),
            params.w_u.matvec(&x[..half]),
            params.w_b.matvec(&x[half..]),
        ]
        .iter()
        .all(|pre| pre.iter().all(|p| p.abs() >= clearance) && pre.iter().any(|&p| p > 0.0))
    })
}

fn instance_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let n = rng.random_range(4..=20);
    let dim = rng.random_range(2..=8);
    let batch = rng.random_range(1..=4);
    let k = rng.random_range(1..=n.min(6));
    let alpha1 = rng.random_range(0.05..=1.0);
    let bank = random_bank(rng, Level::Instance, n, dim, 0.2)?;
    let queries: Vec<UnitVector> = (0..batch).map(|_| random_unit(rng, dim)).collect();
    let selections: Vec<NeighborSelection> = (0..batch)
        .map(|_| {
            let q = rng.random_range(0..n);
            random_selection(rng, q, n, k)
        })
        .collect();
    let weights: Vec<Vec<f64>> = selections.iter().map(|s| s.weights.clone()).collect();
    let base = instance_loss(&bank, &queries, &selections, &weights, alpha1)?;
    let x = flatten_rows(&queries.iter().map(|q| q.as_slice().to_vec()).collect::<Vec<_>>());
    finish(&x, flatten_rows(&base.grads.rows), h, |x| {
        Ok(instance_loss(&bank, &units_from_flat(x, dim), &selections, &weights, alpha1)?.value)
    })
}

fn random_domain_labels(rng: &mut ChaCha8Rng, batch: usize, clusters: usize) -> Vec<Option<usize>> {
    loop {
        let labels: Vec<Option<usize>> = (0..batch)
            .map(|_| (!rng.random_bool(0.2)).then(|| rng.random_range(0..clusters)))
            .collect();
        if labels.iter().any(Option::is_some) {
            return labels;
        }
    }
}

fn domain_smooth(embeddings: &[UnitVector], labels: &[Option<usize>], margin: f64) -> bool {
    let (emb, lab): (Vec<&[f64]>, Vec<usize>) = embeddings
        .iter()
        .zip(labels)
        .filter_map(|(e, l)| l.map(|c| (e.as_slice(), c)))
        .unzip();
    triplet_is_smooth(&emb, &lab, margin, KINK_CLEARANCE)
}

fn domain_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let clusters = rng.random_range(2..=5);
    let dim = rng.random_range(2..=6);
    let batch = rng.random_range(2..=10);
    let alpha1 = rng.random_range(0.05..=1.0);
    let margin = rng.random_range(0.0..0.5);
    let bank = random_bank(rng, Level::Domain, clusters, dim, 0.0)?;
    let embeddings: Vec<UnitVector> = (0..batch).map(|_| random_unit(rng, dim)).collect();
    let labels = random_domain_labels(rng, batch, clusters);
    if !domain_smooth(&embeddings, &labels, margin) {
        return Ok(None);
    }
    let base = domain_loss(&bank, &embeddings, &labels, alpha1, margin)?;
    let x = flatten_rows(&embeddings.iter().map(|e| e.as_slice().to_vec()).collect::<Vec<_>>());
    finish(&x, flatten_rows(&base.grads.rows), h, |x| {
        Ok(domain_loss(&bank, &units_from_flat(x, dim), &labels, alpha1, margin)?.value())
    })
}

fn triplet_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let dim = rng.random_range(2..=6);
    let batch = rng.random_range(3..=10);
    let classes = rng.random_range(2..=3);
    let margin = rng.random_range(0.0..1.0);
    let embeddings: Vec<Vec<f64>> = (0..batch).map(|_| gaussian(rng, dim)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    if !triplet_is_smooth(&embeddings, &labels, margin, KINK_CLEARANCE) {
        return Ok(None);
    }
    let base = batch_hard_triplet(&embeddings, &labels, margin);
    finish(&flatten_rows(&embeddings), flatten_rows(&base.grads.rows), h, |x| {
        let rows: Vec<&[f64]> = x.chunks(dim).collect();
        Ok(batch_hard_triplet(&rows, &labels, margin).value)
    })
}

fn source_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let batch = rng.random_range(1..=6);
    let classes = rng.random_range(2..=6);
    let logits: Vec<Vec<f64>> = (0..batch)
        .map(|_| gaussian(rng, classes).into_iter().map(|v| 2.0 * v).collect())
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let base = source_loss(&logits, &labels)?;
    finish(&flatten_rows(&logits), flatten_rows(&base.grads.rows), h, |x| {
        let rows: Vec<Vec<f64>> = x.chunks(classes).map(<[f64]>::to_vec).collect();
        Ok(source_loss(&rows, &labels)?.value)
    })
}

/// Composed objective over source logits and target embeddings, which the
/// instance and domain terms share.
fn total_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let n = rng.random_range(4..=16);
    let dim = rng.random_range(2..=6);
    let batch = rng.random_range(2..=6);
    let classes = rng.random_range(2..=5);
    let clusters = rng.random_range(2..=4);
    let k = rng.random_range(1..=n.min(5));
    let alpha1 = rng.random_range(0.05..=1.0);
    let margin = rng.random_range(0.0..0.5);
    let lambda = rng.random_range(0.0..=1.0);
    let beta = rng.random_range(0.0..2.0);

    let inst_bank = random_bank(rng, Level::Instance, n, dim, 0.2)?;
    let dom_bank = random_bank(rng, Level::Domain, clusters, dim, 0.0)?;
    let embeddings: Vec<UnitVector> = (0..batch).map(|_| random_unit(rng, dim)).collect();
    let selections: Vec<NeighborSelection> = (0..batch)
        .map(|_| {
            let q = rng.random_range(0..n);
            random_selection(rng, q, n, k)
        })
        .collect();
    let weights: Vec<Vec<f64>> = selections.iter().map(|s| s.weights.clone()).collect();
    let labels = random_domain_labels(rng, batch, clusters);
    if !domain_smooth(&embeddings, &labels, margin) {
        return Ok(None);
    }
    let logits: Vec<Vec<f64>> = (0..batch).map(|_| gaussian(rng, classes)).collect();
    let src_labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

    let eval = |logit_flat: &[f64], emb_flat: &[f64]| -> Result<(f64, Vec<f64>)> {
        let rows: Vec<Vec<f64>> = logit_flat.chunks(classes).map(<[f64]>::to_vec).collect();
        let emb = units_from_flat(emb_flat, dim);
        let s = source_loss(&rows, &src_labels)?;
        let i = instance_loss(&inst_bank, &emb, &selections, &weights, alpha1)?;
        let d = domain_loss(&dom_bank, &emb, &labels, alpha1, margin)?;
        let report = total_loss(s.value, i.value, d.value(), d.triplet, lambda, beta);
        let (cs, ci, cd) = total_coefficients(lambda, beta);
        let mut grad: Vec<f64> = flatten_rows(&s.grads.rows).into_iter().map(|g| cs * g).collect();
        let gi = flatten_rows(&i.grads.rows);
        let gd = flatten_rows(&d.grads.rows);
        grad.extend(gi.iter().zip(&gd).map(|(a, b)| ci * a + cd * b));
        Ok((report.total, grad))
    };
    let split = batch * classes;
    let mut x = flatten_rows(&logits);
    x.extend(embeddings.iter().flat_map(|e| e.as_slice().to_vec()));
    let (_, analytic) = eval(&x[..split], &x[split..])?;
    finish(&x, analytic, h, |x| Ok(eval(&x[..split], &x[split..])?.0))
}

fn params_from_flat(template: &EncoderParams, x: &[f64]) -> EncoderParams {
    let mut p = template.clone();
    for (i, &v) in x.iter().enumerate() {
        *p.flat_entry_mut(i) = v;
    }
    p
}

/// Random linear functional of all three embeddings and the logits, pushed
/// back to every parameter matrix.
fn encoder_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let d_in = 2 * rng.random_range(2..=5);
    let dim = rng.random_range(2..=6);
    let classes = rng.random_range(2..=4);
    let batch = rng.random_range(1..=4);
    let params = EncoderParams::init(d_in, dim, classes, rng)?;
    let xs: Vec<Vec<f64>> = (0..batch).map(|_| gaussian(rng, d_in)).collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    if !relu_is_smooth(&params, &refs, KINK_CLEARANCE) {
        return Ok(None);
    }
    let coef: Vec<[Vec<f64>; 4]> = (0..batch)
        .map(|_| [gaussian(rng, dim), gaussian(rng, dim), gaussian(rng, dim), gaussian(rng, classes)])
        .collect();

    let mut grads = ParamGrads::zeros_like(&params);
    for (x, c) in xs.iter().zip(&coef) {
        let pass = params.forward_pass(x)?;
        let through_classifier = params.classifier_backward(&pass.embeddings.f_g, &c[3], &mut grads);
        let up = EmbeddingGrads {
            f_g: c[0].iter().zip(&through_classifier).map(|(a, b)| a + b).collect(),
            f_pu: c[1].clone(),
            f_pb: c[2].clone(),
        };
        params.backward(x, &pass, &up, &mut grads);
    }
    finish(&params.flatten(), grads.flatten(), h, |flat| {
            let p = params_from_flat(&params, flat);
            let mut total = 0.0;
            for (x, c) in xs.iter().zip(&coef) {
                let e = p.forward(x)?;
                let logits = p.logits(&e.f_g);
                for (v, w) in [
                    (e.f_g.as_slice(), &c[0]),
                    (e.f_pu.as_slice(), &c[1]),
                    (e.f_pb.as_slice(), &c[2]),
                    (logits.as_slice(), &c[3]),
                ] {
                    total += v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Ok(total)
    })
}

fn random_labeling(rng: &mut ChaCha8Rng, n: usize) -> Result<PseudoLabeling> {
    let clusters = rng.random_range(2..=3);
    loop {
        let labels: Vec<ClusterLabel> = (0..n)
            .map(|_| {
                if rng.random_bool(0.15) {
                    ClusterLabel::Noise
                } else {
                    ClusterLabel::Cluster(rng.random_range(0..clusters))
                }
            })
            .collect();
        let present = (0..clusters).all(|c| labels.contains(&ClusterLabel::Cluster(c)));
        if present {
            return PseudoLabeling::from_labels(labels);
        }
    }
}

/// The trainer's own batch objective on a tiny synthetic problem, with
/// random frozen memories and supervision, differentiated with respect to
/// every encoder parameter.
fn end_to_end_problem(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Checked>> {
    let synth = SynthConfig {
        num_ids_source: 4,
        num_ids_target: 4,
        imgs_per_id: 4,
        d_in: 2 * rng.random_range(2..=5),
        num_cameras: 2,
        confuser_fraction: 0.5,
        seed: rng.random(),
        ..SynthConfig::default()
    };
    let (source, target) = generate(&synth)?;
    let n = target.len();
    let hyper = Hyperparams {
        alpha1: rng.random_range(0.05..=0.5),
        gamma: rng.random_range(0.0..=1.0),
        lambda: rng.random_range(0.0..=1.0),
        beta: rng.random_range(0.0..2.0),
        k: rng.random_range(1..=4),
        triplet_margin: rng.random_range(0.0..0.5),
        ..Hyperparams::default()
    };
    let cfg = TrainConfig {
        hyper,
        synth,
        embedding_dim: rng.random_range(3..=6),
        batch_size: 8,
        seed: rng.random(),
        ..TrainConfig::default()
    };
    let dim = cfg.embedding_dim;
    let mut trainer = Trainer::new(&cfg, Variant::Full, &source, &target)?;
    let labeling = random_labeling(rng, n)?;
    let domain = DomainState {
        similarity: SimilarityMatrix::from_rows(&vec![vec![1.0; n]; n])?,
        bank: Some(random_bank(rng, Level::Domain, labeling.num_clusters(), dim, 0.0)?),
        labeling: Some(labeling.clone()),
    };
    trainer.install_memories(
        Some(random_bank(rng, Level::Instance, n, dim, 0.2)?),
        Some((
            random_bank(rng, Level::PartUpper, n, dim, 0.2)?,
            random_bank(rng, Level::PartBottom, n, dim, 0.2)?,
        )),
        Some(domain),
    )?;
    let batch = Batch {
        source: sample(rng, source.len(), 4).into_vec(),
        target: sample(rng, n, 4).into_vec(),
    };
    let selections: Vec<NeighborSelection> =
        batch.target.iter().map(|&q| random_selection(rng, q, n, cfg.hyper.k)).collect();
    let supervision = TargetSupervision {
        weights: selections.iter().map(|s| s.weights.clone()).collect(),
        selections,
        domain_labels: batch.target.iter().map(|&i| labeling.label(i).cluster()).collect(),
    };

    let params = trainer.params().clone();
    let xs: Vec<&[f64]> = batch
        .source
        .iter()
        .map(|&i| source.samples[i].as_slice())
        .chain(batch.target.iter().map(|&i| target.samples[i].as_slice()))
        .collect();
    if !relu_is_smooth(&params, &xs, KINK_CLEARANCE) {
        return Ok(None);
    }
    let f_g: Vec<UnitVector> = batch
        .target
        .iter()
        .map(|&i| Ok(params.forward(&target.samples[i])?.f_g))
        .collect::<Result<_>>()?;
    if !domain_smooth(&f_g, &supervision.domain_labels, cfg.hyper.triplet_margin) {
        return Ok(None);
    }
    let (_, grads, _, _) = trainer.batch_objective(&params, &batch, &supervision)?;
    finish(&params.flatten(), grads.flatten(), h, |flat| {
        let p = params_from_flat(&params, flat);
        Ok(trainer.batch_objective(&p, &batch, &supervision)?.0.total)
    })
}

fn draw(target: GradTarget, rng: &mut ChaCha8Rng, h: f64) -> Result<Checked> {
    for _ in 0..MAX_DRAWS {
        let p = match target {
            GradTarget::Instance => instance_problem(rng, h)?,
            GradTarget::Domain => domain_problem(rng, h)?,
            GradTarget::Triplet => triplet_problem(rng, h)?,
            GradTarget::Source => source_problem(rng, h)?,
            GradTarget::Total => total_problem(rng, h)?,
            GradTarget::Encoder => encoder_problem(rng, h)?,
            GradTarget::EndToEnd => end_to_end_problem(rng, h)?,
        };
        if let Some(p) = p {
            return Ok(p);
        }
    }
    Err(MmnError::InsufficientSamples {
        needed: 1,
        have: 0,
    })
}

/// Checks one target over `options.configs` random configurations.
pub fn check(target: GradTarget, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (0x9e37_79b9 * (target as u64 + 1)));
    let mut worst = (0.0f64, 0usize);
    for c in 0..options.configs {
        let Checked { mut analytic, numeric } = draw(target, &mut rng, options.step)?;
        if options.corrupt == Some(target) {
            analytic.iter_mut().for_each(|g| *g *= 1.001);
        }
        let err = relative_error(&analytic, &numeric);
        if !err.is_finite() || err > worst.0 {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, c);
        }
    }
    Ok(GradcheckReport {
        target,
        configs: options.configs,
        max_rel_error: worst.0,
        worst_config: worst.1,
        passed: worst.0 <= options.tolerance,
    })
}

pub fn check_all(options: &GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    GradTarget::ALL.iter().map(|&t| check(t, options)).collect()
}
