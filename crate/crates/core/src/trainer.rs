//! The training loop: batch composition, memory reads and losses, the
//! optimizer step, memory writes, and periodic similarity / clustering /
//! domain-bank refreshes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_math::{Hyperparams, UnitVector};
use crate::density_clustering::{cluster, ClusterConfig, PseudoLabeling};
use crate::encoder::{EmbeddingGrads, EmbeddingTriple, EncoderParams, ForwardPass, ParamGrads, Sgd};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::error::{MmnError, Result};
use crate::evaluation::{cluster_purity, evaluate_retrieval, neighbor_precision};
use crate::losses::{
    domain_loss, instance_loss, rectify_weights, source_loss, total_coefficients, total_loss, LossReport,
};
use crate::memory_bank::{rebuild_domain_bank, Level, MemoryBank};
use crate::reciprocal_similarity::{
    build_similarity, raw_topk_select, reorder_and_select, soft_weights, NeighborSelection, ReRankConfig,
    SimilarityMatrix,
};
use crate::synth_data::{Batch, BatchSampler, SynthConfig, SynthDataset};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which memory components a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Source classifier only.
    Baseline,
    /// Instance memory with plain top-k neighbors and hard weights.
    Instance,
    /// Instance memory plus part rectification.
    InstancePart,
    /// Instance memory plus domain memory, guided selection and soft weights.
    InstanceDomain,
    /// Everything.
    Full,
    /// Everything except guided selection and soft weights.
    FullUnguided,
}

impl Variant {
    pub const ABLATION: [Variant; 5] = [
        Variant::Baseline,
        Variant::Instance,
        Variant::InstancePart,
        Variant::InstanceDomain,
        Variant::Full,
    ];

    pub fn mechanisms(self) -> Mechanisms {
        let (instance, part, domain, guidance) = match self {
            Variant::Baseline => (false, false, false, false),
            Variant::Instance => (true, false, false, false),
            Variant::InstancePart => (true, true, false, false),
            Variant::InstanceDomain => (true, false, true, true),
            Variant::Full => (true, true, true, true),
            Variant::FullUnguided => (true, true, true, false),
        };
        Mechanisms {
            instance,
            part,
            domain,
            guidance,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Instance => "i",
            Variant::InstancePart => "i+p",
            Variant::InstanceDomain => "i+d",
            Variant::Full => "full",
            Variant::FullUnguided => "full-unguided",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "i" | "instance" => Ok(Variant::Instance),
            "i+p" | "ip" | "instance_part" => Ok(Variant::InstancePart),
            "i+d" | "id" | "instance_domain" => Ok(Variant::InstanceDomain),
            "full" => Ok(Variant::Full),
            "full-unguided" | "full_unguided" => Ok(Variant::FullUnguided),
            other => Err(MmnError::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanisms {
    pub instance: bool,
    pub part: bool,
    pub domain: bool,
    /// Neighbor selection and soft weights from the similarity matrix.
    pub guidance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub total_epochs: usize,
    pub domain_start_epoch: usize,
    pub s_refresh_period: usize,
    pub rho_slope: f64,
    pub rho_max: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_epochs: 30,
            domain_start_epoch: 6,
            s_refresh_period: 2,
            rho_slope: 0.02,
            rho_max: 0.6,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
        }
    }
}

impl Schedule {
    pub fn rho(&self, epoch: usize) -> f64 {
        (self.rho_slope * epoch as f64).clamp(0.0, self.rho_max)
    }

    pub fn learning_rate(&self, base: f64, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            base * self.lr_decay_factor
        } else {
            base
        }
    }

    /// Whether the similarity matrix, clustering and domain bank are rebuilt
    /// at the start of `epoch`.
    pub fn refreshes_at(&self, epoch: usize) -> bool {
        epoch >= self.domain_start_epoch && epoch % self.s_refresh_period == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(MmnError::config("schedule.total_epochs", "must be positive"));
        }
        if self.s_refresh_period == 0 {
            return Err(MmnError::config("schedule.s_refresh_period", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho_max) {
            return Err(MmnError::config("schedule.rho_max", "must lie in [0, 1]"));
        }
        if !(self.rho_slope >= 0.0 && self.rho_slope.is_finite()) {
            return Err(MmnError::config("schedule.rho_slope", "must be finite and >= 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(MmnError::config("schedule.lr_decay_factor", "must lie in (0, 1)"));
        }
        if self.lr_decay_epoch == 0 {
            return Err(MmnError::config("schedule.lr_decay_epoch", "must be positive"));
        }
        Ok(())
    }
}

/// Features used for retrieval evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalFeatures {
    /// `f_g ⊕ f_pu ⊕ f_pb` for every variant.
    Concat,
    /// `f_g ⊕ f_pu ⊕ f_pb` when part memory is in use, `f_g` otherwise.
    Auto,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub schedule: Schedule,
    pub synth: SynthConfig,
    pub rerank: ReRankConfig,
    pub cluster: ClusterConfig,
    pub embedding_dim: usize,
    /// Total batch size; half source, half target.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eval_features: EvalFeatures,
    /// Seeds parameter init and batch order (the data has its own seed).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: Hyperparams::default(),
            schedule: Schedule::default(),
            synth: SynthConfig::default(),
            rerank: ReRankConfig::default(),
            cluster: ClusterConfig::default(),
            embedding_dim: 32,
            batch_size: 64,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            eval_features: EvalFeatures::Concat,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.schedule.validate()?;
        self.synth.validate()?;
        self.rerank.validate()?;
        self.cluster.validate()?;
        if self.embedding_dim == 0 {
            return Err(MmnError::config("embedding_dim", "must be positive"));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(MmnError::config("batch_size", "must be even and positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MmnError::config("learning_rate", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MmnError::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MmnError::config("weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| MmnError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one named scalar override (the sweepable parameters).
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let mut hyper = self.hyper.clone();
        match name {
            "k" => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(MmnError::config("k", format!("{value} is not a positive integer")));
                }
                hyper.k = value as usize;
            }
            "alpha2" => hyper.alpha2 = value,
            "lambda" => hyper.lambda = value,
            "beta" => hyper.beta = value,
            "gamma" => hyper.gamma = value,
            other => return Err(MmnError::config("param", format!("`{other}` is not sweepable"))),
        }
        hyper.validate()?;
        self.hyper = hyper;
        Ok(())
    }
}

/// Everything the trainer knows about the target domain's structure at a
/// given moment.
#[derive(Debug, Clone)]
pub struct DomainState {
    pub similarity: SimilarityMatrix,
    pub labeling: Option<PseudoLabeling>,
    pub bank: Option<MemoryBank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub rho: f64,
    pub learning_rate: f64,
    pub l_source: f64,
    pub l_instance: f64,
    pub l_domain: f64,
    pub l_triplet: f64,
    pub total: f64,
    pub map: f64,
    pub rank1: f64,
    pub neighbor_precision: f64,
    pub neighbor_precision_confuser: f64,
    pub purity: f64,
    pub noise_fraction: f64,
    pub num_clusters: usize,
    pub refreshed: bool,
    /// Cumulative count of re-initialized encoder units.
    pub revived_units: usize,
}

pub const METRICS_HEADER: &str = "epoch,rho,lr,l_source,l_instance,l_domain,l_triplet,total,map,rank1,\
neighbor_precision,neighbor_precision_confuser,purity,noise_fraction,num_clusters,refreshed,revived_units";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.rho,
            self.learning_rate,
            self.l_source,
            self.l_instance,
            self.l_domain,
            self.l_triplet,
            self.total,
            self.map,
            self.rank1,
            self.neighbor_precision,
            self.neighbor_precision_confuser,
            self.purity,
            self.noise_fraction,
            self.num_clusters,
            u8::from(self.refreshed),
            self.revived_units
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[EpochMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub variant: Variant,
    pub config: TrainConfig,
    pub params: EncoderParams,
    pub instance_bank: Option<MemoryBank>,
    pub upper_bank: Option<MemoryBank>,
    pub bottom_bank: Option<MemoryBank>,
    pub domain_bank: Option<MemoryBank>,
    pub labeling: Option<PseudoLabeling>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(MmnError::Parse(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

impl RunResult {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("a run has at least one epoch")
    }
}

/// Per-batch quantities before the optimizer step.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: LossReport,
    pub grads: ParamGrads,
    /// Embeddings of the batch's target samples, in batch order.
    pub target_embeddings: Vec<EmbeddingTriple>,
}

/// The target-branch inputs fixed for one batch: neighbor selections and
/// their final weights, plus domain labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSupervision {
    pub selections: Vec<NeighborSelection>,
    pub weights: Vec<Vec<f64>>,
    pub domain_labels: Vec<Option<usize>>,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    mech: Mechanisms,
    variant: Variant,
    source: &'a SynthDataset,
    target: &'a SynthDataset,
    params: EncoderParams,
    optimizer: Sgd,
    instance: Option<MemoryBank>,
    upper: Option<MemoryBank>,
    bottom: Option<MemoryBank>,
    domain: Option<DomainState>,
    sampler: BatchSampler,
    revive_rng: ChaCha8Rng,
    revived_units: usize,
}

fn embed_all(params: &EncoderParams, data: &SynthDataset) -> Result<Vec<EmbeddingTriple>> {
    data.samples.par_iter().map(|x| params.forward(x)).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, variant: Variant, source: &'a SynthDataset, target: &'a SynthDataset) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d_in = source.d_in();
        if target.d_in() != d_in {
            return Err(MmnError::DimensionMismatch {
                expected: d_in,
                got: target.d_in(),
            });
        }
        let params = EncoderParams::init(d_in, config.embedding_dim, source.num_ids, &mut rng)?;
        let mech = variant.mechanisms();
        let n = target.len();
        let dim = config.embedding_dim;
        let k = config.hyper.k;
        if mech.instance && 2 * k > n {
            return Err(MmnError::config("hyper.k", format!("2k = {} exceeds target size {n}", 2 * k)));
        }
        let sampler = BatchSampler::new(source.len(), n, config.batch_size, config.seed.wrapping_add(0x5eed))?;
        Ok(Trainer {
            config: config.clone(),
            mech,
            variant,
            source,
            target,
            params,
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            instance: mech.instance.then(|| MemoryBank::zeros(Level::Instance, n, dim)),
            upper: mech.part.then(|| MemoryBank::zeros(Level::PartUpper, n, dim)),
            bottom: mech.part.then(|| MemoryBank::zeros(Level::PartBottom, n, dim)),
            domain: None,
            sampler,
            revive_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xdead_beef),
            revived_units: 0,
        })
    }

    pub fn mechanisms(&self) -> Mechanisms {
        self.mech
    }

    /// Overrides the mechanism mask (e.g. to toggle guidance on an otherwise
    /// full model). Banks are allocated or dropped to match.
    pub fn set_mechanisms(&mut self, mech: Mechanisms) {
        let n = self.target.len();
        let dim = self.config.embedding_dim;
        if mech.instance && self.instance.is_none() {
            self.instance = Some(MemoryBank::zeros(Level::Instance, n, dim));
        }
        if !mech.instance {
            self.instance = None;
        }
        if mech.part && self.upper.is_none() {
            self.upper = Some(MemoryBank::zeros(Level::PartUpper, n, dim));
            self.bottom = Some(MemoryBank::zeros(Level::PartBottom, n, dim));
        }
        if !mech.part {
            self.upper = None;
            self.bottom = None;
        }
        if !mech.domain {
            self.domain = None;
        }
        self.mech = mech;
    }

    /// Replaces the memories wholesale (frozen-memory experiments, restoring
    /// a checkpoint). Banks must match the target size and embedding width.
    pub fn install_memories(
        &mut self,
        instance: Option<MemoryBank>,
        parts: Option<(MemoryBank, MemoryBank)>,
        domain: Option<DomainState>,
    ) -> Result<()> {
        let n = self.target.len();
        let dim = self.config.embedding_dim;
        let check = |b: &MemoryBank, len: usize| -> Result<()> {
            if b.len() != len {
                return Err(MmnError::DimensionMismatch { expected: len, got: b.len() });
            }
            if b.dim() != dim {
                return Err(MmnError::DimensionMismatch { expected: dim, got: b.dim() });
            }
            Ok(())
        };
        if let Some(b) = &instance {
            check(b, n)?;
        }
        if let Some((u, b)) = &parts {
            check(u, n)?;
            check(b, n)?;
        }
        if let Some(d) = &domain {
            if d.similarity.len() != n {
                return Err(MmnError::DimensionMismatch { expected: n, got: d.similarity.len() });
            }
            if let (Some(l), Some(b)) = (&d.labeling, &d.bank) {
                check(b, l.num_clusters())?;
            }
        }
        self.instance = instance;
        (self.upper, self.bottom) = parts.unzip();
        self.domain = domain;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut EncoderParams {
        &mut self.params
    }

    pub fn instance_bank(&self) -> Option<&MemoryBank> {
        self.instance.as_ref()
    }

    pub fn part_banks(&self) -> Option<(&MemoryBank, &MemoryBank)> {
        self.upper.as_ref().zip(self.bottom.as_ref())
    }

    pub fn domain_state(&self) -> Option<&DomainState> {
        self.domain.as_ref()
    }

    pub fn domain_bank(&self) -> Option<&MemoryBank> {
        self.domain.as_ref().and_then(|d| d.bank.as_ref())
    }

    pub fn next_epoch_batches(&mut self) -> Vec<Batch> {
        self.sampler.epoch()
    }

    pub fn target_embeddings(&self) -> Result<Vec<EmbeddingTriple>> {
        embed_all(&self.params, self.target)
    }

    /// Units redrawn so far because some input left a head entirely silent.
    pub fn revived_units(&self) -> usize {
        self.revived_units
    }

    /// Re-initializes units so that no head is silent on any of `inputs`.
    /// Redrawing a unit can silence a head on an input already visited, so
    /// this sweeps until nothing is dead.
    fn revive(&mut self, inputs: &[&[f64]]) -> Result<()> {
        const MAX_SWEEPS: usize = 100;
        for _ in 0..MAX_SWEEPS {
            let mut clean = true;
            for x in inputs {
                for head in self.params.dead_heads(x) {
                    clean = false;
                    let row = self
                        .params
                        .revive_unit(head, x, &mut self.revive_rng)
                        .ok_or(MmnError::ZeroVector)?;
                    self.optimizer.reset_row(head, row);
                    self.revived_units += 1;
                }
            }
            if clean {
                return Ok(());
            }
        }
        Err(MmnError::ZeroVector)
    }

    fn revive_target(&mut self) -> Result<()> {
        let target = self.target;
        let inputs: Vec<&[f64]> = target.samples.iter().map(Vec::as_slice).collect();
        self.revive(&inputs)
    }

    /// Rebuilds the similarity matrix from the current global embeddings,
    /// re-clusters, and rebuilds the domain bank. A clustering with no
    /// clusters leaves the domain loss disabled until the next refresh.
    pub fn refresh_domain(&mut self, epoch: usize) -> Result<()> {
        let features: Vec<UnitVector> = self.target_embeddings()?.into_iter().map(|e| e.f_g).collect();
        let mut similarity = build_similarity(&features, &self.config.rerank)?;
        similarity.epoch_built = epoch;
        let (labeling, bank) = match cluster(&similarity, self.config.cluster.eps, self.config.cluster.min_cluster_size) {
            Ok(l) => {
                let bank = rebuild_domain_bank(&features, &l)?;
                (Some(l), Some(bank))
            }
            Err(MmnError::NoClusters) => (None, None),
            Err(e) => return Err(e),
        };
        self.domain = Some(DomainState {
            similarity,
            labeling,
            bank,
        });
        Ok(())
    }

    fn guided_similarity(&self) -> Option<&SimilarityMatrix> {
        if self.mech.guidance {
            self.domain.as_ref().map(|d| &d.similarity)
        } else {
            None
        }
    }

    /// Selection and base weights for one target query.
    fn select(&self, query: usize, f_g: &UnitVector) -> Result<NeighborSelection> {
        let k = self.config.hyper.k;
        if let Some(s) = self.guided_similarity() {
            let mut sel = reorder_and_select(s, query, k)?;
            sel.weights = soft_weights(s, query, &sel, self.config.hyper.alpha2);
            return Ok(sel);
        }
        let bank = self.instance.as_ref().ok_or(MmnError::EmptyInput)?;
        let scores = bank.scores(f_g, self.config.hyper.alpha1)?;
        raw_topk_select(&scores, query, k, |j| bank.is_written(j))
    }

    /// Fixes selections, rectified weights and domain labels for the given
    /// target samples under the current memories.
    pub fn supervision(&self, target_idx: &[usize], embeddings: &[EmbeddingTriple]) -> Result<TargetSupervision> {
        let h = &self.config.hyper;
        let mut selections = Vec::with_capacity(target_idx.len());
        let mut weights = Vec::with_capacity(target_idx.len());
        if self.mech.instance {
            let rows: Vec<(NeighborSelection, Vec<f64>)> = target_idx
                .par_iter()
                .zip(embeddings)
                .map(|(&i, e)| {
                    let sel = self.select(i, &e.f_g)?;
                    let w = match (self.mech.part, &self.upper, &self.bottom) {
                        (true, Some(up), Some(bot)) => {
                            let p_pu = up.read_probabilities(&e.f_pu, h.alpha1)?;
                            let p_pb = bot.read_probabilities(&e.f_pb, h.alpha1)?;
                            rectify_weights(&sel.weights, &p_pu, &p_pb, &sel, h.gamma)
                        }
                        _ => sel.weights.clone(),
                    };
                    Ok((sel, w))
                })
                .collect::<Result<_>>()?;
            for (s, w) in rows {
                selections.push(s);
                weights.push(w);
            }
        }
        let domain_labels = match self.domain.as_ref() {
            Some(DomainState {
                labeling: Some(l),
                bank: Some(_),
                ..
            }) if self.mech.domain => target_idx.iter().map(|&i| l.label(i).cluster()).collect(),
            _ => vec![None; target_idx.len()],
        };
        Ok(TargetSupervision {
            selections,
            weights,
            domain_labels,
        })
    }

    /// Loss report and parameter gradients for one batch under fixed
    /// supervision. Does not touch the trainer state.
    pub fn batch_objective(
        &self,
        params: &EncoderParams,
        batch: &Batch,
        supervision: &TargetSupervision,
    ) -> Result<(LossReport, ParamGrads, Vec<ForwardPass>, Vec<ForwardPass>)> {
        let h = &self.config.hyper;
        let src_passes: Vec<ForwardPass> = batch
            .source
            .par_iter()
            .map(|&i| params.forward_pass(&self.source.samples[i]))
            .collect::<Result<_>>()?;
        let tgt_passes: Vec<ForwardPass> = batch
            .target
            .par_iter()
            .map(|&i| params.forward_pass(&self.target.samples[i]))
            .collect::<Result<_>>()?;
        let (c_src, c_inst, c_dom) = total_coefficients(h.lambda, h.beta);
        let dim = params.dim();
        let mut grads = ParamGrads::zeros_like(params);

        let logits: Vec<Vec<f64>> = src_passes.iter().map(|p| params.logits(&p.embeddings.f_g)).collect();
        let labels: Vec<usize> = batch.source.iter().map(|&i| self.source.true_ids[i]).collect();
        let src = source_loss(&logits, &labels)?;
        for ((pass, &i), dz) in src_passes.iter().zip(&batch.source).zip(&src.grads.rows) {
            let scaled: Vec<f64> = dz.iter().map(|g| c_src * g).collect();
            let d_fg = params.classifier_backward(&pass.embeddings.f_g, &scaled, &mut grads);
            let up = EmbeddingGrads {
                f_g: d_fg,
                ..EmbeddingGrads::zeros(dim)
            };
            params.backward(&self.source.samples[i], pass, &up, &mut grads);
        }

        let queries: Vec<UnitVector> = tgt_passes.iter().map(|p| p.embeddings.f_g.clone()).collect();
        let mut tgt_grad = vec![vec![0.0; dim]; queries.len()];
        let mut l_instance = 0.0;
        if self.mech.instance {
            let bank = self.instance.as_ref().ok_or(MmnError::EmptyInput)?;
            let inst = instance_loss(bank, &queries, &supervision.selections, &supervision.weights, h.alpha1)?;
            l_instance = inst.value;
            for (g, r) in tgt_grad.iter_mut().zip(&inst.grads.rows) {
                g.iter_mut().zip(r).for_each(|(a, b)| *a += c_inst * b);
            }
        }
        let (mut l_domain, mut l_triplet) = (0.0, 0.0);
        if let Some(bank) = self.domain_bank().filter(|_| self.mech.domain) {
            match domain_loss(bank, &queries, &supervision.domain_labels, h.alpha1, h.triplet_margin) {
                Ok(d) => {
                    l_domain = d.value();
                    l_triplet = d.triplet;
                    for (g, r) in tgt_grad.iter_mut().zip(&d.grads.rows) {
                        g.iter_mut().zip(r).for_each(|(a, b)| *a += c_dom * b);
                    }
                }
                Err(MmnError::EmptyBatch) => {}
                Err(e) => return Err(e),
            }
        }
        for ((pass, &i), g) in tgt_passes.iter().zip(&batch.target).zip(tgt_grad) {
            let up = EmbeddingGrads {
                f_g: g,
                ..EmbeddingGrads::zeros(dim)
            };
            params.backward(&self.target.samples[i], pass, &up, &mut grads);
        }
        let report = total_loss(src.value, l_instance, l_domain, l_triplet, h.lambda, h.beta);
        Ok((report, grads, src_passes, tgt_passes))
    }

    /// One optimizer step followed by the memory writes for the batch.
    pub fn train_batch(&mut self, batch: &Batch, rho: f64, learning_rate: f64) -> Result<LossReport> {
        let (source, target) = (self.source, self.target);
        let inputs: Vec<&[f64]> = batch
            .source
            .iter()
            .map(|&i| source.samples[i].as_slice())
            .chain(batch.target.iter().map(|&i| target.samples[i].as_slice()))
            .collect();
        self.revive(&inputs)?;
        let pre: Vec<EmbeddingTriple> = batch
            .target
            .par_iter()
            .map(|&i| self.params.forward(&self.target.samples[i]))
            .collect::<Result<_>>()?;
        let supervision = self.supervision(&batch.target, &pre)?;
        let (report, grads, _, tgt_passes) = self.batch_objective(&self.params, batch, &supervision)?;
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(MmnError::Diverged(format!("non-finite loss {:?}", report)));
        }
        self.optimizer.step(&mut self.params, &grads, learning_rate);
        if !self.params.is_finite() {
            return Err(MmnError::Diverged("non-finite parameters".into()));
        }

        for (pass, &i) in tgt_passes.iter().zip(&batch.target) {
            let e = &pass.embeddings;
            if let Some(bank) = self.instance.as_mut() {
                bank.write_slot(i, &e.f_g, rho)?;
            }
            if let (Some(up), Some(bot)) = (self.upper.as_mut(), self.bottom.as_mut()) {
                up.write_slot(i, &e.f_pu, rho)?;
                bot.write_slot(i, &e.f_pb, rho)?;
            }
        }
        if self.mech.domain {
            if let Some(DomainState {
                labeling: Some(l),
                bank: Some(bank),
                ..
            }) = self.domain.as_mut()
            {
                for (pass, &i) in tgt_passes.iter().zip(&batch.target) {
                    if let Some(c) = l.label(i).cluster() {
                        bank.write_slot(c, &pass.embeddings.f_g, rho)?;
                    }
                }
            }
        }
        Ok(report)
    }

    fn all_selections(&self, embeddings: &[EmbeddingTriple]) -> Result<Vec<NeighborSelection>> {
        let k = self.config.hyper.k;
        if let Some(s) = self.guided_similarity() {
            return (0..embeddings.len()).into_par_iter().map(|i| reorder_and_select(s, i, k)).collect();
        }
        if let Some(bank) = self.instance.as_ref() {
            return embeddings
                .par_iter()
                .enumerate()
                .map(|(i, e)| {
                    let scores = bank.scores(&e.f_g, self.config.hyper.alpha1)?;
                    raw_topk_select(&scores, i, k, |j| bank.is_written(j))
                })
                .collect();
        }
        // No memory: plain cosine neighbors of the current features.
        embeddings
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let scores: Vec<f64> = embeddings.iter().map(|o| e.f_g.dot(&o.f_g)).collect();
                raw_topk_select(&scores, i, k, |_| true)
            })
            .collect()
    }

    pub fn uses_concat_features(&self) -> bool {
        match self.config.eval_features {
            EvalFeatures::Auto => self.mech.part,
            EvalFeatures::Concat => true,
            EvalFeatures::Global => false,
        }
    }

    /// Retrieval and neighbor/cluster quality on the target split.
    pub fn evaluate(&self, epoch: usize) -> Result<EpochMetrics> {
        let emb = self.target_embeddings()?;
        let features: Vec<Vec<f64>> = if self.uses_concat_features() {
            emb.iter().map(EmbeddingTriple::concat).collect()
        } else {
            emb.iter().map(|e| e.f_g.as_slice().to_vec()).collect()
        };
        let t = self.target;
        let retrieval = evaluate_retrieval(&features, &features, &t.true_ids, &t.true_ids, &t.camera_ids, &t.camera_ids)?;
        let selections = self.all_selections(&emb)?;
        let confuser: Vec<NeighborSelection> = selections
            .iter()
            .filter(|s| t.is_confuser_sample(s.query))
            .cloned()
            .collect();
        let labeling = self.domain.as_ref().and_then(|d| d.labeling.as_ref());
        let (purity, noise_fraction, num_clusters) = match labeling {
            Some(l) => {
                let q = cluster_purity(l, &t.true_ids)?;
                (q.purity, q.noise_fraction, l.num_clusters())
            }
            None => (f64::NAN, f64::NAN, 0),
        };
        Ok(EpochMetrics {
            epoch,
            rho: self.config.schedule.rho(epoch),
            learning_rate: self.config.schedule.learning_rate(self.config.learning_rate, epoch),
            l_source: 0.0,
            l_instance: 0.0,
            l_domain: 0.0,
            l_triplet: 0.0,
            total: 0.0,
            map: retrieval.map,
            rank1: retrieval.rank1,
            neighbor_precision: neighbor_precision(&selections, &t.true_ids),
            neighbor_precision_confuser: if confuser.is_empty() {
                f64::NAN
            } else {
                neighbor_precision(&confuser, &t.true_ids)
            },
            purity,
            noise_fraction,
            num_clusters,
            refreshed: false,
            revived_units: self.revived_units,
        })
    }

    /// Runs one full epoch and returns its metrics row. An embedding head
    /// whose ReLU output dies for some input is reported as divergence.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        self.run_epoch_inner(epoch).map_err(|e| match e {
            MmnError::ZeroVector => MmnError::Diverged(format!("epoch {epoch}: an embedding head output all zeros")),
            other => other,
        })
    }

    fn run_epoch_inner(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let sched = self.config.schedule.clone();
        let rho = sched.rho(epoch);
        let lr = sched.learning_rate(self.config.learning_rate, epoch);
        let refreshed = self.mech.domain && sched.refreshes_at(epoch);
        if refreshed {
            self.revive_target()?;
            self.refresh_domain(epoch)?;
        }
        let batches = self.next_epoch_batches();
        let mut sums = LossReport::default();
        let mut weight = 0.0;
        for batch in &batches {
            let r = self.train_batch(batch, rho, lr)?;
            let w = batch.target.len() as f64;
            sums.l_source += w * r.l_source;
            sums.l_instance += w * r.l_instance;
            sums.l_domain += w * r.l_domain;
            sums.l_triplet += w * r.l_triplet;
            sums.total += w * r.total;
            weight += w;
        }
        self.revive_target()?;
        let mut m = self.evaluate(epoch)?;
        m.revived_units = self.revived_units;
        m.l_source = sums.l_source / weight;
        m.l_instance = sums.l_instance / weight;
        m.l_domain = sums.l_domain / weight;
        m.l_triplet = sums.l_triplet / weight;
        m.total = sums.total / weight;
        m.refreshed = refreshed;
        if !m.total.is_finite() {
            return Err(MmnError::Diverged(format!("epoch {epoch} mean loss is {}", m.total)));
        }
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            variant: self.variant,
            config: self.config.clone(),
            params: self.params.clone(),
            instance_bank: self.instance.clone(),
            upper_bank: self.upper.clone(),
            bottom_bank: self.bottom.clone(),
            domain_bank: self.domain_bank().cloned(),
            labeling: self.domain.as_ref().and_then(|d| d.labeling.clone()),
        }
    }

    pub fn run(mut self) -> Result<RunResult> {
        let mut metrics = Vec::with_capacity(self.config.schedule.total_epochs);
        for epoch in 0..self.config.schedule.total_epochs {
            metrics.push(self.run_epoch(epoch)?);
        }
        Ok(RunResult {
            variant: self.variant,
            checkpoint: self.checkpoint(),
            metrics,
        })
    }
}

/// Trains one variant from scratch.
pub fn run(config: &TrainConfig, variant: Variant, source: &SynthDataset, target: &SynthDataset) -> Result<RunResult> {
    Trainer::new(config, variant, source, target)?.run()
}

/// Trains every variant on the same data and seed.
pub fn run_ablation(
    config: &TrainConfig,
    variants: &[Variant],
    source: &SynthDataset,
    target: &SynthDataset,
) -> Result<Vec<RunResult>> {
    variants.iter().map(|&v| run(config, v, source, target)).collect()
}
