//! Synthetic labeled-source / unlabeled-target datasets.
//!
//! Every identity owns a prototype whose upper half and bottom half are drawn
//! independently. A sample is `prototype + camera offset + noise`, and all
//! target samples additionally carry a shared domain shift. Confuser pairs of
//! target identities share their bottom-half prototype, so whole-vector
//! similarity mixes them up while the upper half keeps them apart.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MmnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_ids_source: usize,
    pub num_ids_target: usize,
    pub imgs_per_id: usize,
    /// Input dimension; must be even (upper and bottom halves).
    pub d_in: usize,
    pub num_cameras: usize,
    /// Per-coordinate standard deviation of the sample noise.
    pub camera_noise: f64,
    /// Per-coordinate standard deviation of each camera's fixed offset.
    pub camera_offset: f64,
    /// Per-coordinate RMS of the shift applied to every target sample.
    pub domain_shift: f64,
    /// Fraction of target identities that belong to a confuser pair.
    pub confuser_fraction: f64,
    /// Per-coordinate standard deviation of upper-half prototypes (bottom
    /// halves use 1).
    pub upper_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids_source: 60,
            num_ids_target: 60,
            imgs_per_id: 20,
            d_in: 64,
            num_cameras: 4,
            camera_noise: 0.5,
            camera_offset: 0.5,
            domain_shift: 1.0,
            confuser_fraction: 0.2,
            upper_scale: 0.7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn num_confusers(&self) -> usize {
        (self.confuser_fraction * self.num_ids_target as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_ids_source", self.num_ids_source),
            ("num_ids_target", self.num_ids_target),
            ("imgs_per_id", self.imgs_per_id),
            ("num_cameras", self.num_cameras),
        ] {
            if v == 0 {
                return Err(MmnError::config(name, "must be positive"));
            }
        }
        if self.d_in == 0 || self.d_in % 2 != 0 {
            return Err(MmnError::config("d_in", format!("must be even and positive, got {}", self.d_in)));
        }
        for (name, v) in [
            ("camera_noise", self.camera_noise),
            ("camera_offset", self.camera_offset),
            ("domain_shift", self.domain_shift),
            ("upper_scale", self.upper_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MmnError::config(name, "must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return Err(MmnError::config("confuser_fraction", "must lie in [0, 1]"));
        }
        if self.num_confusers() % 2 != 0 {
            return Err(MmnError::config(
                "confuser_fraction",
                format!("yields {} confuser identities; must be even", self.num_confusers()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub domain: Domain,
    pub samples: Vec<Vec<f64>>,
    /// Identity of each sample. For the target split only evaluation reads
    /// this.
    pub true_ids: Vec<usize>,
    pub camera_ids: Vec<usize>,
    pub num_ids: usize,
    /// Per identity, the partner it shares a bottom-half prototype with.
    pub confuser_partner: Vec<Option<usize>>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_confuser_sample(&self, i: usize) -> bool {
        self.confuser_partner[self.true_ids[i]].is_some()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Prototypes {
    upper: Vec<Vec<f64>>,
    bottom: Vec<Vec<f64>>,
}

fn prototypes(rng: &mut ChaCha8Rng, cfg: &SynthConfig, num_ids: usize) -> Prototypes {
    let half = cfg.d_in / 2;
    let mut upper = Vec::with_capacity(num_ids);
    let mut bottom = Vec::with_capacity(num_ids);
    for _ in 0..num_ids {
        upper.push(gaussian_vec(rng, half, cfg.upper_scale));
        bottom.push(gaussian_vec(rng, half, 1.0));
    }
    Prototypes { upper, bottom }
}

fn render(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    domain: Domain,
    protos: &Prototypes,
    shift: &[f64],
    confuser_partner: Vec<Option<usize>>,
) -> SynthDataset {
    let offsets: Vec<Vec<f64>> = (0..cfg.num_cameras)
        .map(|_| gaussian_vec(rng, cfg.d_in, cfg.camera_offset))
        .collect();
    let num_ids = protos.upper.len();
    let mut samples = Vec::with_capacity(num_ids * cfg.imgs_per_id);
    let mut true_ids = Vec::with_capacity(samples.capacity());
    let mut camera_ids = Vec::with_capacity(samples.capacity());
    for id in 0..num_ids {
        for img in 0..cfg.imgs_per_id {
            let cam = img % cfg.num_cameras;
            let proto = protos.upper[id].iter().chain(&protos.bottom[id]);
            let noise = gaussian_vec(rng, cfg.d_in, cfg.camera_noise);
            let x = proto
                .zip(&offsets[cam])
                .zip(&noise)
                .zip(shift)
                .map(|(((p, o), e), s)| p + o + e + s)
                .collect();
            samples.push(x);
            true_ids.push(id);
            camera_ids.push(cam);
        }
    }
    SynthDataset {
        domain,
        samples,
        true_ids,
        camera_ids,
        num_ids,
        confuser_partner,
    }
}

/// Generates `(source, target)`. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<(SynthDataset, SynthDataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let src_protos = prototypes(&mut rng, config, config.num_ids_source);
    let no_shift = vec![0.0; config.d_in];
    let source = render(
        &mut rng,
        config,
        Domain::Source,
        &src_protos,
        &no_shift,
        vec![None; config.num_ids_source],
    );

    let mut tgt_protos = prototypes(&mut rng, config, config.num_ids_target);
    let mut ids: Vec<usize> = (0..config.num_ids_target).collect();
    ids.shuffle(&mut rng);
    let mut partner = vec![None; config.num_ids_target];
    for pair in ids[..config.num_confusers()].chunks_exact(2) {
        let (a, b) = (pair[0], pair[1]);
        tgt_protos.bottom[b] = tgt_protos.bottom[a].clone();
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    let direction = gaussian_vec(&mut rng, config.d_in, 1.0);
    let dir_norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let scale = config.domain_shift * (config.d_in as f64).sqrt() / dir_norm;
    let shift: Vec<f64> = direction.iter().map(|x| x * scale).collect();
    let target = render(&mut rng, config, Domain::Target, &tgt_protos, &shift, partner);
    Ok((source, target))
}

/// Index lists for one batch: `source` indexes the source split (labels are
/// `source.true_ids`), `target` holds target sample indices, which double as
/// memory slot addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Splits each batch evenly between domains. One epoch is one shuffled pass
/// over the target split; source samples are drawn from a reshuffled cycle.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    batch_size: usize,
    num_source: usize,
    num_target: usize,
    source_order: Vec<usize>,
    source_cursor: usize,
}

impl BatchSampler {
    pub fn new(num_source: usize, num_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(MmnError::config("batch_size", "must be even and positive"));
        }
        if num_source == 0 || num_target == 0 {
            return Err(MmnError::EmptyInput);
        }
        Ok(BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size,
            num_source,
            num_target,
            source_order: Vec::new(),
            source_cursor: 0,
        })
    }

    fn next_source(&mut self) -> usize {
        if self.source_cursor >= self.source_order.len() {
            self.source_order = (0..self.num_source).collect();
            self.source_order.shuffle(&mut self.rng);
            self.source_cursor = 0;
        }
        self.source_cursor += 1;
        self.source_order[self.source_cursor - 1]
    }

    pub fn epoch(&mut self) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.num_target).collect();
        order.shuffle(&mut self.rng);
        let half = self.batch_size / 2;
        order
            .chunks(half)
            .map(|chunk| Batch {
                source: (0..chunk.len()).map(|_| self.next_source()).collect(),
                target: chunk.to_vec(),
            })
            .collect()
    }
}

/// Convenience wrapper: the batches of one epoch.
pub fn make_batches(source: &SynthDataset, target: &SynthDataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    Ok(BatchSampler::new(source.len(), target.len(), batch_size, seed)?.epoch())
}

fn write_split(dir: &Path, name: &str, ds: &SynthDataset) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(dir.join(format!("{name}_samples.csv")))?);
    for x in &ds.samples {
        let row: Vec<String> = x.iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    let mut meta = BufWriter::new(fs::File::create(dir.join(format!("{name}_meta.csv")))?);
    writeln!(meta, "index,true_id,camera_id")?;
    for i in 0..ds.len() {
        writeln!(meta, "{},{},{}", i, ds.true_ids[i], ds.camera_ids[i])?;
    }
    meta.flush()?;
    let mut ids = BufWriter::new(fs::File::create(dir.join(format!("{name}_identities.csv")))?);
    writeln!(ids, "id,confuser_partner")?;
    for (id, p) in ds.confuser_partner.iter().enumerate() {
        writeln!(ids, "{},{}", id, p.map_or(-1, |p| p as i64))?;
    }
    ids.flush()?;
    Ok(())
}

fn read_rows(path: &Path, skip_header: bool) -> Result<Vec<Vec<String>>> {
    let file = fs::File::open(path).map_err(|e| MmnError::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if (skip_header && n == 0) || line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.trim().to_string()).collect());
    }
    Ok(rows)
}

fn parse<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>()
        .map_err(|e| MmnError::Parse(format!("{}: `{s}`: {e}", path.display())))
}

fn read_split(dir: &Path, name: &str, domain: Domain) -> Result<SynthDataset> {
    let sp = dir.join(format!("{name}_samples.csv"));
    let samples = read_rows(&sp, false)?
        .into_iter()
        .map(|r| r.iter().map(|s| parse::<f64>(s, &sp)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mp = dir.join(format!("{name}_meta.csv"));
    let mut true_ids = Vec::new();
    let mut camera_ids = Vec::new();
    for r in read_rows(&mp, true)? {
        if r.len() != 3 {
            return Err(MmnError::Parse(format!("{}: expected 3 columns", mp.display())));
        }
        true_ids.push(parse::<usize>(&r[1], &mp)?);
        camera_ids.push(parse::<usize>(&r[2], &mp)?);
    }
    let ip = dir.join(format!("{name}_identities.csv"));
    let confuser_partner = read_rows(&ip, true)?
        .into_iter()
        .map(|r| {
            let p = parse::<i64>(r.get(1).map_or("", String::as_str), &ip)?;
            Ok(usize::try_from(p).ok())
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.len() != true_ids.len() {
        return Err(MmnError::Parse(format!("{name}: samples and metadata disagree in length")));
    }
    Ok(SynthDataset {
        domain,
        num_ids: confuser_partner.len(),
        samples,
        true_ids,
        camera_ids,
        confuser_partner,
    })
}

/// Writes both splits plus `dataset.json` (the generating config) to `dir`.
pub fn save_datasets(dir: &Path, config: &SynthConfig, source: &SynthDataset, target: &SynthDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_split(dir, "source", source)?;
    write_split(dir, "target", target)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

pub fn load_datasets(dir: &Path) -> Result<(SynthConfig, SynthDataset, SynthDataset)> {
    let cfg_path = dir.join("dataset.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| MmnError::Io(format!("{}: {e}", cfg_path.display())))?;
    let config: SynthConfig = serde_json::from_str(&text)?;
    let source = read_split(dir, "source", Domain::Source)?;
    let target = read_split(dir, "target", Domain::Target)?;
    Ok((config, source, target))
}
