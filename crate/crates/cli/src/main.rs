use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mmn::gradcheck::{self, GradTarget, GradcheckOptions};
use mmn::synth_data::{load_datasets, save_datasets};
use mmn::trainer::{write_metrics_csv, Checkpoint, EpochMetrics, RunResult, METRICS_HEADER};
use mmn::{build_similarity, generate, MmnError, SynthDataset, TrainConfig, UnitVector, Variant};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "mmn", version, about = "Multi-level memory network on synthetic re-identification data")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "MMN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source and target splits.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `generate`; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train every ablation variant on the same data.
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also train the full model with guidance disabled.
        #[arg(long)]
        with_unguided: bool,
    },
    /// Train once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        /// One of k, alpha2, lambda, beta, gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Compare every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        configs: usize,
        /// Test hook: perturb one target's analytic gradient.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Export artifacts from a checkpoint as CSV.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: DumpKind,
        /// Dataset directory; required for `similarity` and `embeddings`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DumpKind {
    Banks,
    Similarity,
    Clusters,
    Embeddings,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Diverged(String),
    Gradcheck(String),
}

impl From<MmnError> for CliError {
    fn from(e: MmnError) -> Self {
        match e {
            MmnError::Io(_) | MmnError::Parse(_) => CliError::Io(e.to_string()),
            MmnError::Diverged(_) => CliError::Diverged(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: String,
    seed: u64,
    config: &'a TrainConfig,
    outputs: Vec<String>,
    duration_secs: f64,
}

fn load_config(common: &Common) -> CliResult<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn datasets(cfg: &mut TrainConfig, data: Option<&Path>) -> CliResult<(SynthDataset, SynthDataset)> {
    match data {
        Some(dir) => {
            let (synth, source, target) = load_datasets(dir)?;
            cfg.synth = synth;
            Ok((source, target))
        }
        None => Ok(generate(&cfg.synth)?),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(dir: &Path, name: &str, contents: &str, outputs: &mut Vec<String>) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    outputs.push(name.to_string());
    Ok(())
}

fn write_metrics(dir: &Path, name: &str, rows: &[EpochMetrics], outputs: &mut Vec<String>) -> CliResult<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, rows)?;
    write_file(dir, name, &String::from_utf8_lossy(&buf), outputs)
}

/// Written through a temporary file so a manifest never appears half-done.
fn write_manifest(dir: &Path, manifest: &Manifest) -> CliResult<()> {
    let tmp = dir.join(".manifest.json.tmp");
    let text = serde_json::to_string_pretty(manifest).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(&tmp, text)?;
    fs::rename(&tmp, dir.join("manifest.json"))?;
    Ok(())
}

fn manifest<'a>(command: &'a str, cfg: &'a TrainConfig, outputs: Vec<String>, started: Instant) -> Manifest<'a> {
    Manifest {
        command,
        version: format!("v{}", env!("CARGO_PKG_VERSION")),
        seed: cfg.seed,
        config: cfg,
        outputs,
        duration_secs: started.elapsed().as_secs_f64(),
    }
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    Ok(s.parse::<Variant>()?)
}

fn cmd_generate(common: &Common, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let cfg = load_config(common)?;
    let (source, target) = generate(&cfg.synth)?;
    create_dir(out)?;
    save_datasets(out, &cfg.synth, &source, &target)?;
    let outputs = ["source", "target"]
        .iter()
        .flat_map(|s| ["samples", "meta", "identities"].map(|k| format!("{s}_{k}.csv")))
        .chain(["dataset.json".to_string()])
        .collect();
    write_manifest(out, &manifest("generate", &cfg, outputs, started))?;
    println!("wrote {} source and {} target samples to {}", source.len(), target.len(), out.display());
    Ok(())
}

fn summary_line(label: &str, r: &RunResult) -> String {
    let m = r.final_metrics();
    format!(
        "{label},{},{},{},{},{},{}",
        m.map, m.rank1, m.neighbor_precision, m.neighbor_precision_confuser, m.purity, m.num_clusters
    )
}

const SUMMARY_HEADER: &str = "map,rank1,neighbor_precision,neighbor_precision_confuser,purity,num_clusters";

fn save_run(out: &Path, prefix: &str, r: &RunResult, outputs: &mut Vec<String>) -> CliResult<()> {
    write_metrics(out, &format!("{prefix}metrics.csv"), &r.metrics, outputs)?;
    write_file(out, &format!("{prefix}checkpoint.json"), &r.checkpoint.to_json()?, outputs)
}

fn cmd_train(common: &Common, data: Option<&Path>, out: &Path, variant: &str) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = load_config(common)?;
    let variant = parse_variant(variant)?;
    let (source, target) = datasets(&mut cfg, data)?;
    let result = mmn::run(&cfg, variant, &source, &target)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    save_run(out, "", &result, &mut outputs)?;
    write_manifest(out, &manifest("train", &cfg, outputs, started))?;
    let m = result.final_metrics();
    println!("{variant}: final mAP {:.4}, rank-1 {:.4}", m.map, m.rank1);
    Ok(())
}

fn cmd_ablation(common: &Common, data: Option<&Path>, out: &Path, with_unguided: bool) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = load_config(common)?;
    let (source, target) = datasets(&mut cfg, data)?;
    let mut variants = Variant::ABLATION.to_vec();
    if with_unguided {
        variants.push(Variant::FullUnguided);
    }
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut summary = format!("variant,{SUMMARY_HEADER}\n");
    for v in variants {
        let r = mmn::run(&cfg, v, &source, &target)?;
        save_run(out, &format!("{v}_"), &r, &mut outputs)?;
        summary.push_str(&summary_line(v.name(), &r));
        summary.push('\n');
        println!("{:>14}: final mAP {:.4}", v.name(), r.final_metrics().map);
    }
    write_file(out, "summary.csv", &summary, &mut outputs)?;
    write_manifest(out, &manifest("ablation", &cfg, outputs, started))?;
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    data: Option<&Path>,
    out: &Path,
    variant: &str,
    param: &str,
    values: &[f64],
) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = load_config(common)?;
    let variant = parse_variant(variant)?;
    if values.is_empty() {
        return Err(CliError::Config("--values: at least one value required".into()));
    }
    // Validate every value before spending time on training.
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_param(param, v)?;
            Ok(c)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let (source, target) = datasets(&mut cfg, data)?;
    create_dir(out)?;
    let mut outputs = Vec::new();
    let mut table = format!("param,value,{}\n", METRICS_HEADER);
    for (mut c, &v) in configs.into_iter().zip(values) {
        c.synth = cfg.synth.clone();
        let r = mmn::run(&c, variant, &source, &target)?;
        write_metrics(out, &format!("{param}_{v}_metrics.csv"), &r.metrics, &mut outputs)?;
        table.push_str(&format!("{param},{v},{}\n", r.final_metrics().csv_row()));
        println!("{param}={v}: final mAP {:.4}", r.final_metrics().map);
    }
    write_file(out, "sweep.csv", &table, &mut outputs)?;
    write_manifest(out, &manifest("sweep", &cfg, outputs, started))?;
    Ok(())
}

fn cmd_gradcheck(seed: u64, configs: usize, corrupt: Option<&str>) -> CliResult<()> {
    let options = GradcheckOptions {
        configs,
        seed,
        corrupt: corrupt.map(str::parse::<GradTarget>).transpose()?,
        ..GradcheckOptions::default()
    };
    let started = Instant::now();
    let reports = gradcheck::check_all(&options)?;
    println!("target,configs,max_rel_error,worst_config,status");
    let mut failures = Vec::new();
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{},{},{:.3e},{},{status}", r.target, r.configs, r.max_rel_error, r.worst_config);
        if !r.passed {
            failures.push(format!("{} (config {} of seed {seed})", r.target, r.worst_config));
        }
    }
    eprintln!("gradcheck finished in {:.2}s", started.elapsed().as_secs_f64());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(format!("gradient mismatch: {}", failures.join(", "))))
    }
}

fn cmd_dump(checkpoint: &Path, what: DumpKind, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(checkpoint).map_err(|e| CliError::Io(format!("{}: {e}", checkpoint.display())))?;
    let ck = Checkpoint::from_json(&text)?;
    create_dir(out)?;
    let open = |name: &str| -> CliResult<BufWriter<fs::File>> {
        let path = out.join(name);
        let f = fs::File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    };
    let load_target = || -> CliResult<SynthDataset> {
        let dir = data.ok_or_else(|| CliError::Config("--data is required for this dump".into()))?;
        Ok(load_datasets(dir)?.2)
    };
    let embed = |target: &SynthDataset| -> CliResult<Vec<mmn::EmbeddingTriple>> {
        Ok(target
            .samples
            .iter()
            .map(|x| ck.params.forward(x))
            .collect::<mmn::Result<_>>()?)
    };
    match what {
        DumpKind::Banks => {
            let banks = [
                ("instance_bank.csv", &ck.instance_bank),
                ("part_upper_bank.csv", &ck.upper_bank),
                ("part_bottom_bank.csv", &ck.bottom_bank),
                ("domain_bank.csv", &ck.domain_bank),
            ];
            let mut wrote = 0;
            for (name, bank) in banks {
                if let Some(b) = bank {
                    b.write_csv(open(name)?)?;
                    wrote += 1;
                }
            }
            println!("wrote {wrote} bank(s)");
        }
        DumpKind::Clusters => {
            let labeling = ck
                .labeling
                .as_ref()
                .ok_or_else(|| CliError::Config("checkpoint holds no clustering (variant without domain memory?)".into()))?;
            labeling.write_csv(open("clusters.csv")?)?;
        }
        DumpKind::Embeddings => {
            let target = load_target()?;
            let emb = embed(&target)?;
            let mut text = String::new();
            for e in &emb {
                let row: Vec<String> = e.concat().iter().map(f64::to_string).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            fs::write(out.join("embeddings.csv"), text)?;
        }
        DumpKind::Similarity => {
            let target = load_target()?;
            let f_g: Vec<UnitVector> = embed(&target)?.into_iter().map(|e| e.f_g).collect();
            let s = build_similarity(&f_g, &ck.config.rerank)?;
            let mut text = String::new();
            for i in 0..s.len() {
                let row: Vec<String> = s.row(i).iter().map(f64::to_string).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            fs::write(out.join("similarity.csv"), text)?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Generate { common, out } => cmd_generate(common, out),
        Command::Train {
            common,
            data,
            out,
            variant,
        } => cmd_train(common, data.as_deref(), out, variant),
        Command::Ablation {
            common,
            data,
            out,
            with_unguided,
        } => cmd_ablation(common, data.as_deref(), out, *with_unguided),
        Command::Sweep {
            common,
            data,
            out,
            variant,
            param,
            values,
        } => cmd_sweep(common, data.as_deref(), out, variant, param, values),
        Command::Gradcheck { seed, configs, corrupt } => cmd_gradcheck(*seed, *configs, corrupt.as_deref()),
        Command::Dump {
            checkpoint,
            what,
            data,
            out,
        } => cmd_dump(checkpoint, *what, data.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, msg) = match e {
                CliError::Config(m) => (EXIT_CONFIG, m),
                CliError::Io(m) => (EXIT_IO, m),
                CliError::Diverged(m) => (EXIT_DIVERGED, m),
                CliError::Gradcheck(m) => (EXIT_GRADCHECK, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
