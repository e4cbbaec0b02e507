use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fewshot_gmm::checkpoint::Checkpoint;
use fewshot_gmm::data::{hour_columns, parse_dataset, prepare, Split};
use fewshot_gmm::encoder::EncoderConfig;
use fewshot_gmm::gmm::{init_theta_o, InitOptions};
use fewshot_gmm::metrics::{write_metric_csv, MetricRow};
use fewshot_gmm::synth_bench::{self, SynthConfig};
use fewshot_gmm::trainer::{self, TrainSetup};
use fewshot_gmm::{
    DomainCollection, EcpSample, Error, GmmFile, PreparedDataset, Scaler, Space, TrainConfig,
};

mod provenance;

use provenance::{record_path, Run};

/// Few-shot estimation of household daily load-profile distributions.
#[derive(Parser)]
#[command(name = "fewshot-gmm", version)]
struct Cli {
    /// Master seed for every random draw [default: 0]
    #[arg(long, global = true, env = "FEWSHOT_GMM_SEED")]
    seed: Option<u64>,

    /// Worker threads for per-domain stages [default: all cores]
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Run on one worker with ordered reductions
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset CSV, build domains, split them and fit the scaler
    Prepare(PrepareArgs),
    /// Fit the shared starting mixture on pooled source profiles
    InitGmm(InitGmmArgs),
    /// Generate a synthetic dataset with known mixtures
    Synth(SynthArgs),
    /// Train the encoder episodically
    Train(TrainArgs),
    /// Estimate a target mixture from a few daily profiles
    Estimate(EstimateArgs),
    /// Draw daily profiles from a mixture file (physical units, clipped at 0)
    Sample(SampleArgs),
    /// Score the estimator and baselines on a split, one row per domain
    Evaluate(EvaluateArgs),
    /// Per-shot-count benchmark with aggregate curves
    Bench(BenchArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset CSV: domain_or_household_id,date,h00..h23
    #[arg(long)]
    input: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Readings per day
    #[arg(long = "t", default_value_t = 24)]
    t: usize,
    /// Days per domain
    #[arg(long, default_value_t = fewshot_gmm::data::DEFAULT_WINDOW)]
    window: usize,
    /// Source, test and validation fractions
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct InitGmmArgs {
    /// Prepared dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Output mixture file (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Mixture components
    #[arg(long = "j", default_value_t = 6)]
    j: usize,
    /// Pooled profiles used for the fit
    #[arg(long, default_value_t = 50_000)]
    subsample: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source domains
    #[arg(long, default_value_t = 500)]
    source: usize,
    /// Held-out target domains
    #[arg(long, default_value_t = 100)]
    target: usize,
    /// Validation domains
    #[arg(long, default_value_t = 25)]
    validation: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Starting mixture from `init-gmm`
    #[arg(long)]
    theta_o: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out: PathBuf,
    /// Training settings (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder settings (JSON); missing fields take defaults
    #[arg(long)]
    encoder_config: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides total_steps
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides eval_every
    #[arg(long)]
    eval_every: Option<usize>,
    /// Overrides cycle_length
    #[arg(long)]
    cycle_length: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Shots CSV in the dataset layout, physical units
    #[arg(long)]
    shots: PathBuf,
    /// Output mixture file (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Mixture file from `estimate` or `init-gmm`
    #[arg(long)]
    params: PathBuf,
    /// Number of profiles
    #[arg(short = 'm', long, default_value_t = 250)]
    m: usize,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Source,
    Test,
    Validation,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Shot counts
    #[arg(long, value_delimiter = ',', default_values_t = [4])]
    n_shots: Vec<usize>,
    /// Output metric report CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Shot counts [default: 1..=24, capped at n_max]
    #[arg(long, value_delimiter = ',')]
    n_shots: Vec<usize>,
    /// Shot-sampling seeds [default: the master seed]
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory for bench.csv and aggregate.csv
    #[arg(long)]
    out: PathBuf,
}

fn usage(msg: String) -> anyhow::Error {
    Error::InvalidArgument(msg).into()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(value)
}

fn pick(split: &Split, which: SplitName) -> &DomainCollection {
    match which {
        SplitName::Source => &split.source,
        SplitName::Test => &split.test,
        SplitName::Validation => &split.validation,
    }
}

/// The checkpoint and dataset must share one scaler.
fn scaled_split(ckpt: &Checkpoint, ds: &PreparedDataset, which: SplitName) -> Result<DomainCollection> {
    let scaler = checkpoint_scaler(ckpt)?;
    if ds.scaler()? != scaler {
        return Err(Error::Incompatible {
            path: PathBuf::from("manifest.json"),
            reason: "dataset scaler differs from the checkpoint's".into(),
        }
        .into());
    }
    Ok(scaler.apply_collection(pick(&ds.split, which))?)
}

fn checkpoint_scaler(ckpt: &Checkpoint) -> Result<Scaler> {
    Ok(ckpt
        .scaler
        .ok_or_else(|| Error::Format("checkpoint carries no scaler".into()))?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = if cli.deterministic {
        1
    } else {
        cli.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    };
    if workers == 0 {
        return Err(usage("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("starting worker pool")?;
    let seed = cli.seed.unwrap_or(0);
    let start = |name: &str| Run::start(name, Some(seed), workers, cli.deterministic);

    match cli.command {
        Command::Prepare(a) => {
            let mut run = start("prepare");
            run.input(&a.input)?;
            let ratios: [f64; 3] = a.ratios.try_into().map_err(|_| usage("--ratios takes three values".into()))?;
            let parsed = parse_dataset(&a.input, a.t)?;
            let ds = prepare(&parsed, a.window, ratios, seed)?;
            ds.save(&a.out)?;
            let c = &ds.manifest.counts;
            println!(
                "households {} (excluded {}), dropped rows {}, domains source/test/validation {}/{}/{}",
                c.households,
                c.excluded_households,
                c.dropped_rows,
                c.source_domains,
                c.test_domains,
                c.validation_domains
            );
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::InitGmm(a) => {
            let mut run = start("init-gmm");
            run.input(&a.dataset)?;
            let ds = PreparedDataset::load(&a.dataset)?;
            let scaler = ds.scaler()?;
            let source = scaler.apply_collection(&ds.split.source)?;
            let pooled: Vec<Vec<f64>> = source.domains().iter().flat_map(|d| d.points()).collect();
            let opts = InitOptions {
                subsample: a.subsample,
                ..InitOptions::default()
            };
            let theta_o = init_theta_o(&pooled, a.j, seed, opts)?;
            ensure_parent(&a.out)?;
            GmmFile::new(&theta_o, scaler, Space::Scaled).save(&a.out)?;
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Synth(a) => {
            let mut run = start("synth");
            let mut config: SynthConfig = match &a.config {
                Some(p) => {
                    run.input(p)?;
                    read_json(p)?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.master_seed = s;
            }
            let (ds, truths) = synth_bench::synth_dataset(&config, [a.source, a.target, a.validation])?;
            ds.save(&a.out)?;
            let truth_path = a.out.join("truths.json");
            fs::write(&truth_path, serde_json::to_string_pretty(&truths)? + "\n")
                .with_context(|| format!("writing {}", truth_path.display()))?;
            println!(
                "{} source, {} target, {} validation domains written to {}",
                a.source,
                a.target,
                a.validation,
                a.out.display()
            );
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Train(a) => {
            let mut run = start("train");
            run.input(&a.dataset)?;
            run.input(&a.theta_o)?;
            let mut config: TrainConfig = match &a.config {
                Some(p) => {
                    run.input(p)?;
                    read_json(p)?
                }
                None => TrainConfig::default(),
            };
            let encoder: EncoderConfig = match &a.encoder_config {
                Some(p) => {
                    run.input(p)?;
                    read_json(p)?
                }
                None => EncoderConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.master_seed = s;
            }
            if let Some(v) = a.steps {
                config.total_steps = v;
            }
            if let Some(v) = a.batch_size {
                config.batch_size = v;
            }
            if let Some(v) = a.eval_every {
                config.eval_every = v;
            }
            if let Some(v) = a.cycle_length {
                config.cycle_length = v;
            }
            let ds = PreparedDataset::load(&a.dataset)?;
            let scaler = ds.scaler()?;
            let theta_file = GmmFile::load(&a.theta_o)?;
            if theta_file.space != Space::Scaled || theta_file.scaler != scaler {
                return Err(Error::Incompatible {
                    path: a.theta_o.clone(),
                    reason: "starting mixture was not fitted on this dataset's scaled data".into(),
                }
                .into());
            }
            let theta_o = theta_file.gmm()?;
            let source = scaler.apply_collection(&ds.split.source)?;
            let validation = scaler.apply_collection(&ds.split.validation)?;
            let resume = match &a.resume {
                Some(p) => {
                    run.input(p)?;
                    Some(Checkpoint::load(p)?)
                }
                None => None,
            };
            let setup = TrainSetup {
                config,
                encoder,
                source: &source,
                validation: &validation,
                theta_o: &theta_o,
                scaler: Some(scaler),
            };
            let outcome = trainer::train(&setup, &a.out, resume)?;
            for e in &outcome.events {
                eprintln!("warning: {e}");
            }
            println!(
                "steps {}, last loss {}, best validation MMD {}",
                outcome.steps,
                outcome.last_loss.map_or("-".into(), |v| v.to_string()),
                outcome.best_val.map_or("-".into(), |v| v.to_string())
            );
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Estimate(a) => {
            let mut run = start("estimate");
            run.input(&a.checkpoint)?;
            run.input(&a.shots)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let parsed = parse_dataset(&a.shots, ckpt.model.config.t)?;
            if parsed.dropped_rows > 0 {
                return Err(Error::Format(format!(
                    "{}: {} shot rows have missing or invalid readings",
                    a.shots.display(),
                    parsed.dropped_rows
                ))
                .into());
            }
            let shots: Vec<EcpSample> = parsed
                .households
                .into_iter()
                .flat_map(|h| h.days.into_iter().map(|d| d.sample))
                .collect();
            let est = trainer::estimate(&ckpt, &shots)?;
            ensure_parent(&a.out)?;
            est.save(&a.out)?;
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Sample(a) => {
            let mut run = start("sample");
            run.input(&a.params)?;
            let file = GmmFile::load(&a.params)?;
            let gmm = file.physical_gmm()?;
            let rows = gmm.sample(a.m, seed, true);
            let mut text = String::from("sample");
            for c in hour_columns(gmm.t()) {
                text.push(',');
                text.push_str(&c);
            }
            text.push('\n');
            for (i, r) in rows.iter().enumerate() {
                text.push_str(&i.to_string());
                for v in r {
                    text.push(',');
                    text.push_str(&v.to_string());
                }
                text.push('\n');
            }
            ensure_parent(&a.out)?;
            fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Evaluate(a) => {
            let mut run = start("evaluate");
            run.input(&a.checkpoint)?;
            run.input(&a.dataset)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let ds = PreparedDataset::load(&a.dataset)?;
            let targets = scaled_split(&ckpt, &ds, a.split)?;
            let report = synth_bench::run_benchmark(&ckpt, &targets, &a.n_shots, &[seed])?;
            let rows: Vec<MetricRow> = report
                .rows
                .into_iter()
                .map(|r| MetricRow {
                    domain_id: r.domain_id,
                    n_shots: r.n_shots,
                    method: r.method.as_str().to_owned(),
                    report: r.report,
                })
                .collect();
            ensure_parent(&a.out)?;
            write_metric_csv(&a.out, &rows)?;
            run.finish(&record_path(&a.out), &[&a.out])
        }
        Command::Bench(a) => {
            let mut run = start("bench");
            run.input(&a.checkpoint)?;
            run.input(&a.dataset)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let ds = PreparedDataset::load(&a.dataset)?;
            let targets = scaled_split(&ckpt, &ds, a.split)?;
            if targets.is_empty() {
                bail!(Error::Format("the selected split has no domains".into()));
            }
            let shots = if a.n_shots.is_empty() {
                synth_bench::default_shot_counts(ckpt.model.config.n_max)
            } else {
                a.n_shots
            };
            let seeds = if a.seeds.is_empty() { vec![seed] } else { a.seeds };
            let report = synth_bench::run_benchmark(&ckpt, &targets, &shots, &seeds)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            report.write_csv(&a.out.join("bench.csv"))?;
            report.write_aggregate_csv(&a.out.join("aggregate.csv"))?;
            for row in report.aggregate() {
                println!(
                    "n={:<3} {:<8} mean MMD {:.5} (sd {:.5}, {} domains)",
                    row.n_shots,
                    row.method.as_str(),
                    row.mean_mmd,
                    row.std_mmd,
                    row.count
                );
            }
            run.finish(&record_path(&a.out), &[&a.out])
        }
    }
}

/// 2 usage, 3 data or format, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Numeric(_) => 4,
                Error::InvalidArgument(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
