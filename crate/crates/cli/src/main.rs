//! Command-line laboratory for copyright-protected retrieval-augmented
//! diffusion sampling over analytic Gaussian-mixture oracles.
//!
//! One TOML config describes a scenario; subcommands draw samples, audit
//! them against divergence budgets, inspect schedules and datastores, and
//! count score evaluations. All artifacts are deterministic for a fixed
//! config and seed and are tied together by a checksummed run manifest.

mod config;
mod error;
mod experiment;
mod output;

use std::env;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cpr_core::retrieval::{record_score, retrieve, unlearn, DataStore};

use config::{ExperimentConfig, Overrides, ScheduleSpec};
use error::{CliError, Failure, Stage};
use experiment::{audit_method, bench_scenario, run_method, RunOutput, Scenario};

#[derive(Parser)]
#[command(
    name = "cpr-lab",
    version,
    about = "Copyright-protected retrieval-augmented diffusion sampling lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the discretized noise schedule.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    /// Draw samples under the configured method and write samples.csv.
    Sample(RunArgs),
    /// Draw samples, then audit them against the divergence budget.
    Audit(AuditArgs),
    /// Query a datastore for the closest records.
    Retrieve(RetrieveArgs),
    /// Remove one record from a datastore; it is unreachable afterwards.
    Unlearn(UnlearnArgs),
    /// Count score evaluations per configured method.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum ScheduleCommand {
    /// Write the schedule grid as CSV, to stdout or to schedule.csv under --out.
    Dump(ScheduleArgs),
}

#[derive(Args)]
struct ScheduleArgs {
    /// Experiment description (TOML); defaults to the built-in lab schedule.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write schedule.csv into this directory instead of stdout.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the configured method name.
    #[arg(long)]
    method: Option<String>,
    /// Override the configured sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the config, then $CPR_LAB_OUT, then ./out.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Override the noise-draw count for estimated log-ratios.
    #[arg(long)]
    draws: Option<usize>,
    /// Override the histogram bin count.
    #[arg(long)]
    bins: Option<usize>,
    /// Also render the histogram as SVG.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Datastore path; defaults to the config's private store.
    #[arg(long, value_name = "FILE")]
    store: Option<PathBuf>,
    /// Experiment description supplying store, query, and m.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Comma-separated query embedding, overriding the config.
    #[arg(long)]
    query: Option<String>,
    /// Number of records to retrieve.
    #[arg(short, long)]
    m: Option<usize>,
}

#[derive(Args)]
struct UnlearnArgs {
    /// Datastore to edit in place.
    #[arg(long, value_name = "FILE")]
    store: PathBuf,
    /// Record id to remove.
    #[arg(long)]
    id: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment descriptions to cost, one method each; repeatable.
    #[arg(long = "config", value_name = "FILE", required = true)]
    configs: Vec<PathBuf>,
    /// Override every config's sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Override every config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for bench.csv.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(failure) = dispatch(cli) {
        eprintln!("{failure}");
        std::process::exit(failure.error.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Schedule(ScheduleCommand::Dump(args)) => schedule_dump(args),
        Command::Sample(args) => sample(args),
        Command::Audit(args) => audit(args),
        Command::Retrieve(args) => retrieve_records(args),
        Command::Unlearn(args) => unlearn_record(args),
        Command::Bench(args) => bench(args),
    }
}

fn resolve_out_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .or_else(|| env::var_os("CPR_LAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Load, override, and resolve a config into a runnable scenario plus the
/// output directory.
fn prepare(args: &RunArgs, draws: Option<usize>, bins: Option<usize>) -> Result<(Scenario, PathBuf), Failure> {
    let mut config = ExperimentConfig::load(&args.config).stage("config")?;
    config.apply(&Overrides {
        method: args.method.clone(),
        samples: args.samples,
        seed: args.seed,
        output_dir: args.out.clone(),
        draws,
        bins,
    });
    config.validate(&args.config).stage("config")?;
    let out_dir = resolve_out_dir(&config);
    let scenario = Scenario::build(config, &args.config).stage("scenario")?;
    Ok((scenario, out_dir))
}

fn write_run_outputs(
    out_dir: &Path,
    run: &RunOutput,
    manifest: &mut output::ManifestBuilder,
) -> Result<(), Failure> {
    fs::create_dir_all(out_dir).stage("write")?;
    output::write_samples_csv(&out_dir.join("samples.csv"), &run.trajectories).stage("write")?;
    manifest.record("samples.csv").stage("write")?;
    if let Some(attempts) = &run.attempts {
        output::write_attempts_csv(&out_dir.join("attempts.csv"), attempts).stage("write")?;
        manifest.record("attempts.csv").stage("write")?;
    }
    Ok(())
}

fn schedule_dump(args: ScheduleArgs) -> Result<(), Failure> {
    let spec = match &args.config {
        Some(path) => ExperimentConfig::load(path).stage("config")?.schedule,
        None => ScheduleSpec::default(),
    };
    let schedule = spec.build().stage("config")?;
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).stage("write")?;
            let path = dir.join("schedule.csv");
            let file = fs::File::create(&path).stage("write")?;
            output::write_schedule_csv(file, &schedule).stage("write")?;
            println!("wrote {}", path.display());
        }
        None => {
            output::write_schedule_csv(io::stdout().lock(), &schedule).stage("write")?;
        }
    }
    Ok(())
}

fn sample(args: RunArgs) -> Result<(), Failure> {
    let (scenario, out_dir) = prepare(&args, None, None)?;
    let models = scenario.models().stage("scenario")?;
    let run = run_method(&scenario, &scenario.sampler, &models.safe, models.private.as_deref())
        .stage("sample")?;
    let mut manifest = output::ManifestBuilder::new(&out_dir);
    write_run_outputs(&out_dir, &run, &mut manifest)?;
    let hash = output::config_sha256(&scenario.config).stage("write")?;
    let manifest_path = manifest.write(hash).stage("write")?;
    println!(
        "wrote {} trajectories to {}",
        run.trajectories.len(),
        out_dir.join("samples.csv").display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn audit(args: AuditArgs) -> Result<(), Failure> {
    let (scenario, out_dir) = prepare(&args.run, args.draws, args.bins)?;
    let models = scenario.models().stage("scenario")?;
    let (report, run) = audit_method(&scenario, &models).stage("audit")?;
    let mut manifest = output::ManifestBuilder::new(&out_dir);
    write_run_outputs(&out_dir, &run, &mut manifest)?;
    output::write_audit_json(&out_dir.join("audit.json"), &report).stage("write")?;
    manifest.record("audit.json").stage("write")?;
    output::write_histogram_csv(&out_dir.join("histogram.csv"), &report).stage("write")?;
    manifest.record("histogram.csv").stage("write")?;
    if args.svg {
        output::write_histogram_svg(&out_dir.join("histogram.svg"), &report).stage("write")?;
        manifest.record("histogram.svg").stage("write")?;
    }
    let hash = output::config_sha256(&scenario.config).stage("write")?;
    let manifest_path = manifest.write(hash).stage("write")?;
    println!(
        "method {}: max per-sample log-ratio {:.6}",
        report.method,
        report.max_delta()
    );
    match report.k_c_bound {
        Some(k_c) => println!("divergence budget k_c = {k_c:.6}"),
        None => println!("no finite divergence budget applies"),
    }
    if let Some(ci) = &report.delta_kl {
        println!(
            "KL vs safe: {:.6} [{:.6}, {:.6}]",
            ci.mean, ci.lo, ci.hi
        );
    }
    println!("audit: {}", out_dir.join("audit.json").display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn retrieve_records(args: RetrieveArgs) -> Result<(), Failure> {
    let config = match &args.config {
        Some(path) => Some(ExperimentConfig::load(path).stage("config")?),
        None => None,
    };
    let store_path = args
        .store
        .clone()
        .or_else(|| {
            config
                .as_ref()
                .zip(args.config.as_ref())
                .and_then(|(c, p)| c.store_path(p))
        })
        .ok_or_else(|| CliError::config("store", "give --store or a config with a store"))
        .stage("config")?;
    let query = match &args.query {
        Some(text) => parse_query(text).stage("config")?,
        None => config
            .as_ref()
            .and_then(|c| c.retrieval.as_ref())
            .map(|r| r.query.clone())
            .ok_or_else(|| CliError::config("query", "give --query or a config with one"))
            .stage("config")?,
    };
    let m = args
        .m
        .or_else(|| config.as_ref().and_then(|c| c.retrieval.as_ref()).map(|r| r.m))
        .unwrap_or(1);
    let store: DataStore<f64> = DataStore::open(&store_path).stage("retrieve")?;
    let result = retrieve(&store, &query, m).stage("retrieve")?;
    let matches: Vec<serde_json::Value> = result
        .records
        .iter()
        .map(|r| {
            serde_json::json!({
                "id": r.id,
                "score": record_score(r, &result.query),
                "caption_embedding": r.caption_embedding,
                "item_embedding": r.item_embedding,
            })
        })
        .collect();
    let report = serde_json::json!({
        "store": store_path.display().to_string(),
        "query": result.query,
        "m": m,
        "matches": matches,
        "mean_item_embedding": result.mean_item_embedding,
    });
    let text = serde_json::to_string_pretty(&report).stage("retrieve")?;
    println!("{text}");
    Ok(())
}

fn parse_query(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| CliError::config("query", format!("could not parse {part:?} as a number")))
        })
        .collect()
}

fn unlearn_record(args: UnlearnArgs) -> Result<(), Failure> {
    let mut store: DataStore<f64> = DataStore::open(&args.store).stage("unlearn")?;
    unlearn(&mut store, &args.id).stage("unlearn")?;
    let report = serde_json::json!({
        "store": args.store.display().to_string(),
        "removed": args.id,
        "remaining": store.len(),
    });
    println!("{report}");
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    let mut shared_samples: Option<usize> = None;
    let mut out_dir: Option<PathBuf> = None;
    for path in &args.configs {
        let mut config = ExperimentConfig::load(path).stage("config")?;
        config.apply(&Overrides {
            samples: args.samples,
            seed: args.seed,
            output_dir: args.out.clone(),
            ..Overrides::default()
        });
        match shared_samples {
            None => shared_samples = Some(config.samples),
            Some(n) if n != config.samples => {
                return Err(CliError::config(
                    "samples",
                    format!(
                        "bench configs must share the sample count; {} has {} instead of {n}",
                        path.display(),
                        config.samples
                    ),
                ))
                .stage("config");
            }
            Some(_) => {}
        }
        config.validate(path).stage("config")?;
        if out_dir.is_none() {
            out_dir = Some(resolve_out_dir(&config));
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let scenario = Scenario::build(config, path).stage("scenario")?;
        let models = scenario.models().stage("scenario")?;
        let row = bench_scenario(&label, &scenario, &models).stage("bench")?;
        println!(
            "bench {} [{}]: {} samples in {:.3} s",
            row.config, row.method, row.samples, row.wall_secs
        );
        rows.push(row);
    }
    let out_dir = out_dir.expect("at least one config is required");
    fs::create_dir_all(&out_dir).stage("write")?;
    let path = out_dir.join("bench.csv");
    output::write_bench_csv(&path, &rows).stage("write")?;
    println!("wrote {}", path.display());
    Ok(())
}
