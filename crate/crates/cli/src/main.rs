use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ksave::experiments::{calibrate, read_rows, write_rows, ExperimentConfig, Whitening};
use ksave::fieldsim::{FieldDataset, InnovationLaw, LatticeShape, LinkId, ModelSpec};
use ksave::kernels::{build_order_k_kernel, kernel_moment_check, KernelSpec, DEFAULT_EXPERIMENT_RADIUS};
use ksave::oracle::write_fixtures;
use ksave::{edr, fit_rate, run_sweep, save_matrices, validate_schedule, BandwidthSchedule, Error};

#[derive(Parser, Debug)]
#[command(name = "ksave", version, about = "Kernel SAVE on lattice data: simulate, estimate, sweep")]
struct Cli {
    /// JSON input whose meaning depends on the subcommand (model, kernel or
    /// experiment config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (simulate: field seed; sweep and calibrate: truth seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 = all cores. SAVE_THREADS overrides this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Whiten with the model's exact mean and covariance.
    #[arg(long, global = true)]
    oracle_whitening: bool,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print a preset model specification as JSON.
    Model(ModelArgs),
    /// Simulate a lattice dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate EDR directions from a dataset CSV.
    Estimate(EstimateArgs),
    /// Run an experiment sweep and write rows CSV.
    Sweep(SweepArgs),
    /// Fit the log-log rate of a metric from rows CSV.
    Rate(RateArgs),
    /// Certify kernel moments, support and Lipschitz bound.
    KernelCheck(KernelArgs),
    /// Check a bandwidth schedule against the admissibility conditions.
    ValidateSchedule(ScheduleArgs),
    /// Run the 50-seed pilot at 64x64 and report 95th-percentile thresholds.
    Calibrate(CalibrateArgs),
    /// Regenerate the oracle equivalence fixtures into a directory.
    MakeFixtures,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "linear")]
    link: String,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Moving-average radius r.
    #[arg(long, default_value_t = 0)]
    radius: usize,
    #[arg(long, default_value = "bounded_uniform")]
    law: String,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "16x16")]
    shape: String,
}

#[derive(Args, Debug)]
struct BandwidthArgs {
    #[arg(long, default_value_t = 0.35)]
    c1: f64,
    #[arg(long, default_value_t = 0.05)]
    c2: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Dataset CSV.
    #[arg(long)]
    input: PathBuf,
    /// Number of directions; defaults to the model's when --config is given.
    #[arg(long)]
    n_dirs: Option<usize>,
    #[command(flatten)]
    schedule: BandwidthArgs,
    #[arg(long, default_value_t = DEFAULT_EXPERIMENT_RADIUS)]
    kernel_radius: f64,
    /// Print the eigenvalue table to standard error.
    #[arg(long)]
    scree: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Write NA for runtime_ms so reruns are byte-identical.
    #[arg(long)]
    no_runtime: bool,
}

#[derive(Args, Debug)]
struct RateArgs {
    /// Rows CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "gamma_err_fro")]
    metric: String,
}

#[derive(Args, Debug)]
struct KernelArgs {
    /// Build an order-k kernel instead of the named one.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_EXPERIMENT_RADIUS)]
    radius: f64,
    /// `epanechnikov`, `epanechnikov-unit` or `default`.
    #[arg(long, default_value = "epanechnikov")]
    name: String,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[command(flatten)]
    schedule: BandwidthArgs,
    /// Lattice dimension.
    #[arg(long = "L", alias = "lattice-dim", default_value_t = 2)]
    lattice_dim: usize,
    #[arg(long, default_value_t = 20.0)]
    theta: f64,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long, default_values_t = vec!["gamma_err_fro".to_string()])]
    metric: Vec<String>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn thread_count(flag: usize) -> CliResult<usize> {
    match std::env::var("SAVE_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Validation(format!("SAVE_THREADS must be a non-negative integer, got '{v}'"))),
        Err(_) => Ok(flag),
    }
}

/// Returns `Ok(false)` when a report was produced but did not pass.
fn run(cli: Cli) -> CliResult<bool> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Validation(e.to_string()))?;

    match &cli.command {
        Command::Model(a) => {
            let model = model_from(&cli, a)?;
            emit_json(&cli, &model)?;
            Ok(true)
        }
        Command::Simulate(a) => simulate(&cli, a),
        Command::Estimate(a) => estimate(&cli, a),
        Command::Sweep(a) => sweep(&cli, a),
        Command::Rate(a) => rate(&cli, a),
        Command::KernelCheck(a) => kernel_check(&cli, a),
        Command::ValidateSchedule(a) => schedule_check(&cli, a),
        Command::Calibrate(a) => pilot(&cli, a),
        Command::MakeFixtures => {
            let dir = cli.output.as_deref().ok_or_else(|| Failure::Validation("--output DIR is required".into()))?;
            let records = write_fixtures(dir)?;
            eprintln!("wrote {} fixtures to {}", records.len(), dir.display());
            Ok(true)
        }
    }
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_json<T: serde::Serialize>(cli: &Cli, value: &T) -> CliResult<()> {
    let mut out = output(cli.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Failure::Validation(format!("unknown {what} '{value}'")))
}

fn model_from(cli: &Cli, args: &ModelArgs) -> CliResult<ModelSpec> {
    let model = match &cli.config {
        Some(p) => read_json::<ModelSpec>(p)?,
        None => {
            let link: LinkId = parse_enum("link", &args.link)?;
            let law: InnovationLaw = parse_enum("innovation law", &args.law)?;
            ModelSpec::preset(link, args.d, args.radius, law)?
        }
    };
    model.validate()?;
    Ok(model)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CliResult<bool> {
    let model = model_from(cli, &a.model)?;
    let shape: LatticeShape = a.shape.parse()?;
    let data = ksave::simulate_field(&model, &shape, cli.seed.unwrap_or(0))?;
    let mut out = output(cli.output.as_deref())?;
    data.write_csv(&mut out)?;
    out.flush()?;
    Ok(true)
}

fn estimate(cli: &Cli, a: &EstimateArgs) -> CliResult<bool> {
    let file = File::open(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))?;
    let data = FieldDataset::read_csv(BufReader::new(file))?;
    let model: Option<ModelSpec> = cli.config.as_deref().map(read_json).transpose()?;
    let whitening = if cli.oracle_whitening {
        let model = model
            .as_ref()
            .ok_or_else(|| Failure::Validation("--oracle-whitening needs the model via --config".into()))?;
        edr::whiten_oracle(&data.x, model)?
    } else {
        edr::whiten(&data.x)?
    };
    let n_dirs = a
        .n_dirs
        .or(model.as_ref().map(|m| m.n_dirs))
        .ok_or_else(|| Failure::Validation("--n-dirs is required without --config".into()))?;
    let s = &a.schedule;
    let schedule = BandwidthSchedule::new(s.c1, s.c2, s.k)?;
    let kernel = build_order_k_kernel(s.k, a.kernel_radius)?;
    let mats = save_matrices(&whitening.z_hat, &data.y, &kernel, &schedule)?;
    let est = edr::edr_directions(&mats, &whitening, n_dirs)?;
    if a.scree {
        eprint!("{}", est.scree());
    }
    emit_json(cli, &est)?;
    Ok(true)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CliResult<bool> {
    let path = cli.config.as_deref().ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let mut cfg: ExperimentConfig = read_json(path)?;
    if cli.oracle_whitening {
        cfg.whitening = Whitening::Oracle;
    }
    if let Some(seed) = cli.seed {
        cfg.truth_seed = seed;
    }
    if a.no_runtime {
        cfg.record_runtime = false;
    }
    if let Some(out) = &cli.output {
        cfg.output_path = Some(out.clone());
    }
    let outcome = run_sweep(&cfg)?;
    if cfg.output_path.is_none() {
        let mut out = output(None)?;
        write_rows(&mut out, &outcome.rows, cfg.model.d)?;
        out.flush()?;
    }
    for w in &outcome.meta.warnings {
        eprintln!("warning: {w}");
    }
    Ok(true)
}

fn rate(cli: &Cli, a: &RateArgs) -> CliResult<bool> {
    let file = File::open(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))?;
    let rows = read_rows(BufReader::new(file))?;
    let fit = fit_rate(&rows, &a.metric)?;
    emit_json(cli, &fit)?;
    Ok(true)
}

fn kernel_check(cli: &Cli, a: &KernelArgs) -> CliResult<bool> {
    let spec = match (&cli.config, a.order) {
        (Some(p), _) => read_json::<KernelSpec>(p)?,
        (None, Some(k)) => build_order_k_kernel(k, a.radius)?,
        (None, None) => match a.name.as_str() {
            "epanechnikov" => KernelSpec::epanechnikov(),
            "epanechnikov-unit" => KernelSpec::epanechnikov_unit(),
            "default" => KernelSpec::experiment_default(),
            other => return Err(Failure::Validation(format!("unknown kernel '{other}'"))),
        },
    };
    let report = kernel_moment_check(&spec);
    emit_json(cli, &report)?;
    Ok(report.pass)
}

fn schedule_check(cli: &Cli, a: &ScheduleArgs) -> CliResult<bool> {
    let s = &a.schedule;
    let schedule = BandwidthSchedule { c1: s.c1, c2: s.c2, k: s.k };
    let report = validate_schedule(&schedule, a.lattice_dim, a.theta);
    emit_json(cli, &report)?;
    Ok(report.pass)
}

fn pilot(cli: &Cli, a: &CalibrateArgs) -> CliResult<bool> {
    let path = cli.config.as_deref().ok_or_else(|| Failure::Validation("--config is required".into()))?;
    let mut cfg: ExperimentConfig = read_json(path)?;
    if cli.oracle_whitening {
        cfg.whitening = Whitening::Oracle;
    }
    if let Some(seed) = cli.seed {
        cfg.truth_seed = seed;
    }
    let metrics: Vec<&str> = a.metric.iter().map(String::as_str).collect();
    let thresholds = calibrate(&cfg, &metrics)?;
    emit_json(cli, &thresholds)?;
    Ok(true)
}
