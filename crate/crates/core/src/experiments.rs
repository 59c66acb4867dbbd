//! Simulation sweeps over lattice sizes and seeds, rate fits and pilot
//! threshold calibration.
//!
//! Rows CSV schema (header always present, reals in `{:.16e}`, undefined
//! values written as `NA`):
//!
//! ```text
//! dims,n_hat,seed,c1,c2,k,b_n,e_n,gamma_err_fro,subspace_dist,beta_err,
//! sup_f,sup_m,sup_M,lambda_1,...,lambda_d,runtime_ms,status
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edr::{self, WhiteningResult};
use crate::error::{Error, Result};
use crate::fieldsim::{
    fmt_real, population_truth_with_slices, simulate_field, ConditionalMoments, LatticeShape, LinkId, ModelSpec,
    PopulationTruth, DEFAULT_SLICES, MIN_MC_SAMPLES,
};
use crate::kernels::{build_order_k_kernel, KernelSpec, DEFAULT_EXPERIMENT_RADIUS};
use crate::linalg;
use crate::oracle::gamma_error;
use crate::save_core::{save_matrices, smooth_on_grid, validate_schedule, BandwidthSchedule, ScheduleReport};

pub const DEFAULT_TRUTH_SAMPLES: usize = 1_000_000;
pub const DEFAULT_TRUTH_SEED: u64 = 20_260_101;
pub const DEFAULT_THETA: f64 = 20.0;
pub const DEFAULT_GRID_POINTS: usize = 201;
/// Seeds and lattice used by the pilot calibration protocol.
pub const PILOT_SEEDS: std::ops::Range<u64> = 1000..1050;
pub const PILOT_SIDE: usize = 64;
pub const PILOT_PERCENTILE: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSource {
    /// Explicit polynomial kernel.
    Spec { spec: KernelSpec },
    /// Legendre-corrected Epanechnikov kernel of the given order and radius.
    Build { order_k: usize, support_radius: f64 },
    /// `epanechnikov` or `default`.
    Named { name: String },
}

impl Default for KernelSource {
    fn default() -> Self {
        KernelSource::Build { order_k: 3, support_radius: DEFAULT_EXPERIMENT_RADIUS }
    }
}

impl KernelSource {
    pub fn resolve(&self) -> Result<KernelSpec> {
        let spec = match self {
            KernelSource::Spec { spec } => spec.clone(),
            KernelSource::Build { order_k, support_radius } => build_order_k_kernel(*order_k, *support_radius)?,
            KernelSource::Named { name } => match name.as_str() {
                "epanechnikov" => KernelSpec::epanechnikov(),
                "default" => KernelSpec::experiment_default(),
                other => return Err(Error::InvalidKernel(format!("unknown kernel name '{other}'"))),
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GammaError,
    SubspaceDistance,
    Supnorm,
    Eigenvalues,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::GammaError, Metric::SubspaceDistance, Metric::Supnorm, Metric::Eigenvalues];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    #[default]
    Empirical,
    Oracle,
}

fn default_metrics() -> BTreeSet<Metric> {
    Metric::ALL.into_iter().collect()
}
fn default_truth_samples() -> usize {
    DEFAULT_TRUTH_SAMPLES
}
fn default_truth_seed() -> u64 {
    DEFAULT_TRUTH_SEED
}
fn default_slices() -> usize {
    DEFAULT_SLICES
}
fn default_theta() -> f64 {
    DEFAULT_THETA
}
fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub shapes: Vec<LatticeShape>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub schedule: BandwidthSchedule,
    #[serde(default)]
    pub kernel: KernelSource,
    #[serde(default = "default_metrics")]
    pub metrics: BTreeSet<Metric>,
    #[serde(default)]
    pub whitening: Whitening,
    #[serde(default = "default_truth_samples")]
    pub truth_samples: usize,
    #[serde(default = "default_truth_seed")]
    pub truth_seed: u64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Evaluation points for the sup-norm diagnostics.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// When false `runtime_ms` is written as `NA`, which makes reruns
    /// byte-identical.
    #[serde(default = "default_true")]
    pub record_runtime: bool,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, shapes: Vec<LatticeShape>, seeds: Vec<u64>) -> Self {
        Self {
            model,
            shapes,
            seeds,
            schedule: BandwidthSchedule::default(),
            kernel: KernelSource::default(),
            metrics: default_metrics(),
            whitening: Whitening::Empirical,
            truth_samples: DEFAULT_TRUTH_SAMPLES,
            truth_seed: DEFAULT_TRUTH_SEED,
            slices: DEFAULT_SLICES,
            theta: DEFAULT_THETA,
            grid_points: DEFAULT_GRID_POINTS,
            record_runtime: true,
            output_path: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.check()?;
        self.kernel.resolve()?;
        if self.shapes.is_empty() {
            return Err(Error::InvalidArgument("no lattice shapes given".into()));
        }
        for s in &self.shapes {
            if s.lattice_dim() != self.model.lattice_dim {
                return Err(Error::DimensionMismatch { expected: self.model.lattice_dim, found: s.lattice_dim() });
            }
        }
        if self.shapes.windows(2).any(|w| w[0].n_hat() >= w[1].n_hat()) {
            return Err(Error::InvalidArgument("shapes must be strictly increasing in n_hat".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("no seeds given".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("seeds must be distinct".into()));
        }
        if self.truth_samples < MIN_MC_SAMPLES {
            return Err(Error::InvalidArgument(format!("truth_samples must be at least {MIN_MC_SAMPLES}")));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidArgument("grid_points must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub dims: String,
    pub n_hat: usize,
    pub seed: u64,
    pub c1: f64,
    pub c2: f64,
    pub k: usize,
    pub b_n: f64,
    pub e_n: f64,
    pub gamma_err_fro: Option<f64>,
    pub subspace_dist: Option<f64>,
    /// Largest sign-aligned error of the normalized directions.
    pub beta_err: Option<f64>,
    pub sup_f: Option<f64>,
    pub sup_m: Option<f64>,
    pub sup_big_m: Option<f64>,
    /// Eigenvalues of `Gamma_hat`, descending; empty when not computed.
    pub lambdas: Vec<f64>,
    pub runtime_ms: Option<f64>,
    /// `ok` or `failed: <reason>`.
    pub status: String,
}

impl ExperimentRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Value of a named numeric column.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "gamma_err_fro" => self.gamma_err_fro,
            "subspace_dist" => self.subspace_dist,
            "beta_err" => self.beta_err,
            "sup_f" => self.sup_f,
            "sup_m" => self.sup_m,
            "sup_M" => self.sup_big_m,
            "runtime_ms" => self.runtime_ms,
            "b_n" => Some(self.b_n),
            "e_n" => Some(self.e_n),
            _ => {
                let j: usize = name.strip_prefix("lambda_")?.parse().ok()?;
                self.lambdas.get(j.checked_sub(1)?).copied()
            }
        }
    }
}

pub fn csv_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "dims",
        "n_hat",
        "seed",
        "c1",
        "c2",
        "k",
        "b_n",
        "e_n",
        "gamma_err_fro",
        "subspace_dist",
        "beta_err",
        "sup_f",
        "sup_m",
        "sup_M",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=d).map(|j| format!("lambda_{j}")));
    h.push("runtime_ms".into());
    h.push("status".into());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_real)
}

fn row_record(row: &ExperimentRow, d: usize) -> Vec<String> {
    let mut r = vec![
        row.dims.clone(),
        row.n_hat.to_string(),
        row.seed.to_string(),
        fmt_real(row.c1),
        fmt_real(row.c2),
        row.k.to_string(),
        fmt_real(row.b_n),
        fmt_real(row.e_n),
        opt(row.gamma_err_fro),
        opt(row.subspace_dist),
        opt(row.beta_err),
        opt(row.sup_f),
        opt(row.sup_m),
        opt(row.sup_big_m),
    ];
    if row.lambdas.len() == d {
        r.extend(row.lambdas.iter().map(|v| fmt_real(*v)));
    } else {
        r.extend(std::iter::repeat_n("NA".to_string(), d));
    }
    r.push(opt(row.runtime_ms));
    r.push(row.status.clone());
    r
}

/// Incremental CSV writer for sweep rows.
pub struct RowWriter<W: Write> {
    inner: csv::Writer<W>,
    d: usize,
}

impl<W: Write> RowWriter<W> {
    pub fn new(writer: W, d: usize) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        inner.write_record(csv_header(d))?;
        Ok(Self { inner, d })
    }

    pub fn write(&mut self, row: &ExperimentRow) -> Result<()> {
        self.inner.write_record(row_record(row, self.d))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_rows<W: Write>(writer: W, rows: &[ExperimentRow], d: usize) -> Result<()> {
    let mut w = RowWriter::new(writer, d)?;
    for row in rows {
        w.write(row)?;
    }
    w.flush()
}

pub fn read_rows<R: Read>(reader: R) -> Result<Vec<ExperimentRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse(format!("rows CSV lacks column '{name}'")))
    };
    let lambda_cols: Vec<usize> =
        (1..).map_while(|j| header.iter().position(|h| *h == format!("lambda_{j}"))).collect();
    let idx: Vec<usize> = [
        "dims",
        "n_hat",
        "seed",
        "c1",
        "c2",
        "k",
        "b_n",
        "e_n",
        "gamma_err_fro",
        "subspace_dist",
        "beta_err",
        "sup_f",
        "sup_m",
        "sup_M",
        "runtime_ms",
        "status",
    ]
    .iter()
    .map(|n| col(n))
    .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let real = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| Error::Parse(format!("row {}: bad value '{}'", line + 1, field(i))))
        };
        let optional = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Parse(format!("row {}: bad value '{s}'", line + 1)))
            }
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| Error::Parse(format!("row {}: bad integer '{}'", line + 1, field(i))))
        };
        let lambdas: Vec<Option<f64>> =
            lambda_cols.iter().map(|&c| optional(rec.get(c).unwrap_or(""))).collect::<Result<_>>()?;
        rows.push(ExperimentRow {
            dims: field(0).to_string(),
            n_hat: int(1)? as usize,
            seed: int(2)?,
            c1: real(3)?,
            c2: real(4)?,
            k: int(5)? as usize,
            b_n: real(6)?,
            e_n: real(7)?,
            gamma_err_fro: optional(field(8))?,
            subspace_dist: optional(field(9))?,
            beta_err: optional(field(10))?,
            sup_f: optional(field(11))?,
            sup_m: optional(field(12))?,
            sup_big_m: optional(field(13))?,
            lambdas: lambdas.into_iter().collect::<Option<Vec<_>>>().unwrap_or_default(),
            runtime_ms: optional(field(14))?,
            status: field(15).to_string(),
        });
    }
    Ok(rows)
}

/// Sweep metadata written next to the rows CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepMeta {
    pub schedule_report: ScheduleReport,
    pub warnings: Vec<String>,
    pub kernel: KernelSpec,
    pub truth_gamma: Vec<Vec<f64>>,
    pub failed_rows: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ExperimentRow>,
    pub meta: SweepMeta,
}

pub fn meta_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Everything shared by the cells of one sweep.
struct Context<'a> {
    config: &'a ExperimentConfig,
    kernel: KernelSpec,
    truth: PopulationTruth,
    /// Population `beta_j = Sigma^{-1/2} tau_j` for the leading eigenvectors.
    beta_pop: Option<DMatrix<f64>>,
    grid: Vec<f64>,
}

fn evaluation_grid(moments: &ConditionalMoments, points: usize) -> Vec<f64> {
    let (lo, hi) = match moments {
        ConditionalMoments::IndependentGaussian { sd, .. } => (-2.5 * sd, 2.5 * sd),
        ConditionalMoments::Table { y, .. } => {
            let (a, b) = (y[0], y[y.len() - 1]);
            let pad = 0.1 * (b - a);
            (a + pad, b - pad)
        }
    };
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Simulates, whitens, estimates and scores every `(shape, seed)` cell.
/// Rows are ordered by `(n_hat, seed)`; when `output_path` is set they are
/// written as each lattice size completes, and sweep metadata goes to
/// `<output_path>.meta.json`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let kernel = config.kernel.resolve()?;
    let report = validate_schedule(&config.schedule, config.model.lattice_dim, config.theta);
    let mut warnings = Vec::new();
    if !report.pass {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        let msg = format!("bandwidth schedule violates admissibility conditions: {}", failed.join(", "));
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let truth = population_truth_with_slices(&config.model, config.truth_samples, config.truth_seed, config.slices)?;
    let beta_pop = match config.model.link {
        LinkId::Independent => None,
        _ => {
            let eig = linalg::sym_eigen_desc(&truth.gamma)?;
            let tau = eig.vectors.columns(0, config.model.n_dirs).into_owned();
            Some(&truth.sigma_inv_sqrt * tau)
        }
    };
    let grid = evaluation_grid(&truth.moments, config.grid_points);
    let ctx = Context { config, kernel: kernel.clone(), truth, beta_pop, grid };

    let d = config.model.d;
    let mut writer = match &config.output_path {
        Some(p) => Some(RowWriter::new(BufWriter::new(File::create(p)?), d)?),
        None => None,
    };
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();

    let mut rows = Vec::with_capacity(seeds.len() * config.shapes.len());
    for shape in &config.shapes {
        let block: Vec<ExperimentRow> = seeds.par_iter().map(|&seed| run_cell(&ctx, shape, seed)).collect();
        if let Some(w) = writer.as_mut() {
            for row in &block {
                w.write(row)?;
            }
            w.flush()?;
        }
        rows.extend(block);
    }

    let failed_rows = rows.iter().filter(|r| !r.is_ok()).count();
    if failed_rows > 0 {
        warnings.push(format!("{failed_rows} cell(s) failed; see the status column"));
    }
    let meta = SweepMeta {
        schedule_report: report,
        warnings,
        kernel,
        truth_gamma: ctx.truth.gamma.row_iter().map(|r| r.iter().copied().collect()).collect(),
        failed_rows,
        config: config.clone(),
    };
    if let Some(p) = &config.output_path {
        std::fs::write(meta_path(p), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(SweepOutcome { rows, meta })
}

struct CellMetrics {
    gamma_err: Option<f64>,
    subspace: Option<f64>,
    beta_err: Option<f64>,
    sup: Option<(f64, f64, f64)>,
    lambdas: Vec<f64>,
}

fn run_cell(ctx: &Context<'_>, shape: &LatticeShape, seed: u64) -> ExperimentRow {
    let cfg = ctx.config;
    let n = shape.n_hat();
    let start = Instant::now();
    let result = evaluate_cell(ctx, shape, seed);
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut row = ExperimentRow {
        dims: shape.to_string(),
        n_hat: n,
        seed,
        c1: cfg.schedule.c1,
        c2: cfg.schedule.c2,
        k: cfg.schedule.k,
        b_n: cfg.schedule.bandwidth(n),
        e_n: cfg.schedule.floor(n),
        gamma_err_fro: None,
        subspace_dist: None,
        beta_err: None,
        sup_f: None,
        sup_m: None,
        sup_big_m: None,
        lambdas: Vec::new(),
        runtime_ms: cfg.record_runtime.then_some(elapsed),
        status: "ok".into(),
    };
    match result {
        Ok(m) => {
            row.gamma_err_fro = m.gamma_err;
            row.subspace_dist = m.subspace;
            row.beta_err = m.beta_err;
            if let Some((f, mm, big)) = m.sup {
                row.sup_f = Some(f);
                row.sup_m = Some(mm);
                row.sup_big_m = Some(big);
            }
            row.lambdas = m.lambdas;
        }
        Err(e) => {
            log::warn!("cell {shape} seed {seed} failed: {e}");
            row.status = format!("failed: {e}");
        }
    }
    row
}

fn evaluate_cell(ctx: &Context<'_>, shape: &LatticeShape, seed: u64) -> Result<CellMetrics> {
    let cfg = ctx.config;
    let data = simulate_field(&cfg.model, shape, seed)?;
    let whitening: WhiteningResult = match cfg.whitening {
        Whitening::Empirical => edr::whiten(&data.x)?,
        Whitening::Oracle => edr::whiten_oracle(&data.x, &cfg.model)?,
    };
    let n = shape.n_hat();
    let mats = save_matrices(&whitening.z_hat, &data.y, &ctx.kernel, &cfg.schedule)?;
    let wants = |m: Metric| cfg.metrics.contains(&m);

    let gamma_err = if wants(Metric::GammaError) { Some(gamma_error(&mats, &ctx.truth.gamma)?) } else { None };

    let needs_eigen = wants(Metric::Eigenvalues) || wants(Metric::SubspaceDistance);
    let (mut subspace, mut beta_err, mut lambdas) = (None, None, Vec::new());
    if needs_eigen {
        let est = edr::edr_directions(&mats, &whitening, cfg.model.n_dirs)?;
        if wants(Metric::SubspaceDistance) {
            if let (Some(b_true), Some(b_pop)) = (&ctx.truth.edr_beta, &ctx.beta_pop) {
                subspace = Some(edr::subspace_distance(&est.beta_hat, b_true)?);
                let errs = edr::aligned_vector_errors(&est.beta_hat, b_pop)?;
                beta_err = Some(errs.into_iter().fold(0.0, f64::max));
            }
        }
        if wants(Metric::Eigenvalues) {
            lambdas = est.eigenvalues;
        }
    }

    let sup = if wants(Metric::Supnorm) {
        let b = cfg.schedule.bandwidth(n);
        let e = cfg.schedule.floor(n);
        let sites = smooth_on_grid(&whitening.z_hat, &data.y, &ctx.grid, &ctx.kernel, b, e)?;
        let rep = edr::supnorm_errors(&sites, &ctx.truth.moments, &ctx.grid)?;
        Some((rep.sup_f, rep.sup_m, rep.sup_big_m))
    } else {
        None
    };
    Ok(CellMetrics { gamma_err, subspace, beta_err, sup, lambdas })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n_hat: usize,
    pub median: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<RatePoint>,
}

/// Median of a non-empty slice (mean of the two middle values for even
/// length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Linear-interpolation percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per-`n_hat` medians of `metric` over successful rows.
pub fn medians_by_size(rows: &[ExperimentRow], metric: &str) -> Vec<RatePoint> {
    let mut groups: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for row in rows.iter().filter(|r| r.is_ok()) {
        if let Some(v) = row.metric(metric) {
            groups.entry(row.n_hat).or_default().push(v);
        }
    }
    groups.into_iter().map(|(n_hat, vals)| RatePoint { n_hat, median: median(&vals), seeds: vals.len() }).collect()
}

/// Least-squares fit of `log(median metric)` on `log(n_hat)`.
pub fn fit_rate(rows: &[ExperimentRow], metric: &str) -> Result<RateFit> {
    let points = medians_by_size(rows, metric);
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least 2 lattice sizes with '{metric}', got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.seeds < 5) {
        return Err(Error::InsufficientData(format!("only {} seeds at n_hat = {}; need 5", p.seeds, p.n_hat)));
    }
    if let Some(p) = points.iter().find(|p| !(p.median > 0.0)) {
        return Err(Error::InsufficientData(format!("median of '{metric}' at n_hat = {} is not positive", p.n_hat)));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n_hat as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(RateFit { metric: metric.to_string(), slope, intercept: my - slope * mx, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotThreshold {
    pub metric: String,
    pub dims: String,
    pub percentile: f64,
    pub threshold: f64,
    pub median: f64,
    pub seeds: Vec<u64>,
}

/// Pilot calibration: runs `config` on the 64x64 lattice for seeds
/// 1000..1049 and freezes the 95th percentile of each requested metric.
pub fn calibrate(config: &ExperimentConfig, metrics: &[&str]) -> Result<Vec<PilotThreshold>> {
    let mut cfg = config.clone();
    cfg.shapes = vec![LatticeShape::square(PILOT_SIDE, cfg.model.lattice_dim)];
    cfg.seeds = PILOT_SEEDS.collect();
    cfg.output_path = None;
    let out = run_sweep(&cfg)?;
    metrics
        .iter()
        .map(|&metric| {
            let vals: Vec<f64> = out.rows.iter().filter(|r| r.is_ok()).filter_map(|r| r.metric(metric)).collect();
            if vals.len() < cfg.seeds.len() / 2 {
                return Err(Error::InsufficientData(format!("pilot produced {} values of '{metric}'", vals.len())));
            }
            Ok(PilotThreshold {
                metric: metric.to_string(),
                dims: cfg.shapes[0].to_string(),
                percentile: PILOT_PERCENTILE,
                threshold: percentile(&vals, PILOT_PERCENTILE),
                median: median(&vals),
                seeds: cfg.seeds.clone(),
            })
        })
        .collect()
}
