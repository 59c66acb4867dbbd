//! Stationary m-dependent random fields on rectangular lattices.
//!
//! The predictor field is a spatial moving average of i.i.d. unit-variance
//! innovations, `X_i = mu + A sum_j a_j eta_{i+j}`, taken over the offsets
//! `j` with `|j|_inf <= r`. Sites more than `2r` apart share no innovation,
//! so the field is `2r`-dependent and hence strongly mixing with a mixing
//! coefficient that is exactly zero beyond distance `2r`. Innovations are
//! drawn on the observation window dilated by `r` in every direction so
//! that each observed site sees a full window.
//!
//! The response is `Y_i = g(B^T (X_i - mu), eps_i)` with Gaussian `eps`
//! drawn from an RNG stream separate from the innovations.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_eval, KernelSpec};
use crate::linalg;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Rectangular observation region `{1..n_1} x ... x {1..n_L}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LatticeShape {
    dims: Vec<usize>,
}

impl LatticeShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("lattice needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero-length side in {dims:?}")));
        }
        Ok(Self { dims })
    }

    pub fn square(side: usize, lattice_dim: usize) -> Self {
        Self::new(vec![side; lattice_dim]).expect("positive side")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn lattice_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn n_hat(&self) -> usize {
        self.dims.iter().product()
    }

    /// Zero-based multi-index of the `flat`-th site in row-major order.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for (slot, &n) in idx.iter_mut().zip(&self.dims).rev() {
            *slot = flat % n;
            flat /= n;
        }
        idx
    }
}

impl TryFrom<Vec<usize>> for LatticeShape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Self::new(dims)
    }
}

impl From<LatticeShape> for Vec<usize> {
    fn from(s: LatticeShape) -> Self {
        s.dims
    }
}

impl fmt::Display for LatticeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|n| n.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for LatticeShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("bad lattice shape `{s}`: {e}")))?;
        Self::new(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkId {
    /// `Y = sigma eps`: the response carries no information about `X`.
    Independent,
    /// `Y = u_1 + sigma eps`.
    Linear,
    /// `Y = u_1^2 + sigma eps`.
    QuadraticSingleIndex,
    /// `Y = u_1 + u_2^2 + sigma eps`.
    TwoIndex,
}

impl LinkId {
    pub const ALL: [LinkId; 4] = [LinkId::Independent, LinkId::Linear, LinkId::QuadraticSingleIndex, LinkId::TwoIndex];

    pub fn name(self) -> &'static str {
        match self {
            LinkId::Independent => "independent",
            LinkId::Linear => "linear",
            LinkId::QuadraticSingleIndex => "quadratic_single_index",
            LinkId::TwoIndex => "two_index",
        }
    }

    /// Number of indices the link reads.
    pub fn n_indices(self) -> Option<usize> {
        match self {
            LinkId::Independent => None,
            LinkId::Linear | LinkId::QuadraticSingleIndex => Some(1),
            LinkId::TwoIndex => Some(2),
        }
    }

    fn apply(self, u: &[f64], noise: f64) -> f64 {
        match self {
            LinkId::Independent => noise,
            LinkId::Linear => u[0] + noise,
            LinkId::QuadraticSingleIndex => u[0] * u[0] + noise,
            LinkId::TwoIndex => u[0] + u[1] * u[1] + noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnovationLaw {
    /// Uniform on `[-sqrt 3, sqrt 3]`: unit variance, bounded.
    BoundedUniform,
    /// Standard normal. Unbounded, so `|Z| <= D` does not hold.
    Gaussian,
}

impl InnovationLaw {
    pub const ALL: [InnovationLaw; 2] = [InnovationLaw::BoundedUniform, InnovationLaw::Gaussian];

    pub fn name(self) -> &'static str {
        match self {
            InnovationLaw::BoundedUniform => "bounded_uniform",
            InnovationLaw::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaTap {
    pub offset: Vec<i64>,
    pub weight: f64,
}

/// Moving-average weights equal to one on every offset with `|j|_inf <= r`.
pub fn uniform_ma_weights(radius: usize, lattice_dim: usize) -> Vec<MaTap> {
    let side = 2 * radius + 1;
    let count = side.pow(lattice_dim as u32);
    (0..count)
        .map(|mut flat| {
            let mut offset = vec![0i64; lattice_dim];
            for slot in offset.iter_mut().rev() {
                *slot = (flat % side) as i64 - radius as i64;
                flat /= side;
            }
            MaTap { offset, weight: 1.0 }
        })
        .collect()
}

/// Data-generating model. Matrices are stored row-major as nested lists so
/// that the config file stays readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Predictor dimension `d`.
    pub d: usize,
    /// Structural dimension `N`.
    pub n_dirs: usize,
    /// Columns `beta_1, ..., beta_N`, each of length `d`.
    pub b_true: Vec<Vec<f64>>,
    pub link: LinkId,
    pub noise_sd: f64,
    pub dependence_radius: usize,
    pub innovation_law: InnovationLaw,
    pub ma_weights: Vec<MaTap>,
    /// Lattice dimension `L` the MA offsets live in.
    pub lattice_dim: usize,
    /// `d x d` mixing matrix `A`, row-major.
    pub mixing: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl ModelSpec {
    /// Ready-made models on a 2-D lattice with `d` predictors.
    ///
    /// The mixing matrix is symmetric positive definite, so the whitened
    /// predictor `Z` has independent components. The true directions are
    /// `B = Sigma^{-1/2} T S` where `T` holds the first `N` coordinate axes
    /// and `S` scales each index; with these scales the response density
    /// stays well above the truncation floor at desk-scale sample sizes.
    pub fn preset(link: LinkId, d: usize, radius: usize, law: InnovationLaw) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidModel(format!("d must be >= 2, got {d}")));
        }
        let (scales, noise_sd): (Vec<f64>, f64) = match link {
            LinkId::Independent => (vec![1.0], 0.1),
            LinkId::Linear => (vec![0.25], 0.0),
            LinkId::QuadraticSingleIndex => (vec![0.3], 0.02),
            LinkId::TwoIndex => {
                if d < 3 {
                    return Err(Error::InvalidModel("two_index needs d >= 3".into()));
                }
                (vec![0.25, 0.3], 0.02)
            }
        };
        let lattice_dim = 2;
        let ma_weights = uniform_ma_weights(radius, lattice_dim);
        let mixing = default_mixing(d);
        let mean: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
        let ss: f64 = ma_weights.iter().map(|t| t.weight * t.weight).sum();
        let a = rows_to_matrix(&mixing);
        let sigma = (&a * a.transpose()) * ss;
        let sigma_inv_sqrt = linalg::sym_inv_sqrt(&sigma)?;
        let b_true =
            scales.iter().enumerate().map(|(j, s)| sigma_inv_sqrt.column(j).iter().map(|v| v * s).collect()).collect();
        let model = Self {
            d,
            n_dirs: scales.len(),
            b_true,
            link,
            noise_sd,
            dependence_radius: radius,
            innovation_law: law,
            ma_weights,
            lattice_dim,
            mixing,
            mean,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.n_dirs < 1 || self.n_dirs >= self.d {
            return bad(format!("need 1 <= N < d, got N = {}, d = {}", self.n_dirs, self.d));
        }
        if self.b_true.len() != self.n_dirs || self.b_true.iter().any(|c| c.len() != self.d) {
            return bad("b_true must hold N columns of length d".into());
        }
        if linalg::rank(&self.b_true_matrix()) != self.n_dirs {
            return bad("columns of b_true are not linearly independent".into());
        }
        if let Some(n) = self.link.n_indices() {
            if n != self.n_dirs {
                return bad(format!("link {} reads {n} indices but N = {}", self.link.name(), self.n_dirs));
            }
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be finite and nonnegative".into());
        }
        if self.link == LinkId::Independent && self.noise_sd == 0.0 {
            return bad("independent link needs noise_sd > 0".into());
        }
        if self.lattice_dim < 1 {
            return bad("lattice_dim must be >= 1".into());
        }
        let r = self.dependence_radius as i64;
        for tap in &self.ma_weights {
            if tap.offset.len() != self.lattice_dim {
                return bad(format!("MA offset {:?} does not have {} coordinates", tap.offset, self.lattice_dim));
            }
            if tap.offset.iter().any(|o| o.abs() > r) {
                return bad(format!("MA offset {:?} outside radius {r}", tap.offset));
            }
            if !tap.weight.is_finite() {
                return bad("non-finite MA weight".into());
            }
        }
        if self.ma_weight_energy() <= 0.0 {
            return bad("moving-average weights have zero energy".into());
        }
        if self.mixing.len() != self.d || self.mixing.iter().any(|r| r.len() != self.d) {
            return bad("mixing must be d x d".into());
        }
        if linalg::rank(&self.mixing_matrix()) != self.d {
            return bad("mixing matrix is singular".into());
        }
        if self.mean.len() != self.d || self.mean.iter().any(|m| !m.is_finite()) {
            return bad("mean must be a finite vector of length d".into());
        }
        Ok(())
    }

    /// `sum_j a_j^2`.
    pub fn ma_weight_energy(&self) -> f64 {
        self.ma_weights.iter().map(|t| t.weight * t.weight).sum()
    }

    pub fn b_true_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.b_true.len(), |i, j| self.b_true[j][i])
    }

    pub fn mixing_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.mixing)
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    /// Exact covariance `Sigma = (sum_j a_j^2) A A^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let a = self.mixing_matrix();
        (&a * a.transpose()) * self.ma_weight_energy()
    }

    /// Certified bound `D` on `|Z|` for bounded innovations.
    pub fn z_bound(&self) -> Result<Option<f64>> {
        if self.innovation_law != InnovationLaw::BoundedUniform {
            return Ok(None);
        }
        let map = linalg::sym_inv_sqrt(&self.covariance())? * self.mixing_matrix();
        let abs_sum: f64 = self.ma_weights.iter().map(|t| t.weight.abs()).sum();
        let bound = linalg::spectral_norm(&map) * (self.d as f64).sqrt() * SQRT_3 * abs_sum;
        Ok(Some(bound * (1.0 + 1e-9)))
    }

    fn draw_innovation(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.innovation_law {
            InnovationLaw::BoundedUniform => Uniform::new_inclusive(-SQRT_3, SQRT_3).expect("valid range").sample(rng),
            InnovationLaw::Gaussian => StandardNormal.sample(rng),
        }
    }

    fn response(&self, x: &[f64], eps: f64) -> f64 {
        let mut u = [0.0f64; 2];
        for (j, col) in self.b_true.iter().take(2).enumerate() {
            u[j] = col.iter().zip(x).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum();
        }
        self.link.apply(&u, self.noise_sd * eps)
    }
}

fn default_mixing(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.3 }).collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Lattice sample `{(X_i, Y_i)}` in row-major site order.
#[derive(Debug, Clone)]
pub struct FieldDataset {
    pub shape: LatticeShape,
    /// `n_hat x d`, one site per row.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// `Sigma^{-1/2}(X_i - E X)` with the model's exact moments.
    pub z_oracle: Option<DMatrix<f64>>,
    pub model: Option<ModelSpec>,
    pub seed: Option<u64>,
}

impl FieldDataset {
    pub fn n_hat(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Writes the dataset as CSV with header `i1,..,iL,x1,..,xd,y`; indices
    /// are 1-based and reals carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let l = self.shape.lattice_dim();
        let d = self.d();
        let mut header: Vec<String> = (1..=l).map(|i| format!("i{i}")).collect();
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.push("y".into());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(l + d + 1);
        for site in 0..self.n_hat() {
            record.clear();
            record.extend(self.shape.multi_index(site).iter().map(|i| (i + 1).to_string()));
            record.extend((0..d).map(|c| fmt_real(self.x[(site, c)])));
            record.push(fmt_real(self.y[site]));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`FieldDataset::write_csv`]. Rows must be
    /// complete and in row-major order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let l = headers.iter().take_while(|h| h.starts_with('i')).count();
        let d = headers.iter().filter(|h| h.starts_with('x')).count();
        let expected: Vec<String> = (1..=l)
            .map(|i| format!("i{i}"))
            .chain((1..=d).map(|i| format!("x{i}")))
            .chain(std::iter::once("y".to_string()))
            .collect();
        if l == 0 || d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Parse(format!(
                "dataset header must be i1..iL,x1..xd,y; found {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut idx: Vec<Vec<usize>> = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        let mut y = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |e: String| Error::Parse(format!("row {}: {e}", row + 2));
            let site: Vec<usize> = (0..l)
                .map(|c| rec[c].trim().parse::<usize>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<_>>()?;
            if site.contains(&0) {
                return Err(parse_err("site indices are 1-based".into()));
            }
            idx.push(site);
            for c in 0..d {
                xs.push(rec[l + c].trim().parse::<f64>().map_err(|e| parse_err(e.to_string()))?);
            }
            y.push(rec[l + d].trim().parse::<f64>().map_err(|e| parse_err(e.to_string()))?);
        }
        if y.is_empty() {
            return Err(Error::Parse("dataset has no rows".into()));
        }
        let dims: Vec<usize> = (0..l).map(|c| idx.iter().map(|s| s[c]).max().unwrap()).collect();
        let shape = LatticeShape::new(dims)?;
        if shape.n_hat() != y.len() {
            return Err(Error::Parse(format!("{} rows do not fill a {shape} lattice", y.len())));
        }
        for (flat, site) in idx.iter().enumerate() {
            let want: Vec<usize> = shape.multi_index(flat).iter().map(|i| i + 1).collect();
            if *site != want {
                return Err(Error::Parse(format!("row {} is site {site:?}, expected {want:?}", flat + 2)));
            }
        }
        let x = DMatrix::from_row_slice(y.len(), d, &xs);
        Ok(Self { shape, x, y, z_oracle: None, model: None, seed: None })
    }
}

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates one realization of the field on `shape`.
pub fn simulate_field(model: &ModelSpec, shape: &LatticeShape, seed: u64) -> Result<FieldDataset> {
    model.validate()?;
    if shape.lattice_dim() != model.lattice_dim {
        return Err(Error::InvalidShape(format!(
            "shape {shape} has {} dimensions, model expects {}",
            shape.lattice_dim(),
            model.lattice_dim
        )));
    }
    let r = model.dependence_radius;
    if let Some(&n) = shape.dims().iter().find(|&&n| n < 2 * r + 1) {
        return Err(Error::InvalidShape(format!(
            "side {n} is smaller than the moving-average window 2r+1 = {}",
            2 * r + 1
        )));
    }
    let d = model.d;
    let l = shape.lattice_dim();
    let padded: Vec<usize> = shape.dims().iter().map(|n| n + 2 * r).collect();
    let padded_count: usize = padded.iter().product();

    let mut innov_rng = ChaCha8Rng::seed_from_u64(seed);
    innov_rng.set_stream(0);
    let mut eta = vec![0.0; padded_count * d];
    for v in eta.iter_mut() {
        *v = model.draw_innovation(&mut innov_rng);
    }

    // Flat offset of each tap in the padded lattice.
    let mut strides = vec![1usize; l];
    for k in (0..l.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * padded[k + 1];
    }
    let tap_shift: Vec<(isize, f64)> = model
        .ma_weights
        .iter()
        .map(|t| {
            let s: isize = t.offset.iter().zip(&strides).map(|(&o, &st)| o as isize * st as isize).sum();
            (s, t.weight)
        })
        .collect();

    let n = shape.n_hat();
    let a = model.mixing_matrix();
    let mu = model.mean_vector();
    let mut x = DMatrix::zeros(n, d);
    let mut u = DVector::zeros(d);
    for site in 0..n {
        let mi = shape.multi_index(site);
        let center: isize = mi.iter().zip(&strides).map(|(&i, &st)| ((i + r) * st) as isize).sum();
        u.fill(0.0);
        for &(shift, w) in &tap_shift {
            let base = (center + shift) as usize * d;
            for c in 0..d {
                u[c] += w * eta[base + c];
            }
        }
        let xi = &mu + &a * &u;
        x.set_row(site, &xi.transpose());
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let y: Vec<f64> = (0..n)
        .map(|site| {
            let eps: f64 = StandardNormal.sample(&mut noise_rng);
            let row: Vec<f64> = x.row(site).iter().copied().collect();
            model.response(&row, eps)
        })
        .collect();

    let sigma_inv_sqrt = linalg::sym_inv_sqrt(&model.covariance())?;
    let mut z = DMatrix::zeros(n, d);
    for site in 0..n {
        let centered = x.row(site).transpose() - &mu;
        z.set_row(site, &(&sigma_inv_sqrt * centered).transpose());
    }

    Ok(FieldDataset { shape: shape.clone(), x, y, z_oracle: Some(z), model: Some(model.clone()), seed: Some(seed) })
}

/// Population quantities of a model, exact where a closed form exists and
/// Monte Carlo otherwise.
#[derive(Debug, Clone)]
pub struct PopulationTruth {
    pub mean: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_sqrt: DMatrix<f64>,
    pub sigma_inv_sqrt: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    /// Orthonormal basis of the whitened EDR space, `colspace(Sigma^{1/2} B)`.
    /// `None` when the response does not depend on `X`.
    pub edr_whitened: Option<DMatrix<f64>>,
    /// `B` itself (EDR space in the original coordinates).
    pub edr_beta: Option<DMatrix<f64>>,
    pub mc_samples: usize,
    pub slices: usize,
    pub moments: ConditionalMoments,
}

/// `f(y)`, `m(y) = f(y) r(y)` and `M(y) = f(y) R(y)`.
#[derive(Debug, Clone)]
pub enum ConditionalMoments {
    /// Response is `N(0, sd^2)` and independent of `Z`: `m = 0`, `M = f I`.
    IndependentGaussian { sd: f64, d: usize },
    /// Tabulated surrogate, linearly interpolated, zero outside the table.
    Table { y: Vec<f64>, f: Vec<f64>, m: Vec<DVector<f64>>, big_m: Vec<DMatrix<f64>> },
}

#[derive(Debug, Clone)]
pub struct MomentPoint {
    pub f: f64,
    pub m: DVector<f64>,
    pub big_m: DMatrix<f64>,
}

impl ConditionalMoments {
    pub fn at(&self, y: f64) -> MomentPoint {
        match self {
            ConditionalMoments::IndependentGaussian { sd, d } => {
                let t = y / sd;
                let f = (-0.5 * t * t).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
                MomentPoint { f, m: DVector::zeros(*d), big_m: DMatrix::identity(*d, *d) * f }
            }
            ConditionalMoments::Table { y: grid, f, m, big_m } => {
                let d = m[0].len();
                let n = grid.len();
                if !(y >= grid[0] && y <= grid[n - 1]) {
                    return MomentPoint { f: 0.0, m: DVector::zeros(d), big_m: DMatrix::zeros(d, d) };
                }
                let hi = grid.partition_point(|&g| g < y).clamp(1, n - 1);
                let lo = hi - 1;
                let w = if grid[hi] > grid[lo] { (y - grid[lo]) / (grid[hi] - grid[lo]) } else { 0.0 };
                MomentPoint {
                    f: f[lo] * (1.0 - w) + f[hi] * w,
                    m: &m[lo] * (1.0 - w) + &m[hi] * w,
                    big_m: &big_m[lo] * (1.0 - w) + &big_m[hi] * w,
                }
            }
        }
    }
}

/// Default number of equal-probability slices.
pub const DEFAULT_SLICES: usize = 400;
/// Smallest Monte Carlo sample accepted.
pub const MIN_MC_SAMPLES: usize = 10_000;
const MC_BLOCK: usize = 1 << 16;
const TABLE_POINTS: usize = 401;

pub fn population_truth(model: &ModelSpec, mc_samples: usize, seed: u64) -> Result<PopulationTruth> {
    population_truth_with_slices(model, mc_samples, seed, DEFAULT_SLICES)
}

/// Brute-force population oracle: draws i.i.d. `(Z, Y)` from the single-site
/// marginal, sorts on `Y`, cuts into equal-count slices and forms
/// `Gamma = sum_h p_h (I - Cov(Z | h))^2` together with `Psi` and `Lambda`.
pub fn population_truth_with_slices(
    model: &ModelSpec,
    mc_samples: usize,
    seed: u64,
    slices: usize,
) -> Result<PopulationTruth> {
    model.validate()?;
    if mc_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "population truth needs at least {MIN_MC_SAMPLES} samples, got {mc_samples}"
        )));
    }
    if slices < 200 {
        return Err(Error::InvalidArgument(format!("need at least 200 slices, got {slices}")));
    }
    if mc_samples / slices < 10 {
        return Err(Error::InvalidArgument("fewer than 10 samples per slice".into()));
    }
    let d = model.d;
    let sigma = model.covariance();
    let sigma_sqrt = linalg::sym_sqrt(&sigma)?;
    let sigma_inv_sqrt = linalg::sym_inv_sqrt(&sigma)?;
    let mixing = model.mixing_matrix();
    let whiten_map = &sigma_inv_sqrt * &mixing;
    let mean = model.mean_vector();

    // Each block has its own RNG stream so the draw is independent of the
    // thread count.
    let blocks = mc_samples.div_ceil(MC_BLOCK);
    let draws: Vec<(f64, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let count = MC_BLOCK.min(mc_samples - b * MC_BLOCK);
            let mut out = Vec::with_capacity(count);
            let mut u = DVector::zeros(d);
            for _ in 0..count {
                u.fill(0.0);
                for tap in &model.ma_weights {
                    for c in 0..d {
                        u[c] += tap.weight * model.draw_innovation(&mut rng);
                    }
                }
                let eps: f64 = StandardNormal.sample(&mut rng);
                let x = &mean + &mixing * &u;
                let y = model.response(x.as_slice(), eps);
                let z = &whiten_map * &u;
                out.push((y, z.as_slice().to_vec()));
            }
            out
        })
        .collect();

    let mut order: Vec<usize> = (0..draws.len()).collect();
    order.sort_by(|&a, &b| draws[a].0.total_cmp(&draws[b].0).then(a.cmp(&b)));

    let n = draws.len() as f64;
    let id = DMatrix::<f64>::identity(d, d);
    let mut gamma = DMatrix::zeros(d, d);
    let mut psi = DMatrix::zeros(d, d);
    let mut lambda = DMatrix::zeros(d, d);
    let base = draws.len() / slices;
    let extra = draws.len() % slices;
    let mut start = 0;
    for h in 0..slices {
        let len = base + usize::from(h < extra);
        let members = &order[start..start + len];
        start += len;
        let (r, c) = slice_moments(members.iter().map(|&i| draws[i].1.as_slice()), d);
        let p = len as f64 / n;
        psi += &r * r.transpose() * p;
        lambda += &c * &c * p;
        let dev = &id - &c;
        gamma += &dev * &dev * p;
    }
    let (gamma, psi, lambda) = match model.link {
        // Y independent of Z: r = 0 and C = I at every y.
        LinkId::Independent => (DMatrix::zeros(d, d), DMatrix::zeros(d, d), id.clone()),
        _ => (linalg::symmetrize(&gamma), linalg::symmetrize(&psi), linalg::symmetrize(&lambda)),
    };

    let (edr_whitened, edr_beta) = match model.link {
        LinkId::Independent => (None, None),
        _ => {
            let b = model.b_true_matrix();
            (Some(linalg::orthonormal_basis(&(&sigma_sqrt * &b))?), Some(b))
        }
    };

    let moments = match model.link {
        LinkId::Independent => ConditionalMoments::IndependentGaussian { sd: model.noise_sd, d },
        _ => moment_table(&draws, &order, d),
    };

    Ok(PopulationTruth {
        mean,
        sigma,
        sigma_sqrt,
        sigma_inv_sqrt,
        gamma,
        psi,
        lambda,
        edr_whitened,
        edr_beta,
        mc_samples,
        slices,
        moments,
    })
}

fn slice_moments<'a>(zs: impl Iterator<Item = &'a [f64]>, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut count = 0.0;
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    for z in zs {
        count += 1.0;
        for a in 0..d {
            s1[a] += z[a];
            for b in 0..d {
                s2[(a, b)] += z[a] * z[b];
            }
        }
    }
    let r = s1 / count;
    let c = s2 / count - &r * r.transpose();
    (r, c)
}

/// Kernel-smoothed surrogate for `f`, `m`, `M` on an even grid between the
/// 0.5% and 99.5% quantiles of `Y`, using the dilated Epanechnikov kernel
/// with bandwidth 1% of that range.
fn moment_table(draws: &[(f64, Vec<f64>)], order: &[usize], d: usize) -> ConditionalMoments {
    let n = order.len();
    let ys: Vec<f64> = order.iter().map(|&i| draws[i].0).collect();
    let lo = ys[n / 200];
    let hi = ys[n - 1 - n / 200];
    let span = (hi - lo).max(f64::EPSILON);
    let kernel = KernelSpec::epanechnikov();
    let h = 0.01 * span / kernel.support_radius;
    let reach = h * kernel.support_radius;
    let grid: Vec<f64> = (0..TABLE_POINTS).map(|i| lo + span * i as f64 / (TABLE_POINTS - 1) as f64).collect();
    let rows: Vec<(f64, DVector<f64>, DMatrix<f64>)> = grid
        .par_iter()
        .map(|&g| {
            let a = ys.partition_point(|&v| v < g - reach);
            let b = ys.partition_point(|&v| v <= g + reach);
            let mut f = 0.0;
            let mut m = DVector::zeros(d);
            let mut big_m = DMatrix::zeros(d, d);
            for (&y, &idx) in ys[a..b].iter().zip(&order[a..b]) {
                let w = kernel_eval(&kernel, (g - y) / h);
                let z = &draws[idx].1;
                f += w;
                for p in 0..d {
                    m[p] += w * z[p];
                    for q in 0..d {
                        big_m[(p, q)] += w * z[p] * z[q];
                    }
                }
            }
            let scale = 1.0 / (n as f64 * h);
            (f * scale, m * scale, big_m * scale)
        })
        .collect();
    let mut f = Vec::with_capacity(rows.len());
    let mut m = Vec::with_capacity(rows.len());
    let mut big_m = Vec::with_capacity(rows.len());
    for (fv, mv, bm) in rows {
        f.push(fv);
        m.push(mv);
        big_m.push(bm);
    }
    ConditionalMoments::Table { y: grid, f, m, big_m }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag1_autocorrelation(ds: &FieldDataset, comp: usize) -> f64 {
        let dims = ds.shape.dims();
        let (n1, n2) = (dims[0], dims[1]);
        let col: Vec<f64> = ds.x.column(comp).iter().copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..n1 {
            for j in 0..n2 - 1 {
                acc += (col[i * n2 + j] - mean) * (col[i * n2 + j + 1] - mean);
                cnt += 1.0;
            }
        }
        acc / cnt / var
    }

    #[test]
    fn shape_basics() {
        let s: LatticeShape = "3x4x5".parse().unwrap();
        assert_eq!(s.n_hat(), 60);
        assert_eq!(s.multi_index(0), vec![0, 0, 0]);
        assert_eq!(s.multi_index(59), vec![2, 3, 4]);
        assert_eq!(s.multi_index(6), vec![0, 1, 1]);
        assert_eq!(s.to_string(), "3x4x5");
        assert!(LatticeShape::new(vec![]).is_err());
        assert!(LatticeShape::new(vec![3, 0]).is_err());
    }

    #[test]
    fn uniform_window_enumerates_offsets() {
        let taps = uniform_ma_weights(1, 2);
        assert_eq!(taps.len(), 9);
        assert_eq!(taps[0].offset, vec![-1, -1]);
        assert_eq!(taps[4].offset, vec![0, 0]);
        assert_eq!(taps[8].offset, vec![1, 1]);
    }

    #[test]
    fn noiseless_linear_link_is_exact() {
        let model = ModelSpec::preset(LinkId::Linear, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        let ds = simulate_field(&model, &LatticeShape::square(8, 2), 5).unwrap();
        let b = model.b_true_matrix();
        for i in 0..ds.n_hat() {
            let centered = ds.x.row(i).transpose() - model.mean_vector();
            let u = (b.transpose() * centered)[0];
            assert!((ds.y[i] - u).abs() < 1e-14);
        }
    }

    #[test]
    fn simulation_is_reproducible() {
        let model = ModelSpec::preset(LinkId::TwoIndex, 4, 1, InnovationLaw::Gaussian).unwrap();
        let shape = LatticeShape::square(10, 2);
        let a = simulate_field(&model, &shape, 42).unwrap();
        let b = simulate_field(&model, &shape, 42).unwrap();
        assert!(a.x.iter().zip(b.x.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.y.iter().zip(&b.y).all(|(p, q)| p.to_bits() == q.to_bits()));
        let c = simulate_field(&model, &shape, 43).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn rejects_window_larger_than_region() {
        let model = ModelSpec::preset(LinkId::Linear, 3, 2, InnovationLaw::BoundedUniform).unwrap();
        let err = simulate_field(&model, &LatticeShape::new(vec![4, 10]).unwrap(), 1);
        assert!(matches!(err, Err(Error::InvalidShape(_))));
        assert!(simulate_field(&model, &LatticeShape::new(vec![5, 5]).unwrap(), 1).is_ok());
    }

    #[test]
    fn lattice_dim_must_match() {
        let model = ModelSpec::preset(LinkId::Linear, 3, 0, InnovationLaw::BoundedUniform).unwrap();
        assert!(simulate_field(&model, &LatticeShape::square(5, 3), 1).is_err());
    }

    #[test]
    fn iid_field_has_no_lag_one_correlation() {
        let model = ModelSpec::preset(LinkId::Linear, 3, 0, InnovationLaw::BoundedUniform).unwrap();
        let ds = simulate_field(&model, &LatticeShape::square(64, 2), 3).unwrap();
        let tol = 4.0 / (ds.n_hat() as f64).sqrt();
        for c in 0..3 {
            assert!(lag1_autocorrelation(&ds, c).abs() < tol);
        }
    }

    #[test]
    fn ma_window_lag_one_correlation() {
        // 3x3 all-ones window: a horizontal shift overlaps 6 of 9 taps.
        let overlap: f64 = {
            let taps = uniform_ma_weights(1, 2);
            let mut s = 0.0;
            for t in &taps {
                let shifted = vec![t.offset[0], t.offset[1] + 1];
                if let Some(u) = taps.iter().find(|u| u.offset == shifted) {
                    s += t.weight * u.weight;
                }
            }
            s / taps.iter().map(|t| t.weight * t.weight).sum::<f64>()
        };
        assert!((overlap - 2.0 / 3.0).abs() < 1e-15);
        let model = ModelSpec::preset(LinkId::Linear, 3, 1, InnovationLaw::BoundedUniform).unwrap();
        let ds = simulate_field(&model, &LatticeShape::square(64, 2), 11).unwrap();
        for c in 0..3 {
            let rho = lag1_autocorrelation(&ds, c);
            assert!((rho - overlap).abs() < 0.05, "component {c}: {rho}");
        }
    }

    #[test]
    fn bounded_innovations_respect_bound() {
        for r in [0, 1] {
            let model = ModelSpec::preset(LinkId::QuadraticSingleIndex, 4, r, InnovationLaw::BoundedUniform).unwrap();
            let bound = model.z_bound().unwrap().unwrap();
            let ds = simulate_field(&model, &LatticeShape::square(24, 2), 9).unwrap();
            let z = ds.z_oracle.unwrap();
            for i in 0..z.nrows() {
                assert!(z.row(i).norm() <= bound);
            }
        }
        let g = ModelSpec::preset(LinkId::Linear, 4, 0, InnovationLaw::Gaussian).unwrap();
        assert!(g.z_bound().unwrap().is_none());
    }

    #[test]
    fn csv_round_trip() {
        let model = ModelSpec::preset(LinkId::QuadraticSingleIndex, 3, 1, InnovationLaw::Gaussian).unwrap();
        let ds = simulate_field(&model, &LatticeShape::new(vec![4, 5]).unwrap(), 2).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i1,i2,x1,x2,x3,y\n1,1,"));
        let back = FieldDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.shape, ds.shape);
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn csv_rejects_out_of_order_rows() {
        let text = "i1,x1,x2,y\n2,0.1,0.2,0.3\n1,0.1,0.2,0.3\n";
        assert!(FieldDataset::read_csv(text.as_bytes()).is_err());
        let bad_header = "a,b\n1,2\n";
        assert!(FieldDataset::read_csv(bad_header.as_bytes()).is_err());
    }

    #[test]
    fn model_validation() {
        let mut m = ModelSpec::preset(LinkId::Linear, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        m.n_dirs = 4;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::preset(LinkId::Linear, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        m.ma_weights[0].weight = 0.0;
        assert!(m.validate().is_err());
        let mut m = ModelSpec::preset(LinkId::TwoIndex, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        m.b_true[1] = m.b_true[0].iter().map(|v| 2.0 * v).collect();
        assert!(m.validate().is_err());
        let m = ModelSpec::preset(LinkId::Linear, 4, 1, InnovationLaw::BoundedUniform).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn independent_truth_is_zero() {
        let model = ModelSpec::preset(LinkId::Independent, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        let truth = population_truth(&model, 200_000, 1).unwrap();
        assert_eq!(truth.gamma, DMatrix::zeros(4, 4));
        assert_eq!(truth.lambda, DMatrix::identity(4, 4));
        assert!(truth.edr_whitened.is_none());
        let p = truth.moments.at(0.0);
        assert!((p.f - 1.0 / (0.1 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn truth_rejects_small_samples() {
        let model = ModelSpec::preset(LinkId::Linear, 4, 0, InnovationLaw::BoundedUniform).unwrap();
        assert!(population_truth(&model, 1000, 1).is_err());
    }

    #[test]
    fn truth_covariance_matches_closed_form() {
        let model = ModelSpec::preset(LinkId::Linear, 3, 1, InnovationLaw::BoundedUniform).unwrap();
        let truth = population_truth(&model, 20_000, 1).unwrap();
        let a = model.mixing_matrix();
        assert!((truth.sigma.clone() - (&a * a.transpose()) * 9.0).amax() < 1e-12);
        let id = &truth.sigma_inv_sqrt * &truth.sigma * &truth.sigma_inv_sqrt;
        assert!((id - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn truth_is_thread_count_independent() {
        let model = ModelSpec::preset(LinkId::QuadraticSingleIndex, 3, 0, InnovationLaw::Gaussian).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| population_truth(&model, 150_000, 7).unwrap());
        let b = four.install(|| population_truth(&model, 150_000, 7).unwrap());
        assert_eq!(a.gamma, b.gamma);
    }
}
