//! Kernel-smoothed conditional moments of a whitened sample and the SAVE
//! candidate matrix built from them.
//!
//! For a whitened sample `(Z_i, Y_i)`, `i = 1..n`, bandwidth `b` and
//! truncation floor `e`:
//!
//! ```text
//! f(y)   = 1/(n b) sum_i K((y - Y_i)/b)
//! m(y)   = 1/(n b) sum_i K((y - Y_i)/b) Z_i
//! M(y)   = 1/(n b) sum_i K((y - Y_i)/b) Z_i Z_i^T
//! f_e(y) = max(e, f(y)),  r = m / f_e,  R = M / f_e,  C = R - r r^T
//! Psi    = 1/n sum_i r(Y_i) r(Y_i)^T - Zbar Zbar^T
//! Lambda = 1/n sum_i C(Y_i)^2
//! Gamma  = -I + 2 Psi + Lambda
//! ```
//!
//! Every sum includes the evaluation site's own observation.
//!
//! Neighbours are found by a windowed scan over the sorted responses, but
//! each site's sums are accumulated in original sample order so the result
//! is bit-identical to a plain double loop. Per-site work runs on the
//! current rayon pool; the reduction over sites is sequential in sample
//! order, so the output does not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_eval, KernelSpec};

/// Polynomial bandwidth and truncation schedule `b_n = n^-c1`, `e_n = n^-c2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub c1: f64,
    pub c2: f64,
    /// Kernel order the schedule is meant for.
    pub k: usize,
}

impl Default for BandwidthSchedule {
    fn default() -> Self {
        Self { c1: 0.35, c2: 0.05, k: 3 }
    }
}

impl BandwidthSchedule {
    pub fn new(c1: f64, c2: f64, k: usize) -> Result<Self> {
        let s = Self { c1, c2, k };
        s.check()?;
        Ok(s)
    }

    /// Checks the exponents give strictly positive, strictly decreasing
    /// sequences.
    pub fn check(&self) -> Result<()> {
        if !(self.c1.is_finite() && self.c1 > 0.0 && self.c2.is_finite() && self.c2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule exponents must be positive, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("kernel order must be >= 2, got {}", self.k)));
        }
        Ok(())
    }

    pub fn bandwidth(&self, n_hat: usize) -> f64 {
        (n_hat as f64).powf(-self.c1)
    }

    pub fn floor(&self, n_hat: usize) -> f64 {
        (n_hat as f64).powf(-self.c2)
    }
}

/// Smoothed quantities at a single evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSite {
    pub f_hat: f64,
    pub f_e: f64,
    pub m_hat: DVector<f64>,
    pub big_m_hat: DMatrix<f64>,
    pub r_hat: DVector<f64>,
    pub big_r_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaveMatrices {
    pub psi_hat: DMatrix<f64>,
    pub lambda_hat: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub z_bar: DVector<f64>,
}

impl SaveMatrices {
    pub fn d(&self) -> usize {
        self.gamma_hat.nrows()
    }
}

fn check_inputs(z: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if z.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: z.nrows(), found: y.len() });
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("sample is empty".into()));
    }
    if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sample contains non-finite values".into()));
    }
    Ok(())
}

fn check_bandwidths(b: f64, e: f64) -> Result<()> {
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {b}")));
    }
    if !(e.is_finite() && e > 0.0) {
        return Err(Error::InvalidArgument(format!("truncation floor must be positive, got {e}")));
    }
    Ok(())
}

/// Sample stored row-major with responses pre-sorted for window lookups.
struct Sample {
    n: usize,
    d: usize,
    z: Vec<f64>,
    y: Vec<f64>,
    sorted_y: Vec<f64>,
    sorted_idx: Vec<usize>,
}

impl Sample {
    fn new(z: &DMatrix<f64>, y: &[f64]) -> Self {
        let n = y.len();
        let d = z.ncols();
        let mut flat = Vec::with_capacity(n * d);
        for i in 0..n {
            flat.extend(z.row(i).iter());
        }
        let mut sorted_idx: Vec<usize> = (0..n).collect();
        sorted_idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
        let sorted_y = sorted_idx.iter().map(|&i| y[i]).collect();
        Self { n, d, z: flat, y: y.to_vec(), sorted_y, sorted_idx }
    }

    /// Indices `j` (ascending) that can have `K((y0 - Y_j)/b) != 0`.
    fn neighbours(&self, y0: f64, reach: f64, scratch: &mut Neighbours) {
        let lo = self.sorted_y.partition_point(|&v| v < y0 - reach);
        let hi = self.sorted_y.partition_point(|&v| v <= y0 + reach);
        let words = self.n.div_ceil(64);
        scratch.bits.clear();
        scratch.bits.resize(words, 0);
        for &i in &self.sorted_idx[lo..hi] {
            scratch.bits[i / 64] |= 1 << (i % 64);
        }
        scratch.idx.clear();
        for (w, &word) in scratch.bits.iter().enumerate() {
            let mut word = word;
            while word != 0 {
                scratch.idx.push(w * 64 + word.trailing_zeros() as usize);
                word &= word - 1;
            }
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }
}

/// Per-thread scratch for window lookups; a bitset keeps the neighbours in
/// original index order without sorting.
#[derive(Default)]
struct Neighbours {
    bits: Vec<u64>,
    idx: Vec<usize>,
}

/// Raw and ratio quantities for one evaluation point, flat row-major.
struct Accumulated {
    f_hat: f64,
    f_e: f64,
    m: Vec<f64>,
    big_m: Vec<f64>,
    r: Vec<f64>,
    big_r: Vec<f64>,
    c: Vec<f64>,
}

fn accumulate(sample: &Sample, neighbours: &[usize], y0: f64, kernel: &KernelSpec, b: f64, e: f64) -> Accumulated {
    let d = sample.d;
    let mut f_sum = 0.0;
    let mut m_sum = vec![0.0; d];
    let mut mm_sum = vec![0.0; d * d];
    for &j in neighbours {
        let w = kernel_eval(kernel, (y0 - sample.y[j]) / b);
        if w == 0.0 {
            continue;
        }
        let zj = sample.row(j);
        f_sum += w;
        for a in 0..d {
            m_sum[a] += w * zj[a];
            for c in a..d {
                mm_sum[a * d + c] += w * (zj[a] * zj[c]);
            }
        }
    }
    for a in 0..d {
        for c in 0..a {
            mm_sum[a * d + c] = mm_sum[c * d + a];
        }
    }
    let scale = 1.0 / (sample.n as f64 * b);
    let f_hat = f_sum * scale;
    let m: Vec<f64> = m_sum.iter().map(|v| v * scale).collect();
    let big_m: Vec<f64> = mm_sum.iter().map(|v| v * scale).collect();
    let f_e = e.max(f_hat);
    let r: Vec<f64> = m.iter().map(|v| v / f_e).collect();
    let big_r: Vec<f64> = big_m.iter().map(|v| v / f_e).collect();
    let mut c = vec![0.0; d * d];
    for a in 0..d {
        for q in 0..d {
            c[a * d + q] = big_r[a * d + q] - r[a] * r[q];
        }
    }
    Accumulated { f_hat, f_e, m, big_m, r, big_r, c }
}

impl Accumulated {
    fn into_site(self, d: usize) -> SmoothedSite {
        SmoothedSite {
            f_hat: self.f_hat,
            f_e: self.f_e,
            m_hat: DVector::from_vec(self.m),
            big_m_hat: DMatrix::from_row_slice(d, d, &self.big_m),
            r_hat: DVector::from_vec(self.r),
            big_r_hat: DMatrix::from_row_slice(d, d, &self.big_r),
            c_hat: DMatrix::from_row_slice(d, d, &self.c),
        }
    }
}

fn reach(kernel: &KernelSpec, b: f64) -> f64 {
    kernel.support_radius * b * (1.0 + 1e-9) + f64::MIN_POSITIVE
}

/// Smoothed quantities at `y_eval` from the whitened sample `(z, y)`.
pub fn smooth_at(
    z: &DMatrix<f64>,
    y: &[f64],
    y_eval: f64,
    kernel: &KernelSpec,
    b: f64,
    e: f64,
) -> Result<SmoothedSite> {
    Ok(smooth_on_grid(z, y, &[y_eval], kernel, b, e)?.remove(0))
}

/// [`smooth_at`] for every point of `grid`.
pub fn smooth_on_grid(
    z: &DMatrix<f64>,
    y: &[f64],
    grid: &[f64],
    kernel: &KernelSpec,
    b: f64,
    e: f64,
) -> Result<Vec<SmoothedSite>> {
    check_inputs(z, y)?;
    check_bandwidths(b, e)?;
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidArgument("evaluation point is not finite".into()));
    }
    let sample = Sample::new(z, y);
    let reach = reach(kernel, b);
    Ok(grid
        .par_iter()
        .map_init(Neighbours::default, |nb, &g| {
            sample.neighbours(g, reach, nb);
            accumulate(&sample, &nb.idx, g, kernel, b, e).into_site(sample.d)
        })
        .collect())
}

/// SAVE matrices with `b = b_n(n)` and `e = e_n(n)` from `schedule`.
pub fn save_matrices(
    z: &DMatrix<f64>,
    y: &[f64],
    kernel: &KernelSpec,
    schedule: &BandwidthSchedule,
) -> Result<SaveMatrices> {
    schedule.check()?;
    let n = y.len();
    save_matrices_with(z, y, kernel, schedule.bandwidth(n), schedule.floor(n))
}

/// SAVE matrices at explicit bandwidth `b` and floor `e`.
pub fn save_matrices_with(z: &DMatrix<f64>, y: &[f64], kernel: &KernelSpec, b: f64, e: f64) -> Result<SaveMatrices> {
    check_inputs(z, y)?;
    check_bandwidths(b, e)?;
    let n = y.len();
    let d = z.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 observations, got {n}")));
    }
    if d < 2 {
        return Err(Error::InsufficientData(format!("need d >= 2, got {d}")));
    }
    let sample = Sample::new(z, y);
    let reach = reach(kernel, b);

    // (r r^T, C^2) per site, flat row-major.
    let per_site: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map_init(Neighbours::default, |nb, i| {
            let y0 = sample.y[i];
            sample.neighbours(y0, reach, nb);
            let acc = accumulate(&sample, &nb.idx, y0, kernel, b, e);
            let mut rr = vec![0.0; d * d];
            let mut cc = vec![0.0; d * d];
            for a in 0..d {
                for q in 0..d {
                    rr[a * d + q] = acc.r[a] * acc.r[q];
                    let mut s = 0.0;
                    for t in 0..d {
                        s += acc.c[a * d + t] * acc.c[t * d + q];
                    }
                    cc[a * d + q] = s;
                }
            }
            (rr, cc)
        })
        .collect();

    let mut psi_sum = vec![0.0; d * d];
    let mut lambda_sum = vec![0.0; d * d];
    for (rr, cc) in &per_site {
        for t in 0..d * d {
            psi_sum[t] += rr[t];
            lambda_sum[t] += cc[t];
        }
    }
    let mut z_sum = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in z_sum.iter_mut().zip(sample.row(i)) {
            *acc += v;
        }
    }
    let nf = n as f64;
    let z_bar: Vec<f64> = z_sum.iter().map(|v| v / nf).collect();
    let mut psi = vec![0.0; d * d];
    let mut lambda = vec![0.0; d * d];
    let mut gamma = vec![0.0; d * d];
    for a in 0..d {
        for q in 0..d {
            let t = a * d + q;
            psi[t] = psi_sum[t] / nf - z_bar[a] * z_bar[q];
            lambda[t] = lambda_sum[t] / nf;
            let delta = if a == q { 1.0 } else { 0.0 };
            gamma[t] = -delta + 2.0 * psi[t] + lambda[t];
        }
    }
    Ok(SaveMatrices {
        psi_hat: DMatrix::from_row_slice(d, d, &psi),
        lambda_hat: DMatrix::from_row_slice(d, d, &lambda),
        gamma_hat: DMatrix::from_row_slice(d, d, &gamma),
        z_bar: DVector::from_vec(z_bar),
    })
}

/// `phi_n = b_n^k + (1/b_n) sqrt(log n / n)`.
pub fn phi_n(schedule: &BandwidthSchedule, n_hat: usize) -> f64 {
    let n = n_hat as f64;
    let b = schedule.bandwidth(n_hat);
    b.powi(schedule.k as i32) + (n.ln() / n).sqrt() / b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub name: String,
    pub condition: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub c1: f64,
    pub c2: f64,
    pub k: usize,
    pub lattice_dim: usize,
    pub theta: f64,
    /// `(4L + theta) / (theta - 2L)`.
    pub theta1: f64,
    pub checks: Vec<ScheduleCheck>,
    /// Admissible `c1` interval for the given `c2`.
    pub c1_interval: (f64, f64),
    pub feasible_for_c2: bool,
    /// Whether some `c2` in the admissible range leaves a nonempty `c1`
    /// interval for this `(k, L, theta)`.
    pub feasible_any_c2: bool,
    pub pass: bool,
}

/// Checks the bandwidth exponents against the admissibility conditions
/// `c1 > 0`, `0 < c2 < (2k-1)/(4(2k+1))`, `c2/k + 1/(4k) < c1 < 1/2 - 2 c2`
/// and the rate side conditions `n b^3 / log n -> 0` (`c1 > 1/3`) and
/// `n b^theta1 / log n -> inf` (`c1 < 1/theta1`).
pub fn validate_schedule(schedule: &BandwidthSchedule, lattice_dim: usize, theta: f64) -> ScheduleReport {
    let (c1, c2) = (schedule.c1, schedule.c2);
    let k = schedule.k as f64;
    let l = lattice_dim as f64;
    let theta1 = (4.0 * l + theta) / (theta - 2.0 * l);
    let c2_max = (2.0 * k - 1.0) / (4.0 * (2.0 * k + 1.0));
    let c1_lower = c2 / k + 1.0 / (4.0 * k);
    let c1_upper = 0.5 - 2.0 * c2;
    let mixing_ok = lattice_dim >= 1 && theta > 2.0 * l;

    let check = |name: &str, condition: &str, value: f64, bound: f64, pass: bool| ScheduleCheck {
        name: name.into(),
        condition: condition.into(),
        value,
        bound,
        pass,
    };
    let checks = vec![
        check("theta_exceeds_2L", "theta > 2L", theta, 2.0 * l, mixing_ok),
        check("c1_positive", "c1 > 0", c1, 0.0, c1 > 0.0),
        check("c2_positive", "c2 > 0", c2, 0.0, c2 > 0.0),
        check("c2_upper", "c2 < (2k-1)/(4(2k+1))", c2, c2_max, c2 < c2_max),
        check("c1_lower", "c1 > c2/k + 1/(4k)", c1, c1_lower, c1 > c1_lower),
        check("c1_upper", "c1 < 1/2 - 2 c2", c1, c1_upper, c1 < c1_upper),
        check("bias_vanishes", "c1 > 1/3  (n b^3 / log n -> 0)", c1, 1.0 / 3.0, c1 > 1.0 / 3.0),
        check(
            "variance_vanishes",
            "c1 < 1/theta1  (n b^theta1 / log n -> inf)",
            c1,
            1.0 / theta1,
            mixing_ok && c1 < 1.0 / theta1,
        ),
    ];

    let upper_cap = if mixing_ok { 1.0 / theta1 } else { f64::NEG_INFINITY };
    let lo = c1_lower.max(1.0 / 3.0).max(0.0);
    let hi = c1_upper.min(upper_cap);
    let feasible_for_c2 = c2 > 0.0 && c2 < c2_max && lo < hi;
    // Lower bound grows and upper bound shrinks with c2, so c2 -> 0+ is the
    // most permissive choice.
    let feasible_any_c2 = (1.0 / (4.0 * k)).max(1.0 / 3.0) < 0.5f64.min(upper_cap);
    let pass = checks.iter().all(|c| c.pass);
    ScheduleReport {
        c1,
        c2,
        k: schedule.k,
        lattice_dim,
        theta,
        theta1,
        checks,
        c1_interval: (lo, hi),
        feasible_for_c2,
        feasible_any_c2,
        pass,
    }
}

impl ScheduleReport {
    pub fn check(&self, name: &str) -> Option<&ScheduleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_order_k_kernel;

    fn small_sample() -> (DMatrix<f64>, Vec<f64>) {
        let z = DMatrix::from_row_slice(5, 2, &[0.3, -1.0, 1.2, 0.4, -0.7, 0.9, 0.1, 0.2, -1.1, -0.5]);
        let y = vec![0.05, -0.2, 0.31, 0.0, -0.12];
        (z, y)
    }

    #[test]
    fn single_observation_closed_form() {
        let kernel = build_order_k_kernel(3, 3.0).unwrap();
        let z = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let b = 0.4;
        let site = smooth_at(&z, &[1.5], 1.5, &kernel, b, 1e-3).unwrap();
        let k0 = kernel.eval(0.0);
        assert_eq!(site.f_hat, k0 / b);
        let zr = z.row(0).transpose();
        assert!((site.m_hat.clone() - &zr * (k0 / b)).amax() < 1e-15);
        assert!((site.big_m_hat.clone() - &zr * zr.transpose() * (k0 / b)).amax() < 1e-14);
    }

    #[test]
    fn far_evaluation_point_is_floored() {
        let (z, y) = small_sample();
        let kernel = build_order_k_kernel(2, 1.0).unwrap();
        let e = 0.3;
        let site = smooth_at(&z, &y, 10.0, &kernel, 0.1, e).unwrap();
        assert_eq!(site.f_hat, 0.0);
        assert_eq!(site.f_e, e);
        assert!(site.r_hat.iter().all(|&v| v == 0.0));
        assert!(site.c_hat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn site_invariants() {
        let (z, y) = small_sample();
        let kernel = build_order_k_kernel(3, 3.0).unwrap();
        let e = 0.2;
        for &y0 in &[-0.3, 0.0, 0.1, 0.25] {
            let s = smooth_at(&z, &y, y0, &kernel, 0.15, e).unwrap();
            assert_eq!(s.f_e, e.max(s.f_hat));
            assert!(s.f_e >= e);
            assert_eq!(s.r_hat, &s.m_hat / s.f_e);
            assert_eq!(s.big_r_hat, &s.big_m_hat / s.f_e);
            let c = &s.big_r_hat - &s.r_hat * s.r_hat.transpose();
            assert!((c - &s.c_hat).amax() < 1e-15);
            assert!((s.c_hat.clone() - s.c_hat.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn zero_field_gives_minus_identity() {
        let z = DMatrix::zeros(6, 3);
        let y = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let kernel = build_order_k_kernel(2, 1.0).unwrap();
        let s = save_matrices(&z, &y, &kernel, &BandwidthSchedule::default()).unwrap();
        assert!(s.psi_hat.iter().all(|&v| v == 0.0));
        assert!(s.lambda_hat.iter().all(|&v| v == 0.0));
        assert_eq!(s.gamma_hat, -DMatrix::<f64>::identity(3, 3));
    }

    #[test]
    fn rejects_bad_arguments() {
        let (z, y) = small_sample();
        let kernel = build_order_k_kernel(2, 1.0).unwrap();
        assert!(smooth_at(&z, &y, 0.0, &kernel, 0.0, 0.1).is_err());
        assert!(smooth_at(&z, &y, 0.0, &kernel, 0.1, -1.0).is_err());
        assert!(smooth_at(&z, &y[..4], 0.0, &kernel, 0.1, 0.1).is_err());
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(
            save_matrices(&one, &[0.0], &kernel, &BandwidthSchedule::default()),
            Err(Error::InsufficientData(_))
        ));
        let thin = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(save_matrices(&thin, &[0.0, 1.0, 2.0], &kernel, &BandwidthSchedule::default()).is_err());
    }

    #[test]
    fn schedule_sequences_decrease() {
        let s = BandwidthSchedule::default();
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for p in 1..=24 {
            let n = 1usize << p;
            let (b, e) = (s.bandwidth(n), s.floor(n));
            assert!(b > 0.0 && e > 0.0);
            assert!(b < prev.0 && e < prev.1);
            prev = (b, e);
        }
        assert!(BandwidthSchedule::new(0.0, 0.05, 3).is_err());
        assert!(BandwidthSchedule::new(0.35, -0.05, 3).is_err());
    }

    #[test]
    fn default_schedule_validates() {
        let rep = validate_schedule(&BandwidthSchedule::default(), 2, 20.0);
        assert!(rep.pass, "{rep:#?}");
        assert!((rep.theta1 - 28.0 / 16.0).abs() < 1e-15);
        assert!((rep.check("c2_upper").unwrap().bound - 5.0 / 28.0).abs() < 1e-15);
        assert!((rep.check("c1_lower").unwrap().bound - (0.05 / 3.0 + 1.0 / 12.0)).abs() < 1e-15);
        assert!((rep.check("c1_upper").unwrap().bound - 0.4).abs() < 1e-15);
        assert!(rep.feasible_for_c2 && rep.feasible_any_c2);
    }

    #[test]
    fn schedule_boundary_failures() {
        let rep = validate_schedule(&BandwidthSchedule { c1: 0.35, c2: 0.25, k: 3 }, 2, 20.0);
        assert!(!rep.check("c2_upper").unwrap().pass);
        assert!(!rep.pass);
        let rep = validate_schedule(&BandwidthSchedule { c1: 0.5, c2: 0.05, k: 3 }, 2, 20.0);
        assert!(!rep.check("c1_upper").unwrap().pass);
        assert!(!rep.pass);
        let rep = validate_schedule(&BandwidthSchedule { c1: 0.3, c2: 0.05, k: 3 }, 2, 20.0);
        assert!(!rep.check("bias_vanishes").unwrap().pass);
        let rep = validate_schedule(&BandwidthSchedule::default(), 2, 3.0);
        assert!(!rep.check("theta_exceeds_2L").unwrap().pass);
        assert!(!rep.feasible_any_c2);
    }

    #[test]
    fn phi_n_limits() {
        // c1 -> 0 makes b = 1
        let s = BandwidthSchedule { c1: 1e-300, c2: 0.05, k: 3 };
        let n = 1000usize;
        let expect = 1.0 + ((n as f64).ln() / n as f64).sqrt();
        assert!((phi_n(&s, n) - expect).abs() < 1e-12);
    }
}
