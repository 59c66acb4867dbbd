//! Plain double-loop transcription of the SAVE estimator.
//!
//! Used as the equivalence reference for [`crate::save_core`]. It scans all
//! `n` observations for every site with no windowing and no parallelism,
//! but performs the floating-point operations in the same order, so the two
//! agree exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::edr::whiten;
use crate::error::{Error, Result};
use crate::fieldsim::{simulate_field, FieldDataset, InnovationLaw, LatticeShape, LinkId, ModelSpec};
use crate::kernels::{build_order_k_kernel, kernel_eval, KernelSpec, DEFAULT_EXPERIMENT_RADIUS};
use crate::save_core::{BandwidthSchedule, SaveMatrices, SmoothedSite};

/// Largest sample the quadratic reference accepts.
pub const MAX_REFERENCE_N: usize = 4096;

#[derive(Debug, Clone)]
pub struct ReferenceOutputs {
    /// Smoothed quantities at each `Y_i`, in sample order.
    pub sites: Vec<SmoothedSite>,
    /// `None` when `n < 2`.
    pub matrices: Option<SaveMatrices>,
    pub bandwidth: f64,
    pub floor: f64,
}

/// Reference smoothing and SAVE matrices with the schedule's `b_n`, `e_n`.
pub fn reference_save(
    z: &DMatrix<f64>,
    y: &[f64],
    kernel: &KernelSpec,
    schedule: &BandwidthSchedule,
) -> Result<ReferenceOutputs> {
    schedule.check()?;
    let n = y.len();
    reference_save_with(z, y, kernel, schedule.bandwidth(n), schedule.floor(n))
}

pub fn reference_save_with(
    z: &DMatrix<f64>,
    y: &[f64],
    kernel: &KernelSpec,
    b: f64,
    e: f64,
) -> Result<ReferenceOutputs> {
    let n = y.len();
    if z.nrows() != n {
        return Err(Error::DimensionMismatch { expected: z.nrows(), found: n });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample is empty".into()));
    }
    if n > MAX_REFERENCE_N {
        return Err(Error::SampleTooLarge { n, max: MAX_REFERENCE_N });
    }
    if !(b > 0.0 && e > 0.0 && b.is_finite() && e.is_finite()) {
        return Err(Error::InvalidArgument("bandwidth and floor must be positive".into()));
    }
    let d = z.ncols();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
    let scale = 1.0 / (n as f64 * b);

    let mut sites = Vec::with_capacity(n);
    for i in 0..n {
        let mut f = 0.0;
        let mut m = vec![0.0; d];
        let mut mm = vec![vec![0.0; d]; d];
        for j in 0..n {
            let w = kernel_eval(kernel, (y[i] - y[j]) / b);
            if w == 0.0 {
                continue;
            }
            f += w;
            for a in 0..d {
                m[a] += w * rows[j][a];
                for c in 0..d {
                    mm[a][c] += w * (rows[j][a] * rows[j][c]);
                }
            }
        }
        let f_hat = f * scale;
        let f_e = if f_hat > e { f_hat } else { e };
        let m_hat: Vec<f64> = m.iter().map(|v| v * scale).collect();
        let big_m: Vec<Vec<f64>> = mm.iter().map(|row| row.iter().map(|v| v * scale).collect()).collect();
        let r: Vec<f64> = m_hat.iter().map(|v| v / f_e).collect();
        let big_r: Vec<Vec<f64>> = big_m.iter().map(|row| row.iter().map(|v| v / f_e).collect()).collect();
        let c: Vec<Vec<f64>> = (0..d).map(|a| (0..d).map(|q| big_r[a][q] - r[a] * r[q]).collect()).collect();
        sites.push(SmoothedSite {
            f_hat,
            f_e,
            m_hat: DVector::from_vec(m_hat),
            big_m_hat: DMatrix::from_fn(d, d, |a, q| big_m[a][q]),
            r_hat: DVector::from_vec(r),
            big_r_hat: DMatrix::from_fn(d, d, |a, q| big_r[a][q]),
            c_hat: DMatrix::from_fn(d, d, |a, q| c[a][q]),
        });
    }

    let matrices = (n >= 2).then(|| {
        let mut psi = vec![vec![0.0; d]; d];
        let mut lambda = vec![vec![0.0; d]; d];
        for s in &sites {
            for a in 0..d {
                for q in 0..d {
                    psi[a][q] += s.r_hat[a] * s.r_hat[q];
                    let mut sq = 0.0;
                    for t in 0..d {
                        sq += s.c_hat[(a, t)] * s.c_hat[(t, q)];
                    }
                    lambda[a][q] += sq;
                }
            }
        }
        let nf = n as f64;
        let mut zbar = vec![0.0; d];
        for row in &rows {
            for a in 0..d {
                zbar[a] += row[a];
            }
        }
        for v in zbar.iter_mut() {
            *v /= nf;
        }
        let psi_hat = DMatrix::from_fn(d, d, |a, q| psi[a][q] / nf - zbar[a] * zbar[q]);
        let lambda_hat = DMatrix::from_fn(d, d, |a, q| lambda[a][q] / nf);
        let gamma_hat = DMatrix::from_fn(d, d, |a, q| {
            let delta = if a == q { 1.0 } else { 0.0 };
            -delta + 2.0 * psi_hat[(a, q)] + lambda_hat[(a, q)]
        });
        SaveMatrices { psi_hat, lambda_hat, gamma_hat, z_bar: DVector::from_vec(zbar) }
    });

    Ok(ReferenceOutputs { sites, matrices, bandwidth: b, floor: e })
}

/// `|Gamma_hat - Gamma|_F`.
pub fn gamma_error(estimate: &SaveMatrices, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.gamma_hat.shape() != truth.shape() {
        return Err(Error::DimensionMismatch { expected: truth.nrows(), found: estimate.d() });
    }
    Ok((&estimate.gamma_hat - truth).norm())
}

/// Largest entrywise relative deviation `|a - b| / max(1, |b|)` across all
/// smoothed quantities and matrices.
pub fn max_relative_deviation(sites: &[SmoothedSite], mats: &SaveMatrices, reference: &ReferenceOutputs) -> f64 {
    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }
    fn mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        if a.shape() != b.shape() {
            return f64::INFINITY;
        }
        a.iter().zip(b.iter()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
    }
    fn vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter().zip(b.iter()).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
    }
    if sites.len() != reference.sites.len() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (s, r) in sites.iter().zip(&reference.sites) {
        worst = worst
            .max(rel(s.f_hat, r.f_hat))
            .max(rel(s.f_e, r.f_e))
            .max(vec(&s.m_hat, &r.m_hat))
            .max(mat(&s.big_m_hat, &r.big_m_hat))
            .max(vec(&s.r_hat, &r.r_hat))
            .max(mat(&s.big_r_hat, &r.big_r_hat))
            .max(mat(&s.c_hat, &r.c_hat));
    }
    match &reference.matrices {
        Some(rm) => worst
            .max(mat(&mats.psi_hat, &rm.psi_hat))
            .max(mat(&mats.lambda_hat, &rm.lambda_hat))
            .max(mat(&mats.gamma_hat, &rm.gamma_hat))
            .max(vec(&mats.z_bar, &rm.z_bar)),
        None => f64::INFINITY,
    }
}

/// One committed equivalence case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureCase {
    pub link: LinkId,
    pub law: InnovationLaw,
    pub side: usize,
    pub k: usize,
    pub seed: u64,
}

pub const FIXTURE_SIDES: [usize; 3] = [8, 12, 16];
pub const FIXTURE_ORDERS: [usize; 2] = [2, 3];
pub const FIXTURE_D: usize = 4;
pub const FIXTURE_RADIUS: usize = 1;

impl FixtureCase {
    pub fn stem(&self) -> String {
        format!("{}_{}_k{}_{}x{}", self.link.name(), self.law.name(), self.k, self.side, self.side)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        ModelSpec::preset(self.link, FIXTURE_D, FIXTURE_RADIUS, self.law)
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        build_order_k_kernel(self.k, DEFAULT_EXPERIMENT_RADIUS)
    }

    pub fn schedule(&self) -> BandwidthSchedule {
        BandwidthSchedule { k: self.k, ..BandwidthSchedule::default() }
    }
}

/// Every side x link x law x order combination, with seeds 1, 2, ...
pub fn fixture_cases() -> Vec<FixtureCase> {
    let mut out = Vec::new();
    for side in FIXTURE_SIDES {
        for link in LinkId::ALL {
            for law in InnovationLaw::ALL {
                for k in FIXTURE_ORDERS {
                    let seed = out.len() as u64 + 1;
                    out.push(FixtureCase { link, law, side, k, seed });
                }
            }
        }
    }
    out
}

/// Expected reference outputs for one fixture dataset. The dataset is
/// whitened empirically before smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub name: String,
    pub link: LinkId,
    pub innovation_law: InnovationLaw,
    pub dependence_radius: usize,
    pub dims: LatticeShape,
    pub seed: u64,
    pub schedule: BandwidthSchedule,
    pub kernel: KernelSpec,
    pub bandwidth: f64,
    pub floor: f64,
    pub gamma_hat: Vec<Vec<f64>>,
    pub psi_hat: Vec<Vec<f64>>,
    pub lambda_hat: Vec<Vec<f64>>,
    pub z_bar: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub f_e: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Simulates a fixture dataset and its reference outputs.
pub fn generate_fixture(case: &FixtureCase) -> Result<(FieldDataset, FixtureRecord)> {
    let model = case.model()?;
    let shape = LatticeShape::square(case.side, model.lattice_dim);
    let data = simulate_field(&model, &shape, case.seed)?;
    let record = fixture_record(case, &data)?;
    Ok((data, record))
}

/// Reference outputs for `data` under the case's kernel and schedule.
pub fn fixture_record(case: &FixtureCase, data: &FieldDataset) -> Result<FixtureRecord> {
    let kernel = case.kernel()?;
    let schedule = case.schedule();
    let w = whiten(&data.x)?;
    let out = reference_save(&w.z_hat, &data.y, &kernel, &schedule)?;
    let mats = out.matrices.as_ref().ok_or_else(|| Error::InsufficientData("fixture too small".into()))?;
    Ok(FixtureRecord {
        name: case.stem(),
        link: case.link,
        innovation_law: case.law,
        dependence_radius: FIXTURE_RADIUS,
        dims: data.shape.clone(),
        seed: case.seed,
        schedule,
        kernel,
        bandwidth: out.bandwidth,
        floor: out.floor,
        gamma_hat: rows_of(&mats.gamma_hat),
        psi_hat: rows_of(&mats.psi_hat),
        lambda_hat: rows_of(&mats.lambda_hat),
        z_bar: mats.z_bar.iter().copied().collect(),
        f_hat: out.sites.iter().map(|s| s.f_hat).collect(),
        f_e: out.sites.iter().map(|s| s.f_e).collect(),
    })
}

/// Writes `<stem>.csv` and `<stem>.json` for every fixture case into `dir`.
pub fn write_fixtures(dir: &Path) -> Result<Vec<FixtureRecord>> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for case in fixture_cases() {
        let (data, record) = generate_fixture(&case)?;
        data.write_csv(std::fs::File::create(dir.join(format!("{}.csv", case.stem())))?)?;
        std::fs::write(dir.join(format!("{}.json", case.stem())), serde_json::to_string_pretty(&record)?)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::save_core::{save_matrices, smooth_on_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.7..1.7));
        let y = (0..n).map(|i| z[(i, 0)] * 0.3 + rng.random_range(-0.05..0.05)).collect();
        (z, y)
    }

    #[test]
    fn matches_windowed_estimator_exactly() {
        let kernel = KernelSpec::experiment_default();
        let schedule = BandwidthSchedule::default();
        let (z, y) = sample(64, 3, 5);
        let reference = reference_save(&z, &y, &kernel, &schedule).unwrap();
        let mats = save_matrices(&z, &y, &kernel, &schedule).unwrap();
        let sites = smooth_on_grid(&z, &y, &y, &kernel, reference.bandwidth, reference.floor).unwrap();
        assert_eq!(max_relative_deviation(&sites, &mats, &reference), 0.0);
        assert_eq!(reference.matrices.unwrap().gamma_hat, mats.gamma_hat);
    }

    #[test]
    fn single_observation_has_sites_only() {
        let z = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
        let out = reference_save_with(&z, &[0.0], &KernelSpec::epanechnikov(), 1.0, 0.01).unwrap();
        assert_eq!(out.sites.len(), 1);
        assert!(out.matrices.is_none());
        let k0 = KernelSpec::epanechnikov().eval(0.0);
        assert!((out.sites[0].f_hat - k0).abs() < 1e-15);
    }

    #[test]
    fn rejects_large_samples() {
        let n = MAX_REFERENCE_N + 1;
        let z = DMatrix::zeros(n, 2);
        let y = vec![0.0; n];
        let err = reference_save_with(&z, &y, &KernelSpec::epanechnikov(), 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::SampleTooLarge { .. }));
    }

    #[test]
    fn gamma_error_is_frobenius() {
        let d = 2;
        let m = SaveMatrices {
            psi_hat: DMatrix::zeros(d, d),
            lambda_hat: DMatrix::zeros(d, d),
            gamma_hat: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            z_bar: DVector::zeros(d),
        };
        let truth = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        assert!((gamma_error(&m, &truth).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(gamma_error(&m, &DMatrix::zeros(3, 3)).is_err());
    }
}
