//! Whitening, extraction of EDR directions and subspace comparison.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldsim::{ConditionalMoments, ModelSpec};
use crate::linalg::{self, sym_eigen_desc};
use crate::save_core::{SaveMatrices, SmoothedSite};

/// Smallest admissible eigenvalue ratio of the sample covariance.
pub const SINGULAR_RATIO: f64 = 1e-10;
/// Eigengap below which a warning is attached to the estimate.
pub const EIGENGAP_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct WhiteningResult {
    pub x_bar: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub sigma_inv_sqrt: DMatrix<f64>,
    /// `n x d`, `Sigma^{-1/2} (X_i - Xbar)` per row.
    pub z_hat: DMatrix<f64>,
}

fn centered_map(x: &DMatrix<f64>, mean: &DVector<f64>, map: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = x.clone();
    for mut row in z.row_iter_mut() {
        row -= mean.transpose();
    }
    // rows are (x - mean)^T, so Z = (X - 1 mean^T) map^T; map is symmetric
    z * map.transpose()
}

/// Empirical whitening with the symmetric inverse square root of the
/// (biased) sample covariance.
pub fn whiten(x: &DMatrix<f64>) -> Result<WhiteningResult> {
    let (n, d) = x.shape();
    if n <= d {
        return Err(Error::InsufficientData(format!("whitening needs n > d, got n = {n}, d = {d}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("predictors contain non-finite values".into()));
    }
    let x_bar = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= x_bar.transpose();
    }
    let sigma_hat = linalg::symmetrize(&(centered.transpose() * &centered / n as f64));
    let eig = sym_eigen_desc(&sigma_hat)?;
    let (max, min) = (eig.values[0], *eig.values.last().unwrap());
    if !(max > 0.0) || min < SINGULAR_RATIO * max {
        return Err(Error::NearSingularCovariance { ratio: min / max });
    }
    let sigma_inv_sqrt = linalg::sym_inv_sqrt(&sigma_hat)?;
    let z_hat = centered_map(x, &x_bar, &sigma_inv_sqrt);
    Ok(WhiteningResult { x_bar, sigma_hat, sigma_inv_sqrt, z_hat })
}

/// Whitening with the model's exact mean and covariance.
pub fn whiten_oracle(x: &DMatrix<f64>, model: &ModelSpec) -> Result<WhiteningResult> {
    if x.ncols() != model.d {
        return Err(Error::DimensionMismatch { expected: model.d, found: x.ncols() });
    }
    let mean = model.mean_vector();
    let sigma = model.covariance();
    let sigma_inv_sqrt = linalg::sym_inv_sqrt(&sigma)?;
    let z_hat = centered_map(x, &mean, &sigma_inv_sqrt);
    Ok(WhiteningResult { x_bar: mean, sigma_hat: sigma, sigma_inv_sqrt, z_hat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdrEstimate {
    /// Eigenvalues of the candidate matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors `tau_j`, one column each.
    #[serde(with = "columns")]
    pub eigenvectors: DMatrix<f64>,
    /// `beta_j = Sigma^{-1/2} tau_j` for `j < N`.
    #[serde(with = "columns")]
    pub beta_hat: DMatrix<f64>,
    pub n_used: usize,
    pub warnings: Vec<String>,
}

impl EdrEstimate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable scree table.
    pub fn scree(&self) -> String {
        let total: f64 = self.eigenvalues.iter().map(|v| v.abs()).sum();
        let mut out = String::from("  j   eigenvalue     share\n");
        for (j, v) in self.eigenvalues.iter().enumerate() {
            let mark = if j < self.n_used { '*' } else { ' ' };
            out.push_str(&format!("{mark}{:>2}  {v:>11.6}  {:>8.4}\n", j + 1, v.abs() / total.max(f64::MIN_POSITIVE)));
        }
        out
    }
}

/// Top-`N` eigenvectors of `Gamma_hat`, mapped back through
/// `Sigma^{-1/2}`. Eigenvector signs follow [`linalg::fix_sign`].
pub fn edr_directions(gamma: &SaveMatrices, whitening: &WhiteningResult, n_dirs: usize) -> Result<EdrEstimate> {
    let g = &gamma.gamma_hat;
    let d = g.nrows();
    if whitening.sigma_inv_sqrt.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, found: whitening.sigma_inv_sqrt.nrows() });
    }
    if n_dirs < 1 || n_dirs >= d {
        return Err(Error::InvalidArgument(format!("need 1 <= N < d, got N = {n_dirs}, d = {d}")));
    }
    let eig = sym_eigen_desc(g)?;
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for j in 0..d {
        let v = eig.vectors.column(j);
        let resid = (g * v - v * eig.values[j]).amax();
        if !(resid <= 1e-8 * scale) {
            return Err(Error::EigendecompositionFailure);
        }
    }
    let mut warnings = Vec::new();
    let gap = eig.values[n_dirs - 1] - eig.values[n_dirs];
    if gap < EIGENGAP_WARN {
        warnings.push(format!(
            "eigengap between eigenvalues {n_dirs} and {} is {gap:.3e}; the leading space is not identified",
            n_dirs + 1
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if eig.values[n_dirs - 1] <= 0.0 {
        let w = format!("eigenvalue {n_dirs} is not positive ({:.3e})", eig.values[n_dirs - 1]);
        log::debug!("{w}");
        warnings.push(w);
    }
    let tau = eig.vectors.columns(0, n_dirs).into_owned();
    let beta_hat = &whitening.sigma_inv_sqrt * tau;
    Ok(EdrEstimate { eigenvalues: eig.values, eigenvectors: eig.vectors, beta_hat, n_used: n_dirs, warnings })
}

/// `|P_A - P_B|_F / sqrt(2m)` for the orthogonal projectors onto the column
/// spaces of the `d x m` matrices `a` and `b`.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: b.nrows() });
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), found: b.ncols() });
    }
    let m = a.ncols();
    if m == 0 {
        return Err(Error::InvalidArgument("empty subspace".into()));
    }
    let pa = linalg::projector(a)?;
    let pb = linalg::projector(b)?;
    Ok(((pa - pb).norm() / (2.0 * m as f64).sqrt()).min(1.0))
}

/// Per-column `min(|a_j - b_j|, |a_j + b_j|)` after scaling both columns to
/// unit length.
pub fn aligned_vector_errors(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<f64>> {
    if estimate.shape() != truth.shape() {
        return Err(Error::DimensionMismatch { expected: truth.ncols(), found: estimate.ncols() });
    }
    (0..truth.ncols())
        .map(|j| {
            let a = estimate.column(j);
            let b = truth.column(j);
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::RankDeficient { rank: 0, expected: 1 });
            }
            let (a, b) = (a / na, b / nb);
            Ok((&a - &b).norm().min((&a + &b).norm()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupNormReport {
    pub sup_f: f64,
    pub sup_m: f64,
    /// Spectral norm.
    pub sup_big_m: f64,
    pub grid_points: usize,
}

/// Largest deviation over `grid` of the smoothed `f`, `m`, `M` from their
/// population counterparts. `estimates[i]` must be evaluated at `grid[i]`.
pub fn supnorm_errors(estimates: &[SmoothedSite], truth: &ConditionalMoments, grid: &[f64]) -> Result<SupNormReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    if estimates.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), found: estimates.len() });
    }
    let mut rep = SupNormReport { sup_f: 0.0, sup_m: 0.0, sup_big_m: 0.0, grid_points: grid.len() };
    for (est, &y) in estimates.iter().zip(grid) {
        let t = truth.at(y);
        if t.m.len() != est.m_hat.len() {
            return Err(Error::DimensionMismatch { expected: t.m.len(), found: est.m_hat.len() });
        }
        rep.sup_f = rep.sup_f.max((est.f_hat - t.f).abs());
        rep.sup_m = rep.sup_m.max((&est.m_hat - &t.m).norm());
        rep.sup_big_m = rep.sup_big_m.max(linalg::spectral_norm(&(&est.big_m_hat - &t.big_m)));
    }
    Ok(rep)
}

/// Self-comparison helper: tabulates smoothed sites as a moment table.
pub fn moments_from_sites(grid: &[f64], sites: &[SmoothedSite]) -> ConditionalMoments {
    ConditionalMoments::Table {
        y: grid.to_vec(),
        f: sites.iter().map(|s| s.f_hat).collect(),
        m: sites.iter().map(|s| s.m_hat.clone()).collect(),
        big_m: sites.iter().map(|s| s.big_m_hat.clone()).collect(),
    }
}

/// Serializes a matrix as a list of its columns.
pub mod columns {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let cols: Vec<Vec<f64>> = m.column_iter().map(|c| c.iter().copied().collect()).collect();
        cols.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let cols: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nc = cols.len();
        let nr = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != nr) {
            return Err(serde::de::Error::custom("ragged column list"));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| cols[j][i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_whitening(d: usize) -> WhiteningResult {
        WhiteningResult {
            x_bar: DVector::zeros(d),
            sigma_hat: DMatrix::identity(d, d),
            sigma_inv_sqrt: DMatrix::identity(d, d),
            z_hat: DMatrix::zeros(0, d),
        }
    }

    fn matrices(gamma: DMatrix<f64>) -> SaveMatrices {
        let d = gamma.nrows();
        SaveMatrices {
            psi_hat: DMatrix::zeros(d, d),
            lambda_hat: DMatrix::zeros(d, d),
            gamma_hat: gamma,
            z_bar: DVector::zeros(d),
        }
    }

    #[test]
    fn diagonal_gamma_gives_first_axis() {
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]));
        let est = edr_directions(&matrices(g), &identity_whitening(4), 1).unwrap();
        assert_eq!(est.eigenvalues[0], 1.0);
        assert!((est.beta_hat.column(0) - DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0])).amax() < 1e-15);
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn identity_gamma_warns_but_is_deterministic() {
        let g = DMatrix::identity(4, 4);
        let a = edr_directions(&matrices(g.clone()), &identity_whitening(4), 2).unwrap();
        let b = edr_directions(&matrices(g), &identity_whitening(4), 2).unwrap();
        assert!(!a.warnings.is_empty());
        assert_eq!(a, b);
        let q = &a.eigenvectors;
        assert!((q.transpose() * q - DMatrix::identity(4, 4)).amax() <= 1e-10);
    }

    #[test]
    fn rejects_bad_dimension_count() {
        let g = DMatrix::identity(3, 3);
        assert!(edr_directions(&matrices(g.clone()), &identity_whitening(3), 0).is_err());
        assert!(edr_directions(&matrices(g), &identity_whitening(3), 3).is_err());
    }

    #[test]
    fn whitening_diagonal_covariance() {
        // columns with variances 4 and 1 and zero cross-covariance
        let x = DMatrix::from_row_slice(4, 2, &[2.0, 1.0, -2.0, 1.0, 2.0, -1.0, -2.0, -1.0]);
        let w = whiten(&x).unwrap();
        assert!((w.sigma_hat.clone() - DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]))).amax() < 1e-14);
        assert!((w.sigma_inv_sqrt.clone() - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.0]))).amax() < 1e-14);
    }

    #[test]
    fn whitening_rejects_singular_and_short_samples() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        assert!(matches!(whiten(&x), Err(Error::NearSingularCovariance { .. })));
        let short = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        assert!(matches!(whiten(&short), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn subspace_distance_examples() {
        let e1 = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let e2 = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let diag = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 0.0]) / 2f64.sqrt();
        assert!(subspace_distance(&e1, &e1).unwrap() < 1e-15);
        assert!((subspace_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        // P_A - P_B = [[1/2, -1/2], [-1/2, -1/2]] on the first two axes
        let expect = (4.0 * 0.25f64).sqrt() / 2f64.sqrt();
        assert!((subspace_distance(&e1, &diag).unwrap() - expect).abs() < 1e-15);
        assert!((expect - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let scaled = &e1 * -7.5;
        assert!(subspace_distance(&e1, &scaled).unwrap() < 1e-15);
        let zero = DMatrix::zeros(3, 1);
        assert!(matches!(subspace_distance(&e1, &zero), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn aligned_errors_ignore_sign() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[-3.0, 0.0]);
        assert!(aligned_vector_errors(&a, &b).unwrap()[0] < 1e-15);
    }

    #[test]
    fn supnorm_rejects_empty_grid() {
        let t = ConditionalMoments::IndependentGaussian { sd: 1.0, d: 2 };
        assert!(supnorm_errors(&[], &t, &[]).is_err());
    }

    #[test]
    fn edr_json_round_trip() {
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 0.2]);
        let est = edr_directions(&matrices(g), &identity_whitening(3), 1).unwrap();
        let text = est.to_json().unwrap();
        let back: EdrEstimate = serde_json::from_str(&text).unwrap();
        assert_eq!(est, back);
    }
}
