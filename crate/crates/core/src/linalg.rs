//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude component
/// is positive (ties go to the lowest index), which makes the output a
/// deterministic function of the input matrix.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    /// Columns are unit eigenvectors matching `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen_desc(m: &DMatrix<f64>) -> Result<SortedEigen> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::EigendecompositionFailure);
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::EigendecompositionFailure)?;
    let d = m.nrows();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SortedEigen { values, vectors })
}

pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(*sym_eigen_desc(m)?.values.last().expect("nonempty matrix"))
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = sym_eigen_desc(m)?;
    let d = m.nrows();
    let mut scaled = eig.vectors.clone();
    for j in 0..d {
        let s = f(eig.values[j]);
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(symmetrize(&(scaled * eig.vectors.transpose())))
}

/// Symmetric square root of an SPD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_function(m, |x| x.max(0.0).sqrt())
}

/// Symmetric inverse square root of an SPD matrix.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen_desc(m)?;
    let max = eig.values[0];
    let min = *eig.values.last().unwrap();
    if !(min > 0.0) {
        return Err(Error::NearSingularCovariance { ratio: min / max });
    }
    sym_function(m, |x| 1.0 / x.sqrt())
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Numerical rank with relative tolerance `1e-10`.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = m.clone().svd(false, false).singular_values;
    let smax = s.max();
    if smax <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > 1e-10 * smax).count()
}

/// Orthonormal basis for the column space of a full-column-rank matrix.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = rank(m);
    if r < m.ncols() {
        return Err(Error::RankDeficient { rank: r, expected: m.ncols() });
    }
    Ok(m.clone().qr().q().columns(0, m.ncols()).into_owned())
}

/// Orthogonal projector onto the column space of `m`.
pub fn projector(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = orthonormal_basis(m)?;
    Ok(&q * q.transpose())
}
