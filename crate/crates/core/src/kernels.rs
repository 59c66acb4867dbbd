//! Compactly supported polynomial kernels of order `k`.
//!
//! A kernel is stored as a polynomial `p` in monomial form together with a
//! support radius `R`, and evaluates to `p(u)` for `|u| <= R` and `0`
//! elsewhere. Kernels built by [`build_order_k_kernel`] satisfy
//!
//! * `int K = 1`,
//! * `int u^j K = 0` for `j = 1, ..., k - 1`,
//! * `int |u|^k K = 1`,
//! * `|K(x) - K(y)| <= C |x - y|` with a certified constant `C`.
//!
//! Kernels of order three and higher are necessarily signed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::CompositeRule;

/// Tolerance on `int K - 1` and on the vanishing moments.
pub const LOW_MOMENT_TOL: f64 = 1e-8;
/// Tolerance on `int |u|^k K - 1`.
pub const ABS_MOMENT_TOL: f64 = 1e-6;
/// Relative slack allowed on the Lipschitz certificate.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;
/// Quadrature density used for certification, in nodes per unit of support.
pub const NODES_PER_UNIT: usize = 1024;
/// Radius used by the experiment defaults.
pub const DEFAULT_EXPERIMENT_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub order_k: usize,
    pub support_radius: f64,
    /// Monomial coefficients, lowest degree first.
    pub poly_coeffs: Vec<f64>,
    pub lipschitz_bound: f64,
}

impl KernelSpec {
    /// Creates a spec from raw coefficients and certifies its Lipschitz
    /// constant. Moments are not checked here; use [`kernel_moment_check`].
    pub fn from_coeffs(
        name: impl Into<String>,
        order_k: usize,
        support_radius: f64,
        poly_coeffs: Vec<f64>,
    ) -> Result<Self> {
        if order_k < 2 {
            return Err(Error::InvalidKernel(format!("order must be >= 2, got {order_k}")));
        }
        if !(support_radius.is_finite() && support_radius > 0.0) {
            return Err(Error::InvalidKernel(format!("support radius must be positive, got {support_radius}")));
        }
        if poly_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidKernel("non-finite coefficient".into()));
        }
        let lipschitz_bound = certified_lipschitz(&poly_coeffs, support_radius);
        Ok(Self { name: name.into(), order_k, support_radius, poly_coeffs, lipschitz_bound })
    }

    /// The textbook Epanechnikov kernel `0.75 (1 - u^2)` on `[-1, 1]`.
    ///
    /// Its second moment is `1/5`, so it does not meet the `|u|^k`
    /// normalization; see [`KernelSpec::epanechnikov`] for the rescaled form.
    pub fn epanechnikov_unit() -> Self {
        Self::from_coeffs("epanechnikov-unit", 2, 1.0, vec![0.75, 0.0, -0.75]).expect("valid constant kernel")
    }

    /// Nonnegative Epanechnikov kernel dilated to support `[-sqrt 5, sqrt 5]`
    /// so that `int u^2 K = 1`.
    pub fn epanechnikov() -> Self {
        let r = 5f64.sqrt();
        Self::from_coeffs("epanechnikov", 2, r, vec![0.75 / r, 0.0, -0.75 / (5.0 * r)]).expect("valid constant kernel")
    }

    /// Kernel used by the experiment defaults: order 3, radius 3.
    pub fn experiment_default() -> Self {
        build_order_k_kernel(3, DEFAULT_EXPERIMENT_RADIUS).expect("order-3 kernel builds")
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        kernel_eval(self, u)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order_k < 2 {
            return Err(Error::InvalidKernel(format!("order must be >= 2, got {}", self.order_k)));
        }
        if !(self.support_radius.is_finite() && self.support_radius > 0.0) {
            return Err(Error::InvalidKernel("support radius must be positive".into()));
        }
        if !(self.lipschitz_bound.is_finite() && self.lipschitz_bound > 0.0) {
            return Err(Error::InvalidKernel("Lipschitz bound must be positive".into()));
        }
        if self.poly_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidKernel("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Evaluates `K(u)`: the polynomial inside the closed support, exactly zero
/// outside.
#[inline]
pub fn kernel_eval(spec: &KernelSpec, u: f64) -> f64 {
    if u.abs() > spec.support_radius {
        return 0.0;
    }
    horner(&spec.poly_coeffs, u)
}

#[inline]
fn horner(coeffs: &[f64], u: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
}

fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(j, &c)| j as f64 * c).collect()
}

/// Upper bound on `max |p'|` over `[-R, R]`: the maximum on a dense grid plus
/// `sup |p''| * h / 2`, with `sup |p''|` bounded termwise.
fn certified_lipschitz(coeffs: &[f64], radius: f64) -> f64 {
    let d1 = derivative(coeffs);
    let d2 = derivative(&d1);
    let second_bound: f64 = d2.iter().enumerate().map(|(j, c)| c.abs() * radius.powi(j as i32)).sum();
    let steps = 20_000;
    let h = 2.0 * radius / steps as f64;
    let grid_max = (0..=steps).map(|i| horner(&d1, -radius + i as f64 * h).abs()).fold(0.0, f64::max);
    let bound = grid_max + 0.5 * h * second_bound;
    // A constant polynomial still needs a positive certificate: the jump at
    // the support edge is handled by the moment check, not here.
    if bound > 0.0 {
        bound
    } else {
        f64::MIN_POSITIVE
    }
}

/// Monomial coefficients of the Legendre polynomial `P_n(t)`.
fn legendre_monomial(n: usize) -> Vec<f64> {
    let mut p0 = vec![1.0];
    if n == 0 {
        return p0;
    }
    let mut p1 = vec![0.0, 1.0];
    for j in 1..n {
        let jf = j as f64;
        let mut p2 = vec![0.0; j + 2];
        for (i, &c) in p1.iter().enumerate() {
            p2[i + 1] += (2.0 * jf + 1.0) * c / (jf + 1.0);
        }
        for (i, &c) in p0.iter().enumerate() {
            p2[i] -= jf * c / (jf + 1.0);
        }
        p0 = p1;
        p1 = p2;
    }
    p1
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn certification_rule(radius: f64) -> CompositeRule {
    const PER_PANEL: usize = 16;
    // Even panel count keeps u = 0 on a panel edge, so |u|^k is integrated
    // exactly panel by panel.
    let nodes_wanted = (2.0 * radius * NODES_PER_UNIT as f64).ceil() as usize;
    let mut panels = nodes_wanted.div_ceil(PER_PANEL).max(2);
    if panels % 2 == 1 {
        panels += 1;
    }
    CompositeRule::new(-radius, radius, panels, PER_PANEL)
}

/// Builds a symmetric kernel of order `k` on `[-radius, radius]`.
///
/// The kernel is an Epanechnikov base `B(u) = 3/(4R) (1 - (u/R)^2)` times an
/// even Legendre correction `q(u) = sum_m c_m P_{2m}(u/R)`. The coefficients
/// solve the moment system `int u^j B q = [j = 0]` for even `j < k` plus
/// `int |u|^k B q = 1`; odd moments vanish by symmetry. For odd `k` this
/// needs degree `k + 1`. If the square system is singular the correction
/// degree is raised and the minimum-norm solution is taken.
pub fn build_order_k_kernel(k: usize, support_radius: f64) -> Result<KernelSpec> {
    if k < 2 {
        return Err(Error::InvalidKernel(format!("order must be >= 2, got {k}")));
    }
    if !(support_radius.is_finite() && support_radius > 0.0) {
        return Err(Error::InvalidKernel(format!("support radius must be positive, got {support_radius}")));
    }
    let r = support_radius;
    let rule = certification_rule(r);
    let base = |u: f64| 0.75 / r * (1.0 - (u / r) * (u / r));

    let even_powers: Vec<usize> = (0..k).step_by(2).collect();
    let n_constraints = even_powers.len() + 1;
    let mut rhs = DVector::zeros(n_constraints);
    rhs[0] = 1.0;
    rhs[n_constraints - 1] = 1.0;

    const EXTRA_TERMS: usize = 3;
    for n_terms in n_constraints..=n_constraints + EXTRA_TERMS {
        let legendre: Vec<Vec<f64>> = (0..n_terms).map(|m| legendre_monomial(2 * m)).collect();
        let basis = |m: usize, u: f64| base(u) * horner(&legendre[m], u / r);
        let mut a = DMatrix::zeros(n_constraints, n_terms);
        for m in 0..n_terms {
            for (row, &j) in even_powers.iter().enumerate() {
                a[(row, m)] = rule.integrate(|u| u.powi(j as i32) * basis(m, u));
            }
            a[(n_constraints - 1, m)] = rule.integrate(|u| u.abs().powi(k as i32) * basis(m, u));
        }
        let Some(coeffs) = solve_moment_system(&a, &rhs) else {
            continue;
        };

        // Expand B(u) q(u) into monomials in u.
        let mut q = vec![0.0; 2 * n_terms - 1];
        for (m, c) in coeffs.iter().enumerate() {
            for (j, &lc) in legendre[m].iter().enumerate() {
                q[j] += c * lc / r.powi(j as i32);
            }
        }
        let b = [0.75 / r, 0.0, -0.75 / (r * r * r)];
        let mut poly = poly_mul(&b, &q);
        while poly.len() > 1 && poly.last() == Some(&0.0) {
            poly.pop();
        }
        let name = format!("order{k}-epanechnikov-r{r}");
        return KernelSpec::from_coeffs(name, k, r, poly);
    }
    Err(Error::SingularMomentSystem { order: k, max_degree: 2 * (n_constraints + EXTRA_TERMS - 1) + 2 })
}

fn solve_moment_system(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-12 * smax {
        return None;
    }
    let x = svd.solve(rhs, 0.0).ok()?;
    let resid = (a * &x - rhs).amax();
    (resid < 1e-11).then_some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    /// `"u^j"` or `"|u|^k"`.
    pub label: String,
    pub value: f64,
    pub target: Option<f64>,
    pub deviation: Option<f64>,
    pub tolerance: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub kernel: String,
    pub order_k: usize,
    pub support_radius: f64,
    pub quadrature_nodes: usize,
    pub moments: Vec<MomentEntry>,
    /// Largest difference quotient observed on the Lipschitz grid.
    pub lipschitz_observed: f64,
    pub lipschitz_bound: f64,
    pub lipschitz_pass: bool,
    /// `K` evaluated just outside the support.
    pub outside_support_value: f64,
    pub support_pass: bool,
    pub pass: bool,
}

impl MomentReport {
    pub fn moment(&self, label: &str) -> Option<&MomentEntry> {
        self.moments.iter().find(|m| m.label == label)
    }
}

/// Number of grid points for the Lipschitz check.
pub const LIPSCHITZ_GRID: usize = 10_000;

/// Integrates the moments of `spec` by composite Gauss–Legendre quadrature
/// and checks them, the support and the Lipschitz certificate.
pub fn kernel_moment_check(spec: &KernelSpec) -> MomentReport {
    let r = spec.support_radius;
    let k = spec.order_k;
    let rule = certification_rule(r);
    let mut moments = Vec::with_capacity(k + 2);
    for j in 0..=k {
        let value = rule.integrate(|u| u.powi(j as i32) * kernel_eval(spec, u));
        let target = match j {
            0 => Some(1.0),
            j if j < k => Some(0.0),
            _ => None,
        };
        moments.push(entry(format!("u^{j}"), value, target, LOW_MOMENT_TOL));
    }
    let abs_k = rule.integrate(|u| u.abs().powi(k as i32) * kernel_eval(spec, u));
    moments.push(entry(format!("|u|^{k}"), abs_k, Some(1.0), ABS_MOMENT_TOL));

    // Grid spans a little beyond the support so the edge is exercised.
    let lo = -1.05 * r;
    let h = 2.1 * r / (LIPSCHITZ_GRID - 1) as f64;
    let mut lipschitz_observed: f64 = 0.0;
    let mut prev = kernel_eval(spec, lo);
    for i in 1..LIPSCHITZ_GRID {
        let cur = kernel_eval(spec, lo + i as f64 * h);
        lipschitz_observed = lipschitz_observed.max((cur - prev).abs() / h);
        prev = cur;
    }
    let lipschitz_pass = lipschitz_observed <= spec.lipschitz_bound * (1.0 + LIPSCHITZ_SLACK);

    let outside_support_value =
        kernel_eval(spec, r * (1.0 + 1e-9)).abs().max(kernel_eval(spec, -r * (1.0 + 1e-9)).abs());
    let support_pass = outside_support_value == 0.0;

    let pass = moments.iter().all(|m| m.pass) && lipschitz_pass && support_pass;
    MomentReport {
        kernel: spec.name.clone(),
        order_k: k,
        support_radius: r,
        quadrature_nodes: rule.len(),
        moments,
        lipschitz_observed,
        lipschitz_bound: spec.lipschitz_bound,
        lipschitz_pass,
        outside_support_value,
        support_pass,
        pass,
    }
}

fn entry(label: String, value: f64, target: Option<f64>, tol: f64) -> MomentEntry {
    match target {
        Some(t) => {
            let deviation = (value - t).abs();
            MomentEntry {
                label,
                value,
                target,
                deviation: Some(deviation),
                tolerance: Some(tol),
                pass: deviation <= tol,
            }
        }
        None => MomentEntry { label, value, target: None, deviation: None, tolerance: None, pass: true },
    }
}
