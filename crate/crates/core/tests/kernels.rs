#![allow(clippy::excessive_precision)]

use ksave::kernels::{build_order_k_kernel, kernel_eval, kernel_moment_check, KernelSpec};

// Exact values from a symbolic solve of the same moment systems over the
// rationals.
const K2_R1_AT_0: f64 = -1.875;
const K2_R1_AT_HALF: f64 = 1.0546875;
const K3_R3_AT_0: f64 = 0.976_080_246_913_580_246_913_580_2;
const K3_R3_AT_HALF: f64 = 0.735_606_506_685_655_133_871_869_1;
const K4_R3_AT_0: f64 = 0.739_293_981_481_481_481_481_481_5;
const K4_R3_AT_HALF: f64 = 0.591_193_072_553_488_416_399_939_0;
const K4_R1_AT_0: f64 = 15.585_937_5;
const K4_R1_AT_HALF: f64 = -12.189_331_054_687_5;

#[test]
fn constructed_values_match_symbolic_solution() {
    let cases = [
        (2, 1.0, K2_R1_AT_0, K2_R1_AT_HALF),
        (3, 3.0, K3_R3_AT_0, K3_R3_AT_HALF),
        (4, 3.0, K4_R3_AT_0, K4_R3_AT_HALF),
        (4, 1.0, K4_R1_AT_0, K4_R1_AT_HALF),
    ];
    for (k, r, at0, at_half) in cases {
        let spec = build_order_k_kernel(k, r).unwrap();
        let tol = 1e-12 * at0.abs().max(1.0);
        assert!((kernel_eval(&spec, 0.0) - at0).abs() < tol, "k={k} r={r}");
        assert!((kernel_eval(&spec, 0.5) - at_half).abs() < tol, "k={k} r={r}");
    }
}

/// Composite Simpson rule with 10^4 panels, independent of the Gauss rule
/// used by the certification.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let n = 10_000;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn order_four_moments_by_independent_quadrature() {
    let spec = build_order_k_kernel(4, 3.0).unwrap();
    let r = spec.support_radius;
    let m = |j: i32| simpson(|u| u.powi(j) * spec.eval(u), -r, r);
    assert!((m(0) - 1.0).abs() < 1e-10);
    for j in 1..4 {
        assert!(m(j).abs() < 1e-10, "moment {j}");
    }
    assert!((m(4) - 1.0).abs() < 1e-10);
    assert!(spec.eval(0.0) > 0.0);
    // signed: the correction pushes the tails negative
    let min = (0..=300).map(|i| spec.eval(-r + i as f64 * r / 150.0)).fold(f64::INFINITY, f64::min);
    assert!(min < 0.0);
}

#[test]
fn epanechnikov_examples() {
    let unit = KernelSpec::epanechnikov_unit();
    assert_eq!(kernel_eval(&unit, 0.0), 0.75);
    assert_eq!(kernel_eval(&unit, 2.0), 0.0);
    let rep = kernel_moment_check(&unit);
    assert!(rep.moment("u^1").unwrap().deviation.unwrap() <= 1e-12);
    // |u|^2 integrates to 1/5, so the literal normalization fails.
    assert!(!rep.pass);
    assert!((rep.moment("|u|^2").unwrap().value - 0.2).abs() < 1e-12);

    let dilated = KernelSpec::epanechnikov();
    assert!(kernel_moment_check(&dilated).pass);
}

#[test]
fn every_order_is_compactly_supported_and_even() {
    for k in 2..=6 {
        for r in [1.0, 2.5] {
            let spec = build_order_k_kernel(k, r).unwrap();
            assert_eq!(kernel_eval(&spec, 2.0 * r), 0.0);
            assert_eq!(kernel_eval(&spec, -r * (1.0 + 1e-9)), 0.0);
            for i in 0..=50 {
                let u = i as f64 * r / 50.0;
                assert!((spec.eval(u) - spec.eval(-u)).abs() <= 1e-12 * spec.eval(0.0).abs().max(1.0));
            }
        }
    }
}

#[test]
fn dilation_does_not_preserve_the_absolute_moment() {
    // K(u/2)/2 keeps unit mass but quadruples the second moment, so the
    // radius-2 solution is a different polynomial, not a dilation.
    let a = build_order_k_kernel(2, 1.0).unwrap();
    let b = build_order_k_kernel(2, 2.0).unwrap();
    let dilated = |u: f64| a.eval(u / 2.0) / 2.0;
    assert!((simpson(dilated, -2.0, 2.0) - 1.0).abs() < 1e-10);
    assert!((simpson(|u| u * u * dilated(u), -2.0, 2.0) - 4.0).abs() < 1e-10);
    assert!((simpson(|u| u * u * b.eval(u), -2.0, 2.0) - 1.0).abs() < 1e-10);
}

#[test]
fn kernel_json_round_trip_is_exact() {
    let spec = build_order_k_kernel(3, 3.0).unwrap();
    let text = serde_json::to_string(&spec).unwrap();
    let back: KernelSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(spec, back);
}
