mod support;

use bmwgam::matern52;
use bmwgam::normal::{normal_cdf, normal_quantile};
use proptest::prelude::*;
use support::fixed;

#[test]
fn normal_cdf_matches_extended_precision() {
    let mut worst = 0.0f64;
    for i in 0..=1600 {
        let z = -8.0 + i as f64 * 0.01;
        let err = (normal_cdf(z) - fixed::normal_cdf(z)).abs();
        worst = worst.max(err);
    }
    assert!(worst < 1e-12, "max |Φ̂ − Φ| = {worst:e}");
}

#[test]
fn normal_quantile_inverts_reference_cdf() {
    for i in 1..200 {
        let z = -7.0 + i as f64 * 0.07;
        let u = fixed::normal_cdf(z);
        let back = normal_quantile(u);
        // rounding u to a double moves z by up to ulp(u)/φ(z)
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let tol = 1e-12 * (1.0 + z.abs()) + 4.0 * f64::EPSILON * u / density;
        assert!((back - z).abs() < tol, "z={z} back={back}");
    }
}

#[test]
fn matern_matches_extended_precision() {
    for rho in [0.7, 9.0, 50.0] {
        for i in 0..1000 {
            let d = i as f64 * 6.0 * rho / 999.0;
            let got = matern52(d, rho);
            let want = fixed::matern52(d, rho);
            assert!((got - want).abs() < 1e-12, "d={d} rho={rho}: {got} vs {want}");
        }
    }
}

#[test]
fn matern_known_values() {
    assert_eq!(matern52(0.0, 3.0), 1.0);
    // s = √5: (1 + √5 + 5/3) e^{−√5}
    let s = 5f64.sqrt();
    let want = (1.0 + s + 5.0 / 3.0) * (-s).exp();
    assert!((matern52(1.0, 1.0) - want).abs() < 1e-15);
}

proptest! {
    #[test]
    fn matern_is_decreasing_and_bounded(d in 0.0f64..500.0, gap in 1e-6f64..50.0, rho in 0.1f64..200.0) {
        let a = matern52(d, rho);
        let b = matern52(d + gap, rho);
        prop_assert!((0.0..=1.0).contains(&a));
        // strictly decreasing until the value underflows
        prop_assert!(b < a || a == 0.0);
    }

    #[test]
    fn normal_cdf_is_monotone(z in -9.0f64..9.0, dz in 1e-3f64..1.0) {
        prop_assert!(normal_cdf(z) <= normal_cdf(z + dz));
        prop_assert!((normal_cdf(z) + normal_cdf(-z) - 1.0).abs() < 1e-15);
    }
}
