mod support;

use bmwgam::copula::{n_params, neg_loglik_gradient, pairwise};
use bmwgam::{fit_mle, kron_chol_mul, matern52, LbfgsSettings};
use support::{correlation, grid, normals, rng};

#[test]
fn white_noise_gives_vanishing_correlation() {
    let coords = grid(5, 5, 20.0, 12, 3.0);
    let z = normals(&mut rng(2), 2 * 12 * 25);
    let fit = fit_mle(&z, &coords, 2, None, &LbfgsSettings::default()).unwrap();
    let c = &fit.correlation;
    assert!(matern52(20.0, c.v_space) < 0.1, "v_space {}", c.v_space);
    assert!(matern52(3.0, c.v_time) < 0.1, "v_time {}", c.v_time);
    assert!(pairwise(&c.sigma_p)[0].abs() < 0.1);
}

#[test]
fn recovers_known_parameters() {
    let coords = grid(6, 6, 20.0, 20, 3.0);
    let truth = correlation(&coords, 50.0, 9.0, &[0.5, -0.3, 0.2]);
    let eps = normals(&mut rng(40), 3 * 20 * 36);
    let z = kron_chol_mul(truth.chol_p(), truth.chol_t(), truth.chol_n(), &eps).unwrap();
    let fit = fit_mle(&z, &coords, 3, None, &LbfgsSettings::default()).unwrap();
    let c = &fit.correlation;
    assert!((c.v_space / 50.0 - 1.0).abs() < 0.25, "v_space {}", c.v_space);
    assert!((c.v_time / 9.0 - 1.0).abs() < 0.25, "v_time {}", c.v_time);
    for (got, want) in pairwise(&c.sigma_p).iter().zip([0.5, -0.3, 0.2]) {
        assert!((got - want).abs() < 0.1, "{got} vs {want}");
    }
    assert!(fit.trace.windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn restart_from_optimum_stays_put() {
    let coords = grid(4, 4, 20.0, 10, 3.0);
    let truth = correlation(&coords, 40.0, 6.0, &[0.3]);
    let eps = normals(&mut rng(9), 2 * 10 * 16);
    let z = kron_chol_mul(truth.chol_p(), truth.chol_t(), truth.chol_n(), &eps).unwrap();
    let settings = LbfgsSettings::default();
    let first = fit_mle(&z, &coords, 2, None, &settings).unwrap();
    let again = fit_mle(&z, &coords, 2, Some(&first.params), &settings).unwrap();
    assert!(again.objective <= first.objective + 1e-9);
    assert!(again.iterations <= 5, "{} iterations", again.iterations);
    for (a, b) in again.params.iter().zip(&first.params) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn gradient_is_stable_across_step_sizes() {
    let coords = grid(4, 3, 15.0, 8, 2.0);
    let truth = correlation(&coords, 25.0, 5.0, &[0.5, -0.3, 0.2]);
    let eps = normals(&mut rng(4), 3 * 8 * 12);
    let z = kron_chol_mul(truth.chol_p(), truth.chol_t(), truth.chol_n(), &eps).unwrap();
    let params = [3.0, 1.2, 1.0, 1.9, 1.4];
    assert_eq!(params.len(), n_params(3));
    let g6 = neg_loglik_gradient(&params, &z, &coords, 3, 1e-6);
    let g5 = neg_loglik_gradient(&params, &z, &coords, 3, 1e-5);
    for (a, b) in g6.iter().zip(&g5) {
        assert!((a - b).abs() <= 1e-3 * b.abs().max(1.0), "{a} vs {b}");
    }
}
