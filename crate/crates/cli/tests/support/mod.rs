//! Synthetic weather cubes and CLI drivers shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bmwgam::copula::from_pairwise;
use bmwgam::grid::{write_cube_csv, Variable};
use bmwgam::normal::normal_cdf;
use bmwgam::{kron_chol_mul, Coordinates, Family, SeparableCorrelation, SpaceTimeCube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Gamma};

// Copula ranges about half the default window footprint (30 neighbours at
// 10 km spacing, ±4 three-hourly steps), so the local GAMs can separate
// the smooth means from the correlated anomalies.
pub const TRUE_V_SPACE: f64 = 15.0;
pub const TRUE_V_TIME: f64 = 6.0;
pub const TRUE_PAIRWISE: [f64; 3] = [0.5, -0.3, 0.2];

/// Gamma quantile with mean `mu` and dispersion `phi`.
fn gamma_quantile(mu: f64, phi: f64, u: f64) -> f64 {
    Gamma::new(1.0 / phi, 1.0 / (mu * phi)).unwrap().inverse_cdf(u)
}

/// Temperature (normal), wind (gamma) and irradiance (gamma, zero at midnight)
/// on an `nx × nx` grid with 10 km spacing and `nt` three-hourly times,
/// coupled through a separable Matérn copula.
pub fn synthetic_cube(nx: usize, nt: usize, seed: u64) -> SpaceTimeCube {
    let n = nx * nx;
    let coords = Coordinates::new(
        (0..n).map(|i| [10.0 * (i % nx) as f64, 10.0 * (i / nx) as f64]).collect(),
        (0..nt).map(|t| 3.0 * t as f64).collect(),
    )
    .unwrap();
    let truth = SeparableCorrelation::new(
        TRUE_V_SPACE,
        TRUE_V_TIME,
        from_pairwise(3, &TRUE_PAIRWISE).unwrap(),
        &coords,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..3 * nt * n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let z = kron_chol_mul(truth.chol_p(), truth.chol_t(), truth.chol_n(), &eps).unwrap();
    let mut values = vec![0.0; z.len()];
    for p in 0..3 {
        for t in 0..nt {
            for k in 0..n {
                let i = p * nt * n + t * n + k;
                let [x, y] = coords.locations()[k];
                let h = 3.0 * t as f64;
                let u = normal_cdf(z[i]);
                values[i] = match p {
                    0 => 5.0 + 4.0 * (2.0 * PI * h / 24.0).sin() + 0.03 * x - 0.02 * y + 1.5 * z[i],
                    1 => {
                        let mu = 6.0 + 2.0 * (x / 30.0).cos() + 1.5 * (2.0 * PI * h / 48.0).sin();
                        gamma_quantile(mu, 0.15, u)
                    }
                    _ => {
                        // smooth diurnal mean; only midnight is an exact zero
                        let s = (2.0 * PI * (h - 6.0) / 24.0).sin();
                        if s < -0.9 {
                            0.0
                        } else {
                            let mu = (220.0 + 180.0 * s) * (1.0 + 0.002 * x);
                            gamma_quantile(mu, 0.1, u)
                        }
                    }
                };
            }
        }
    }
    let variables = vec![
        Variable::new("temperature", Family::NormalIdentity),
        Variable::new("wind", Family::GammaSqrt),
        Variable::new("ghi", Family::GammaSqrt),
    ];
    SpaceTimeCube::new(coords, variables, values).unwrap()
}

/// Writes `data.csv` and `config.toml` into `dir`; `extra` is appended to
/// the config verbatim.
pub fn write_project(dir: &Path, cube: &SpaceTimeCube, extra: &str) -> PathBuf {
    write_cube_csv(cube, &dir.join("data.csv")).unwrap();
    let config = format!(
        r#"seed = 7

[data]
path = "data.csv"

[[variable]]
name = "temperature"
family = "normal"

[[variable]]
name = "wind"
family = "gamma"
link = "sqrt"

[[variable]]
name = "ghi"
family = "gamma"

{extra}
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Small windows and few draws, for quick end-to-end runs.
pub const QUICK: &str = r#"
[windows]
k_space = 9
w_time = 5
knots = 20
draws = 200

[simulate]
realizations = 6

[diagnostics]
max_lag = 4
"#;

pub fn bmwgam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmwgam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Runs a stage and panics with its stderr on failure.
pub fn stage(args: &[&str]) -> Output {
    let out = bmwgam(args);
    assert!(
        out.status.success(),
        "bmwgam {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs all four stages against `config`, writing into `out`.
pub fn run_pipeline(config: &Path, out: &Path, workers: usize) {
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    let w = workers.to_string();
    for cmd in ["fit-marginals", "fit-copula", "simulate", "diagnose"] {
        stage(&[cmd, "--config", c, "--out", o, "--workers", &w]);
    }
}

/// Parses a `diagnostics/*.csv` table into header and rows.
pub fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}
