mod support;

use std::path::Path;

use support::{bmwgam, read_table, run_pipeline, stage, synthetic_cube, write_project, QUICK};
use tempfile::tempdir;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(4, 8, 1), QUICK);
    let out = dir.path().join("out");
    run_pipeline(&config, &out, 2);
    for f in [
        "ensemble.bin",
        "ensemble.bin.meta.txt",
        "window_failures.csv",
        "copula.txt",
        "scenarios.bin",
        "scenarios.bin.meta.txt",
        "scenarios.csv",
        "diagnostics/meta.txt",
        "diagnostics/posterior_maps.csv",
        "diagnostics/acf.csv",
        "diagnostics/pacf.csv",
        "diagnostics/variograms.csv",
        "diagnostics/histograms.csv",
        "diagnostics/envelopes.csv",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let copula = std::fs::read_to_string(out.join("copula.txt")).unwrap();
    assert!(copula.contains("# config_hash = "));
    assert!(copula.contains("# init_source = default"));
    let meta = std::fs::read_to_string(out.join("ensemble.bin.meta.txt")).unwrap();
    assert!(meta.contains("seed = 7") && meta.contains("draws = 200"));
}

#[test]
fn copula_stage_prints_parameters() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(4, 8, 2), QUICK);
    let c = s(&config);
    stage(&["fit-marginals", "--config", c, "--workers", "1"]);
    let out = stage(&["fit-copula", "--config", c, "--workers", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let params = text.lines().find(|l| l.starts_with("params = [")).expect("params line");
    assert_eq!(params.split(',').count(), 5);
    assert!(text.lines().any(|l| l.starts_with("converged = ")));
    // default output directory is relative to the config file
    assert!(dir.path().join("out/copula.txt").is_file());
}

#[test]
fn init_override_is_echoed() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(4, 8, 3), QUICK);
    let c = s(&config);
    stage(&["fit-marginals", "--config", c]);
    let out = stage(&["fit-copula", "--config", c, "--init", "3.5,2.0,1.0,2.0,1.5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("init (command-line) = [3.500000, 2.000000, 1.000000, 2.000000, 1.500000]"));
    let copula = std::fs::read_to_string(dir.path().join("out/copula.txt")).unwrap();
    assert!(copula.contains("# init_source = command-line"));
    assert!(copula.contains("# override.init = 3.5,2,1,2,1.5"));

    let bad = bmwgam(&["fit-copula", "--config", c, "--init", "1,2"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn missing_upstream_artifacts_are_data_errors() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(3, 6, 4), QUICK);
    let c = s(&config);
    for cmd in ["fit-copula", "simulate", "diagnose"] {
        let out = bmwgam(&[cmd, "--config", c]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing"), "{cmd}");
    }
}

#[test]
fn corrupt_csv_names_the_line() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(3, 6, 5), QUICK);
    let data = dir.path().join("data.csv");
    let mut text = std::fs::read_to_string(&data).unwrap();
    text.push_str("wind,3,0,0,not-a-number\n");
    let line = text.lines().count();
    std::fs::write(&data, text).unwrap();
    let out = bmwgam(&["fit-marginals", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempdir().unwrap();
    assert_eq!(bmwgam(&["fit-marginals"]).status.code(), Some(1));
    assert_eq!(bmwgam(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bmwgam(&["--help"]).status.code(), Some(0));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\npath = \"x.csv\"\n[copula]\nnu = 0.5\n").unwrap();
    assert_eq!(bmwgam(&["fit-marginals", "--config", s(&bad)]).status.code(), Some(1));
    let config = write_project(dir.path(), &synthetic_cube(3, 6, 6), QUICK);
    let zero = bmwgam(&["fit-marginals", "--config", s(&config), "--workers", "0"]);
    assert_eq!(zero.status.code(), Some(1));
}

#[test]
fn realization_override_and_structural_zeros() {
    let dir = tempdir().unwrap();
    let cube = synthetic_cube(3, 8, 7);
    let config = write_project(dir.path(), &cube, QUICK);
    let c = s(&config);
    stage(&["fit-marginals", "--config", c]);
    stage(&["fit-copula", "--config", c]);
    stage(&["simulate", "--config", c, "--realizations", "2"]);
    let (header, rows) = read_table(&dir.path().join("out/scenarios.csv"));
    assert_eq!(header, ["realization", "variable", "time", "x", "y", "value"]);
    assert_eq!(rows.len(), 2 * cube.len());
    let meta = std::fs::read_to_string(dir.path().join("out/scenarios.bin.meta.txt")).unwrap();
    assert!(meta.contains("override.realizations = 2"));

    // night-time irradiance is zero in the data and must stay zero
    let (_, nt, nn) = cube.dims();
    for r in &rows {
        let t = (r[2].parse::<f64>().unwrap() / 3.0).round() as usize;
        let x: f64 = r[3].parse().unwrap();
        let y: f64 = r[4].parse().unwrap();
        let n = (y / 10.0) as usize * 3 + (x / 10.0) as usize;
        assert!(t < nt && n < nn);
        if r[1] == "ghi" && cube.is_masked(2, t, n) {
            assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
        }
        let v: f64 = r[5].parse().unwrap();
        if r[1] != "temperature" {
            assert!(v >= 0.0);
        }
    }
}

#[test]
fn diagnostics_honour_lag_range() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(3, 8, 8), QUICK);
    let out = dir.path().join("out");
    run_pipeline(&config, &out, 1);
    let max_lag = |file: &str| {
        let (_, rows) = read_table(&out.join("diagnostics").join(file));
        rows.iter().map(|r| r[2].parse::<usize>().unwrap()).max().unwrap()
    };
    assert_eq!(max_lag("acf.csv"), 4);
    // PACF needs twice as many points as lags: (8 − 1)/2
    assert_eq!(max_lag("pacf.csv"), 3);
    let meta = std::fs::read_to_string(out.join("diagnostics/meta.txt")).unwrap();
    assert!(meta.contains("time_slices = 2,5"));
}

#[test]
fn seed_override_changes_draws() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(3, 6, 9), QUICK);
    let c = s(&config);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    stage(&["fit-marginals", "--config", c, "--out", s(&a)]);
    stage(&["fit-marginals", "--config", c, "--out", s(&b), "--seed", "8"]);
    let ea = std::fs::read(a.join("ensemble.bin")).unwrap();
    let eb = std::fs::read(b.join("ensemble.bin")).unwrap();
    assert_ne!(ea, eb);
    let meta = std::fs::read_to_string(b.join("ensemble.bin.meta.txt")).unwrap();
    assert!(meta.contains("override.seed = 8") && meta.contains("seed = 8"));
}

#[test]
fn stages_are_deterministic_across_workers() {
    let dir = tempdir().unwrap();
    let config = write_project(dir.path(), &synthetic_cube(4, 8, 10), QUICK);
    let one = dir.path().join("one");
    let three = dir.path().join("three");
    run_pipeline(&config, &one, 1);
    run_pipeline(&config, &three, 3);
    for f in [
        "ensemble.bin",
        "copula.txt",
        "scenarios.bin",
        "scenarios.csv",
        "diagnostics/acf.csv",
        "diagnostics/variograms.csv",
        "diagnostics/posterior_maps.csv",
    ] {
        assert_eq!(std::fs::read(one.join(f)).unwrap(), std::fs::read(three.join(f)).unwrap(), "{f}");
    }
}
