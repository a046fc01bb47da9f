//! Staged pipeline behind the `bmwgam` binary.
//!
//! Each command reads the TOML config plus upstream artifacts from the
//! output directory and writes its own artifacts there:
//!
//! | command         | writes                                                  |
//! |-----------------|---------------------------------------------------------|
//! | `fit-marginals` | `ensemble.bin`, `ensemble.bin.meta.txt`, `window_failures.csv` |
//! | `fit-copula`    | `copula.txt`                                            |
//! | `simulate`      | `scenarios.bin`, `scenarios.bin.meta.txt`, `scenarios.csv` |
//! | `diagnose`      | `diagnostics/*.csv`, `diagnostics/meta.txt`             |

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bmwgam::copula::{CopulaArtifact, CopulaError};
use bmwgam::diagnostics::{default_variogram_edges, DiagError, DiagnosticSettings};
use bmwgam::grid::{read_cube_binary, sidecar, GridError};
use bmwgam::rng::derive_seed;
use bmwgam::simulate::SimulateError;
use bmwgam::windows::WindowError;
use bmwgam::{MarginalEnsemble, ScenarioSet, SpaceTimeCube};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::{check_init, DataFormat, LoadedConfig};

pub const ENSEMBLE_FILE: &str = "ensemble.bin";
pub const FAILURES_FILE: &str = "window_failures.csv";
pub const COPULA_FILE: &str = "copula.txt";
pub const SCENARIO_FILE: &str = "scenarios.bin";
pub const SCENARIO_CSV: &str = "scenarios.csv";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";

/// Substream of the global seed used for scenario noise.
const SIMULATION_STREAM: u64 = 0x5349_4d55;

#[derive(Debug, Parser)]
#[command(name = "bmwgam", version, about = "Moving-window GAM + Gaussian copula weather scenario pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit every moving window and store the per-cell predictive draws.
    FitMarginals(Common),
    /// Fit the separable copula to the normal scores.
    FitCopula {
        #[command(flatten)]
        common: Common,
        /// Starting parameters `log_v_space,log_v_time,angle,…`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        init: Option<Vec<f64>>,
    },
    /// Draw joint scenarios from the fitted copula and marginals.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of realizations.
        #[arg(long)]
        realizations: Option<usize>,
    },
    /// Compare scenarios with the historical data.
    Diagnose(Common),
}

/// Failure classes, mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WindowError> for CliError {
    fn from(e: WindowError) -> Self {
        match e {
            WindowError::Grid(g) => g.into(),
            WindowError::Config(m) => CliError::Usage(m),
            e @ WindowError::Io { .. } => CliError::Data(e.to_string()),
            e => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CopulaError> for CliError {
    fn from(e: CopulaError) -> Self {
        match e {
            CopulaError::NotPositiveDefinite(_) | CopulaError::NonFiniteInit | CopulaError::InvalidParameter(_) => {
                CliError::Numerical(e.to_string())
            }
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Pool(m) => CliError::Numerical(m),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DiagError> for CliError {
    fn from(e: DiagError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Everything a command needs: resolved config, output dir, workers.
struct Context {
    loaded: LoadedConfig,
    out: PathBuf,
    workers: usize,
    hash: String,
}

impl Context {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut loaded = LoadedConfig::load(&common.config).map_err(CliError::Usage)?;
        if let Some(seed) = common.seed {
            loaded.config.seed = seed;
            loaded.overrides.push(("seed".into(), seed.to_string()));
        }
        let out = match &common.out {
            Some(o) => o.clone(),
            None => loaded.out_dir(),
        };
        let workers = match common.workers {
            Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
            Some(w) => w,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let hash = loaded.config.hash();
        Ok(Self {
            loaded,
            out,
            workers,
            hash,
        })
    }

    fn seed(&self) -> u64 {
        self.loaded.config.seed
    }

    fn label(&self) -> String {
        format!("config_hash={};seed={}", self.hash, self.seed())
    }

    /// `key = value` metadata lines shared by every artifact.
    fn header(&self) -> Vec<(String, String)> {
        let c = &self.loaded.config;
        let mut h = vec![
            ("config_hash".to_string(), self.hash.clone()),
            ("seed".to_string(), self.seed().to_string()),
            ("k_space".to_string(), c.windows.k_space.to_string()),
            ("w_time".to_string(), c.windows.w_time.to_string()),
            ("knots".to_string(), c.windows.knots.to_string()),
            ("draws".to_string(), c.windows.draws.to_string()),
            ("matern_nu".to_string(), c.copula.nu.to_string()),
        ];
        for (k, v) in &self.loaded.overrides {
            h.push((format!("override.{k}"), v.clone()));
        }
        h
    }

    fn load_cube(&self) -> Result<SpaceTimeCube, CliError> {
        let path = self.loaded.data_path();
        let cube = match self.loaded.config.data.format {
            DataFormat::Csv => bmwgam::load_cube::<f64>(&path, &self.loaded.config.schema())?,
            DataFormat::Binary => read_cube_binary::<f64>(&path)?,
        };
        let want: Vec<_> = self.loaded.config.variables();
        if cube.variables() != want.as_slice() {
            return Err(CliError::Data(format!(
                "{}: variables do not match the config",
                path.display()
            )));
        }
        let (p, t, n) = cube.dims();
        info!("loaded {}: {p} variables, {t} times, {n} locations", path.display());
        Ok(cube)
    }

    fn load_ensemble(&self, cube: &SpaceTimeCube) -> Result<MarginalEnsemble, CliError> {
        let path = self.out.join(ENSEMBLE_FILE);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "missing marginal ensemble {} (run fit-marginals first)",
                path.display()
            )));
        }
        let ens = MarginalEnsemble::read(&path)?;
        if ens.dims() != cube.dims() {
            return Err(CliError::Data(format!(
                "{}: dimensions {:?} do not match data {:?}",
                path.display(),
                ens.dims(),
                cube.dims()
            )));
        }
        if ens.label() != self.label() {
            warn!("{} was produced under a different config or seed ({})", path.display(), ens.label());
        }
        Ok(ens)
    }
}

fn write_meta(path: &Path, kind: &str, header: &[(String, String)], extra: &[(String, String)]) -> Result<(), CliError> {
    let mut s = format!("format = {kind}\n");
    for (k, v) in header.iter().chain(extra) {
        let _ = writeln!(s, "{k} = {v}");
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

fn fit_marginals(common: &Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let cube = ctx.load_cube()?;
    let cfg = ctx.loaded.config.window_config();
    info!("fitting {} windows with {} workers", cube.len(), ctx.workers);
    let result = bmwgam::fit_all_windows(&cube, &cfg, ctx.workers);
    let failures = match &result {
        Ok((_, f)) => f.clone(),
        Err(WindowError::TooManyFailures { failures, .. }) => failures.clone(),
        Err(_) => Vec::new(),
    };
    let report = ctx.out.join(FAILURES_FILE);
    let mut rows = String::from("variable,time,location,reason\n");
    for f in &failures {
        let name = &cube.variables()[f.cell.variable].name;
        let _ = writeln!(rows, "{name},{},{},\"{}\"", f.cell.time, f.cell.location, f.reason.replace('"', "'"));
    }
    std::fs::write(&report, rows).map_err(|e| io_err(&report, e))?;
    let (mut ens, failures) = result?;
    for f in &failures {
        warn!("window {:?} failed: {}", f.cell, f.reason);
    }
    ens.set_label(ctx.label());
    let path = ctx.out.join(ENSEMBLE_FILE);
    ens.write(&path)?;
    let fitted = ens.mask().iter().filter(|&&m| !m).count();
    write_meta(
        &sidecar(&path),
        "bmwgam-ensemble",
        &ctx.header(),
        &[
            ("fitted_cells".into(), fitted.to_string()),
            ("masked_cells".into(), (cube.len() - fitted).to_string()),
            ("failed_windows".into(), failures.len().to_string()),
            ("eta_clipped_draws".into(), ens.eta_clipped().to_string()),
        ],
    )?;
    println!("wrote {} ({fitted} cells, {} failed windows)", path.display(), failures.len());
    Ok(())
}

fn fit_copula(common: &Common, init: Option<Vec<f64>>) -> Result<(), CliError> {
    let mut ctx = Context::new(common)?;
    let p = ctx.loaded.config.variables.len();
    let (init, source) = match init {
        Some(v) => {
            check_init(&v, p).map_err(CliError::Usage)?;
            let shown = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            ctx.loaded.overrides.push(("init".into(), shown));
            (Some(v), "command-line")
        }
        None => match ctx.loaded.config.copula.init.clone() {
            Some(v) => (Some(v), "config"),
            None => (None, "default"),
        },
    };
    let cube = ctx.load_cube()?;
    let ens = ctx.load_ensemble(&cube)?;
    let z = bmwgam::normal_scores(&cube, &ens)?;
    let fit = bmwgam::fit_mle(&z, cube.coords(), p, init.as_deref(), &ctx.loaded.config.lbfgs())?;
    if !fit.converged {
        warn!(
            "copula fit stopped without reaching the gradient tolerance ({}, |g| = {:e})",
            fit.stop.as_str(),
            fit.grad_inf_norm
        );
    }
    let mut header = ctx.header();
    header.push(("init_source".into(), source.into()));
    header.push(("ensemble_label".into(), ens.label().to_string()));
    header.push(("masked_cells".into(), cube.mask().iter().filter(|&&m| m).count().to_string()));
    let path = ctx.out.join(COPULA_FILE);
    fit.write(&path, &header)?;

    let c = &fit.correlation;
    let params = fit.params.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ");
    let init_shown = fit.initial.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ");
    let pw = bmwgam::copula::pairwise(&c.sigma_p);
    println!("init ({source}) = [{init_shown}]");
    println!("params = [{params}]");
    println!("v_space_km = {:.6}", c.v_space);
    println!("v_time_h = {:.6}", c.v_time);
    println!(
        "pairwise_correlations = [{}]",
        pw.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", ")
    );
    println!("objective = {:.6}", fit.objective);
    println!("converged = {} ({} iterations, {})", fit.converged, fit.iterations, fit.stop.as_str());
    Ok(())
}

fn simulate(common: &Common, realizations: Option<usize>) -> Result<(), CliError> {
    let mut ctx = Context::new(common)?;
    let k = match realizations {
        Some(k) => {
            ctx.loaded.overrides.push(("realizations".into(), k.to_string()));
            k
        }
        None => ctx.loaded.config.simulate.realizations,
    };
    let cube = ctx.load_cube()?;
    let ens = ctx.load_ensemble(&cube)?;
    let copula_path = ctx.out.join(COPULA_FILE);
    if !copula_path.exists() {
        return Err(CliError::Data(format!(
            "missing copula {} (run fit-copula first)",
            copula_path.display()
        )));
    }
    let art = CopulaArtifact::read(&copula_path)?;
    let corr = art.correlation(cube.coords())?;
    let seed = derive_seed(ctx.seed(), &[SIMULATION_STREAM]);
    info!("simulating {k} realizations with {} workers", ctx.workers);
    let mut set = bmwgam::simulate_scenarios(&corr, &ens, k, seed, ctx.workers)?;
    set.provenance.label = ctx.label();
    let path = ctx.out.join(SCENARIO_FILE);
    set.write(&path)?;
    set.write_csv(&ctx.out.join(SCENARIO_CSV), cube.coords(), cube.variables())?;
    write_meta(
        &sidecar(&path),
        "bmwgam-scenarios",
        &ctx.header(),
        &[
            ("realizations".into(), k.to_string()),
            ("simulation_seed".into(), seed.to_string()),
            ("ensemble_label".into(), ens.label().to_string()),
            ("copula_objective".into(), format!("{:e}", art.objective)),
        ],
    )?;
    println!("wrote {} ({k} realizations)", path.display());
    Ok(())
}

fn diagnose(common: &Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let cube = ctx.load_cube()?;
    let path = ctx.out.join(SCENARIO_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("missing scenarios {} (run simulate first)", path.display())));
    }
    let set = ScenarioSet::read(&path)?;
    let d = &ctx.loaded.config.diagnostics;
    let nt = cube.coords().n_times();
    let time_slices = if d.time_slices.is_empty() {
        let mut s = vec![nt / 3, 2 * nt / 3];
        s.dedup();
        s
    } else {
        d.time_slices.clone()
    };
    let settings = DiagnosticSettings {
        max_lag: d.max_lag,
        time_slices,
        variogram_edges: Some(default_variogram_edges(cube.coords(), d.variogram_bins)),
        probes: d.probes.clone(),
        histogram_bins: d.histogram_bins,
    };
    let bundle = bmwgam::summarize_scenarios(&set, &cube, &settings, ctx.workers)?;
    let dir = ctx.out.join(DIAGNOSTICS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let files = bundle.write_csvs(&dir, &cube)?;
    if bundle.pacf_clipped > 0 {
        warn!("{} PACF recursions clipped a partial correlation", bundle.pacf_clipped);
    }
    let slices = settings.time_slices.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    write_meta(
        &dir.join("meta.txt"),
        "bmwgam-diagnostics",
        &ctx.header(),
        &[
            ("scenario_label".into(), set.provenance.label.clone()),
            ("realizations".into(), bundle.realizations.to_string()),
            ("acf_lags".into(), bundle.acf_lags.to_string()),
            ("pacf_lags".into(), bundle.pacf_lags.to_string()),
            ("pacf_clipped".into(), bundle.pacf_clipped.to_string()),
            ("time_slices".into(), slices),
            ("files".into(), files.join(",")),
        ],
    )?;
    println!("wrote {} diagnostic tables to {}", files.len(), dir.display());
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FitMarginals(c) => fit_marginals(&c),
        Command::FitCopula { common, init } => fit_copula(&common, init),
        Command::Simulate { common, realizations } => simulate(&common, realizations),
        Command::Diagnose(c) => diagnose(&c),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
