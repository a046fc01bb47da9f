//! Moving-window GAM marginals joined by a separable Gaussian copula, for
//! simulating multivariate space-time weather fields.
//!
//! Pipeline: [`windows::fit_all_windows`] fits a local penalized spline
//! model around every cell and stores posterior-predictive draws;
//! [`copula::fit_mle`] fits a Matérn-5/2 Kronecker correlation to the
//! normal scores; [`simulate::simulate_scenarios`] draws joint fields;
//! [`diagnostics::summarize_scenarios`] compares them with the data.
//!
//! Numerical code is generic over [`Scalar`] (`f32`, `f64`). The aliases
//! below fix `f64`, which the pipeline uses.
//!
//! All flat vectors are ordered `p·T·N + t·N + n` (variable, time,
//! location).

pub mod copula;
pub mod diagnostics;
pub mod gam;
pub mod grid;
pub mod kron;
pub mod normal;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod splines;
pub mod windows;

pub use copula::{fit_mle, matern52, neg_loglik, normal_scores, CopulaError};
pub use diagnostics::{acf, empirical_variogram, pacf, summarize_scenarios, DiagError};
pub use gam::{Family, FitError};
pub use grid::{load_cube, CubeSchema, GridError, Variable};
pub use optim::LbfgsSettings;
pub use scalar::Scalar;
pub use simulate::{kron_chol_mul, simulate_scenarios, SimulateError};
pub use windows::{fit_all_windows, WindowConfig, WindowError};

pub type Coordinates = grid::Coordinates<f64>;
pub type SpaceTimeCube = grid::SpaceTimeCube<f64>;
pub type SplineBasis = splines::SplineBasis<f64>;
pub type PenalizedFit = gam::PenalizedFit<f64>;
pub type WindowFit = gam::WindowFit<f64>;
pub type MarginalEnsemble = windows::MarginalEnsemble<f64>;
pub type SeparableCorrelation = copula::SeparableCorrelation<f64>;
pub type CopulaFit = copula::CopulaFit<f64>;
pub type ScenarioSet = simulate::ScenarioSet<f64>;
pub type DiagnosticBundle = diagnostics::DiagnosticBundle<f64>;
pub type DiagnosticSettings = diagnostics::DiagnosticSettings<f64>;
