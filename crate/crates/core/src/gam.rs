//! Penalized GAM fitting for one window: penalized (IR)LS, GCV smoothing
//! selection, dispersion, and the Gaussian coefficient posterior.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::rng::stream;
use crate::scalar::{cast, cast_usize, is_finite, to_f64, Scalar};
use crate::splines::{SplineBasis, WindowPoint};

/// Linear predictor floor for the square-root link.
pub const ETA_FLOOR: f64 = 1e-6;
/// Relative change in penalized deviance that ends PIRLS.
pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("smoothing parameter must be positive")]
    InvalidLambda,
    #[error("response {value} at row {row} outside the family domain")]
    OutOfDomain { row: usize, value: f64 },
    #[error("penalized system matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("PIRLS diverged: penalized deviance increased {0} consecutive iterations")]
    Diverged(usize),
    #[error("no smoothing parameter in the grid produced a valid fit")]
    AllFitsFailed,
    #[error("empty smoothing-parameter grid")]
    EmptyGrid,
    #[error("invalid draw request: {0}")]
    InvalidDraws(&'static str),
}

/// Response distribution and link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Normal response, identity link.
    NormalIdentity,
    /// Gamma response, square-root link.
    GammaSqrt,
}

impl Family {
    pub fn link<T: Scalar>(self, mu: T) -> T {
        match self {
            Family::NormalIdentity => mu,
            Family::GammaSqrt => mu.sqrt(),
        }
    }

    pub fn inverse_link<T: Scalar>(self, eta: T) -> T {
        match self {
            Family::NormalIdentity => eta,
            Family::GammaSqrt => eta * eta,
        }
    }

    pub fn variance<T: Scalar>(self, mu: T) -> T {
        match self {
            Family::NormalIdentity => T::one(),
            Family::GammaSqrt => mu * mu,
        }
    }

    pub fn unit_deviance<T: Scalar>(self, y: T, mu: T) -> T {
        match self {
            Family::NormalIdentity => (y - mu) * (y - mu),
            Family::GammaSqrt => cast::<T>(2.0) * ((y - mu) / mu - (y / mu).ln()),
        }
    }

    /// Whether responses must be strictly positive.
    pub fn positive_support(self) -> bool {
        matches!(self, Family::GammaSqrt)
    }

    pub fn in_domain<T: Scalar>(self, y: T) -> bool {
        is_finite(y) && (!self.positive_support() || y > T::zero())
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::NormalIdentity => "normal-identity",
            Family::GammaSqrt => "gamma-sqrt",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Family::NormalIdentity => 0,
            Family::GammaSqrt => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Family::NormalIdentity),
            1 => Some(Family::GammaSqrt),
            _ => None,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal-identity" | "normal" | "gaussian" => Ok(Family::NormalIdentity),
            "gamma-sqrt" | "gamma" => Ok(Family::GammaSqrt),
            other => Err(format!("unknown family '{other}' (expected normal-identity or gamma-sqrt)")),
        }
    }
}

/// Result of one penalized fit at fixed λ.
#[derive(Debug, Clone)]
pub struct PenalizedFit<T: Scalar> {
    pub beta: DVector<T>,
    pub lambda: T,
    /// tr[(XᵀWX + λS)⁻¹ XᵀWX]
    pub edf: T,
    /// Pearson statistic / (n − edf)
    pub phi: T,
    pub deviance: T,
    /// deviance + λ βᵀSβ
    pub penalized_deviance: T,
    /// Lower Cholesky factor of XᵀWX + λS at convergence.
    pub chol_l: DMatrix<T>,
    pub iterations: usize,
    pub eta_floor_hits: usize,
    /// Deviance after each PIRLS iteration (one entry for the Normal family).
    pub deviance_trace: Vec<T>,
    /// Penalized deviance after each PIRLS iteration.
    pub objective_trace: Vec<T>,
    pub fitted: DVector<T>,
}

fn check_dims<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    s: &DMatrix<T>,
    family: Family,
    lambda: T,
) -> Result<(), FitError> {
    if x.nrows() != y.len() {
        return Err(FitError::Dimension(format!("X has {} rows, y has {}", x.nrows(), y.len())));
    }
    if s.nrows() != x.ncols() || s.ncols() != x.ncols() {
        return Err(FitError::Dimension(format!(
            "S is {}x{}, X has {} columns",
            s.nrows(),
            s.ncols(),
            x.ncols()
        )));
    }
    if !(lambda > T::zero()) {
        return Err(FitError::InvalidLambda);
    }
    if let Some((row, &v)) = y.iter().enumerate().find(|(_, &v)| !family.in_domain(v)) {
        return Err(FitError::OutOfDomain { row, value: to_f64(v) });
    }
    Ok(())
}

fn chol<T: Scalar>(h: DMatrix<T>) -> Result<Cholesky<T, Dyn>, FitError> {
    Cholesky::new(h).ok_or(FitError::NotPositiveDefinite)
}

/// tr(H⁻¹ G) given the Cholesky factor of H.
fn trace_solve<T: Scalar>(ch: &Cholesky<T, Dyn>, g: &DMatrix<T>) -> T {
    ch.solve(g).trace()
}

fn quad<T: Scalar>(s: &DMatrix<T>, b: &DVector<T>) -> T {
    b.dot(&(s * b))
}

/// Minimizes `−ℓ(β) + λ βᵀSβ` (as deviance + λ βᵀSβ) at fixed λ.
///
/// Normal-identity is a single solve of `(XᵀX + λS)β = Xᵀy`. Gamma-sqrt uses
/// penalized IRLS with weights `4/η²` and working response
/// `η + (y − μ)/(2η)`, started from `μ = y`, with step halving on the
/// penalized deviance. Iteration stops once the deviance's relative change
/// falls below [`IRLS_TOL`].
pub fn fit_penalized<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    s: &DMatrix<T>,
    family: Family,
    lambda: T,
) -> Result<PenalizedFit<T>, FitError> {
    check_dims(x, y, s, family, lambda)?;
    match family {
        Family::NormalIdentity => {
            let xtx = x.tr_mul(x);
            let xty = x.tr_mul(y);
            fit_normal_gram(x, y, s, &xtx, &xty, lambda)
        }
        Family::GammaSqrt => fit_gamma_sqrt(x, y, s, lambda),
    }
}

fn fit_normal_gram<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    s: &DMatrix<T>,
    xtx: &DMatrix<T>,
    xty: &DVector<T>,
    lambda: T,
) -> Result<PenalizedFit<T>, FitError> {
    let h = xtx + s * lambda;
    let ch = chol(h)?;
    let beta = ch.solve(xty);
    let fitted = x * &beta;
    let deviance = (y - &fitted).norm_squared();
    let edf = trace_solve(&ch, xtx);
    let n = cast_usize::<T>(y.len());
    let phi = deviance / (n - edf);
    let penalized_deviance = deviance + lambda * quad(s, &beta);
    Ok(PenalizedFit {
        lambda,
        edf,
        phi,
        deviance,
        penalized_deviance,
        chol_l: ch.l(),
        iterations: 1,
        eta_floor_hits: 0,
        deviance_trace: vec![deviance],
        objective_trace: vec![penalized_deviance],
        fitted,
        beta,
    })
}

fn gamma_deviance<T: Scalar>(y: &DVector<T>, eta: &DVector<T>) -> T {
    y.iter()
        .zip(eta.iter())
        .map(|(&yi, &e)| Family::GammaSqrt.unit_deviance(yi, e * e))
        .fold(T::zero(), |a, b| a + b)
}

fn floor_eta<T: Scalar>(eta: &mut DVector<T>) -> usize {
    let floor = cast::<T>(ETA_FLOOR);
    let mut hits = 0;
    for e in eta.iter_mut() {
        if *e <= floor {
            *e = floor;
            hits += 1;
        }
    }
    hits
}

fn weighted_gram<T: Scalar>(x: &DMatrix<T>, w: &DVector<T>) -> DMatrix<T> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= wi;
    }
    x.tr_mul(&xw)
}

fn fit_gamma_sqrt<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    s: &DMatrix<T>,
    lambda: T,
) -> Result<PenalizedFit<T>, FitError> {
    let two = cast::<T>(2.0);
    let four = cast::<T>(4.0);
    let tol = cast::<T>(IRLS_TOL);
    let mut eta: DVector<T> = y.map(|v| v.sqrt());
    let mut hits = floor_eta(&mut eta);
    let mut beta: Option<DVector<T>> = None;
    let mut prev_obj: Option<T> = None;
    let mut increases = 0usize;
    let mut deviance_trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..IRLS_MAX_ITER {
        iterations += 1;
        let w = eta.map(|e| four / (e * e));
        let z = DVector::from_iterator(
            y.len(),
            eta.iter().zip(y.iter()).map(|(&e, &yi)| e + (yi - e * e) / (two * e)),
        );
        let g = weighted_gram(x, &w);
        let ch = chol(g + s * lambda)?;
        let rhs = x.tr_mul(&z.component_mul(&w));
        let proposal = ch.solve(&rhs);

        let evaluate = |b: &DVector<T>| -> (DVector<T>, usize, T, T) {
            let mut e = x * b;
            let h = floor_eta(&mut e);
            let dev = gamma_deviance(y, &e);
            (e, h, dev, dev + lambda * quad(s, b))
        };
        let (mut cand_beta, mut cand) = (proposal.clone(), evaluate(&proposal));
        if let (Some(old), Some(prev)) = (&beta, prev_obj) {
            let mut step = T::one();
            let mut k = 0;
            while !(cand.3 <= prev) && k < MAX_HALVINGS {
                step *= cast(0.5);
                cand_beta = old + (&proposal - old) * step;
                cand = evaluate(&cand_beta);
                k += 1;
            }
        }
        let (new_eta, h, dev, obj) = cand;
        if !is_finite(obj) {
            return Err(FitError::Diverged(increases + 1));
        }
        hits += h;
        deviance_trace.push(dev);
        objective_trace.push(obj);
        eta = new_eta;
        beta = Some(cand_beta);
        if let Some(prev) = prev_obj {
            if obj > prev {
                increases += 1;
                if increases >= 3 {
                    return Err(FitError::Diverged(increases));
                }
            } else {
                increases = 0;
            }
            prev_obj = Some(obj);
        } else {
            prev_obj = Some(obj);
        }
        // convergence is judged on the deviance, which changes at first
        // order near the optimum where the penalized objective is flat
        if let [.., before, last] = deviance_trace[..] {
            if (last - before).abs() / last.abs().max(cast(f64::MIN_POSITIVE)) < tol {
                break;
            }
        }
    }

    let beta = beta.expect("at least one iteration");
    let w = eta.map(|e| four / (e * e));
    let g = weighted_gram(x, &w);
    let ch = chol(&g + s * lambda)?;
    let edf = trace_solve(&ch, &g);
    let fitted = eta.map(|e| e * e);
    let pearson = y
        .iter()
        .zip(fitted.iter())
        .map(|(&yi, &mu)| (yi - mu) * (yi - mu) / (mu * mu))
        .fold(T::zero(), |a, b| a + b);
    let n = cast_usize::<T>(y.len());
    let deviance = *deviance_trace.last().unwrap();
    Ok(PenalizedFit {
        lambda,
        edf,
        phi: pearson / (n - edf),
        deviance,
        penalized_deviance: *objective_trace.last().unwrap(),
        chol_l: ch.l(),
        iterations,
        eta_floor_hits: hits,
        deviance_trace,
        objective_trace,
        fitted,
        beta,
    })
}

/// GCV score `n·D / (n − tr A)²`.
pub fn gcv_score<T: Scalar>(fit: &PenalizedFit<T>, n: usize) -> T {
    let n = cast_usize::<T>(n);
    let denom = n - fit.edf;
    n * fit.deviance / (denom * denom)
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid<T: Scalar>(lo: T, hi: T, points: usize) -> Vec<T> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * cast_usize::<T>(i) / cast_usize::<T>(points - 1)).exp())
        .collect()
}

/// Default grid: 20 log-spaced values over `[1e−4·n, 1e4·n] · (tr(XᵀX)/n)/tr(S)`,
/// i.e. eight decades centered where `λS` balances the Gram matrix.
pub fn default_lambda_grid<T: Scalar>(x: &DMatrix<T>, s: &DMatrix<T>) -> Vec<T> {
    let ts = s.trace();
    let scale = if ts > T::zero() { x.norm_squared() / ts } else { T::one() };
    log_grid(cast::<T>(1e-4) * scale, cast::<T>(1e4) * scale, 20)
}

/// Outcome of a GCV grid search.
#[derive(Debug, Clone)]
pub struct GcvSelection<T: Scalar> {
    pub lambda: T,
    pub fit: PenalizedFit<T>,
    /// GCV score per grid value; `None` where the fit failed.
    pub scores: Vec<Option<T>>,
}

/// Picks the grid λ with the smallest GCV score; ties go to the larger λ.
pub fn gcv_select<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    s: &DMatrix<T>,
    family: Family,
    lambda_grid: &[T],
) -> Result<GcvSelection<T>, FitError> {
    if lambda_grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    if lambda_grid.iter().any(|&l| !(l > T::zero())) {
        return Err(FitError::InvalidLambda);
    }
    check_dims(x, y, s, family, lambda_grid[0])?;
    let mut order: Vec<usize> = (0..lambda_grid.len()).collect();
    order.sort_by(|&a, &b| lambda_grid[a].partial_cmp(&lambda_grid[b]).unwrap());

    let gram = match family {
        Family::NormalIdentity => Some((x.tr_mul(x), x.tr_mul(y))),
        Family::GammaSqrt => None,
    };
    let mut scores = vec![None; lambda_grid.len()];
    let mut best: Option<(T, PenalizedFit<T>)> = None;
    for &i in &order {
        let lambda = lambda_grid[i];
        let fit = match &gram {
            Some((xtx, xty)) => fit_normal_gram(x, y, s, xtx, xty, lambda),
            None => fit_gamma_sqrt(x, y, s, lambda),
        };
        let Ok(fit) = fit else { continue };
        let score = gcv_score(&fit, y.len());
        if !is_finite(score) || !(fit.edf < cast_usize::<T>(y.len())) {
            continue;
        }
        scores[i] = Some(score);
        if best.as_ref().is_none_or(|(b, _)| score <= *b) {
            best = Some((score, fit));
        }
    }
    let (_, fit) = best.ok_or(FitError::AllFitsFailed)?;
    Ok(GcvSelection {
        lambda: fit.lambda,
        fit,
        scores,
    })
}

/// Identifies the cell a window is centered on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub variable: usize,
    pub time: usize,
    pub location: usize,
}

/// A fitted window GAM with its Gaussian coefficient posterior
/// `N(β̂, (XᵀWX + λS)⁻¹ φ̂)`.
#[derive(Debug, Clone)]
pub struct WindowFit<T: Scalar> {
    pub basis: SplineBasis<T>,
    pub beta_hat: DVector<T>,
    /// Lower Cholesky factor of XᵀWX + λS.
    pub post_precision_chol: DMatrix<T>,
    pub lambda: T,
    pub phi_hat: T,
    pub edf: T,
    pub family: Family,
    pub center: CellIndex,
}

impl<T: Scalar> WindowFit<T> {
    pub fn new(basis: SplineBasis<T>, fit: PenalizedFit<T>, family: Family, center: CellIndex) -> Self {
        Self {
            basis,
            beta_hat: fit.beta,
            post_precision_chol: fit.chol_l,
            lambda: fit.lambda,
            phi_hat: fit.phi,
            edf: fit.edf,
            family,
            center,
        }
    }

    /// `(XᵀWX + λS)⁻¹ φ̂`
    pub fn posterior_covariance(&self) -> DMatrix<T> {
        let l = &self.post_precision_chol;
        let j = l.nrows();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(j, j))
            .expect("triangular factor with nonzero diagonal");
        let cov = linv.tr_mul(&linv) * self.phi_hat;
        (&cov + cov.transpose()) * cast::<T>(0.5)
    }

    /// Mean and variance of the linear predictor at a raw point.
    pub fn linear_predictor(&self, point: &WindowPoint<T>) -> (T, T) {
        let row = self.basis.evaluate(point);
        let mean = row.dot(&self.beta_hat);
        let v = self
            .post_precision_chol
            .solve_lower_triangular(&row)
            .expect("triangular factor with nonzero diagonal");
        (mean, v.norm_squared() * self.phi_hat)
    }
}

pub(crate) fn standard_normal<T: Scalar, R: Rng>(rng: &mut R) -> T {
    cast(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// `m` coefficient vectors (as columns) drawn from the posterior.
pub fn posterior_draws<T: Scalar>(fit: &WindowFit<T>, m: usize, seed: u64) -> Result<DMatrix<T>, FitError> {
    if m == 0 {
        return Err(FitError::InvalidDraws("m must be at least 1"));
    }
    if !(fit.phi_hat >= T::zero()) {
        return Err(FitError::NotPositiveDefinite);
    }
    let j = fit.beta_hat.len();
    let mut rng = stream(seed, &[0x706f_7374]);
    let eps = DMatrix::from_fn(j, m, |_, _| standard_normal::<T, _>(&mut rng));
    // Lᵀ B = ε  =>  cov(B) = (L Lᵀ)⁻¹
    let lt = fit.post_precision_chol.transpose();
    let mut draws = lt.solve_upper_triangular(&eps).ok_or(FitError::NotPositiveDefinite)?;
    draws *= fit.phi_hat.sqrt();
    for mut col in draws.column_iter_mut() {
        col += &fit.beta_hat;
    }
    Ok(draws)
}

/// Posterior-predictive draws at a raw `(x, y, t)` point.
#[derive(Debug, Clone)]
pub struct PredictiveDraws<T: Scalar> {
    pub values: Vec<T>,
    /// Draws whose linear predictor was floored at [`ETA_FLOOR`].
    pub eta_clipped: usize,
}

/// Draws `m` responses from `∫ p(ỹ | β, φ̂) p(β | y) dβ` at `point`.
///
/// Only the linear predictor `x(point)ᵀβ` enters the response law, so the
/// coefficient draw is taken on that one-dimensional projection,
/// `N(xᵀβ̂, φ̂ xᵀ(XᵀWX + λS)⁻¹x)`.
pub fn predictive_draws<T: Scalar>(
    fit: &WindowFit<T>,
    point: &WindowPoint<T>,
    m: usize,
    seed: u64,
) -> Result<PredictiveDraws<T>, FitError> {
    if m == 0 {
        return Err(FitError::InvalidDraws("m must be at least 1"));
    }
    let (mean, var) = fit.linear_predictor(point);
    let sd = var.max(T::zero()).sqrt();
    let mut rng = stream(seed, &[0x7072_6564]);
    let mut values = Vec::with_capacity(m);
    let mut clipped = 0;
    match fit.family {
        Family::NormalIdentity => {
            let noise_sd = fit.phi_hat.max(T::zero()).sqrt();
            for _ in 0..m {
                let eta = mean + sd * standard_normal::<T, _>(&mut rng);
                values.push(eta + noise_sd * standard_normal::<T, _>(&mut rng));
            }
        }
        Family::GammaSqrt => {
            let phi = to_f64(fit.phi_hat);
            if !(phi > 0.0) {
                return Err(FitError::InvalidDraws("Gamma dispersion must be positive"));
            }
            let unit = Gamma::new(1.0 / phi, 1.0).map_err(|_| FitError::InvalidDraws("bad Gamma shape"))?;
            let floor = cast::<T>(ETA_FLOOR);
            for _ in 0..m {
                let mut eta = mean + sd * standard_normal::<T, _>(&mut rng);
                if eta <= floor {
                    eta = floor;
                    clipped += 1;
                }
                let mu = to_f64(eta * eta);
                let g = unit.sample(&mut rng) * mu * phi;
                // a Gamma draw can underflow to zero for tiny shape; keep the support
                values.push(cast(g.max(f64::MIN_POSITIVE)));
            }
        }
    }
    Ok(PredictiveDraws {
        values,
        eta_clipped: clipped,
    })
}
