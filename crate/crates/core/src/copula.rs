//! Gaussian copula with separable Matérn-5/2 correlation
//! `Σ = Σ_p ⊗ Σ_t ⊗ Σ_n`, fitted by maximum likelihood.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::grid::{Coordinates, SpaceTimeCube};
use crate::kron::kron_lower_solve;
use crate::normal::normal_quantile;
use crate::optim::{fd_gradient, minimize, LbfgsSettings, StopReason};
use crate::scalar::{cast, cast_usize, compensated_sum, is_finite, to_f64, Scalar};
use crate::windows::MarginalEnsemble;

/// Fixed Matérn smoothness.
pub const MATERN_NU: f64 = 2.5;

#[derive(Debug, Error)]
pub enum CopulaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{0} correlation factor is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("objective is not finite at the initial point")]
    NonFiniteInit,
    #[error("malformed copula artifact: {0}")]
    BadArtifact(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `(1 + √5 d/ρ + 5d²/(3ρ²)) exp(−√5 d/ρ)`.
pub fn matern52<T: Scalar>(d: T, rho: T) -> T {
    let s = cast::<T>(5.0).sqrt() * d / rho;
    (T::one() + s + s * s / cast::<T>(3.0)) * (-s).exp()
}

/// Number of free parameters for `p` variables: two log-ranges plus
/// `p(p−1)/2` angles.
pub fn n_params(p: usize) -> usize {
    2 + p * (p - 1) / 2
}

/// Lower-triangular factor with unit-norm rows built from hyperspherical
/// angles, row by row (`θ_{1,0}, θ_{2,0}, θ_{2,1}, …`).
pub fn angles_to_factor<T: Scalar>(angles: &[T], p: usize) -> DMatrix<T> {
    let mut l = DMatrix::zeros(p, p);
    l[(0, 0)] = T::one();
    let mut k = 0;
    for i in 1..p {
        let mut sin_prod = T::one();
        for j in 0..i {
            l[(i, j)] = angles[k].cos() * sin_prod;
            sin_prod *= angles[k].sin();
            k += 1;
        }
        l[(i, i)] = sin_prod;
    }
    l
}

/// Correlation matrix `LLᵀ` from hyperspherical angles.
pub fn angles_to_correlation<T: Scalar>(angles: &[T], p: usize) -> DMatrix<T> {
    let l = angles_to_factor(angles, p);
    let mut r = &l * l.transpose();
    for i in 0..p {
        r[(i, i)] = T::one();
    }
    r
}

/// Angles in `(0, π)` reproducing a positive-definite correlation matrix.
pub fn correlation_to_angles<T: Scalar>(r: &DMatrix<T>) -> Result<Vec<T>, CopulaError> {
    let p = r.nrows();
    let l = r
        .clone()
        .cholesky()
        .ok_or(CopulaError::NotPositiveDefinite("variable"))?
        .unpack();
    let mut angles = Vec::with_capacity(p * (p - 1) / 2);
    for i in 1..p {
        let mut sin_prod = T::one();
        for j in 0..i {
            let c = if sin_prod > T::zero() {
                (l[(i, j)] / sin_prod).max(-T::one()).min(T::one())
            } else {
                T::zero()
            };
            let a = c.acos();
            angles.push(a);
            sin_prod *= a.sin();
        }
    }
    Ok(angles)
}

/// Upper-triangle entries `(0,1), (0,2), …, (1,2), …` of a correlation matrix.
pub fn pairwise<T: Scalar>(r: &DMatrix<T>) -> Vec<T> {
    let p = r.nrows();
    let mut out = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            out.push(r[(i, j)]);
        }
    }
    out
}

/// Correlation matrix from its upper-triangle entries.
pub fn from_pairwise<T: Scalar>(p: usize, values: &[T]) -> Result<DMatrix<T>, CopulaError> {
    if values.len() != p * (p - 1) / 2 {
        return Err(CopulaError::Dimension(format!("{} pairwise values for P={p}", values.len())));
    }
    let mut r = DMatrix::identity(p, p);
    let mut k = 0;
    for i in 0..p {
        for j in i + 1..p {
            r[(i, j)] = values[k];
            r[(j, i)] = values[k];
            k += 1;
        }
    }
    Ok(r)
}

fn spatial_matrix<T: Scalar>(coords: &Coordinates<T>, rho: T) -> DMatrix<T> {
    let n = coords.n_locations();
    DMatrix::from_fn(n, n, |i, j| if i == j { T::one() } else { matern52(coords.distance(i, j), rho) })
}

fn temporal_matrix<T: Scalar>(coords: &Coordinates<T>, rho: T) -> DMatrix<T> {
    let t = coords.times();
    DMatrix::from_fn(t.len(), t.len(), |i, j| matern52((t[i] - t[j]).abs(), rho))
}

fn chol<T: Scalar>(m: DMatrix<T>, which: &'static str) -> Result<DMatrix<T>, CopulaError> {
    Ok(m.cholesky().ok_or(CopulaError::NotPositiveDefinite(which))?.unpack())
}

fn log_det_from_chol<T: Scalar>(l: &DMatrix<T>) -> T {
    compensated_sum(l.diagonal().iter().map(|&d| d.ln())) * cast::<T>(2.0)
}

/// Fitted separable correlation with cached Cholesky factors for the
/// grid it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableCorrelation<T: Scalar> {
    pub v_space: T,
    pub v_time: T,
    pub sigma_p: DMatrix<T>,
    chol_p: DMatrix<T>,
    chol_t: DMatrix<T>,
    chol_n: DMatrix<T>,
}

impl<T: Scalar> SeparableCorrelation<T> {
    pub fn new(v_space: T, v_time: T, sigma_p: DMatrix<T>, coords: &Coordinates<T>) -> Result<Self, CopulaError> {
        if !(v_space > T::zero()) || !(v_time > T::zero()) || !is_finite(v_space) || !is_finite(v_time) {
            return Err(CopulaError::InvalidParameter("ranges must be positive and finite".into()));
        }
        let p = sigma_p.nrows();
        if p == 0 || !sigma_p.is_square() {
            return Err(CopulaError::Dimension("Σ_p must be square and non-empty".into()));
        }
        let tol = cast::<T>(1e-12);
        for i in 0..p {
            if (sigma_p[(i, i)] - T::one()).abs() > tol {
                return Err(CopulaError::InvalidParameter("Σ_p must have a unit diagonal".into()));
            }
            for j in 0..i {
                if (sigma_p[(i, j)] - sigma_p[(j, i)]).abs() > tol {
                    return Err(CopulaError::InvalidParameter("Σ_p must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            chol_p: chol(sigma_p.clone(), "variable")?,
            chol_t: chol(temporal_matrix(coords, v_time), "temporal")?,
            chol_n: chol(spatial_matrix(coords, v_space), "spatial")?,
            v_space,
            v_time,
            sigma_p,
        })
    }

    /// Builds from `(log v_space, log v_time, angles…)`.
    pub fn from_params(params: &[T], p: usize, coords: &Coordinates<T>) -> Result<Self, CopulaError> {
        if params.len() != n_params(p) {
            return Err(CopulaError::Dimension(format!("{} parameters for P={p}", params.len())));
        }
        Self::new(params[0].exp(), params[1].exp(), angles_to_correlation(&params[2..], p), coords)
    }

    /// `(log v_space, log v_time, angles…)` with angles in `(0, π)`.
    pub fn params(&self) -> Result<Vec<T>, CopulaError> {
        let mut out = vec![self.v_space.ln(), self.v_time.ln()];
        out.extend(correlation_to_angles(&self.sigma_p)?);
        Ok(out)
    }

    pub fn n_variables(&self) -> usize {
        self.sigma_p.nrows()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.chol_p.nrows(), self.chol_t.nrows(), self.chol_n.nrows())
    }

    pub fn chol_p(&self) -> &DMatrix<T> {
        &self.chol_p
    }

    pub fn chol_t(&self) -> &DMatrix<T> {
        &self.chol_t
    }

    pub fn chol_n(&self) -> &DMatrix<T> {
        &self.chol_n
    }

    /// `log det Σ` by the Kronecker identity.
    pub fn log_det(&self) -> T {
        let (p, t, n) = self.dims();
        cast_usize::<T>(t * n) * log_det_from_chol(&self.chol_p)
            + cast_usize::<T>(p * n) * log_det_from_chol(&self.chol_t)
            + cast_usize::<T>(p * t) * log_det_from_chol(&self.chol_n)
    }

    /// `log det Σ + zᵀΣ⁻¹z`.
    pub fn neg2_loglik(&self, z: &[T]) -> Result<T, CopulaError> {
        let w = kron_lower_solve(&self.chol_p, &self.chol_t, &self.chol_n, z).ok_or_else(|| {
            CopulaError::Dimension(format!("score vector has {} entries, expected {:?}", z.len(), self.dims()))
        })?;
        Ok(self.log_det() + compensated_sum(w.iter().map(|&v| v * v)))
    }
}

/// `log det Σ + zᵀΣ⁻¹z` at `(log v_space, log v_time, angles…)`.
pub fn neg_loglik<T: Scalar>(params: &[T], z: &[T], coords: &Coordinates<T>, p: usize) -> Result<T, CopulaError> {
    SeparableCorrelation::from_params(params, p, coords)?.neg2_loglik(z)
}

/// Normal scores `Φ⁻¹(F̂(y))` of every cell; masked cells get 0.
pub fn normal_scores<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    ensemble: &MarginalEnsemble<T>,
) -> Result<Vec<T>, CopulaError> {
    if cube.dims() != ensemble.dims() {
        return Err(CopulaError::Dimension(format!(
            "cube {:?} vs ensemble {:?}",
            cube.dims(),
            ensemble.dims()
        )));
    }
    (0..cube.len())
        .map(|i| {
            if cube.mask()[i] {
                return Ok(T::zero());
            }
            let u = ensemble
                .empirical_cdf(i, cube.values()[i])
                .ok_or_else(|| CopulaError::Dimension(format!("ensemble has no draws for cell {i}")))?;
            Ok(normal_quantile(u))
        })
        .collect()
}

/// Default starting point: median pairwise distance, twice the time step,
/// and the empirical cross-correlation of the scores between variables.
pub fn initial_params<T: Scalar>(z: &[T], coords: &Coordinates<T>, p: usize) -> Result<Vec<T>, CopulaError> {
    let n = coords.n_locations();
    let cells = coords.n_times() * n;
    if z.len() != p * cells {
        return Err(CopulaError::Dimension(format!("{} scores for {p} variables", z.len())));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(to_f64(coords.distance(i, j)));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let v_space = match dists.len() {
        0 => 1.0,
        k if k % 2 == 1 => dists[k / 2],
        k => 0.5 * (dists[k / 2 - 1] + dists[k / 2]),
    };
    let v_time = 2.0 * to_f64(coords.time_step());

    let block = |q: usize| &z[q * cells..(q + 1) * cells];
    let stats: Vec<(f64, f64)> = (0..p)
        .map(|q| {
            let b = block(q);
            let mean = b.iter().map(|&v| to_f64(v)).sum::<f64>() / cells as f64;
            let ss = b.iter().map(|&v| (to_f64(v) - mean).powi(2)).sum::<f64>();
            (mean, ss.sqrt())
        })
        .collect();
    let mut r = DMatrix::<f64>::identity(p, p);
    for a in 0..p {
        for b in a + 1..p {
            let (ma, sa) = stats[a];
            let (mb, sb) = stats[b];
            let c = if sa > 0.0 && sb > 0.0 {
                let cov: f64 = block(a)
                    .iter()
                    .zip(block(b))
                    .map(|(&x, &y)| (to_f64(x) - ma) * (to_f64(y) - mb))
                    .sum();
                cov / (sa * sb)
            } else {
                0.0
            };
            r[(a, b)] = c;
            r[(b, a)] = c;
        }
    }
    // shrink toward the identity until comfortably positive definite
    let mut shrink = 1.0;
    let angles = loop {
        let trial = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { shrink * r[(i, j)] });
        if let Some(c) = trial.clone().cholesky() {
            if c.l().diagonal().min() > 1e-3 {
                break correlation_to_angles(&trial)?;
            }
        }
        shrink *= 0.9;
    };
    let mut out = vec![cast::<T>(v_space.max(1e-6).ln()), cast::<T>(v_time.ln())];
    out.extend(angles.into_iter().map(cast::<T>));
    Ok(out)
}

/// A fitted copula with its optimization record.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaFit<T: Scalar> {
    pub correlation: SeparableCorrelation<T>,
    /// Optimized `(log v_space, log v_time, angles…)`.
    pub params: Vec<T>,
    pub initial: Vec<T>,
    /// `log det Σ + zᵀΣ⁻¹z` at the optimum.
    pub objective: T,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
    pub grad_inf_norm: T,
    pub trace: Vec<(usize, T)>,
}

/// Maximum-likelihood fit of the separable correlation to scores `z`.
/// Without `init`, starts from [`initial_params`]. Non-convergence is
/// reported through `converged`, not as an error.
pub fn fit_mle<T: Scalar>(
    z: &[T],
    coords: &Coordinates<T>,
    p: usize,
    init: Option<&[T]>,
    settings: &LbfgsSettings,
) -> Result<CopulaFit<T>, CopulaError> {
    if z.len() != p * coords.n_times() * coords.n_locations() {
        return Err(CopulaError::Dimension(format!("{} scores for P={p}", z.len())));
    }
    if !z.iter().all(|&v| is_finite(v)) {
        return Err(CopulaError::InvalidParameter("scores must be finite".into()));
    }
    let x0 = match init {
        Some(x) if x.len() == n_params(p) => x.to_vec(),
        Some(x) => return Err(CopulaError::Dimension(format!("{} initial parameters for P={p}", x.len()))),
        None => initial_params(z, coords, p)?,
    };
    let objective = |x: &[T]| neg_loglik(x, z, coords, p).unwrap_or(cast(f64::INFINITY));
    let r = minimize(objective, &x0, settings).ok_or(CopulaError::NonFiniteInit)?;
    Ok(CopulaFit {
        correlation: SeparableCorrelation::from_params(&r.x, p, coords)?,
        params: r.x,
        initial: x0,
        objective: r.value,
        converged: r.converged,
        stop: r.stop,
        iterations: r.iterations,
        grad_inf_norm: r.grad_inf_norm,
        trace: r.trace,
    })
}

/// Central finite-difference gradient of [`neg_loglik`].
pub fn neg_loglik_gradient<T: Scalar>(params: &[T], z: &[T], coords: &Coordinates<T>, p: usize, step: f64) -> Vec<T> {
    let mut f = |x: &[T]| neg_loglik(x, z, coords, p).unwrap_or(cast(f64::NAN));
    fd_gradient(&mut f, params, step)
}

impl<T: Scalar> CopulaFit<T> {
    /// Plain-text artifact. `header` lines are written first as `# key = value`.
    pub fn to_text(&self, header: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in header {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let c = &self.correlation;
        let _ = writeln!(s, "n_variables = {}", c.n_variables());
        let _ = writeln!(s, "nu = {MATERN_NU}");
        let _ = writeln!(s, "v_space_km = {:e}", to_f64(c.v_space));
        let _ = writeln!(s, "v_time_h = {:e}", to_f64(c.v_time));
        let join = |v: &[T]| v.iter().map(|&x| format!("{:e}", to_f64(x))).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "params = {}", join(&self.params));
        let _ = writeln!(s, "initial = {}", join(&self.initial));
        let _ = writeln!(s, "pairwise_correlations = {}", join(&pairwise(&c.sigma_p)));
        let _ = writeln!(s, "objective = {:e}", to_f64(self.objective));
        let _ = writeln!(s, "converged = {}", self.converged);
        let _ = writeln!(s, "stop_reason = {}", self.stop.as_str());
        let _ = writeln!(s, "iterations = {}", self.iterations);
        let _ = writeln!(s, "grad_inf_norm = {:e}", to_f64(self.grad_inf_norm));
        for (i, f) in &self.trace {
            let _ = writeln!(s, "trace = {i} {:e}", to_f64(*f));
        }
        s
    }

    pub fn write(&self, path: &Path, header: &[(String, String)]) -> Result<(), CopulaError> {
        std::fs::write(path, self.to_text(header)).map_err(|source| CopulaError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Parsed copula artifact: everything needed to rebuild the correlation on
/// a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaArtifact {
    pub header: Vec<(String, String)>,
    pub n_variables: usize,
    pub v_space: f64,
    pub v_time: f64,
    pub pairwise: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
}

impl CopulaArtifact {
    pub fn parse(text: &str) -> Result<Self, CopulaError> {
        let bad = |m: &str| CopulaError::BadArtifact(m.to_string());
        let mut header = Vec::new();
        let mut get = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                if let Some((k, v)) = h.split_once(" = ") {
                    header.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if let Some((k, v)) = line.split_once(" = ") {
                if k != "trace" {
                    get.insert(k.to_string(), v.to_string());
                }
            }
        }
        let field = |k: &str| get.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<f64, CopulaError> { field(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
        let n_variables: usize = field("n_variables")?.parse().map_err(|_| bad("bad n_variables"))?;
        let pairwise: Vec<f64> = field("pairwise_correlations")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad("bad pairwise_correlations")))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            header,
            n_variables,
            v_space: num("v_space_km")?,
            v_time: num("v_time_h")?,
            pairwise,
            objective: num("objective")?,
            converged: field("converged")?.parse().map_err(|_| bad("bad converged"))?,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CopulaError> {
        let text = std::fs::read_to_string(path).map_err(|source| CopulaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn correlation<T: Scalar>(&self, coords: &Coordinates<T>) -> Result<SeparableCorrelation<T>, CopulaError> {
        let pw: Vec<T> = self.pairwise.iter().map(|&v| cast(v)).collect();
        SeparableCorrelation::new(cast(self.v_space), cast(self.v_time), from_pairwise(self.n_variables, &pw)?, coords)
    }
}
