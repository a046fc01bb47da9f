//! Moving-window marginal fitting over every cell of a cube, and the
//! per-cell posterior-predictive ensembles that define the empirical
//! CDF and quantile transforms.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::gam::{
    default_lambda_grid, gcv_select, predictive_draws, CellIndex, FitError, WindowFit,
};
use crate::grid::{spatial_neighbors, temporal_window, ByteReader, GridError, SpaceTimeCube};
use crate::rng::derive_seed;
use crate::scalar::{cast, cast_usize, to_f64, Scalar};
use crate::splines::{build_basis, select_knots, time_scale_for, BasisError, WindowPoint};

#[derive(Debug, Error)]
pub enum WindowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid window configuration: {0}")]
    Config(String),
    #[error("{failed} of {total} windows failed (more than 1%)")]
    TooManyFailures {
        failed: usize,
        total: usize,
        failures: Vec<CellFailure>,
    },
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Why one cell could not be fitted.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub cell: CellIndex,
    pub reason: String,
}

/// Window and sampling hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Nearest locations per window, center included.
    pub k_space: usize,
    /// Nearest time points per window, center included.
    pub w_time: usize,
    /// Spline knots per window (capped at the window's distinct points).
    pub knots: usize,
    /// Posterior-predictive draws per cell.
    pub draws: usize,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            k_space: 30,
            w_time: 9,
            knots: 50,
            draws: 1000,
            seed: 0,
        }
    }
}

/// Per-cell sorted posterior-predictive draws, flat in `p·T·N + t·N + n` order.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEnsemble<T: Scalar> {
    dims: (usize, usize, usize),
    m: usize,
    /// `true` where the cube excluded the cell; such cells have no draws.
    mask: Vec<bool>,
    /// Cells whose window fit failed and whose draws come from the window's
    /// observed values instead.
    failed: Vec<bool>,
    draws: Vec<T>,
    config: WindowConfig,
    eta_clipped: u64,
    label: String,
}

impl<T: Scalar> MarginalEnsemble<T> {
    /// Assembles an ensemble from per-cell draws (`None` for masked cells).
    /// Draws are sorted per cell.
    pub fn from_cells(
        dims: (usize, usize, usize),
        m: usize,
        cells: Vec<Option<Vec<T>>>,
        config: WindowConfig,
    ) -> Result<Self, WindowError> {
        let total = dims.0 * dims.1 * dims.2;
        if cells.len() != total || m == 0 {
            return Err(WindowError::Config("cell count or draw count mismatch".into()));
        }
        let mut draws = vec![T::zero(); total * m];
        let mut mask = vec![true; total];
        for (i, cell) in cells.into_iter().enumerate() {
            if let Some(mut d) = cell {
                if d.len() != m {
                    return Err(WindowError::Config(format!("cell {i} has {} draws, expected {m}", d.len())));
                }
                d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                draws[i * m..(i + 1) * m].copy_from_slice(&d);
                mask[i] = false;
            }
        }
        Ok(Self {
            dims,
            m,
            mask,
            failed: vec![false; total],
            draws,
            config,
            eta_clipped: 0,
            label: String::new(),
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn draws_per_cell(&self) -> usize {
        self.m
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn failed(&self) -> &[bool] {
        &self.failed
    }

    /// Free-form provenance stored in the binary artifact.
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    /// Draws whose linear predictor had to be floored (Gamma families).
    pub fn eta_clipped(&self) -> u64 {
        self.eta_clipped
    }

    #[inline]
    pub fn index(&self, p: usize, t: usize, n: usize) -> usize {
        p * self.dims.1 * self.dims.2 + t * self.dims.2 + n
    }

    /// Sorted draws of a flat cell index, `None` for masked cells.
    pub fn cell(&self, idx: usize) -> Option<&[T]> {
        (!self.mask[idx]).then(|| &self.draws[idx * self.m..(idx + 1) * self.m])
    }

    pub fn cell_at(&self, p: usize, t: usize, n: usize) -> Option<&[T]> {
        self.cell(self.index(p, t, n))
    }

    /// Plotting-position CDF `(r − 0.5)/m` of a cell, `None` if masked.
    pub fn empirical_cdf(&self, idx: usize, value: T) -> Option<T> {
        self.cell(idx).map(|d| empirical_cdf(d, value))
    }

    /// Interpolated quantile of a cell, `None` if masked.
    pub fn empirical_quantile(&self, idx: usize, u: T) -> Option<T> {
        self.cell(idx).map(|d| empirical_quantile(d, u))
    }

    /// Posterior-predictive mean of every unmasked cell (NaN elsewhere).
    pub fn cell_means(&self) -> Vec<T> {
        let inv = T::one() / cast_usize::<T>(self.m);
        (0..self.mask.len())
            .map(|i| match self.cell(i) {
                Some(d) => d.iter().fold(T::zero(), |a, &b| a + b) * inv,
                None => cast(f64::NAN),
            })
            .collect()
    }
}

/// `(r − 0.5)/m` with `r = #{draws ≤ value}`, clamped to `[0.5/m, 1 − 0.5/m]`.
/// `sorted` must be ascending.
pub fn empirical_cdf<T: Scalar>(sorted: &[T], value: T) -> T {
    let m = sorted.len();
    let r = sorted.partition_point(|&d| d <= value);
    let mm = cast_usize::<T>(m);
    let half = cast::<T>(0.5);
    let lo = half / mm;
    let hi = T::one() - lo;
    let f = (cast_usize::<T>(r) - half) / mm;
    f.max(lo).min(hi)
}

/// Linear interpolation of ascending `sorted` at plotting positions
/// `(i − 0.5)/m`, constant beyond the extreme draws.
pub fn empirical_quantile<T: Scalar>(sorted: &[T], u: T) -> T {
    let m = sorted.len();
    let mm = cast_usize::<T>(m);
    let pos = u * mm - cast::<T>(0.5); // zero-based fractional order statistic
    if !(pos > T::zero()) {
        return sorted[0];
    }
    if pos >= cast_usize::<T>(m - 1) {
        return sorted[m - 1];
    }
    let lo = to_f64(pos).floor() as usize;
    let frac = pos - cast_usize::<T>(lo);
    sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
}

/// Observations of one window, centered on the window's cell.
#[derive(Debug, Clone)]
pub struct WindowData<T: Scalar> {
    pub points: Vec<WindowPoint<T>>,
    pub responses: Vec<T>,
    pub time_scale: T,
}

/// Collects the unmasked observations of variable `p` in the window
/// around `(t, n)`. Coordinates are relative to the center cell.
pub fn window_data<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    config: &WindowConfig,
    cell: CellIndex,
) -> Result<WindowData<T>, GridError> {
    let coords = cube.coords();
    let neighbors = spatial_neighbors(coords, cell.location, config.k_space)?;
    let times = temporal_window(coords.n_times(), cell.time, config.w_time)?;
    let c = coords.locations()[cell.location];
    let tc = coords.times()[cell.time];
    let mut points = Vec::with_capacity(neighbors.len() * times.len());
    let mut responses = Vec::with_capacity(points.capacity());
    for &t in &times {
        for &n in &neighbors {
            if let Some(v) = cube.get(cell.variable, t, n) {
                let l = coords.locations()[n];
                points.push([l[0] - c[0], l[1] - c[1], coords.times()[t] - tc]);
                responses.push(v);
            }
        }
    }
    let locs: Vec<[T; 2]> = neighbors.iter().map(|&n| coords.locations()[n]).collect();
    Ok(WindowData {
        points,
        responses,
        time_scale: time_scale_for(&locs, coords.time_step()),
    })
}

/// Fits the GCV-selected window GAM centered on `cell`.
pub fn fit_window<T: Scalar>(
    data: &WindowData<T>,
    knots: usize,
    family: crate::gam::Family,
    cell: CellIndex,
) -> Result<WindowFit<T>, CellError> {
    let scaled: Vec<[T; 3]> = data
        .points
        .iter()
        .map(|p| [p[0], p[1], p[2] * data.time_scale])
        .collect();
    let distinct = {
        let mut k: Vec<[u64; 3]> = scaled.iter().map(|p| p.map(|v| to_f64(v).to_bits())).collect();
        k.sort_unstable();
        k.dedup();
        k.len()
    };
    let idx = select_knots(&scaled, knots.min(distinct))?;
    let knot_pts: Vec<[T; 3]> = idx.iter().map(|&i| scaled[i]).collect();
    let basis = build_basis(&data.points, &knot_pts, data.time_scale)?;
    let x = basis.design().clone();
    let y = DVector::from_column_slice(&data.responses);
    let grid = default_lambda_grid(&x, basis.penalty());
    let sel = gcv_select(&x, &y, basis.penalty(), family, &grid)?;
    Ok(WindowFit::new(basis, sel.fit, family, cell))
}

/// A dedicated pool of `workers` threads (at least one).
pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| e.to_string())
}

struct CellOutcome<T> {
    draws: Option<Vec<T>>,
    failure: Option<CellFailure>,
    clipped: usize,
}

fn fallback_draws<T: Scalar>(values: &[T], m: usize) -> Vec<T> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (0..m)
        .map(|i| {
            let u = (cast_usize::<T>(i) + cast(0.5)) / cast_usize::<T>(m);
            empirical_quantile(&sorted, u)
        })
        .collect()
}

fn process_cell<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    config: &WindowConfig,
    idx: usize,
) -> Result<CellOutcome<T>, GridError> {
    let (_, nt, nn) = cube.dims();
    let cell = CellIndex {
        variable: idx / (nt * nn),
        time: (idx / nn) % nt,
        location: idx % nn,
    };
    if cube.mask()[idx] {
        return Ok(CellOutcome {
            draws: None,
            failure: None,
            clipped: 0,
        });
    }
    let data = window_data(cube, config, cell)?;
    let family = cube.variables()[cell.variable].family;
    let seed = derive_seed(config.seed, &[cell.variable as u64, cell.time as u64, cell.location as u64]);
    let attempt = fit_window(&data, config.knots, family, cell).and_then(|fit| {
        predictive_draws(&fit, &[T::zero(); 3], config.draws, seed).map_err(CellError::from)
    });
    Ok(match attempt {
        Ok(d) => CellOutcome {
            draws: Some(d.values),
            failure: None,
            clipped: d.eta_clipped,
        },
        Err(e) => CellOutcome {
            draws: Some(fallback_draws(&data.responses, config.draws)),
            failure: Some(CellFailure {
                cell,
                reason: e.to_string(),
            }),
            clipped: 0,
        },
    })
}

/// Fits every unmasked cell's window and draws its posterior-predictive
/// ensemble. Output is identical for any `workers` count.
///
/// A failed window is recorded and its cell falls back to the plotting
/// positions of the window's observed values; the run fails only if more
/// than 1% of windows fail.
pub fn fit_all_windows<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    config: &WindowConfig,
    workers: usize,
) -> Result<(MarginalEnsemble<T>, Vec<CellFailure>), WindowError> {
    let (np, nt, nn) = cube.dims();
    if config.k_space == 0 || config.k_space > nn {
        return Err(WindowError::Config(format!("k_space {} not in 1..={nn}", config.k_space)));
    }
    if config.w_time == 0 || config.w_time > nt {
        return Err(WindowError::Config(format!("w_time {} not in 1..={nt}", config.w_time)));
    }
    if config.knots == 0 || config.draws == 0 {
        return Err(WindowError::Config("knots and draws must be positive".into()));
    }
    let pool = thread_pool(workers).map_err(WindowError::Pool)?;
    let total = np * nt * nn;
    let outcomes: Vec<CellOutcome<T>> = pool.install(|| {
        (0..total)
            .into_par_iter()
            .map(|i| process_cell(cube, config, i))
            .collect::<Result<_, _>>()
    })?;

    let mut failures = Vec::new();
    let mut clipped = 0u64;
    let mut failed = vec![false; total];
    let mut cells = Vec::with_capacity(total);
    for (i, o) in outcomes.into_iter().enumerate() {
        clipped += o.clipped as u64;
        if let Some(f) = o.failure {
            failed[i] = true;
            failures.push(f);
        }
        cells.push(o.draws);
    }
    let fitted = cube.mask().iter().filter(|&&m| !m).count();
    if failures.len() * 100 > fitted {
        return Err(WindowError::TooManyFailures {
            failed: failures.len(),
            total: fitted,
            failures,
        });
    }
    let mut ens = MarginalEnsemble::from_cells((np, nt, nn), config.draws, cells, *config)?;
    ens.failed = failed;
    ens.eta_clipped = clipped;
    Ok((ens, failures))
}

const ENSEMBLE_MAGIC: &[u8; 8] = b"BMWENS01";

impl<T: Scalar> MarginalEnsemble<T> {
    /// Little-endian binary artifact: header, hyperparameters, per-cell
    /// flags, then the sorted draws of every unmasked cell as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let unmasked = self.mask.iter().filter(|&&m| !m).count();
        let mut buf = Vec::with_capacity(96 + self.mask.len() + unmasked * self.m * 8);
        buf.extend_from_slice(ENSEMBLE_MAGIC);
        buf.extend_from_slice(&(self.label.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.label.as_bytes());
        let c = &self.config;
        for v in [
            self.dims.0 as u64,
            self.dims.1 as u64,
            self.dims.2 as u64,
            self.m as u64,
            c.k_space as u64,
            c.w_time as u64,
            c.knots as u64,
            c.seed,
            self.eta_clipped,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.mask.len() {
            buf.push(u8::from(self.mask[i]) | (u8::from(self.failed[i]) << 1));
        }
        for i in 0..self.mask.len() {
            if let Some(d) = self.cell(i) {
                for &v in d {
                    buf.extend_from_slice(&to_f64(v).to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != ENSEMBLE_MAGIC {
            return Err(GridError::BadArtifact("not an ensemble artifact".into()));
        }
        let label_len = r.u64()? as usize;
        let label = String::from_utf8(r.take(label_len)?.to_vec())
            .map_err(|_| GridError::BadArtifact("label not utf-8".into()))?;
        let mut h = [0u64; 9];
        for v in h.iter_mut() {
            *v = r.u64()?;
        }
        let dims = (h[0] as usize, h[1] as usize, h[2] as usize);
        let m = h[3] as usize;
        let config = WindowConfig {
            k_space: h[4] as usize,
            w_time: h[5] as usize,
            knots: h[6] as usize,
            draws: m,
            seed: h[7],
        };
        let total = dims.0 * dims.1 * dims.2;
        let flags = r.take(total)?.to_vec();
        let mut draws = vec![T::zero(); total * m];
        for (i, &f) in flags.iter().enumerate() {
            if f & 1 == 0 {
                for k in 0..m {
                    draws[i * m + k] = cast(r.f64()?);
                }
            }
        }
        if !r.finished() {
            return Err(GridError::BadArtifact("trailing bytes".into()));
        }
        Ok(Self {
            dims,
            m,
            mask: flags.iter().map(|f| f & 1 == 1).collect(),
            failed: flags.iter().map(|f| f & 2 == 2).collect(),
            draws,
            config,
            eta_clipped: h[8],
            label,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), WindowError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| WindowError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, WindowError> {
        let bytes = std::fs::read(path).map_err(|source| WindowError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
