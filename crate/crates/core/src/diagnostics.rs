//! Validation statistics comparing simulated scenarios with the
//! historical cube: ACF/PACF, empirical variograms, posterior maps,
//! probe-location histograms and envelopes.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{Coordinates, SpaceTimeCube};
use crate::scalar::{cast, cast_usize, to_f64, Scalar};
use crate::simulate::ScenarioSet;
use crate::windows::thread_pool;

pub const DEFAULT_MAX_LAG: usize = 16;
pub const DEFAULT_VARIOGRAM_BINS: usize = 15;
pub const DEFAULT_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("series is constant")]
    ConstantSeries,
    #[error("series of length {len} too short for {max_lag} lags")]
    TooShort { len: usize, max_lag: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Biased sample autocorrelation at lags `1..=max_lag`.
pub fn acf<T: Scalar>(series: &[T], max_lag: usize) -> Result<Vec<T>, DiagError> {
    let len = series.len();
    if len <= max_lag {
        return Err(DiagError::TooShort { len, max_lag });
    }
    let mean = series.iter().fold(T::zero(), |s, &v| s + v) / cast_usize::<T>(len);
    let dev: Vec<T> = series.iter().map(|&v| v - mean).collect();
    let denom = dev.iter().fold(T::zero(), |s, &v| s + v * v);
    if !(denom > T::zero()) {
        return Err(DiagError::ConstantSeries);
    }
    Ok((1..=max_lag)
        .map(|h| {
            let num = (0..len - h).fold(T::zero(), |s, t| s + dev[t] * dev[t + h]);
            (num / denom).max(-T::one()).min(T::one())
        })
        .collect())
}

/// [`acf`] for a series with missing entries: the mean and variance use the
/// present values and each lag sums over pairs where both ends are present.
/// Equals [`acf`] when nothing is missing.
pub fn acf_with_gaps<T: Scalar>(series: &[Option<T>], max_lag: usize) -> Result<Vec<T>, DiagError> {
    let len = series.len();
    if len <= max_lag {
        return Err(DiagError::TooShort { len, max_lag });
    }
    let present: Vec<T> = series.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(DiagError::ConstantSeries);
    }
    let mean = present.iter().fold(T::zero(), |s, &v| s + v) / cast_usize::<T>(present.len());
    let dev: Vec<Option<T>> = series.iter().map(|v| v.map(|v| v - mean)).collect();
    let denom = dev.iter().flatten().fold(T::zero(), |s, &v| s + v * v);
    if !(denom > T::zero()) {
        return Err(DiagError::ConstantSeries);
    }
    Ok((1..=max_lag)
        .map(|h| {
            let num = (0..len - h).fold(T::zero(), |s, t| match (dev[t], dev[t + h]) {
                (Some(a), Some(b)) => s + a * b,
                _ => s,
            });
            (num / denom).max(-T::one()).min(T::one())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pacf<T> {
    /// Partial autocorrelations at lags `1..=max_lag`.
    pub values: Vec<T>,
    /// Some value reached `|φ| ≥ 1` through rounding and was clipped.
    pub clipped: bool,
}

/// Durbin–Levinson recursion on autocorrelations `rho[0] = ρ(1), …`.
pub fn pacf_from_acf<T: Scalar>(rho: &[T]) -> Pacf<T> {
    let mut values = Vec::with_capacity(rho.len());
    let mut phi: Vec<T> = Vec::with_capacity(rho.len());
    let mut clipped = false;
    let bound = T::one() - cast::<T>(1e-12);
    for k in 0..rho.len() {
        let (mut num, mut den) = (rho[k], T::one());
        for j in 0..k {
            num -= phi[j] * rho[k - 1 - j];
            den -= phi[j] * rho[j];
        }
        let mut a = num / den;
        if !(a.abs() < T::one()) {
            clipped = true;
            a = if a > T::zero() { bound } else { -bound };
        }
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - a * prev[k - 1 - j];
        }
        phi.push(a);
        values.push(a);
    }
    Pacf { values, clipped }
}

/// Partial autocorrelation at lags `1..=max_lag`; needs `2·max_lag < len`.
pub fn pacf<T: Scalar>(series: &[T], max_lag: usize) -> Result<Pacf<T>, DiagError> {
    if 2 * max_lag >= series.len() {
        return Err(DiagError::TooShort {
            len: series.len(),
            max_lag,
        });
    }
    Ok(pacf_from_acf(&acf(series, max_lag)?))
}

/// `bins` equal-width distance bins from the closest pair of locations to
/// half the largest pairwise distance, as `bins + 1` edges. Starts at 0 if
/// the closest pair is already beyond that half.
pub fn default_variogram_edges<T: Scalar>(coords: &Coordinates<T>, bins: usize) -> Vec<T> {
    let n = coords.n_locations();
    let mut max = T::zero();
    let mut min = cast::<T>(f64::INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            let d = coords.distance(i, j);
            max = max.max(d);
            if d > T::zero() {
                min = min.min(d);
            }
        }
    }
    let top = max * cast::<T>(0.5);
    let bottom = if min < top { min } else { T::zero() };
    let width = (top - bottom) / cast_usize::<T>(bins.max(1));
    (0..=bins).map(|b| bottom + width * cast_usize::<T>(b)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariogramBin<T> {
    pub lo: T,
    pub hi: T,
    pub count: usize,
    /// Semivariance; `None` for empty bins.
    pub gamma: Option<T>,
}

/// Binned semivariance of one spatial field; `None` entries are skipped.
/// Bins are half-open `[lo, hi)` except the last, which includes `hi`.
pub fn empirical_variogram<T: Scalar>(
    values: &[Option<T>],
    coords: &Coordinates<T>,
    edges: &[T],
) -> Vec<VariogramBin<T>> {
    let bins = edges.len().saturating_sub(1);
    let mut sums = vec![T::zero(); bins];
    let mut counts = vec![0usize; bins];
    if bins > 0 {
        let last = edges[bins];
        for i in 0..values.len() {
            let Some(a) = values[i] else { continue };
            for j in i + 1..values.len() {
                let Some(b) = values[j] else { continue };
                let d = coords.distance(i, j);
                if d < edges[0] || d > last {
                    continue;
                }
                let k = edges[1..].partition_point(|&e| e <= d).min(bins - 1);
                sums[k] += (a - b) * (a - b);
                counts[k] += 1;
            }
        }
    }
    (0..bins)
        .map(|k| VariogramBin {
            lo: edges[k],
            hi: edges[k + 1],
            count: counts[k],
            gamma: (counts[k] > 0).then(|| cast::<T>(0.5) * sums[k] / cast_usize::<T>(counts[k])),
        })
        .collect()
}

/// Order statistics of a sample, interpolated linearly between ranks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles<T> {
    pub min: T,
    pub q025: T,
    pub median: T,
    pub q975: T,
    pub max: T,
}

impl<T: Scalar> Quantiles<T> {
    /// `None` for an empty sample.
    pub fn of(values: &[T]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (v[hi] - v[lo]) * cast::<T>(h - lo as f64)
        };
        Some(Self {
            min: v[0],
            q025: q(0.025),
            median: q(0.5),
            q975: q(0.975),
            max: v[v.len() - 1],
        })
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn contains_95(&self, v: T) -> bool {
        v >= self.q025 && v <= self.q975
    }

    fn named(&self) -> [(&'static str, T); 5] {
        [
            ("min", self.min),
            ("q025", self.q025),
            ("median", self.median),
            ("q975", self.q975),
            ("max", self.max),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSettings<T> {
    pub max_lag: usize,
    /// Time indices at which variograms are computed.
    pub time_slices: Vec<usize>,
    /// Variogram bin edges; `None` uses [`default_variogram_edges`].
    pub variogram_edges: Option<Vec<T>>,
    /// Location indices for histogram and envelope panels.
    pub probes: Vec<usize>,
    pub histogram_bins: usize,
}

impl<T> Default for DiagnosticSettings<T> {
    fn default() -> Self {
        Self {
            max_lag: DEFAULT_MAX_LAG,
            time_slices: Vec::new(),
            variogram_edges: None,
            probes: Vec::new(),
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

/// Per-location serial correlation, historical vs simulated.
#[derive(Debug, Clone, PartialEq)]
pub struct LagProfile<T> {
    pub variable: usize,
    pub location: usize,
    /// `None` if the historical series is constant.
    pub historical: Option<Vec<T>>,
    /// Per lag, across realizations with a non-constant series.
    pub simulated: Vec<Option<Quantiles<T>>>,
    /// Realizations that contributed.
    pub realizations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariogramPanel<T> {
    pub variable: usize,
    pub time: usize,
    pub historical: Vec<VariogramBin<T>>,
    /// Per bin, across realizations.
    pub simulated: Vec<Option<Quantiles<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbePanel<T> {
    pub variable: usize,
    pub location: usize,
    /// Masked cells appear as structural zeros here and in the envelope.
    pub historical: Vec<T>,
    /// Per time step, across realizations.
    pub envelope: Vec<Option<Quantiles<T>>>,
    pub histogram_edges: Vec<T>,
    /// Unmasked time steps only.
    pub historical_counts: Vec<usize>,
    /// Pooled over realizations and unmasked time steps.
    pub simulated_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticBundle<T> {
    pub dims: (usize, usize, usize),
    pub realizations: usize,
    /// Per-cell mean over realizations, flat.
    pub mean: Vec<T>,
    /// Per-cell variance over realizations (divisor k), flat.
    pub variance: Vec<T>,
    pub acf_lags: usize,
    pub pacf_lags: usize,
    pub acf: Vec<LagProfile<T>>,
    pub pacf: Vec<LagProfile<T>>,
    /// Realization-location pairs whose PACF recursion had to clip.
    pub pacf_clipped: usize,
    pub variograms: Vec<VariogramPanel<T>>,
    pub probes: Vec<ProbePanel<T>>,
}

/// Historical field with masked cells as structural zeros, matching the
/// convention used for simulated fields.
pub fn historical_field<T: Scalar>(cube: &SpaceTimeCube<T>) -> Vec<T> {
    cube.values()
        .iter()
        .zip(cube.mask())
        .map(|(&v, &m)| if m { T::zero() } else { v })
        .collect()
}

fn series<T: Scalar>(field: &[T], dims: (usize, usize, usize), p: usize, n: usize) -> Vec<T> {
    let (_, nt, nn) = dims;
    (0..nt).map(|t| field[p * nt * nn + t * nn + n]).collect()
}

/// Time series at one location with masked cells left out.
fn gappy_series<T: Scalar>(
    field: &[T],
    mask: &[bool],
    dims: (usize, usize, usize),
    p: usize,
    n: usize,
) -> Vec<Option<T>> {
    let (_, nt, nn) = dims;
    (0..nt)
        .map(|t| {
            let i = p * nt * nn + t * nn + n;
            (!mask[i]).then_some(field[i])
        })
        .collect()
}

fn slice<T: Scalar>(field: &[T], mask: &[bool], dims: (usize, usize, usize), p: usize, t: usize) -> Vec<Option<T>> {
    let (_, nt, nn) = dims;
    let base = p * nt * nn + t * nn;
    (0..nn).map(|n| (!mask[base + n]).then_some(field[base + n])).collect()
}

fn lag_quantiles<T: Scalar>(rows: &[Vec<T>], lags: usize) -> Vec<Option<Quantiles<T>>> {
    (0..lags)
        .map(|h| Quantiles::of(&rows.iter().map(|r| r[h]).collect::<Vec<_>>()))
        .collect()
}

fn histogram<T: Scalar>(values: &[T], edges: &[T]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &v in values {
        if v < edges[0] || v > edges[bins] {
            continue;
        }
        counts[edges[1..].partition_point(|&e| e <= v).min(bins - 1)] += 1;
    }
    counts
}

/// Computes every diagnostic for `scenarios` against the historical `cube`.
pub fn summarize_scenarios<T: Scalar>(
    scenarios: &ScenarioSet<T>,
    cube: &SpaceTimeCube<T>,
    settings: &DiagnosticSettings<T>,
    workers: usize,
) -> Result<DiagnosticBundle<T>, DiagError> {
    let dims = cube.dims();
    let (np, nt, nn) = dims;
    if scenarios.dims() != dims {
        return Err(DiagError::Dimension(format!("scenarios {:?} vs cube {:?}", scenarios.dims(), dims)));
    }
    if let Some(&t) = settings.time_slices.iter().find(|&&t| t >= nt) {
        return Err(DiagError::Dimension(format!("time slice {t} outside 0..{nt}")));
    }
    if let Some(&n) = settings.probes.iter().find(|&&n| n >= nn) {
        return Err(DiagError::Dimension(format!("probe location {n} outside 0..{nn}")));
    }
    let k = scenarios.len();
    let cells = np * nt * nn;
    let hist = historical_field(cube);
    let mask = cube.mask();
    let acf_lags = settings.max_lag.min(nt - 1);
    let pacf_lags = settings.max_lag.min((nt - 1) / 2);
    let pool = thread_pool(workers).map_err(DiagError::Pool)?;

    let kk = cast_usize::<T>(k.max(1));
    let mut mean = vec![T::zero(); cells];
    for r in scenarios.realizations() {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= kk);
    let mut variance = vec![T::zero(); cells];
    for r in scenarios.realizations() {
        for ((s, &v), &m) in variance.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    variance.iter_mut().for_each(|s| *s /= kk);

    // Per (variable, location): ACF and PACF of every realization, with
    // masked times left out of both historical and simulated series.
    type Serial<T> = (Option<Vec<T>>, Option<Pacf<T>>);
    let per_series: Vec<(Serial<T>, Vec<Serial<T>>)> = pool.install(|| {
        (0..np * nn)
            .into_par_iter()
            .map(|pn| {
                let (p, n) = (pn / nn, pn % nn);
                let serial = |s: &[Option<T>]| -> Serial<T> {
                    (
                        acf_with_gaps(s, acf_lags).ok(),
                        acf_with_gaps(s, pacf_lags).ok().map(|r| pacf_from_acf(&r)),
                    )
                };
                let h = serial(&gappy_series(&hist, mask, dims, p, n));
                let sims = scenarios
                    .realizations()
                    .map(|r| serial(&gappy_series(r, mask, dims, p, n)))
                    .collect();
                (h, sims)
            })
            .collect()
    });
    let mut acf_out = Vec::with_capacity(np * nn);
    let mut pacf_out = Vec::with_capacity(np * nn);
    let mut pacf_clipped = 0;
    for (pn, ((h_acf, h_pacf), sims)) in per_series.into_iter().enumerate() {
        let (variable, location) = (pn / nn, pn % nn);
        let acfs: Vec<Vec<T>> = sims.iter().filter_map(|s| s.0.clone()).collect();
        let pacfs: Vec<Vec<T>> = sims
            .iter()
            .filter_map(|s| s.1.as_ref())
            .inspect(|p| pacf_clipped += usize::from(p.clipped))
            .map(|p| p.values.clone())
            .collect();
        pacf_clipped += usize::from(h_pacf.as_ref().is_some_and(|p| p.clipped));
        acf_out.push(LagProfile {
            variable,
            location,
            historical: h_acf,
            simulated: lag_quantiles(&acfs, acf_lags),
            realizations: acfs.len(),
        });
        pacf_out.push(LagProfile {
            variable,
            location,
            historical: h_pacf.map(|p| p.values),
            simulated: lag_quantiles(&pacfs, pacf_lags),
            realizations: pacfs.len(),
        });
    }

    let edges = settings
        .variogram_edges
        .clone()
        .unwrap_or_else(|| default_variogram_edges(cube.coords(), DEFAULT_VARIOGRAM_BINS));
    let coords = cube.coords();
    let mut variograms = Vec::new();
    for p in 0..np {
        for &t in &settings.time_slices {
            let historical = empirical_variogram(&slice(&hist, mask, dims, p, t), coords, &edges);
            let sims: Vec<Vec<VariogramBin<T>>> = pool.install(|| {
                (0..k)
                    .into_par_iter()
                    .map(|r| empirical_variogram(&slice(scenarios.realization(r), mask, dims, p, t), coords, &edges))
                    .collect()
            });
            let simulated = (0..historical.len())
                .map(|b| Quantiles::of(&sims.iter().filter_map(|s| s[b].gamma).collect::<Vec<_>>()))
                .collect();
            variograms.push(VariogramPanel {
                variable: p,
                time: t,
                historical,
                simulated,
            });
        }
    }

    let mut probes = Vec::new();
    for p in 0..np {
        for &n in &settings.probes {
            let historical = series(&hist, dims, p, n);
            let sims: Vec<Vec<T>> = scenarios.realizations().map(|r| series(r, dims, p, n)).collect();
            let envelope = (0..nt)
                .map(|t| Quantiles::of(&sims.iter().map(|s| s[t]).collect::<Vec<_>>()))
                .collect();
            // histograms compare the unmasked values only
            let present = |s: &[T]| -> Vec<T> {
                s.iter()
                    .enumerate()
                    .filter(|&(t, _)| !mask[p * nt * nn + t * nn + n])
                    .map(|(_, &v)| v)
                    .collect()
            };
            let hist_present = present(&historical);
            let pooled: Vec<T> = sims.iter().flat_map(|s| present(s)).collect();
            let all = hist_present.iter().chain(&pooled);
            let lo = all.clone().fold(cast::<T>(f64::INFINITY), |a, &b| a.min(b));
            let hi = all.fold(cast::<T>(f64::NEG_INFINITY), |a, &b| a.max(b));
            let bins = settings.histogram_bins.max(1);
            let width = if hi > lo { (hi - lo) / cast_usize::<T>(bins) } else { T::one() };
            let histogram_edges: Vec<T> = (0..=bins).map(|b| lo + width * cast_usize::<T>(b)).collect();
            probes.push(ProbePanel {
                variable: p,
                location: n,
                historical_counts: histogram(&hist_present, &histogram_edges),
                simulated_counts: histogram(&pooled, &histogram_edges),
                historical,
                envelope,
                histogram_edges,
            });
        }
    }

    Ok(DiagnosticBundle {
        dims,
        realizations: k,
        mean,
        variance,
        acf_lags,
        pacf_lags,
        acf: acf_out,
        pacf: pacf_out,
        pacf_clipped,
        variograms,
        probes,
    })
}

fn fmt<T: Scalar>(v: T) -> String {
    format!("{}", to_f64(v))
}

impl<T: Scalar> DiagnosticBundle<T> {
    /// Writes one tidy CSV per diagnostic into `dir` and returns the file
    /// names in write order.
    pub fn write_csvs(&self, dir: &Path, cube: &SpaceTimeCube<T>) -> Result<Vec<String>, DiagError> {
        let names: Vec<&str> = cube.variables().iter().map(|v| v.name.as_str()).collect();
        let coords = cube.coords();
        let (_, nt, nn) = self.dims;
        let mut files = Vec::new();
        let mut emit = |name: &str, header: &str, rows: Vec<String>| -> Result<(), DiagError> {
            let path = dir.join(name);
            let io = |source| DiagError::Io {
                path: path.clone(),
                source,
            };
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io)?);
            writeln!(w, "{header}").map_err(io)?;
            for r in rows {
                writeln!(w, "{r}").map_err(io)?;
            }
            w.flush().map_err(io)?;
            files.push(name.to_string());
            Ok(())
        };

        let mut rows = Vec::with_capacity(self.mean.len());
        for (i, (&m, &v)) in self.mean.iter().zip(&self.variance).enumerate() {
            let (p, t, n) = (i / (nt * nn), (i / nn) % nt, i % nn);
            let [x, y] = coords.locations()[n];
            rows.push(format!(
                "{},{},{n},{},{},{},{}",
                names[p],
                fmt(coords.times()[t]),
                fmt(x),
                fmt(y),
                fmt(m),
                fmt(v)
            ));
        }
        emit("posterior_maps.csv", "variable,time,location,x,y,mean,variance", rows)?;

        for (name, profiles) in [("acf.csv", &self.acf), ("pacf.csv", &self.pacf)] {
            let mut rows = Vec::new();
            for prof in profiles {
                let var = names[prof.variable];
                let loc = prof.location;
                if let Some(h) = &prof.historical {
                    for (lag, &v) in h.iter().enumerate() {
                        rows.push(format!("{var},{loc},{},historical,value,{}", lag + 1, fmt(v)));
                    }
                }
                for (lag, q) in prof.simulated.iter().enumerate() {
                    for (stat, v) in q.iter().flat_map(|q| q.named()) {
                        rows.push(format!("{var},{loc},{},simulated,{stat},{}", lag + 1, fmt(v)));
                    }
                }
            }
            emit(name, "variable,location,lag,source,statistic,value", rows)?;
        }

        let mut rows = Vec::new();
        for panel in &self.variograms {
            let var = names[panel.variable];
            let time = fmt(coords.times()[panel.time]);
            for (bin, q) in panel.historical.iter().zip(&panel.simulated) {
                let (lo, hi) = (fmt(bin.lo), fmt(bin.hi));
                let value = bin.gamma.map(fmt).unwrap_or_default();
                rows.push(format!("{var},{time},{lo},{hi},historical,value,{value},{}", bin.count));
                for (stat, v) in q.iter().flat_map(|q| q.named()) {
                    rows.push(format!("{var},{time},{lo},{hi},simulated,{stat},{},{}", fmt(v), bin.count));
                }
            }
        }
        emit("variograms.csv", "variable,time,bin_lo,bin_hi,source,statistic,value,count", rows)?;

        let mut hist_rows = Vec::new();
        let mut env_rows = Vec::new();
        for panel in &self.probes {
            let var = names[panel.variable];
            let loc = panel.location;
            for b in 0..panel.historical_counts.len() {
                let (lo, hi) = (fmt(panel.histogram_edges[b]), fmt(panel.histogram_edges[b + 1]));
                hist_rows.push(format!("{var},{loc},{lo},{hi},historical,{}", panel.historical_counts[b]));
                hist_rows.push(format!("{var},{loc},{lo},{hi},simulated,{}", panel.simulated_counts[b]));
            }
            for t in 0..nt {
                let time = fmt(coords.times()[t]);
                env_rows.push(format!("{var},{loc},{time},historical,value,{}", fmt(panel.historical[t])));
                for (stat, v) in panel.envelope[t].iter().flat_map(|q| q.named()) {
                    env_rows.push(format!("{var},{loc},{time},simulated,{stat},{}", fmt(v)));
                }
            }
        }
        emit("histograms.csv", "variable,location,bin_lo,bin_hi,source,count", hist_rows)?;
        emit("envelopes.csv", "variable,location,time,source,statistic,value", env_rows)?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gam::{standard_normal, Family};
    use crate::grid::Variable;
    use crate::simulate::ScenarioProvenance;
    use crate::windows::WindowConfig;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ar1(phi: f64, len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = 0.0;
        (0..len)
            .map(|_| {
                x = phi * x + standard_normal::<f64, _>(&mut rng);
                x
            })
            .collect()
    }

    #[test]
    fn alternating_series() {
        for len in [2usize, 10, 33 + 1] {
            let s: Vec<f64> = (0..len).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
            let r = acf(&s, 1).unwrap();
            assert!((r[0] + (len as f64 - 1.0) / len as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn gaps_skip_pairs() {
        let full = ar1(0.5, 40, 4);
        let dense: Vec<Option<f64>> = full.iter().map(|&v| Some(v)).collect();
        assert_eq!(acf_with_gaps(&dense, 5).unwrap(), acf(&full, 5).unwrap());

        // [1, _, 3, 5]: mean 3, deviations (−2, _, 0, 2), denominator 8;
        // lag 1 pairs only (3, 5), lag 2 pairs (1, 3)
        let s = [Some(1.0), None, Some(3.0), Some(5.0)];
        let r = acf_with_gaps(&s, 2).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
        let s = [Some(1.0), None, Some(5.0), Some(3.0)];
        assert_eq!(acf_with_gaps(&s, 2).unwrap(), vec![0.0, -0.5]);
        assert!(matches!(acf_with_gaps::<f64>(&[None, None, None], 1), Err(DiagError::ConstantSeries)));
    }

    #[test]
    fn ar1_long_series() {
        let s = ar1(0.8, 10_000, 1);
        let r = acf(&s, 2).unwrap();
        assert!((r[0] - 0.8).abs() < 0.02);
        let p = pacf(&s, 2).unwrap();
        assert_eq!(p.values[0], r[0]);
        assert!((p.values[0] - 0.8).abs() < 0.03 && p.values[1].abs() < 0.03);
    }

    #[test]
    fn white_noise_band() {
        let inside = (0..1000)
            .filter(|&s| acf(&ar1(0.0, 33, s), 1).unwrap()[0].abs() < 3.0 / 33f64.sqrt())
            .count();
        assert!(inside >= 990);
    }

    #[test]
    fn pacf_matches_yule_walker() {
        let s = ar1(0.5, 60, 9);
        let rho = acf(&s, 8).unwrap();
        let p = pacf(&s, 8).unwrap();
        for k in 1..=8 {
            let r = |h: usize| if h == 0 { 1.0 } else { rho[h - 1] };
            let a = DMatrix::from_fn(k, k, |i, j| r(i.abs_diff(j)));
            let b = DVector::from_fn(k, |i, _| r(i + 1));
            let phi = a.lu().solve(&b).unwrap();
            assert!((phi[k - 1] - p.values[k - 1]).abs() < 1e-10, "lag {k}");
        }
    }

    #[test]
    fn acf_errors() {
        assert!(matches!(acf(&[2.0; 10], 3), Err(DiagError::ConstantSeries)));
        assert!(matches!(acf(&[1.0, 2.0, 3.0], 3), Err(DiagError::TooShort { .. })));
        assert!(matches!(pacf(&[1.0, 2.0, 3.0, 4.0], 2), Err(DiagError::TooShort { .. })));
    }

    #[test]
    fn variogram_examples() {
        let coords = Coordinates::new(vec![[0.0, 0.0], [3.0, 0.0]], vec![0.0, 1.0]).unwrap();
        let v = empirical_variogram(&[Some(1.0), Some(5.0)], &coords, &[0.0, 5.0]);
        assert_eq!(v[0].gamma, Some(8.0));
        assert_eq!(v[0].count, 1);
        let v = empirical_variogram(&[Some(2.0), Some(2.0)], &coords, &[0.0, 1.0, 5.0]);
        assert_eq!(v[0], VariogramBin { lo: 0.0, hi: 1.0, count: 0, gamma: None });
        assert_eq!(v[1].gamma, Some(0.0));
        let v = empirical_variogram(&[Some(2.0), None], &coords, &[0.0, 5.0]);
        assert_eq!(v[0].count, 0);
    }

    #[test]
    fn default_edges() {
        let coords = Coordinates::new(vec![[0.0, 0.0], [30.0, 40.0], [3.0, 4.0]], vec![0.0, 1.0]).unwrap();
        let e: Vec<f64> = default_variogram_edges(&coords, 15);
        assert_eq!(e.len(), 16);
        assert_eq!(e[0], 5.0);
        assert!((e[15] - 25.0).abs() < 1e-12);
        let single = Coordinates::new(vec![[0.0, 0.0], [3.0, 4.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(default_variogram_edges::<f64>(&single, 2), vec![0.0, 1.25, 2.5]);
    }

    fn cube_and_copies(k: usize) -> (SpaceTimeCube<f64>, ScenarioSet<f64>) {
        let coords = Coordinates::new(
            (0..9).map(|i| [(i % 3) as f64 * 4.0, (i / 3) as f64 * 4.0]).collect(),
            (0..12).map(|t| t as f64).collect(),
        )
        .unwrap();
        let vals: Vec<f64> = (0..108).map(|i| ((i * 31 % 17) as f64).sqrt()).collect();
        let cube = SpaceTimeCube::new(coords, vec![Variable::new("v", Family::NormalIdentity)], vals).unwrap();
        let prov = ScenarioProvenance {
            seed: 0,
            v_space: 1.0,
            v_time: 1.0,
            pairwise: vec![],
            marginals: WindowConfig::default(),
            label: String::new(),
        };
        let set = ScenarioSet::from_realizations(cube.dims(), vec![cube.values().to_vec(); k], prov).unwrap();
        (cube, set)
    }

    #[test]
    fn copies_of_history_reproduce_history() {
        let (cube, set) = cube_and_copies(4);
        let settings = DiagnosticSettings {
            time_slices: vec![0, 5],
            probes: vec![2],
            ..Default::default()
        };
        let b = summarize_scenarios(&set, &cube, &settings, 2).unwrap();
        assert_eq!(b.mean, cube.values());
        assert!(b.variance.iter().all(|&v| v == 0.0));
        assert_eq!((b.acf_lags, b.pacf_lags), (11, 5));
        for prof in b.acf.iter().chain(&b.pacf) {
            let h = prof.historical.as_ref().unwrap();
            for (l, q) in prof.simulated.iter().enumerate() {
                let q = q.unwrap();
                assert!(q.min == h[l] && q.max == h[l]);
            }
        }
        for panel in &b.variograms {
            for (bin, q) in panel.historical.iter().zip(&panel.simulated) {
                if let Some(g) = bin.gamma {
                    assert_eq!(q.unwrap().median, g);
                }
            }
        }
        assert_eq!(b.probes[0].historical_counts, b.probes[0].simulated_counts.iter().map(|c| c / 4).collect::<Vec<_>>());

        let dir = tempfile::tempdir().unwrap();
        let files = b.write_csvs(dir.path(), &cube).unwrap();
        assert_eq!(files.len(), 6);
        let acf_csv = std::fs::read_to_string(dir.path().join("acf.csv")).unwrap();
        assert!(acf_csv.lines().skip(1).all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn single_realization_has_zero_variance() {
        let (cube, set) = cube_and_copies(1);
        let b = summarize_scenarios(&set, &cube, &DiagnosticSettings::default(), 1).unwrap();
        assert!(b.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantiles_of_sample() {
        let q = Quantiles::of(&[3.0f64, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!((q.min, q.median, q.max), (1.0, 3.0, 5.0));
        assert!((q.q025 - 1.1).abs() < 1e-12);
        assert!(Quantiles::<f64>::of(&[]).is_none());
    }
}
