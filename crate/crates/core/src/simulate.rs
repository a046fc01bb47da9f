//! Joint space-time scenario generation from a fitted copula and the
//! per-cell marginal ensembles.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::copula::{pairwise, SeparableCorrelation};
use crate::gam::standard_normal;
use crate::grid::{ByteReader, Coordinates, GridError, Variable};
use crate::kron::kron_lower_mul;
use crate::normal::normal_cdf;
use crate::rng::stream;
use crate::scalar::{cast, to_f64, Scalar};
use crate::windows::{thread_pool, MarginalEnsemble, WindowConfig};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Artifact(#[from] GridError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `(L_p ⊗ L_t ⊗ L_n) ε` by mode-wise multiplication.
pub fn kron_chol_mul<T: Scalar>(
    chol_p: &DMatrix<T>,
    chol_t: &DMatrix<T>,
    chol_n: &DMatrix<T>,
    eps: &[T],
) -> Result<Vec<T>, SimulateError> {
    kron_lower_mul(chol_p, chol_t, chol_n, eps).ok_or_else(|| {
        SimulateError::Dimension(format!(
            "noise of length {} for factors {}x{}x{}",
            eps.len(),
            chol_p.nrows(),
            chol_t.nrows(),
            chol_n.nrows()
        ))
    })
}

/// Where a scenario set came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioProvenance {
    pub seed: u64,
    pub v_space: f64,
    pub v_time: f64,
    pub pairwise: Vec<f64>,
    pub marginals: WindowConfig,
    /// Free-form provenance stored in the binary artifact.
    pub label: String,
}

/// `k` realizations, each flat in `p·T·N + t·N + n` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet<T: Scalar> {
    dims: (usize, usize, usize),
    values: Vec<T>,
    pub provenance: ScenarioProvenance,
}

impl<T: Scalar> ScenarioSet<T> {
    /// Wraps `k` flat realizations of `dims`.
    pub fn from_realizations(
        dims: (usize, usize, usize),
        realizations: Vec<Vec<T>>,
        provenance: ScenarioProvenance,
    ) -> Result<Self, SimulateError> {
        let len = dims.0 * dims.1 * dims.2;
        if let Some(r) = realizations.iter().find(|r| r.len() != len) {
            return Err(SimulateError::Dimension(format!("realization of length {}, expected {len}", r.len())));
        }
        Ok(Self {
            dims,
            values: realizations.concat(),
            provenance,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn cells(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.cells()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn realization(&self, k: usize) -> &[T] {
        let c = self.cells();
        &self.values[k * c..(k + 1) * c]
    }

    pub fn realizations(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks(self.cells().max(1))
    }

    /// Long-format CSV `realization,variable,time,x,y,value`.
    pub fn write_csv(&self, path: &Path, coords: &Coordinates<T>, variables: &[Variable]) -> Result<(), SimulateError> {
        let io = |source| SimulateError::Io {
            path: path.to_path_buf(),
            source,
        };
        let (np, nt, nn) = self.dims;
        if coords.n_times() != nt || coords.n_locations() != nn || variables.len() != np {
            return Err(SimulateError::Dimension("coordinates do not match scenarios".into()));
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "realization,variable,time,x,y,value").map_err(io)?;
        for (k, r) in self.realizations().enumerate() {
            for (p, var) in variables.iter().enumerate() {
                for t in 0..nt {
                    let time = to_f64(coords.times()[t]);
                    for n in 0..nn {
                        let [x, y] = coords.locations()[n];
                        writeln!(
                            w,
                            "{k},{},{time},{},{},{}",
                            var.name,
                            to_f64(x),
                            to_f64(y),
                            to_f64(r[p * nt * nn + t * nn + n])
                        )
                        .map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }

    /// Little-endian dump: header, provenance, then all values as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(128 + self.values.len() * 8);
        b.extend_from_slice(SCENARIO_MAGIC);
        let pr = &self.provenance;
        b.extend_from_slice(&(pr.label.len() as u64).to_le_bytes());
        b.extend_from_slice(pr.label.as_bytes());
        let m = &pr.marginals;
        for v in [
            self.dims.0 as u64,
            self.dims.1 as u64,
            self.dims.2 as u64,
            self.len() as u64,
            pr.seed,
            m.k_space as u64,
            m.w_time as u64,
            m.knots as u64,
            m.draws as u64,
            m.seed,
            pr.pairwise.len() as u64,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for v in [pr.v_space, pr.v_time].iter().chain(&pr.pairwise) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.values {
            b.extend_from_slice(&to_f64(v).to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SimulateError> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != SCENARIO_MAGIC {
            return Err(GridError::BadArtifact("not a scenario artifact".into()).into());
        }
        let label_len = r.u64()? as usize;
        let label = String::from_utf8(r.take(label_len)?.to_vec())
            .map_err(|_| GridError::BadArtifact("label not utf-8".into()))?;
        let mut h = [0u64; 11];
        for v in h.iter_mut() {
            *v = r.u64()?;
        }
        let dims = (h[0] as usize, h[1] as usize, h[2] as usize);
        let v_space = r.f64()?;
        let v_time = r.f64()?;
        let pairwise = (0..h[10]).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let count = dims.0 * dims.1 * dims.2 * h[3] as usize;
        let values = (0..count).map(|_| r.f64().map(cast)).collect::<Result<Vec<T>, _>>()?;
        if !r.finished() {
            return Err(GridError::BadArtifact("trailing bytes".into()).into());
        }
        Ok(Self {
            dims,
            values,
            provenance: ScenarioProvenance {
                seed: h[4],
                v_space,
                v_time,
                pairwise,
                marginals: WindowConfig {
                    k_space: h[5] as usize,
                    w_time: h[6] as usize,
                    knots: h[7] as usize,
                    draws: h[8] as usize,
                    seed: h[9],
                },
                label,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), SimulateError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| SimulateError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, SimulateError> {
        let bytes = std::fs::read(path).map_err(|source| SimulateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

const SCENARIO_MAGIC: &[u8; 8] = b"BMWSCN01";

/// One realization: `ε ~ N(0, I)`, `z = Lε`, `y = F̂⁻¹(Φ(z))` per cell,
/// structural zeros at masked cells.
fn realize<T: Scalar>(
    corr: &SeparableCorrelation<T>,
    ensemble: &MarginalEnsemble<T>,
    seed: u64,
    index: usize,
) -> Result<Vec<T>, SimulateError> {
    let (np, nt, nn) = ensemble.dims();
    let mut rng = stream(seed, &[index as u64]);
    let eps: Vec<T> = (0..np * nt * nn).map(|_| standard_normal(&mut rng)).collect();
    let z = kron_chol_mul(corr.chol_p(), corr.chol_t(), corr.chol_n(), &eps)?;
    Ok(z.iter()
        .enumerate()
        .map(|(i, &zi)| ensemble.empirical_quantile(i, normal_cdf(zi)).unwrap_or(T::zero()))
        .collect())
}

/// Draws `k` realizations; realization `i` uses its own substream of
/// `seed`, so output is independent of `workers`.
pub fn simulate_scenarios<T: Scalar>(
    corr: &SeparableCorrelation<T>,
    ensemble: &MarginalEnsemble<T>,
    k: usize,
    seed: u64,
    workers: usize,
) -> Result<ScenarioSet<T>, SimulateError> {
    if corr.dims() != ensemble.dims() {
        return Err(SimulateError::Dimension(format!(
            "copula {:?} vs ensemble {:?}",
            corr.dims(),
            ensemble.dims()
        )));
    }
    let pool = thread_pool(workers).map_err(SimulateError::Pool)?;
    let realizations = pool.install(|| {
        (0..k)
            .into_par_iter()
            .map(|i| realize(corr, ensemble, seed, i))
            .collect::<Result<Vec<_>, _>>()
    })?;
    ScenarioSet::from_realizations(
        ensemble.dims(),
        realizations,
        ScenarioProvenance {
            seed,
            v_space: to_f64(corr.v_space),
            v_time: to_f64(corr.v_time),
            pairwise: pairwise(&corr.sigma_p).into_iter().map(to_f64).collect(),
            marginals: *ensemble.config(),
            label: String::new(),
        },
    )
}
