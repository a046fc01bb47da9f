//! Multivariate space-time data model, neighbor selection, and cube I/O.
//!
//! A cube holds `P` variables observed at `T` regular times and `N` planar
//! locations. Every flat vector in the crate uses the order
//! `p * T * N + t * N + n`: variable outermost, location innermost.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use thiserror::Error;

use crate::gam::Family;
use crate::scalar::{cast, to_f64, Scalar};

/// Mean Earth radius in km used by the local equirectangular projection.
const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("irregular time grid: step {found} at index {index} differs from {expected}")]
    IrregularTimeGrid {
        index: usize,
        expected: f64,
        found: f64,
    },
    #[error("duplicate row for (variable, time, location) at line {line}")]
    DuplicateRow { line: u64 },
    #[error("duplicate location ({0}, {1})")]
    DuplicateLocation(f64, f64),
    #[error("invalid coordinates: {0}")]
    InvalidCoordinates(String),
    #[error("neighbor count {k} exceeds number of locations {n}")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("bad cube artifact: {0}")]
    BadArtifact(String),
}

impl GridError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        GridError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Planar location coordinates (km) and a regular time axis (epoch hours).
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates<T: Scalar> {
    locations: Vec<[T; 2]>,
    times: Vec<T>,
}

impl<T: Scalar> Coordinates<T> {
    /// Validates distinct locations and a strictly increasing, regular time axis.
    pub fn new(locations: Vec<[T; 2]>, times: Vec<T>) -> Result<Self, GridError> {
        if locations.is_empty() {
            return Err(GridError::InvalidCoordinates("no locations".into()));
        }
        if times.len() < 2 {
            return Err(GridError::InvalidCoordinates(
                "at least two time points are required".into(),
            ));
        }
        if locations
            .iter()
            .chain(std::iter::once(&[times[0], times[0]]))
            .any(|l| !l.iter().all(|&v| crate::scalar::is_finite(v)))
        {
            return Err(GridError::InvalidCoordinates("non-finite coordinate".into()));
        }
        let mut seen: Vec<(u64, u64)> = locations
            .iter()
            .map(|l| (to_f64(l[0]).to_bits(), to_f64(l[1]).to_bits()))
            .collect();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(GridError::DuplicateLocation(
                f64::from_bits(w[0].0),
                f64::from_bits(w[0].1),
            ));
        }
        let step = to_f64(times[1]) - to_f64(times[0]);
        if !(step > 0.0) {
            return Err(GridError::InvalidCoordinates(
                "times must be strictly increasing".into(),
            ));
        }
        for i in 1..times.len() {
            let d = to_f64(times[i]) - to_f64(times[i - 1]);
            if (d - step).abs() > 1e-9 * step.abs().max(1.0) {
                return Err(GridError::IrregularTimeGrid {
                    index: i,
                    expected: step,
                    found: d,
                });
            }
        }
        Ok(Self { locations, times })
    }

    pub fn locations(&self) -> &[[T; 2]] {
        &self.locations
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Spacing of the regular time axis in hours.
    pub fn time_step(&self) -> T {
        self.times[1] - self.times[0]
    }

    /// Euclidean distance in km between two locations.
    pub fn distance(&self, a: usize, b: usize) -> T {
        let (p, q) = (self.locations[a], self.locations[b]);
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Applies a location permutation: new location `i` is old `perm[i]`.
    pub fn permute_locations(&self, perm: &[usize]) -> Self {
        Self {
            locations: perm.iter().map(|&i| self.locations[i]).collect(),
            times: self.times.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Coordinates<U> {
        Coordinates {
            locations: self
                .locations
                .iter()
                .map(|l| [cast(to_f64(l[0])), cast(to_f64(l[1]))])
                .collect(),
            times: self.times.iter().map(|&t| cast(to_f64(t))).collect(),
        }
    }
}

/// Name and marginal family of one observed variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variable {
    pub name: String,
    pub family: Family,
}

impl Variable {
    pub fn new(name: impl Into<String>, family: Family) -> Self {
        Self {
            name: name.into(),
            family,
        }
    }
}

/// Gridded observations `[variable][time][location]` with an exclusion mask.
///
/// Missing cells hold NaN. A cell is masked when it is missing, non-finite,
/// or non-positive for a Gamma-family variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeCube<T: Scalar> {
    coords: Coordinates<T>,
    variables: Vec<Variable>,
    values: Vec<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> SpaceTimeCube<T> {
    pub fn new(
        coords: Coordinates<T>,
        variables: Vec<Variable>,
        values: Vec<T>,
    ) -> Result<Self, GridError> {
        let expected = variables.len() * coords.n_times() * coords.n_locations();
        if variables.is_empty() {
            return Err(GridError::InvalidCoordinates("no variables".into()));
        }
        if values.len() != expected {
            return Err(GridError::InvalidCoordinates(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        let block = coords.n_times() * coords.n_locations();
        let mask = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let family = variables[i / block].family;
                !crate::scalar::is_finite(v) || (family.positive_support() && v <= T::zero())
            })
            .collect();
        Ok(Self {
            coords,
            variables,
            values,
            mask,
        })
    }

    pub fn coords(&self) -> &Coordinates<T> {
        &self.coords
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    /// `(P, T, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.variables.len(),
            self.coords.n_times(),
            self.coords.n_locations(),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, p: usize, t: usize, n: usize) -> usize {
        let (_, nt, nn) = self.dims();
        p * nt * nn + t * nn + n
    }

    /// Raw stored value, including masked cells.
    pub fn raw(&self, p: usize, t: usize, n: usize) -> T {
        self.values[self.index(p, t, n)]
    }

    /// Value of an unmasked cell.
    pub fn get(&self, p: usize, t: usize, n: usize) -> Option<T> {
        let i = self.index(p, t, n);
        (!self.mask[i]).then(|| self.values[i])
    }

    pub fn is_masked(&self, p: usize, t: usize, n: usize) -> bool {
        self.mask[self.index(p, t, n)]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Time series at one location for one variable.
    pub fn series(&self, p: usize, n: usize) -> Vec<T> {
        (0..self.coords.n_times()).map(|t| self.raw(p, t, n)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> SpaceTimeCube<U> {
        SpaceTimeCube {
            coords: self.coords.cast(),
            variables: self.variables.clone(),
            values: self.values.iter().map(|&v| cast(to_f64(v))).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// How the time column is encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeFormat {
    /// Numeric hours since an arbitrary epoch.
    Hours,
    /// ISO-8601 / RFC 3339 timestamps, converted to hours since the Unix epoch.
    Iso8601,
}

/// How the x/y columns are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSystem {
    /// Planar kilometers, used as-is.
    PlanarKm,
    /// x = longitude, y = latitude in degrees; projected to km about the centroid.
    LonLat,
}

/// Column names and encodings of a long-format observation file.
#[derive(Debug, Clone)]
pub struct CubeSchema {
    pub variable_col: String,
    pub time_col: String,
    pub x_col: String,
    pub y_col: String,
    pub value_col: String,
    pub time_format: TimeFormat,
    pub coord_system: CoordSystem,
    /// Variables in output order. Rows naming any other variable are rejected.
    pub variables: Vec<Variable>,
}

impl CubeSchema {
    /// Default column names `variable,time,x,y,value`, numeric hours, planar km.
    pub fn new(variables: Vec<Variable>) -> Self {
        Self {
            variable_col: "variable".into(),
            time_col: "time".into(),
            x_col: "x".into(),
            y_col: "y".into(),
            value_col: "value".into(),
            time_format: TimeFormat::Hours,
            coord_system: CoordSystem::PlanarKm,
            variables,
        }
    }
}

fn parse_time(raw: &str, format: TimeFormat) -> Option<f64> {
    let raw = raw.trim();
    match format {
        TimeFormat::Hours => raw.parse::<f64>().ok().filter(|v| v.is_finite()),
        TimeFormat::Iso8601 => {
            let secs = if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
                dt.timestamp()
            } else {
                ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
                    .iter()
                    .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())?
                    .and_utc()
                    .timestamp()
            };
            Some(secs as f64 / 3600.0)
        }
    }
}

/// Projects (lon, lat) degrees to planar km by equirectangular scaling about the centroid.
pub fn project_lonlat(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = points.len().max(1) as f64;
    let lon0 = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let lat0 = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let kx = EARTH_RADIUS_KM * lat0.to_radians().cos() * std::f64::consts::PI / 180.0;
    let ky = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
    points
        .iter()
        .map(|p| [(p[0] - lon0) * kx, (p[1] - lat0) * ky])
        .collect()
}

/// Reads a long-format CSV into a cube.
///
/// Locations are ordered by first appearance, times ascending, variables by
/// schema order. Cells with no row are missing (masked).
pub fn load_cube<T: Scalar>(
    path: &Path,
    schema: &CubeSchema,
) -> Result<SpaceTimeCube<T>, GridError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(err) => GridError::io(path, err),
            other => GridError::Parse {
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| GridError::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GridError::MissingColumn(name.to_string()))
    };
    let (ci_var, ci_time, ci_x, ci_y, ci_val) = (
        col(&schema.variable_col)?,
        col(&schema.time_col)?,
        col(&schema.x_col)?,
        col(&schema.y_col)?,
        col(&schema.value_col)?,
    );
    let var_index: HashMap<&str, usize> = schema
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.as_str(), i))
        .collect();

    struct Row {
        line: u64,
        var: usize,
        time: f64,
        loc: usize,
        value: f64,
    }
    let mut rows = Vec::new();
    let mut raw_locs: Vec<[f64; 2]> = Vec::new();
    let mut loc_lookup: HashMap<(u64, u64), usize> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| GridError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str, raw: &str| GridError::Parse {
            line,
            msg: format!("invalid {what} '{raw}'"),
        };
        let var = *var_index
            .get(field(ci_var))
            .ok_or_else(|| bad("variable", field(ci_var)))?;
        let time = parse_time(field(ci_time), schema.time_format)
            .ok_or_else(|| bad("time", field(ci_time)))?;
        let parse_num = |i: usize, what: &str| -> Result<f64, GridError> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(what, field(i)))
        };
        let x = parse_num(ci_x, "x")?;
        let y = parse_num(ci_y, "y")?;
        let value = field(ci_val)
            .parse::<f64>()
            .map_err(|_| bad("value", field(ci_val)))?;
        let key = (x.to_bits(), y.to_bits());
        let loc = *loc_lookup.entry(key).or_insert_with(|| {
            raw_locs.push([x, y]);
            raw_locs.len() - 1
        });
        rows.push(Row {
            line,
            var,
            time,
            loc,
            value,
        });
    }
    if rows.is_empty() {
        return Err(GridError::Parse {
            line: 1,
            msg: "no data rows".into(),
        });
    }

    let mut times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    let time_index: HashMap<u64, usize> = times
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_bits(), i))
        .collect();

    let locations = match schema.coord_system {
        CoordSystem::PlanarKm => raw_locs,
        CoordSystem::LonLat => project_lonlat(&raw_locs),
    };
    let coords = Coordinates::new(
        locations.iter().map(|l| [cast(l[0]), cast(l[1])]).collect(),
        times.iter().map(|&t| cast(t)).collect(),
    )?;
    let (np, nt, nn) = (schema.variables.len(), times.len(), locations.len());
    let mut values = vec![T::from_f64(f64::NAN).unwrap_or_else(T::zero); np * nt * nn];
    let mut filled = vec![false; values.len()];
    for r in &rows {
        let idx = r.var * nt * nn + time_index[&r.time.to_bits()] * nn + r.loc;
        if filled[idx] {
            return Err(GridError::DuplicateRow { line: r.line });
        }
        filled[idx] = true;
        values[idx] = cast(r.value);
    }
    SpaceTimeCube::new(coords, schema.variables.clone(), values)
}

/// Writes the cube as long-format CSV (`variable,time,x,y,value`) plus a
/// `<path>.meta.txt` metadata file. Missing cells are omitted.
pub fn write_cube_csv<T: Scalar>(cube: &SpaceTimeCube<T>, path: &Path) -> Result<(), GridError> {
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (np, nt, nn) = cube.dims();
    let io = |e| GridError::io(path, e);
    writeln!(w, "variable,time,x,y,value").map_err(io)?;
    for p in 0..np {
        for t in 0..nt {
            for n in 0..nn {
                let v = to_f64(cube.raw(p, t, n));
                if v.is_nan() {
                    continue;
                }
                let loc = cube.coords.locations[n];
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    cube.variables[p].name,
                    to_f64(cube.coords.times[t]),
                    to_f64(loc[0]),
                    to_f64(loc[1]),
                    v
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    write_cube_metadata(cube, &sidecar(path), "csv")
}

const CUBE_MAGIC: &[u8; 8] = b"BMWCUBE1";

/// Writes a little-endian binary dump plus a `<path>.meta.txt` metadata file.
pub fn write_cube_binary<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    path: &Path,
) -> Result<(), GridError> {
    let (np, nt, nn) = cube.dims();
    let mut buf = Vec::with_capacity(64 + 8 * (cube.len() + 2 * nn + nt));
    buf.extend_from_slice(CUBE_MAGIC);
    for d in [np, nt, nn] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &cube.variables {
        let name = v.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(v.family.code());
    }
    let mut put = |x: T| buf.extend_from_slice(&to_f64(x).to_le_bytes());
    cube.coords.times.iter().for_each(|&t| put(t));
    cube.coords.locations.iter().for_each(|l| {
        put(l[0]);
        put(l[1]);
    });
    cube.values.iter().for_each(|&v| put(v));
    std::fs::write(path, &buf).map_err(|e| GridError::io(path, e))?;
    write_cube_metadata(cube, &sidecar(path), "binary-f64-le")
}

/// Reads a dump produced by [`write_cube_binary`].
pub fn read_cube_binary<T: Scalar>(path: &Path) -> Result<SpaceTimeCube<T>, GridError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| GridError::io(path, e))?;
    let mut r = ByteReader::new(&bytes);
    if r.take(8)? != CUBE_MAGIC {
        return Err(GridError::BadArtifact("wrong magic".into()));
    }
    let np = r.u64()? as usize;
    let nt = r.u64()? as usize;
    let nn = r.u64()? as usize;
    let mut variables = Vec::with_capacity(np);
    for _ in 0..np {
        let len = r.u64()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| GridError::BadArtifact("variable name not utf-8".into()))?;
        let family = Family::from_code(r.take(1)?[0])
            .ok_or_else(|| GridError::BadArtifact("unknown family code".into()))?;
        variables.push(Variable { name, family });
    }
    let times = (0..nt).map(|_| r.f64().map(cast)).collect::<Result<_, _>>()?;
    let locations = (0..nn)
        .map(|_| Ok([cast(r.f64()?), cast(r.f64()?)]))
        .collect::<Result<_, GridError>>()?;
    let values = (0..np * nt * nn)
        .map(|_| r.f64().map(cast))
        .collect::<Result<_, _>>()?;
    SpaceTimeCube::new(Coordinates::new(locations, times)?, variables, values)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GridError::BadArtifact("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, GridError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, GridError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// `foo.csv` -> `foo.csv.meta.txt`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.txt");
    PathBuf::from(s)
}

fn write_cube_metadata<T: Scalar>(
    cube: &SpaceTimeCube<T>,
    path: &Path,
    encoding: &str,
) -> Result<(), GridError> {
    let (np, nt, nn) = cube.dims();
    let mut s = String::new();
    s.push_str("format = bmwgam-cube\n");
    s.push_str(&format!("encoding = {encoding}\n"));
    s.push_str(&format!("P = {np}\nT = {nt}\nN = {nn}\n"));
    s.push_str("order = p*T*N + t*N + n (variable outermost, location innermost)\n");
    s.push_str("units.x = km-east\nunits.y = km-north\nunits.time = hours\n");
    s.push_str(&format!("time_step = {}\n", to_f64(cube.coords.time_step())));
    for (i, v) in cube.variables.iter().enumerate() {
        s.push_str(&format!("variable.{i} = {} {}\n", v.name, v.family));
    }
    s.push_str(&format!(
        "masked_cells = {}\n",
        cube.mask.iter().filter(|&&m| m).count()
    ));
    std::fs::write(path, s).map_err(|e| GridError::io(path, e))
}

/// The `k` nearest locations to `center` (itself included), nearest first,
/// ties broken by lower index.
pub fn spatial_neighbors<T: Scalar>(
    coords: &Coordinates<T>,
    center: usize,
    k: usize,
) -> Result<Vec<usize>, GridError> {
    let n = coords.n_locations();
    if center >= n {
        return Err(GridError::IndexOutOfRange { index: center, len: n });
    }
    if k == 0 || k > n {
        return Err(GridError::TooManyNeighbors { k, n });
    }
    let c = coords.locations[center];
    let mut order: Vec<(T, usize)> = coords
        .locations
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let dx = l[0] - c[0];
            let dy = l[1] - c[1];
            (dx * dx + dy * dy, i)
        })
        .collect();
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

/// The `min(w, n_times)` time indices nearest to `center`, ascending.
///
/// Near the ends of the series the window shifts toward the available side;
/// equal distances prefer the earlier index.
pub fn temporal_window(n_times: usize, center: usize, w: usize) -> Result<Vec<usize>, GridError> {
    if center >= n_times {
        return Err(GridError::IndexOutOfRange {
            index: center,
            len: n_times,
        });
    }
    if w == 0 {
        return Err(GridError::InvalidCoordinates("temporal window must be >= 1".into()));
    }
    let want = w.min(n_times);
    let (mut lo, mut hi) = (center, center);
    while hi - lo + 1 < want {
        let left = (lo > 0).then(|| center - (lo - 1));
        let right = (hi + 1 < n_times).then(|| hi + 1 - center);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => lo -= 1,
            (Some(_), None) => lo -= 1,
            _ => hi += 1,
        }
    }
    Ok((lo..=hi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_coords(n: usize) -> Coordinates<f64> {
        Coordinates::new(
            (0..n).map(|i| [i as f64, 0.0]).collect(),
            vec![0.0, 3.0, 6.0],
        )
        .unwrap()
    }

    fn schema() -> CubeSchema {
        CubeSchema::new(vec![
            Variable::new("temp", Family::NormalIdentity),
            Variable::new("ghi", Family::GammaSqrt),
        ])
    }

    fn write_csv(dir: &Path, rows: &str) -> PathBuf {
        let p = dir.join("obs.csv");
        let mut f = File::create(&p).unwrap();
        f.write_all(rows.as_bytes()).unwrap();
        p
    }

    fn fixture_rows(times: &[f64], ghi_zero: bool) -> String {
        let mut s = String::from("variable,time,x,y,value\n");
        for (vi, v) in ["temp", "ghi"].iter().enumerate() {
            for (ti, t) in times.iter().enumerate() {
                for n in 0..4 {
                    let mut val = 1.0 + vi as f64 * 10.0 + ti as f64 + 0.25 * n as f64;
                    if ghi_zero && vi == 1 && ti == 1 && n == 2 {
                        val = 0.0;
                    }
                    s.push_str(&format!("{v},{t},{},{},{val}\n", n as f64 * 5.0, (n % 2) as f64));
                }
            }
        }
        s
    }

    #[test]
    fn neighbors_on_a_line() {
        let c = Coordinates::new(
            (0..5).map(|i| [i as f64, 0.0]).collect(),
            vec![0.0, 3.0],
        )
        .unwrap();
        assert_eq!(spatial_neighbors(&c, 2, 3).unwrap(), vec![2, 1, 3]);
        assert_eq!(spatial_neighbors(&c, 4, 1).unwrap(), vec![4]);
        assert!(matches!(
            spatial_neighbors(&c, 0, 6),
            Err(GridError::TooManyNeighbors { .. })
        ));
    }

    #[test]
    fn temporal_windows() {
        assert_eq!(temporal_window(33, 16, 9).unwrap(), (12..=20).collect::<Vec<_>>());
        assert_eq!(temporal_window(33, 0, 9).unwrap(), (0..=8).collect::<Vec<_>>());
        assert_eq!(temporal_window(33, 32, 9).unwrap(), (24..=32).collect::<Vec<_>>());
        assert_eq!(temporal_window(5, 2, 9).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn temporal_window_matches_nearest_oracle() {
        for nt in 1..20usize {
            for w in 1..=nt {
                for c in 0..nt {
                    let mut idx: Vec<usize> = (0..nt).collect();
                    idx.sort_by_key(|&i| (i.abs_diff(c), i));
                    let mut oracle: Vec<usize> = idx.into_iter().take(w).collect();
                    oracle.sort_unstable();
                    assert_eq!(temporal_window(nt, c, w).unwrap(), oracle, "nt={nt} w={w} c={c}");
                }
            }
        }
    }

    #[test]
    fn loads_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), &fixture_rows(&[0.0, 3.0, 6.0], false));
        let cube: SpaceTimeCube<f64> = load_cube(&path, &schema()).unwrap();
        assert_eq!(cube.dims(), (2, 3, 4));
        assert!(cube.mask().iter().all(|&m| !m));
        assert_eq!(cube.get(1, 2, 3), Some(11.0 + 2.0 + 0.75));
        assert_eq!(cube.index(1, 2, 3), 12 + 2 * 4 + 3);
    }

    #[test]
    fn zero_irradiance_is_masked() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), &fixture_rows(&[0.0, 3.0, 6.0], true));
        let cube: SpaceTimeCube<f64> = load_cube(&path, &schema()).unwrap();
        let masked: Vec<usize> = (0..cube.len()).filter(|&i| cube.mask()[i]).collect();
        assert_eq!(masked, vec![cube.index(1, 1, 2)]);
    }

    #[test]
    fn irregular_times_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), &fixture_rows(&[0.0, 3.0, 9.0], false));
        let err = load_cube::<f64>(&path, &schema()).unwrap_err();
        assert!(matches!(err, GridError::IrregularTimeGrid { .. }), "{err}");
        assert!(err.to_string().contains("irregular time grid"));
    }

    #[test]
    fn duplicate_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = fixture_rows(&[0.0, 3.0, 6.0], false);
        rows.push_str("temp,3,5,1,2.0\n");
        let path = write_csv(dir.path(), &rows);
        assert!(matches!(
            load_cube::<f64>(&path, &schema()),
            Err(GridError::DuplicateRow { line: 26 })
        ));
    }

    #[test]
    fn parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = fixture_rows(&[0.0, 3.0, 6.0], false);
        rows.push_str("temp,abc,0,0,1\n");
        let path = write_csv(dir.path(), &rows);
        let err = load_cube::<f64>(&path, &schema()).unwrap_err();
        assert!(err.to_string().contains("line 26"), "{err}");
    }

    #[test]
    fn iso_times_and_lonlat() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = String::from("variable,time,x,y,value\n");
        for (ti, t) in ["2046-02-07T12:00:00Z", "2046-02-07T15:00:00Z"].iter().enumerate() {
            for (lon, lat) in [(-75.0, 39.0), (-74.0, 39.0), (-75.0, 40.0)] {
                s.push_str(&format!("temp,{t},{lon},{lat},{}\n", ti as f64));
            }
        }
        let path = write_csv(dir.path(), &s);
        let mut sc = CubeSchema::new(vec![Variable::new("temp", Family::NormalIdentity)]);
        sc.time_format = TimeFormat::Iso8601;
        sc.coord_system = CoordSystem::LonLat;
        let cube: SpaceTimeCube<f64> = load_cube(&path, &sc).unwrap();
        assert_eq!(cube.coords().time_step(), 3.0);
        // one degree of latitude is ~111.2 km
        let d = cube.coords().distance(0, 2);
        assert!((d - 111.19).abs() < 0.05, "{d}");
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), &fixture_rows(&[0.0, 3.0, 6.0], true));
        let cube: SpaceTimeCube<f64> = load_cube(&path, &schema()).unwrap();
        let out = dir.path().join("dump.csv");
        write_cube_csv(&cube, &out).unwrap();
        let again: SpaceTimeCube<f64> = load_cube(&out, &schema()).unwrap();
        assert_eq!(again, cube);
        let meta = std::fs::read_to_string(sidecar(&out)).unwrap();
        assert!(meta.contains("order = p*T*N + t*N + n"));
        assert!(meta.contains("N = 4"));

        let bin = dir.path().join("dump.bin");
        write_cube_binary(&cube, &bin).unwrap();
        let back: SpaceTimeCube<f64> = read_cube_binary(&bin).unwrap();
        assert_eq!(back.values().len(), cube.values().len());
        for (a, b) in back.values().iter().zip(cube.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.mask(), cube.mask());
    }

    #[test]
    fn coordinates_validation() {
        assert!(Coordinates::new(vec![[0.0, 0.0], [0.0, 0.0]], vec![0.0, 1.0]).is_err());
        assert!(Coordinates::new(vec![[0.0, 0.0]], vec![0.0]).is_err());
        assert!(line_coords(3).time_step() == 3.0);
    }
}
