//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use bmwgam::copula::MATERN_NU;
use bmwgam::grid::{CoordSystem, TimeFormat};
use bmwgam::{CubeSchema, Family, LbfgsSettings, Variable, WindowConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the config file.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataConfig,
    #[serde(rename = "variable")]
    pub variables: Vec<VariableConfig>,
    #[serde(default)]
    pub windows: WindowsConfig,
    #[serde(default)]
    pub copula: CopulaConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeEncoding {
    #[default]
    Hours,
    Iso8601,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coords {
    #[default]
    PlanarKm,
    Lonlat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Observation file, relative to the config file.
    pub path: PathBuf,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default)]
    pub time_format: TimeEncoding,
    #[serde(default)]
    pub coords: Coords,
    #[serde(default)]
    pub columns: Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Columns {
    pub variable: String,
    pub time: String,
    pub x: String,
    pub y: String,
    pub value: String,
}

impl Default for Columns {
    fn default() -> Self {
        Self {
            variable: "variable".into(),
            time: "time".into(),
            x: "x".into(),
            y: "y".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConfig {
    pub name: String,
    /// `normal` or `gamma`.
    pub family: String,
    /// Must match the family: `identity` for normal, `sqrt` for gamma.
    #[serde(default)]
    pub link: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowsConfig {
    pub k_space: usize,
    pub w_time: usize,
    pub knots: usize,
    pub draws: usize,
}

impl Default for WindowsConfig {
    fn default() -> Self {
        let d = WindowConfig::default();
        Self {
            k_space: d.k_space,
            w_time: d.w_time,
            knots: d.knots,
            draws: d.draws,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CopulaConfig {
    /// Matérn smoothness; fixed, accepted only at its default value.
    pub nu: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub memory: usize,
    /// Starting `(log v_space, log v_time, angles…)`.
    pub init: Option<Vec<f64>>,
}

impl Default for CopulaConfig {
    fn default() -> Self {
        let d = LbfgsSettings::default();
        Self {
            nu: MATERN_NU,
            max_iter: d.max_iter,
            grad_tol: d.grad_tol,
            fd_step: d.fd_step,
            memory: d.memory,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub realizations: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { realizations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub max_lag: usize,
    /// Time indices for variograms; empty means `T/3` and `2T/3`.
    pub time_slices: Vec<usize>,
    /// Location indices for histogram and envelope panels.
    pub probes: Vec<usize>,
    pub histogram_bins: usize,
    pub variogram_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            max_lag: bmwgam::diagnostics::DEFAULT_MAX_LAG,
            time_slices: Vec::new(),
            probes: vec![0],
            histogram_bins: bmwgam::diagnostics::DEFAULT_HISTOGRAM_BINS,
            variogram_bins: bmwgam::diagnostics::DEFAULT_VARIOGRAM_BINS,
        }
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    /// Overrides applied on the command line, echoed into artifacts.
    pub overrides: Vec<(String, String)>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.variables.is_empty() {
            return Err("at least one [[variable]] block is required".into());
        }
        for v in &self.variables {
            v.family()?;
        }
        let mut names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err("variable names must be unique".into());
        }
        if self.copula.nu != MATERN_NU {
            return Err(format!("copula.nu is fixed at {MATERN_NU}"));
        }
        let w = &self.windows;
        if w.k_space == 0 || w.w_time == 0 || w.knots == 0 || w.draws == 0 {
            return Err("window sizes, knots and draws must be positive".into());
        }
        if let Some(init) = &self.copula.init {
            check_init(init, self.variables.len())?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical TOML form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let text = toml::to_string(&canon).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn window_config(&self) -> WindowConfig {
        WindowConfig {
            k_space: self.windows.k_space,
            w_time: self.windows.w_time,
            knots: self.windows.knots,
            draws: self.windows.draws,
            seed: self.seed,
        }
    }

    pub fn lbfgs(&self) -> LbfgsSettings {
        LbfgsSettings {
            grad_tol: self.copula.grad_tol,
            max_iter: self.copula.max_iter,
            memory: self.copula.memory,
            fd_step: self.copula.fd_step,
        }
    }

    pub fn variables(&self) -> Vec<Variable> {
        self.variables
            .iter()
            .map(|v| Variable::new(v.name.clone(), v.family().expect("validated")))
            .collect()
    }

    pub fn schema(&self) -> CubeSchema {
        let mut s = CubeSchema::new(self.variables());
        let c = &self.data.columns;
        s.variable_col = c.variable.clone();
        s.time_col = c.time.clone();
        s.x_col = c.x.clone();
        s.y_col = c.y.clone();
        s.value_col = c.value.clone();
        s.time_format = match self.data.time_format {
            TimeEncoding::Hours => TimeFormat::Hours,
            TimeEncoding::Iso8601 => TimeFormat::Iso8601,
        };
        s.coord_system = match self.data.coords {
            Coords::PlanarKm => CoordSystem::PlanarKm,
            Coords::Lonlat => CoordSystem::LonLat,
        };
        s
    }
}

impl VariableConfig {
    pub fn family(&self) -> Result<Family, String> {
        let family: Family = self
            .family
            .parse()
            .map_err(|_| format!("variable {}: unknown family {:?}", self.name, self.family))?;
        let expected = match family {
            Family::NormalIdentity => "identity",
            Family::GammaSqrt => "sqrt",
        };
        match self.link.as_deref() {
            None => Ok(family),
            Some(l) if l == expected => Ok(family),
            Some(l) => Err(format!(
                "variable {}: link {l:?} not supported for family {:?} (use {expected:?})",
                self.name, self.family
            )),
        }
    }
}

pub fn check_init(init: &[f64], p: usize) -> Result<(), String> {
    let n = bmwgam::copula::n_params(p);
    if init.len() != n {
        return Err(format!("copula init needs {n} values for {p} variables, got {}", init.len()));
    }
    if !init.iter().all(|v| v.is_finite()) {
        return Err("copula init values must be finite".into());
    }
    Ok(())
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config = PipelineConfig::parse(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            overrides: Vec::new(),
        })
    }

    pub fn data_path(&self) -> PathBuf {
        self.base_dir.join(&self.config.data.path)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        path = "cube.csv"

        [[variable]]
        name = "temperature"
        family = "normal"

        [[variable]]
        name = "wind"
        family = "gamma"
        link = "sqrt"
    "#;

    #[test]
    fn defaults_match_hyperparameters() {
        let c = PipelineConfig::parse(MINIMAL).unwrap();
        assert_eq!((c.windows.k_space, c.windows.w_time, c.windows.knots, c.windows.draws), (30, 9, 50, 1000));
        assert_eq!(c.copula.nu, 2.5);
        assert_eq!(c.diagnostics.max_lag, 16);
        assert_eq!(c.variables()[1].family, Family::GammaSqrt);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PipelineConfig::parse(&format!("{MINIMAL}\n[copula]\nnu = 1.5\n")).is_err());
        assert!(PipelineConfig::parse(&MINIMAL.replace("\"sqrt\"", "\"log\"")).is_err());
        assert!(PipelineConfig::parse(&MINIMAL.replace("\"gamma\"", "\"poisson\"")).is_err());
        assert!(PipelineConfig::parse(&format!("{MINIMAL}\n[windows]\nknot = 3\n")).is_err());
        assert!(PipelineConfig::parse(&format!("{MINIMAL}\n[copula]\ninit = [1.0]\n")).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = PipelineConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
