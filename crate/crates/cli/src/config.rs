//! Experiment configuration: a TOML document with one section per concern.
//! The schema is documented in `docs/config.md`.

use std::path::{Path, PathBuf};

use homoglab::kernel::MaskBoundary;
use homoglab::solve::Preconditioner;
use homoglab::{GridSpec, SamplerSpec, SolverOptions};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub cells_per_unit: usize,
    pub side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default)]
    pub base: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub radii: Vec<f64>,
    #[serde(default = "default_boundary")]
    pub boundary: MaskBoundary,
    /// Mask shape matrix; estimated from `pilot_seeds` seeds when absent.
    #[serde(default)]
    pub abar: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_pilot")]
    pub pilot_seeds: usize,
    /// Relative perturbation of the mask matrix for the sensitivity runs.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
}

fn default_boundary() -> MaskBoundary {
    MaskBoundary::Periodic
}

fn default_pilot() -> usize {
    16
}

fn default_perturbation() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub preconditioner: Preconditioner,
    #[serde(default)]
    pub max_iterations: Option<usize>,
}

fn default_tol() -> f64 {
    1e-8
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            preconditioner: Preconditioner::default(),
            max_iterations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    /// `(p, q)` pairs for `J`.
    #[serde(default = "default_pq")]
    pub pq: Vec<[Vec<f64>; 2]>,
    /// Corrector directions.
    #[serde(default = "default_e")]
    pub e: Vec<Vec<f64>>,
}

fn default_pq() -> Vec<[Vec<f64>; 2]> {
    vec![[vec![0.0, 0.0], vec![1.0, 0.0]]]
}

fn default_e() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0]]
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self {
            pq: default_pq(),
            e: default_e(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdditivityConfig {
    pub radii: Vec<f64>,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_ratio() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillationConfig {
    pub radii: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    pub radius: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GffConfig {
    /// Calibration radius; `L/8` when absent.
    #[serde(default)]
    pub r_cal: Option<f64>,
    /// Scale of the test functionals; `r_cal` when absent.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogConfig {
    /// `cells_per_unit` values of the refinement sequence.
    #[serde(default = "default_refinements")]
    pub refinements: Vec<usize>,
}

fn default_refinements() -> Vec<usize> {
    vec![2, 4, 8]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out(),
            workers: default_workers(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sampler: SamplerSpec,
    pub grid: GridConfig,
    pub seeds: SeedConfig,
    pub masks: MaskConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub directions: DirectionConfig,
    #[serde(default)]
    pub additivity: Option<AdditivityConfig>,
    #[serde(default)]
    pub oscillation: Option<OscillationConfig>,
    #[serde(default)]
    pub localization: Option<LocalizationConfig>,
    #[serde(default)]
    pub gff: Option<GffConfig>,
    #[serde(default)]
    pub homog: Option<HomogConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let g = &self.grid;
        let grid = GridSpec::new(g.dim, g.cells_per_unit, g.side).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        grid.check_experiment().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(grid)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iterations: self.solver.max_iterations,
            preconditioner: self.solver.preconditioner,
        }
    }

    pub fn mask_abar(&self) -> Option<DMatrix<f64>> {
        let d = self.grid.dim;
        self.masks.abar.as_ref().map(|m| DMatrix::from_fn(d, d, |i, j| m[i][j]))
    }

    pub fn r_cal(&self) -> Option<f64> {
        self.gff.as_ref().map(|g| g.r_cal.unwrap_or(self.grid.side as f64 / 8.0))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let grid = self.grid_spec()?;
        let d = grid.dim();
        let half = 0.5 * grid.side() as f64;
        self.sampler.validate(d).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.seeds.count == 0 {
            return invalid("seeds.count must be positive");
        }
        if !(self.solver.tol > 0.0 && self.solver.tol <= 1e-4) {
            return invalid(format!("solver.tol {} not in (0, 1e-4]", self.solver.tol));
        }
        let check_radius = |what: &str, r: f64, limit: f64| {
            if r > 0.0 && r <= limit {
                Ok(())
            } else {
                invalid(format!("{what} radius {r} not in (0, {limit}]"))
            }
        };
        for &r in &self.masks.radii {
            check_radius("mask", r, 0.5 * half)?;
        }
        if let MaskBoundary::Truncated { cutoff_multiplier } = self.masks.boundary {
            if !(cutoff_multiplier > 0.0) {
                return invalid("masks.boundary.cutoff_multiplier must be positive");
            }
        }
        if let Some(m) = &self.masks.abar {
            if m.len() != d || m.iter().any(|row| row.len() != d) {
                return invalid(format!("masks.abar must be {d}x{d}"));
            }
            let m = DMatrix::from_fn(d, d, |i, j| m[i][j]);
            if (&m - m.transpose()).amax() > 1e-12 || m.cholesky().is_none() {
                return invalid("masks.abar must be symmetric positive definite");
            }
        }
        if !(0.0..0.5).contains(&self.masks.perturbation) {
            return invalid("masks.perturbation must lie in [0, 0.5)");
        }
        let check_dir = |what: &str, v: &[f64]| {
            if v.len() != d {
                return invalid(format!("{what} direction {v:?} must have {d} entries"));
            }
            if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1.0 + 1e-12 {
                return invalid(format!("{what} direction {v:?} has norm above 1"));
            }
            Ok(())
        };
        for [p, q] in &self.directions.pq {
            check_dir("p", p)?;
            check_dir("q", q)?;
        }
        if self.directions.e.is_empty() {
            return invalid("directions.e must not be empty");
        }
        for e in &self.directions.e {
            check_dir("e", e)?;
        }
        if let Some(a) = &self.additivity {
            if a.radii.len() < 3 {
                return invalid("additivity.radii needs at least 3 radii for the decay fit");
            }
            if !(a.ratio >= 1.0) {
                return invalid("additivity.ratio must be at least 1");
            }
            for &r in &a.radii {
                check_radius("additivity outer", a.ratio * r, 0.5 * half)?;
            }
        }
        if let Some(o) = &self.oscillation {
            if o.radii.len() < 3 {
                return invalid("oscillation.radii needs at least 3 radii for the regression");
            }
            for &r in &o.radii {
                check_radius("oscillation", r, half)?;
            }
        }
        if let Some(l) = &self.localization {
            check_radius("localization", l.radius, 0.5 * half)?;
            if !(l.delta > 0.0) {
                return invalid("localization.delta must be positive");
            }
            let rho = l.radius.powf(1.0 + l.delta);
            if rho > half {
                return invalid(format!("r^(1+delta) = {rho} exceeds L/2 = {half}"));
            }
        }
        if let Some(g) = &self.gff {
            let r_cal = self.r_cal().unwrap_or(0.0);
            check_radius("gff r_cal doubled", 2.0 * r_cal, 0.5 * half)?;
            let r = g.radius.unwrap_or(r_cal);
            check_radius("gff functional", r, 0.5 * half)?;
            if !(g.width > 0.0 && 6.0 * g.width * r <= half) {
                return invalid(format!("gff.width {} too wide for radius {r} on this torus", g.width));
            }
        }
        if let Some(h) = &self.homog {
            if h.refinements.is_empty() || h.refinements.contains(&0) {
                return invalid("homog.refinements must be positive integers");
            }
        }
        if self.output.workers == 0 {
            return invalid("output.workers must be positive");
        }
        Ok(())
    }

    /// Hash of the canonical JSON form. Object keys are sorted, so the hash
    /// does not depend on field order in the source file.
    pub fn canonical_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[sampler]
law = "checkerboard_two_phase"
a1 = 1.0
a2 = 4.0

[grid]
dim = 2
cells_per_unit = 2
side = 32

[seeds]
count = 4

[masks]
radii = [2.0, 4.0]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.masks.boundary, MaskBoundary::Periodic);
        assert_eq!(cfg.solver.tol, 1e-8);
        assert_eq!(cfg.output.workers, 1);
        assert!(cfg.mask_abar().is_none());
    }

    #[test]
    fn hash_ignores_field_order() {
        let reordered = r#"
[grid]
side = 32
dim = 2
cells_per_unit = 2

[masks]
radii = [2.0, 4.0]

[seeds]
count = 4

[sampler]
a2 = 4.0
a1 = 1.0
law = "checkerboard_two_phase"
"#;
        let a = ExperimentConfig::parse(BASE).unwrap();
        let b = ExperimentConfig::parse(reordered).unwrap();
        assert_eq!(a.canonical_hash(), b.canonical_hash());
        let c = ExperimentConfig::parse(&BASE.replace("count = 4", "count = 5")).unwrap();
        assert_ne!(a.canonical_hash(), c.canonical_hash());
    }

    #[test]
    fn invariants_are_enforced() {
        let bad_radius = BASE.replace("[2.0, 4.0]", "[2.0, 9.0]");
        assert!(matches!(ExperimentConfig::parse(&bad_radius), Err(ConfigError::Invalid(_))));
        let bad_dir = format!("{BASE}\n[directions]\npq = [[[0.0, 0.0], [1.0, 0.5]]]\n");
        assert!(matches!(ExperimentConfig::parse(&bad_dir), Err(ConfigError::Invalid(_))));
        let loc = format!("{BASE}\n[localization]\nradius = 8.0\ndelta = 0.5\n");
        assert!(matches!(ExperimentConfig::parse(&loc), Err(ConfigError::Invalid(_))));
        let ok_loc = format!("{BASE}\n[localization]\nradius = 4.0\ndelta = 0.5\n");
        assert!(ExperimentConfig::parse(&ok_loc).is_ok());
        assert!(matches!(ExperimentConfig::parse("nonsense = ["), Err(ConfigError::Parse(_))));
        let unknown = format!("{BASE}\n[bogus]\nx = 1\n");
        assert!(ExperimentConfig::parse(&unknown).is_err());
    }
}
