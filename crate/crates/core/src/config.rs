//! TOML run configuration: schema version 1.
//!
//! The file is fully validated before any computation starts; unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::adapt::{AdaptConfig, TolSplit};
use crate::decomp::ModalBasis;
use crate::estimate::TailDepth;
use crate::fem::LoadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {found} (expected 1)")]
    SchemaVersion { found: u32 },
    #[error("config field {field}: {why}")]
    BadValue { field: &'static str, why: String },
    #[error("mode {mode} requires the [{section}] section")]
    MissingSection {
        mode: &'static str,
        section: &'static str,
    },
}

fn bad(field: &'static str, why: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        field,
        why: why.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Solve,
    Estimate,
    AdaptGoal,
    AdaptEnergy,
    Sweep,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Estimate => "estimate",
            Mode::AdaptGoal => "adapt-goal",
            Mode::AdaptEnergy => "adapt-energy",
            Mode::Sweep => "sweep",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "solve" => Ok(Mode::Solve),
            "estimate" => Ok(Mode::Estimate),
            "adapt-goal" => Ok(Mode::AdaptGoal),
            "adapt-energy" => Ok(Mode::AdaptEnergy),
            "sweep" => Ok(Mode::Sweep),
            other => Err(format!(
                "unknown mode {other:?} (solve | estimate | adapt-goal | adapt-energy | sweep)"
            )),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    /// Subdomain grid `[gx, gy]`; `nx`/`ny` must be divisible by it.
    pub subdomains: [usize; 2],
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub e: f64,
    pub nu: f64,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MaterialSection {
    fn default() -> Self {
        Self {
            e: 1.0,
            nu: 0.29,
            rho: 1.0,
            alpha: 0.025,
            beta: 0.025,
        }
    }
}

/// `amplitude · exp(−sharpness·|x−center|²) · direction`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub center: [f64; 2],
    pub direction: [f64; 2],
    #[serde(default = "one")]
    pub amplitude: f64,
    pub sharpness: f64,
}

fn one() -> f64 {
    1.0
}

impl GaussianSpec {
    pub fn field(&self) -> impl Fn(f64, f64) -> [f64; 2] + Send + Sync + 'static {
        crate::fem::gaussian_field(self.center, self.direction, self.amplitude, self.sharpness)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSection {
    pub traction: Option<GaussianSpec>,
    pub body_force: Option<GaussianSpec>,
}

impl LoadSection {
    pub fn load_spec(&self) -> LoadSpec {
        LoadSpec {
            traction: self.traction.as_ref().map(|g| {
                let f = g.field();
                Box::new(f) as Box<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>
            }),
            body_force: self.body_force.as_ref().map(|g| {
                let f = g.field();
                Box::new(f) as Box<dyn Fn(f64, f64) -> [f64; 2] + Send + Sync>
            }),
        }
    }
}

/// Scalar applied to every subspace, or one value per subspace.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PerSubspace {
    Scalar(usize),
    List(Vec<usize>),
}

impl PerSubspace {
    pub fn resolve(&self, n: usize, field: &'static str) -> Result<Vec<usize>, ConfigError> {
        match self {
            PerSubspace::Scalar(v) => Ok(vec![*v; n]),
            PerSubspace::List(vs) if vs.len() == n => Ok(vs.clone()),
            PerSubspace::List(vs) => Err(bad(
                field,
                format!("expected {n} entries (one per subspace), got {}", vs.len()),
            )),
        }
    }
}

/// Tail/dual depth: an offset past the selection, or the whole basis.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DepthSpec {
    Offset(usize),
    Word(String),
}

impl DepthSpec {
    pub fn resolve(&self, field: &'static str) -> Result<TailDepth, ConfigError> {
        match self {
            DepthSpec::Offset(k) if *k > 0 => Ok(TailDepth::Offset(*k)),
            DepthSpec::Offset(_) => Err(bad(field, "depth offset must be ≥ 1")),
            DepthSpec::Word(w) if w == "full" => Ok(TailDepth::Full),
            DepthSpec::Word(w) => Err(bad(field, format!("expected an integer or \"full\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub nmodes: Option<usize>,
    pub nits: Option<usize>,
    pub tol: Option<f64>,
    /// Per-subspace mode caps M_i; defaults to the full precomputed basis.
    pub max_modes: Option<PerSubspace>,
    pub add_scale: Option<PerSubspace>,
    pub remove_scale: Option<PerSubspace>,
    pub initial: Option<PerSubspace>,
    pub dual_depth: Option<DepthSpec>,
    pub tail_depth: Option<DepthSpec>,
    pub sweep_iteration_cap: Option<usize>,
    /// How TOL² is split across subspaces: "unresolved" or "count".
    pub tol_split: Option<String>,
}

impl AdaptSection {
    /// Fills an [`AdaptConfig`] for `basis`, starting from the library
    /// defaults and overriding whatever the file pins down.
    pub fn resolve(&self, basis: &ModalBasis) -> Result<AdaptConfig, ConfigError> {
        let n = basis.n_subspaces();
        let mut cfg = AdaptConfig::defaults_for(basis);
        if let Some(v) = self.nmodes {
            cfg.nmodes = v;
        }
        if let Some(v) = self.nits {
            cfg.nits = v;
        }
        if let Some(v) = self.tol {
            cfg.tol = v;
        }
        if let Some(v) = &self.max_modes {
            cfg.caps = v.resolve(n, "adapt.max_modes")?;
        }
        if let Some(v) = &self.add_scale {
            cfg.add_scale = v.resolve(n, "adapt.add_scale")?;
        } else {
            cfg.add_scale = cfg.caps.iter().map(|&c| (c / 10).max(1)).collect();
        }
        if let Some(v) = &self.remove_scale {
            cfg.remove_scale = v.resolve(n, "adapt.remove_scale")?;
        } else {
            cfg.remove_scale = cfg.caps.iter().map(|&c| (c / 10).max(1)).collect();
        }
        if let Some(v) = &self.initial {
            cfg.initial = v.resolve(n, "adapt.initial")?;
        }
        if let Some(v) = &self.dual_depth {
            cfg.dual_depth = v.resolve("adapt.dual_depth")?;
        }
        if let Some(v) = &self.tail_depth {
            cfg.tail_depth = v.resolve("adapt.tail_depth")?;
        }
        if let Some(v) = self.sweep_iteration_cap {
            cfg.sweep_iteration_cap = v;
        }
        if let Some(w) = &self.tol_split {
            cfg.tol_split = match w.as_str() {
                "unresolved" => TolSplit::UnresolvedSubspaces,
                "count" => TolSplit::SubspaceCount,
                other => {
                    return Err(bad(
                        "adapt.tol_split",
                        format!("expected \"unresolved\" or \"count\", got {other:?}"),
                    ))
                }
            };
        }
        Ok(cfg)
    }
}

/// A single ω², an explicit list, or an inclusive range with a step.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Omega2Spec {
    Scalar(f64),
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencySection {
    pub omega2: Omega2Spec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_dense_threshold")]
    pub dense_eigen_threshold: usize,
    #[serde(default)]
    pub exact_dual: bool,
    /// Use the full-order spectrum for S(ω) instead of the reduced one.
    #[serde(default)]
    pub full_spectrum_s: bool,
    /// "none" or "full": compare against a full-order reference solve.
    #[serde(default = "default_reference")]
    pub reference: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_dense_threshold() -> usize {
    2000
}

fn default_reference() -> String {
    "none".into()
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            dense_eigen_threshold: default_dense_threshold(),
            exact_dual: false,
            full_spectrum_s: false,
            reference: default_reference(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub material: MaterialSection,
    #[serde(default)]
    pub load: LoadSection,
    pub goal: Option<GaussianSpec>,
    pub frequency: FrequencySection,
    #[serde(default)]
    pub adapt: AdaptSection,
    #[serde(default)]
    pub solver: SolverSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Re-run after mutating a parsed config (e.g. CLI flag overrides).
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::SchemaVersion {
                found: self.schema_version,
            });
        }
        let g = &self.geometry;
        if !(g.width > 0.0 && g.height > 0.0) {
            return Err(bad("geometry", "width and height must be positive"));
        }
        let [gx, gy] = g.subdomains;
        if gx == 0 || gy == 0 || g.nx == 0 || g.ny == 0 {
            return Err(bad("geometry", "nx, ny and subdomains must be ≥ 1"));
        }
        if g.nx % gx != 0 || g.ny % gy != 0 {
            return Err(bad(
                "geometry.subdomains",
                format!("grid {}x{} not divisible by subdomains {gx}x{gy}", g.nx, g.ny),
            ));
        }
        match self.solver.reference.as_str() {
            "none" | "full" => {}
            other => {
                return Err(bad(
                    "solver.reference",
                    format!("expected \"none\" or \"full\", got {other:?}"),
                ))
            }
        }
        for (i, &w2) in self.omega2_values()?.iter().enumerate() {
            if !w2.is_finite() || w2 < 0.0 {
                return Err(bad(
                    "frequency.omega2",
                    format!("entry {i} is {w2}; ω² must be finite and ≥ 0"),
                ));
            }
        }
        if matches!(self.mode, Mode::AdaptGoal) && self.goal.is_none() {
            return Err(ConfigError::MissingSection {
                mode: "adapt-goal",
                section: "goal",
            });
        }
        if matches!(self.mode, Mode::AdaptGoal | Mode::AdaptEnergy)
            && self.omega2_values()?.len() != 1
        {
            return Err(bad(
                "frequency.omega2",
                format!("mode {} drives a single frequency", self.mode.name()),
            ));
        }
        Ok(())
    }

    /// Expands the frequency section into a concrete ω² list.
    pub fn omega2_values(&self) -> Result<Vec<f64>, ConfigError> {
        match &self.frequency.omega2 {
            Omega2Spec::Scalar(w2) => Ok(vec![*w2]),
            Omega2Spec::List(vs) if vs.is_empty() => {
                Err(bad("frequency.omega2", "list must be nonempty"))
            }
            Omega2Spec::List(vs) => Ok(vs.clone()),
            Omega2Spec::Range { start, stop, step } => {
                if !(*step > 0.0) || stop < start {
                    return Err(bad(
                        "frequency.omega2",
                        format!("bad range: start={start}, stop={stop}, step={step}"),
                    ));
                }
                // Integer stepping avoids drift deciding how many points fit.
                let n = ((stop - start) / step + 0.5).floor() as usize;
                Ok((0..=n).map(|i| start + step * i as f64).collect())
            }
        }
    }

    pub fn reference_enabled(&self) -> bool {
        self.solver.reference == "full"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
schema_version = 1
mode = "sweep"

[geometry]
width = 1.0
height = 1.0
nx = 12
ny = 12
subdomains = [3, 2]

[material]
e = 1.0
nu = 0.29
rho = 1.0
alpha = 0.025
beta = 0.025

[load.traction]
center = [0.7, 0.5]
direction = [0.0, -1.0]
amplitude = 1.0
sharpness = 100.0

[goal]
center = [0.95, 0.25]
direction = [1.0, 0.0]
sharpness = 100.0

[frequency]
omega2 = { start = 0.1, stop = 3.0, step = 0.1 }

[adapt]
nmodes = 200
nits = 10
tol = 0.1
initial = 1
dual_depth = 10
tail_depth = "full"
tol_split = "unresolved"

[solver]
seed = 7
full_spectrum_s = true
reference = "full"
"#;

    #[test]
    fn example_config_parses_and_expands() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.mode, Mode::Sweep);
        assert_eq!(cfg.geometry.subdomains, [3, 2]);
        let omegas = cfg.omega2_values().unwrap();
        assert_eq!(omegas.len(), 30);
        assert!((omegas[0] - 0.1).abs() < 1e-12);
        assert!((omegas[29] - 3.0).abs() < 1e-12);
        assert!(cfg.reference_enabled());
        assert_eq!(cfg.solver.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_line() {
        let text = EXAMPLE.replace("nmodes = 200", "nmodes = 200\nbogus_key = 3");
        let err = RunConfig::from_toml(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
        assert!(msg.contains("line"), "not line-referenced: {msg}");
    }

    #[test]
    fn schema_version_is_enforced() {
        let text = EXAMPLE.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(ConfigError::SchemaVersion { found: 2 })
        ));
    }

    #[test]
    fn indivisible_subdomain_grid_is_rejected() {
        let text = EXAMPLE.replace("subdomains = [3, 2]", "subdomains = [5, 2]");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("not divisible"));
    }

    #[test]
    fn goal_required_for_goal_mode() {
        let text = EXAMPLE
            .replace("mode = \"sweep\"", "mode = \"adapt-goal\"")
            .replace("omega2 = { start = 0.1, stop = 3.0, step = 0.1 }", "omega2 = 1.0")
            .replace(
                "[goal]\ncenter = [0.95, 0.25]\ndirection = [1.0, 0.0]\nsharpness = 100.0\n",
                "",
            );
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(ConfigError::MissingSection { section: "goal", .. })
        ));
    }

    #[test]
    fn omega2_scalar_and_list_forms() {
        let scalar = EXAMPLE.replace(
            "omega2 = { start = 0.1, stop = 3.0, step = 0.1 }",
            "omega2 = 1.5",
        );
        let cfg = RunConfig::from_toml(&scalar).unwrap();
        assert_eq!(cfg.omega2_values().unwrap(), vec![1.5]);

        let list = EXAMPLE.replace(
            "omega2 = { start = 0.1, stop = 3.0, step = 0.1 }",
            "omega2 = [0.5, 1.0, 2.0]",
        );
        let cfg = RunConfig::from_toml(&list).unwrap();
        assert_eq!(cfg.omega2_values().unwrap(), vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn negative_omega2_is_rejected() {
        let text = EXAMPLE.replace(
            "omega2 = { start = 0.1, stop = 3.0, step = 0.1 }",
            "omega2 = -1.0",
        );
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("finite and ≥ 0"));
    }

    #[test]
    fn depth_spec_full_keyword() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        let depth = cfg.adapt.tail_depth.as_ref().unwrap();
        assert!(matches!(depth.resolve("adapt.tail_depth").unwrap(), TailDepth::Full));
        let bad = DepthSpec::Word("half".into());
        assert!(bad.resolve("adapt.tail_depth").is_err());
    }

    #[test]
    fn per_subspace_resolution() {
        let s = PerSubspace::Scalar(3);
        assert_eq!(s.resolve(4, "adapt.initial").unwrap(), vec![3; 4]);
        let l = PerSubspace::List(vec![1, 2, 3]);
        assert_eq!(l.resolve(3, "adapt.initial").unwrap(), vec![1, 2, 3]);
        assert!(l.resolve(4, "adapt.initial").is_err());
    }
}
