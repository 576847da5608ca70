//! Experiment configuration: a TOML document, optionally patched by
//! `key=value` overrides, deserialized with unknown keys rejected.
//!
//! ```toml
//! kind = "stationary-homogenization"
//! epsilons = [0.5, 0.3333333333333333]
//! resolutions = [128, 216]
//! shape = { kind = "ball", radius = 0.5 }
//! mu = 1.0
//! tol = 1e-6
//!
//! [forcing]
//! kind = "swirl"
//! amplitude = 10.0
//!
//! [brinkman]
//! source = "isotropic"
//! value = 9.42477796076938
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capacity::BrinkmanMatrix;
use crate::error::{Error, Result};
use crate::geometry::{enumerate_holes, validate_lattice, DomainSpec, HoleShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CapacityStudy,
    StationaryHomogenization,
    EvolutionHomogenization,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::CapacityStudy => "capacity-study",
            ExperimentKind::StationaryHomogenization => "stationary-homogenization",
            ExperimentKind::EvolutionHomogenization => "evolution-homogenization",
        }
    }
}

/// Body force, given in coordinates normalized to the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ForcingSpec {
    Zero,
    /// `amplitude * curl(psi e3)` with `psi = sin^2(pi x) sin^2(pi y) sin(pi z)`.
    Swirl {
        amplitude: f64,
    },
    Constant {
        value: [f64; 3],
    },
}

impl Default for ForcingSpec {
    fn default() -> Self {
        ForcingSpec::Swirl { amplitude: 10.0 }
    }
}

/// Where the friction matrix of the limit problem comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum BrinkmanSpec {
    /// Extrapolated from cell problems at the given radii.
    Computed {
        radii: Vec<f64>,
        cells_per_radius: usize,
        tol: f64,
    },
    Isotropic {
        value: f64,
    },
    Matrix {
        entries: [[f64; 3]; 3],
    },
}

impl Default for BrinkmanSpec {
    fn default() -> Self {
        BrinkmanSpec::Computed { radii: vec![0.2, 0.1, 0.05], cells_per_radius: 16, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DensitySpec {
    Uniform {
        value: f64,
    },
    /// `low` below the mid-plane `z = 1/2`, `high` above, `solid` in the holes.
    Layers {
        low: f64,
        high: f64,
        solid: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum VelocitySpec {
    Rest,
    /// Divergence-free projection of the normalized swirl field.
    Swirl {
        amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionSpec {
    pub t_end: f64,
    /// Output intervals; the space-time norms use `snapshots + 1` states.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    pub max_dt: f64,
    pub density: DensitySpec,
    pub velocity: VelocitySpec,
}

fn default_snapshots() -> usize {
    20
}

fn default_cfl() -> f64 {
    0.45
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshKind {
    /// `resolution` cells across `[-1, 1]`.
    Uniform,
    /// `resolution` cells per obstacle radius, graded outwards.
    Graded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySpec {
    /// Defaults to the top-level shape.
    #[serde(default)]
    pub shapes: Vec<HoleShape>,
    /// Scale factors applied to each shape.
    pub radii: Vec<f64>,
    pub resolutions: Vec<usize>,
    #[serde(default = "default_mesh")]
    pub mesh: MeshKind,
    /// Also extrapolate the friction matrix (requires `source = "computed"`).
    #[serde(default)]
    pub extrapolate: bool,
}

fn default_mesh() -> MeshKind {
    MeshKind::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_shape")]
    pub shape: HoleShape,
    /// Grid cells along the shortest side, one entry per epsilon.
    #[serde(default)]
    pub resolutions: Vec<usize>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Solve on a reflected half box when forcing and holes allow it.
    #[serde(default = "default_true")]
    pub symmetry: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub forcing: ForcingSpec,
    #[serde(default)]
    pub brinkman: BrinkmanSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<CapacitySpec>,
}

fn default_alpha() -> f64 {
    3.0
}

fn default_shape() -> HoleShape {
    HoleShape::Ball { radius: 0.5 }
}

fn default_mu() -> f64 {
    1.0
}

fn default_tol() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Parses `text` and applies the `key=value` overrides in order.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        for kv in overrides {
            apply_override(&mut table, kv)?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::load(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    /// SHA-256 of the resolved configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every invariant that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        self.domain.validate().map_err(|e| invalid(e.to_string()))?;
        self.shape.validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(invalid(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        match &self.brinkman {
            BrinkmanSpec::Computed { radii, cells_per_radius, tol } => {
                if radii.len() < 2 || radii.windows(2).any(|w| !(w[1] < w[0])) || radii.iter().any(|r| !(*r > 0.0)) {
                    return Err(invalid("brinkman.radii must hold at least two positive, strictly decreasing radii"));
                }
                if *cells_per_radius < 2 || !(*tol > 0.0) {
                    return Err(invalid("brinkman.cells_per_radius must be at least 2 and brinkman.tol positive"));
                }
            }
            BrinkmanSpec::Isotropic { value } => {
                if !(*value >= 0.0 && value.is_finite()) {
                    return Err(invalid("brinkman.value must be non-negative"));
                }
            }
            BrinkmanSpec::Matrix { entries } => {
                let m = BrinkmanMatrix { entries: *entries, ..BrinkmanMatrix::zero() };
                m.validate().map_err(|e| invalid(format!("brinkman.entries: {e}")))?;
            }
        }
        match self.kind {
            ExperimentKind::CapacityStudy => self.validate_capacity(),
            ExperimentKind::StationaryHomogenization => self.validate_family(),
            ExperimentKind::EvolutionHomogenization => {
                self.validate_family()?;
                self.validate_evolution()
            }
        }
    }

    fn validate_capacity(&self) -> Result<()> {
        let cap = self.capacity.as_ref().ok_or_else(|| invalid("capacity-study needs a [capacity] section"))?;
        if cap.radii.is_empty() || cap.resolutions.is_empty() {
            return Err(invalid("capacity.radii and capacity.resolutions must not be empty"));
        }
        if cap.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("capacity.radii must be positive"));
        }
        for s in &cap.shapes {
            s.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if cap.extrapolate {
            if !matches!(self.brinkman, BrinkmanSpec::Computed { .. }) {
                return Err(invalid("capacity.extrapolate needs brinkman.source = \"computed\""));
            }
            self.check_alpha()?;
        }
        Ok(())
    }

    fn check_alpha(&self) -> Result<()> {
        if (self.alpha - 3.0).abs() > 1e-12 {
            return Err(invalid(format!("alpha must be 3 (the critical hole size), got {}", self.alpha)));
        }
        Ok(())
    }

    fn validate_family(&self) -> Result<()> {
        self.check_alpha()?;
        if self.epsilons.is_empty() {
            return Err(invalid("epsilon list must not be empty"));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e <= self.domain.min_side())) {
            return Err(invalid("every epsilon must be positive and at most the shortest box side"));
        }
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(invalid(format!("epsilon list must be strictly decreasing, got {:?}", self.epsilons)));
        }
        if self.resolutions.len() != self.epsilons.len() {
            return Err(invalid(format!(
                "resolutions must give one grid per epsilon ({} epsilons, {} resolutions)",
                self.epsilons.len(),
                self.resolutions.len()
            )));
        }
        for (&eps, &n) in self.epsilons.iter().zip(&self.resolutions) {
            let lat = enumerate_holes(self.domain, eps, self.alpha, self.shape).map_err(|e| invalid(e.to_string()))?;
            if let Some(v) = validate_lattice(&lat).first() {
                return Err(invalid(format!("hole lattice at epsilon {eps}: {}", v.detail)));
            }
            let h = self.domain.min_side() / n as f64;
            let cpr = lat.hole_shape().inner_radius() / h;
            if !lat.is_empty() && cpr < 2.0 * (1.0 - 1e-9) {
                return Err(invalid(format!(
                    "resolutions must resolve every hole: {n} cells give {cpr:.2} cells per hole radius at epsilon {eps} (need 2)"
                )));
            }
        }
        Ok(())
    }

    fn validate_evolution(&self) -> Result<()> {
        let ev =
            self.evolution.as_ref().ok_or_else(|| invalid("evolution-homogenization needs an [evolution] section"))?;
        if !(ev.t_end > 0.0 && ev.t_end.is_finite()) || !(ev.max_dt > 0.0) {
            return Err(invalid("evolution.t_end and evolution.max_dt must be positive"));
        }
        if ev.snapshots < 20 {
            return Err(invalid(format!(
                "evolution.snapshots must be at least 20 for the space-time norms, got {}",
                ev.snapshots
            )));
        }
        if !(ev.cfl > 0.0 && ev.cfl <= 0.5) {
            return Err(invalid(format!("evolution.cfl must lie in (0, 0.5], got {}", ev.cfl)));
        }
        let ok = match ev.density {
            DensitySpec::Uniform { value } => value > 0.0,
            DensitySpec::Layers { low, high, solid } => low > 0.0 && high >= low && solid >= low && solid <= high,
        };
        if !ok {
            return Err(invalid(
                "evolution.density must be positive, and the hole density must lie within the layer bounds",
            ));
        }
        Ok(())
    }
}

/// Sets the dotted `key` to `value`, parsed as a TOML value when possible
/// and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (key, raw) = kv.split_once('=').ok_or_else(|| invalid(format!("override '{kv}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("override key '{key}' is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| invalid(format!("override key '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
