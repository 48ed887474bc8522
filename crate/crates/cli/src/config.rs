//! Experiment configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chaomob::dynsys::{IntegratorConfig, State, SystemDef};
use chaomob::metrics::{BifurcationConfig, LleConfig};
use chaomob::mobility::{ScenarioGeometry, UavConfig, DEFAULT_NOISE_RADIUS};
use chaomob::returnmap::{
    check_role_order, roles_of, DEFAULT_DELTA_PRE, DEFAULT_EPS_IMAGE, DEFAULT_ORBIT_TOL,
    DEFAULT_SEGMENT_BUDGET,
};
use chaomob::section::{check_components, lorenz_components, rossler_component, Role, SectionComponent};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub system: SystemConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub section: SectionConfig,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uav: Option<UavSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lle: Option<LleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bifurcation: Option<BifurcationSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub initial_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionConfig {
    /// `rossler` or `lorenz`; ignored when components are listed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<SectionComponent>,
    /// Secant refinement of crossings on the flow.
    pub refine: bool,
}

impl Default for SectionConfig {
    fn default() -> Self {
        SectionConfig {
            preset: None,
            components: Vec::new(),
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub segment_budget: usize,
    pub periods: Vec<usize>,
    pub orbit_tol: f64,
    /// Overrides the breakpoints derived from the period-1/2 orbits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakpoints: Option<Vec<f64>>,
    pub symbols: Vec<char>,
    pub eps_image: f64,
    pub delta_pre: f64,
    pub unimodality_window: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            segment_budget: DEFAULT_SEGMENT_BUDGET,
            periods: vec![1, 2],
            orbit_tol: DEFAULT_ORBIT_TOL,
            breakpoints: None,
            symbols: vec!['L', 'A', 'R'],
            eps_image: DEFAULT_EPS_IMAGE,
            delta_pre: DEFAULT_DELTA_PRE,
            unimodality_window: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UavSection {
    pub agents: usize,
    /// Symbol steps per trace.
    pub steps: usize,
    pub kinematics: UavConfig,
}

impl Default for UavSection {
    fn default() -> Self {
        UavSection {
            agents: 1,
            steps: 10_000,
            kinematics: UavConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub agents: usize,
    pub noise_radius: f64,
    pub decorrelation_time: f64,
    pub step_budget: usize,
    pub geometry: ScenarioGeometry,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            agents: 100,
            noise_radius: DEFAULT_NOISE_RADIUS,
            decorrelation_time: 20.0,
            step_budget: 100_000,
            geometry: ScenarioGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSection {
    pub seeds: usize,
    pub steps: usize,
    pub cell_size: f64,
    /// Defaults to the cell size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensing_radius: Option<f64>,
}

impl Default for CoverageSection {
    fn default() -> Self {
        CoverageSection {
            seeds: 10,
            steps: 10_000,
            cell_size: 1.0,
            sensing_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BifurcationSection {
    pub param: String,
    pub values: Vec<f64>,
    /// Section component id; the first component when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
    #[serde(default)]
    pub run: BifurcationConfig,
}

/// A validated configuration with its system and components built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub system: SystemDef,
    pub components: Vec<SectionComponent>,
    pub initial_state: State,
}

impl Resolved {
    pub fn is_cyclic(&self) -> bool {
        self.components.iter().all(|c| c.role == Role::Cyclic)
    }

    /// The resolved configuration as TOML text.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(&self.config).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Command-line overrides of config scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub agents: Option<usize>,
    pub steps: Option<usize>,
    pub dt: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.agents {
            if let Some(sc) = self.scenario.as_mut() {
                sc.agents = n;
            }
            if let Some(u) = self.uav.as_mut() {
                u.agents = n;
            }
        }
        if let Some(n) = o.steps {
            self.integrator.steps = n;
        }
        if let Some(dt) = o.dt {
            self.integrator.dt = dt;
        }
    }

    pub fn resolve(self) -> Result<Resolved, CliError> {
        if self.schema != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        let system = SystemDef::from_named(&self.system.name, &self.system.params)?;
        let initial_state = State::new(&self.system.initial_state)?;
        if initial_state.dim() != system.dim() {
            return Err(chaomob::Error::DimensionMismatch {
                expected: system.dim(),
                got: initial_state.dim(),
            }
            .into());
        }
        self.integrator.validate(&system)?;
        let components = if !self.section.components.is_empty() {
            self.section.components.clone()
        } else {
            match self.section.preset.as_deref() {
                Some("rossler") => vec![rossler_component()],
                Some("lorenz") => lorenz_components(),
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "unknown section preset `{other}` (expected rossler or lorenz)"
                    )))
                }
                None => Vec::new(),
            }
        };
        check_components(&components, system.dim())?;
        if components.iter().any(|c| c.role != Role::Cyclic) {
            check_role_order(&roles_of(&components))?;
        }
        if self.scenario.as_ref().is_some_and(|s| s.agents == 0) {
            return Err(chaomob::Error::Precondition("n_agents must be >= 1".into()).into());
        }
        Ok(Resolved {
            config: self,
            system,
            components,
            initial_state,
        })
    }
}
