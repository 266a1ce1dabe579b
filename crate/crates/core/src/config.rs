//! Experiment configuration: TOML file plus command-line overrides.
//!
//! Seeds are mandatory; there is no implicit entropy anywhere in a run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Simulate,
    SolveBdsde,
    SolvePenalized,
    Value,
    VerifyDpp,
    VerifyWeak,
    VerifyAll,
}

impl Pipeline {
    pub const NAMES: [&'static str; 7] = [
        "simulate",
        "solve-bdsde",
        "solve-penalized",
        "value",
        "verify-dpp",
        "verify-weak",
        "verify-all",
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "simulate" => Pipeline::Simulate,
            "solve-bdsde" => Pipeline::SolveBdsde,
            "solve-penalized" => Pipeline::SolvePenalized,
            "value" => Pipeline::Value,
            "verify-dpp" => Pipeline::VerifyDpp,
            "verify-weak" => Pipeline::VerifyWeak,
            "verify-all" => Pipeline::VerifyAll,
            other => {
                return Err(Error::UnknownPipeline {
                    name: other.into(),
                    valid: Self::NAMES.join(", "),
                })
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Simulate => "simulate",
            Pipeline::SolveBdsde => "solve-bdsde",
            Pipeline::SolvePenalized => "solve-penalized",
            Pipeline::Value => "value",
            Pipeline::VerifyDpp => "verify-dpp",
            Pipeline::VerifyWeak => "verify-weak",
            Pipeline::VerifyAll => "verify-all",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_radius")]
    pub space_radius: f64,
    #[serde(default = "default_points")]
    pub space_points: usize,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_steps() -> usize {
    50
}
fn default_radius() -> f64 {
    4.0
}
fn default_points() -> usize {
    81
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t0: 0.0,
            horizon: default_horizon(),
            n_steps: default_steps(),
            space_radius: default_radius(),
            space_points: default_points(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    #[serde(default = "default_m_paths")]
    pub m_paths: usize,
    /// Forward-noise master seed; mandatory.
    pub master_seed: u64,
    /// Backward-driver seed; mandatory.
    pub b_seed: u64,
}

fn default_m_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_gh")]
    pub gh_nodes: usize,
    #[serde(default = "default_m_sub")]
    pub m_sub: usize,
    /// 0 = library default thread pool.
    #[serde(default)]
    pub threads: usize,
    /// Control index used by the single-policy pipelines.
    #[serde(default)]
    pub constant_control: usize,
    /// Start state (first component; remaining components zero).
    #[serde(default)]
    pub start_x: f64,
}

fn default_degree() -> usize {
    2
}
fn default_gh() -> usize {
    5
}
fn default_m_sub() -> usize {
    4000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            basis_degree: default_degree(),
            gh_nodes: default_gh(),
            m_sub: default_m_sub(),
            threads: 0,
            constant_control: 0,
            start_x: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObstacleKind {
    /// `V(t, x) = horizon - t`, the deterministic ladder example.
    LinearDecay,
    /// The grid-DP value field itself.
    ValueField,
    /// A constant far below the solution (no constraint).
    FarBelow,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "default_obstacle")]
    pub obstacle: ObstacleKind,
}

fn default_ladder() -> Vec<f64> {
    crate::bdsde::default_penalty_ladder()
}
fn default_obstacle() -> ObstacleKind {
    // the field obstacle satisfies the terminal precondition
    // V(T, x) = h(x) on every model; the linear-decay obstacle is the
    // deterministic ladder example and is selected explicitly
    ObstacleKind::ValueField
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            ladder: default_ladder(),
            obstacle: default_obstacle(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default = "default_slack")]
    pub lipschitz_slack: f64,
    /// epsilon of the existence inequality and the policy certificate.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Allowed variation factor of bounded-ratio ladders.
    #[serde(default = "default_growth")]
    pub growth_factor: f64,
    /// Relative tolerance on fitted exponents (stability, continuity).
    #[serde(default = "default_exp_tol")]
    pub exponent_tol: f64,
    /// Norm-equivalence ratio bounds.
    #[serde(default = "default_c_lo")]
    pub ratio_lo: f64,
    #[serde(default = "default_c_hi")]
    pub ratio_hi: f64,
    /// Relative tolerance of the Z identity.
    #[serde(default = "default_tol_z")]
    pub tol_z: f64,
}

fn default_slack() -> f64 {
    1.05
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_growth() -> f64 {
    2.0
}
fn default_exp_tol() -> f64 {
    0.25
}
fn default_c_lo() -> f64 {
    0.5
}
fn default_c_hi() -> f64 {
    2.0
}
fn default_tol_z() -> f64 {
    0.10
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            lipschitz_slack: default_slack(),
            epsilon: default_epsilon(),
            growth_factor: default_growth(),
            exponent_tol: default_exp_tol(),
            ratio_lo: default_c_lo(),
            ratio_hi: default_c_hi(),
            tol_z: default_tol_z(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: Pipeline,
    pub model: String,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    pub paths: PathConfig,
    #[serde(default = "default_controls")]
    pub controls: Vec<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    /// Numeric model-parameter overrides (`a`, `b`, `sigma`).
    #[serde(default)]
    pub model_params: BTreeMap<String, f64>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_controls() -> Vec<f64> {
    vec![-1.0, 0.0, 1.0]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Minimal config for a pipeline with explicit seeds; everything else
    /// takes defaults.
    pub fn minimal(pipeline: Pipeline, model: &str, master_seed: u64, b_seed: u64) -> Self {
        Self {
            pipeline,
            model: model.into(),
            out_dir: default_out(),
            grid: GridConfig::default(),
            paths: PathConfig {
                m_paths: default_m_paths(),
                master_seed,
                b_seed,
            },
            controls: default_controls(),
            solver: SolverConfig::default(),
            penalty: PenaltyConfig::default(),
            tolerances: ToleranceConfig::default(),
            model_params: BTreeMap::new(),
        }
    }

    /// Apply a `key=value` override with dotted keys
    /// (`grid.n_steps=100`, `paths.m_paths=20000`, `model.sigma=0.4`,
    /// `solver.m_sub=2000`, `tolerances.epsilon=0.1`, `controls=-1,0,1`).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("'{v}' is not a number")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("'{v}' is not a count")))
        };
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse::<u64>()
                .map_err(|_| Error::Config(format!("'{v}' is not a seed")))
        };
        match key {
            "model" => self.model = value.into(),
            "pipeline" => self.pipeline = Pipeline::parse(value)?,
            "grid.t0" => self.grid.t0 = parse_f64(value)?,
            "grid.horizon" => self.grid.horizon = parse_f64(value)?,
            "grid.n_steps" => self.grid.n_steps = parse_usize(value)?,
            "grid.space_radius" => self.grid.space_radius = parse_f64(value)?,
            "grid.space_points" => self.grid.space_points = parse_usize(value)?,
            "paths.m_paths" => self.paths.m_paths = parse_usize(value)?,
            "paths.master_seed" => self.paths.master_seed = parse_u64(value)?,
            "paths.b_seed" => self.paths.b_seed = parse_u64(value)?,
            "solver.basis_degree" => self.solver.basis_degree = parse_usize(value)?,
            "solver.gh_nodes" => self.solver.gh_nodes = parse_usize(value)?,
            "solver.m_sub" => self.solver.m_sub = parse_usize(value)?,
            "solver.threads" => self.solver.threads = parse_usize(value)?,
            "solver.constant_control" => self.solver.constant_control = parse_usize(value)?,
            "solver.start_x" => self.solver.start_x = parse_f64(value)?,
            "tolerances.epsilon" => self.tolerances.epsilon = parse_f64(value)?,
            "tolerances.growth_factor" => self.tolerances.growth_factor = parse_f64(value)?,
            "tolerances.exponent_tol" => self.tolerances.exponent_tol = parse_f64(value)?,
            "tolerances.tol_z" => self.tolerances.tol_z = parse_f64(value)?,
            "controls" => {
                let pts: std::result::Result<Vec<f64>, _> =
                    value.split(',').map(|s| s.trim().parse::<f64>()).collect();
                self.controls =
                    pts.map_err(|_| Error::Config(format!("bad control list '{value}'")))?;
            }
            other => {
                if let Some(param) = other.strip_prefix("model.") {
                    self.model_params.insert(param.into(), parse_f64(value)?);
                } else {
                    return Err(Error::Config(format!("unknown override key '{other}'")));
                }
            }
        }
        Ok(())
    }

    pub fn seed_provenance(&self) -> String {
        format!(
            "master_seed={} b_seed={}",
            self.paths.master_seed, self.paths.b_seed
        )
    }
}
