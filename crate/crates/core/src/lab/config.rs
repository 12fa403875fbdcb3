//! Scenario configuration files (JSON, no comments).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::DampingKind;
use crate::spectral::{Domain, DomainSpec, Field, SpectralCoeffs};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    Zero,
    /// `(lambda Q, velocity_scale Q)`.
    ScaledGroundState {
        lambda: f64,
        #[serde(default)]
        velocity_scale: f64,
    },
    /// Sine coefficients; missing trailing modes are zero.
    Spectral {
        u: Vec<f64>,
        #[serde(default)]
        ut: Vec<f64>,
    },
    /// JSON file `{"u": [...], "ut": [...]}` of sine coefficients, relative
    /// to the configuration file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialFile {
    pub u: Vec<f64>,
    #[serde(default)]
    pub ut: Vec<f64>,
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::ScaledGroundState {
            lambda: 0.8,
            velocity_scale: 0.0,
        }
    }
}

fn pad(dom: &Domain, coeffs: &[f64], what: &str) -> Result<Field, ConfigError> {
    let n = dom.n_modes();
    if coeffs.len() > n {
        return Err(ConfigError::Invalid(format!(
            "{what} has {} coefficients but the domain has {n} modes",
            coeffs.len()
        )));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(ConfigError::Invalid(format!("{what} has non-finite coefficients")));
    }
    let mut c = coeffs.to_vec();
    c.resize(n, 0.0);
    dom.inverse_transform(&SpectralCoeffs::new(c))
        .map_err(|e| ConfigError::Invalid(e.to_string()))
}

impl InitialData {
    /// Grid values of `(u0, u1)`.
    pub fn realize(&self, dom: &Domain, q: &Field, base_dir: &Path) -> Result<(Field, Field), ConfigError> {
        match self {
            InitialData::Zero => Ok((dom.zero_field(), dom.zero_field())),
            InitialData::ScaledGroundState {
                lambda,
                velocity_scale,
            } => Ok((q.scaled(*lambda), q.scaled(*velocity_scale))),
            InitialData::Spectral { u, ut } => Ok((pad(dom, u, "u")?, pad(dom, ut, "ut")?)),
            InitialData::File { path } => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full).map_err(|source| ConfigError::Io {
                    path: full.display().to_string(),
                    source,
                })?;
                let file: InitialFile = parse_json(&text, &full.display().to_string())?;
                Ok((pad(dom, &file.u, "u")?, pad(dom, &file.ut, "ut")?))
            }
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            InitialData::ScaledGroundState { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 40.0,
            sample_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundStateConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Iteration budget checked by the `ground-state` command.
    pub iteration_budget: usize,
    pub certify_trials: usize,
    pub seed: u64,
    /// Previously written ground-state record to reuse.
    pub record: Option<PathBuf>,
}

impl Default for GroundStateConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
            iteration_budget: 2000,
            certify_trials: 1000,
            seed: 20240611,
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Scalings below 1, run with damping level `stable_alpha`.
    pub stable_lambdas: Vec<f64>,
    pub stable_alpha: f64,
    pub stable_t_end: f64,
    /// Required `E(t_end) / E(0)` for the stable runs.
    pub decay_factor: f64,
    /// Scalings above 1, run for each damping level in `alphas`.
    pub unstable_lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub blowup_t_end: f64,
    /// Damping levels of the `blowup` command.
    pub blowup_alphas: Vec<f64>,
    /// Scaling of `Q` used by the blow-up part of `check`.
    pub blowup_lambda: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            stable_lambdas: vec![0.2, 0.4, 0.6, 0.8, 0.95],
            stable_alpha: 1.0,
            stable_t_end: 40.0,
            decay_factor: 1e-5,
            unstable_lambdas: vec![1.05, 1.2, 1.4],
            alphas: vec![0.0, 1.0, 4.0],
            blowup_t_end: 30.0,
            blowup_alphas: vec![0.0, 0.5, 1.0, 4.0],
            blowup_lambda: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilizeConfig {
    /// Scalings of `Q` whose observability ratios are compared.
    pub family: Vec<f64>,
    pub observability_t0: f64,
    pub observability_window: f64,
    /// Allowed `max / median` of the family's ratios.
    pub observability_bound: f64,
    pub lyapunov_eps: f64,
    /// Time of the equilibrium test; `t_end` when absent.
    pub t_tail: Option<f64>,
    pub r_squared_min: f64,
}

impl Default for StabilizeConfig {
    fn default() -> Self {
        Self {
            family: vec![0.3, 0.5, 0.7, 0.8],
            observability_t0: 0.0,
            observability_window: 10.0,
            observability_bound: 10.0,
            lyapunov_eps: 0.01,
            t_tail: None,
            r_squared_min: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Allowed `|E(t) - E(0) + dissipated(t)| / E(0)`.
    pub energy_tolerance: f64,
    /// Relative slack of the energy equivalence and invariance checks.
    pub relative_tolerance: f64,
    /// Accepted range of the dt-halving ratio of the virial residual.
    pub virial_ratio: (f64, f64),
    /// Time window of the virial comparison; `t_end` (or 3/4 of the blow-up
    /// time) when absent.
    pub virial_t_max: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            energy_tolerance: 1e-4,
            relative_tolerance: 1e-8,
            virial_ratio: (3.0, 5.0),
            virial_t_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Per-run trajectory CSV files.
    pub csv: bool,
    /// Grid values of `u` at every sample.
    pub fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            csv: true,
            fields: false,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}

fn default_damping() -> DampingKind {
    DampingKind::Constant { level: 1.0 }
}

fn default_nonlinear() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub domain: DomainSpec,
    #[serde(default = "default_damping")]
    pub damping: DampingKind,
    #[serde(default)]
    pub initial: InitialData,
    /// `false` drops the cubic term.
    #[serde(default = "default_nonlinear")]
    pub nonlinear: bool,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub ground_state: GroundStateConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub stabilize: StabilizeConfig,
    #[serde(default)]
    pub checks: CheckConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, path: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

impl ScenarioConfig {
    /// Reference setup: `L = pi`, `beta = 1`, 128 modes, `dt = 0.01`.
    pub fn reference() -> Self {
        Self {
            name: default_name(),
            domain: DomainSpec::interval(std::f64::consts::PI, 128),
            damping: default_damping(),
            initial: InitialData::default(),
            nonlinear: true,
            time: TimeConfig::default(),
            ground_state: GroundStateConfig::default(),
            sweep: SweepConfig::default(),
            stabilize: StabilizeConfig::default(),
            checks: CheckConfig::default(),
            outputs: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Self::from_json_named(text, "<config>")
    }

    fn from_json_named(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: Self = parse_json(text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_named(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = &self.time;
        if !(t.dt.is_finite() && t.dt > 0.0) {
            return bad(format!("time.dt must be positive, got {}", t.dt));
        }
        if !(t.t_end.is_finite() && t.t_end >= 0.0) {
            return bad(format!("time.t_end must be nonnegative, got {}", t.t_end));
        }
        if t.sample_every == 0 {
            return bad("time.sample_every must be at least 1".into());
        }
        if self.sweep.alphas.iter().chain(&self.sweep.blowup_alphas).any(|a| !(*a >= 0.0)) {
            return bad("damping levels must be nonnegative".into());
        }
        if !(self.stabilize.observability_window > 0.0) {
            return bad("stabilize.observability_window must be positive".into());
        }
        Ok(())
    }
}
