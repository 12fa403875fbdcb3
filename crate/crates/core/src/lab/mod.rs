//! Experiments on top of the solver: diagnostics, scenario files, and the
//! command runner.

pub mod config;
pub mod diagnostics;
pub mod scenario;

pub use config::{ConfigError, InitialData, ScenarioConfig};
pub use diagnostics::{
    detect_equilibrium, fit_decay, fit_log_linear, gcc_check_1d, lyapunov_eps,
    observability_family, observability_ratio, virial_series, DecayFit, Equilibrium,
    EquilibriumReport, GccCheck, LabError, LyapunovReport, ObservabilityFamily,
    ObservabilityReport, VirialSample, VirialSeries,
};
pub use scenario::{run_scenario, Check, Command, RunOptions, RunReport};
