//! Scenario runner end to end on small configurations.

use pwlab_core::lab::scenario::run_scenario_in_memory;
use pwlab_core::lab::{run_scenario, Command, InitialData, RunOptions, ScenarioConfig};
use pwlab_core::Execution;

fn small() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::reference();
    cfg.domain.n_modes = 48;
    cfg.time.t_end = 5.0;
    cfg
}

#[test]
fn ground_state_command_writes_a_loadable_record() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario(Command::GroundState, &small(), &RunOptions::new(dir.path()));
    assert!(report.all_passed(), "{:?}", report.checks);
    let record = dir.path().join("ground_state.json");
    assert!(record.exists());
    let report_file = format!("{}_report.json", Command::GroundState.name());
    assert!(dir.path().join(report_file).exists());

    // a second scenario can start from the stored record
    let mut cfg = small();
    cfg.ground_state.record = Some(record);
    let again = run_scenario_in_memory(Command::Evolve, &cfg, Execution::Sequential);
    assert!(again.all_passed(), "{:?}", again.errors);
}

#[test]
fn evolve_report_round_trips_through_json() {
    let report = run_scenario_in_memory(Command::Evolve, &small(), Execution::Sequential);
    assert!(report.all_passed());
    let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(report.check("energy_equality").is_some());
}

#[test]
fn blowup_command_passes_on_unstable_data() {
    let mut cfg = small();
    cfg.initial = InitialData::ScaledGroundState {
        lambda: 1.3,
        velocity_scale: 0.0,
    };
    let report = run_scenario_in_memory(Command::Blowup, &cfg, Execution::default());
    assert!(report.all_passed(), "{:?} {:?}", report.checks, report.errors);
}

#[test]
fn sequential_and_parallel_reports_agree() {
    let cfg = small();
    let a = run_scenario_in_memory(Command::Dichotomy, &cfg, Execution::Sequential);
    let b = run_scenario_in_memory(Command::Dichotomy, &cfg, Execution::Parallel);
    assert_eq!(a.checks.len(), b.checks.len());
    for (x, y) in a.checks.iter().zip(&b.checks) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.value.to_bits(), y.value.to_bits());
    }
}
