//! Scenario runner behind the `pwlab` commands.
//!
//! Every command builds the domain and the ground state, runs its
//! trajectories (in parallel across independent runs), evaluates its checks,
//! and writes CSV/JSON outputs atomically from a single thread.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::{ScenarioConfig, TimeConfig};
use super::diagnostics::{
    detect_equilibrium, fit_decay, gcc_check_1d, lyapunov_eps, observability_family,
    observability_ratio, virial_series, Equilibrium,
};
use crate::dynamics::{
    evolve, DampingKind, DampingProfile, Equation, EvolveOptions, State, Trajectory,
};
use crate::exec::Execution;
use crate::functionals::{
    classify_energies, energies, explicit_sobolev_check, lemma12_bounds, EnergyTriple,
    WellConstants, WellSet,
};
use crate::ground_state::{
    certification_trial, certify_well_constants, petviashvili_solve, shooting_oracle,
    GroundState, GroundStateRecord, PetviashviliOptions, ShootingOptions,
};
use crate::spectral::{Domain, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GroundState,
    Evolve,
    Dichotomy,
    Stabilize,
    Blowup,
    /// All of the above.
    Check,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GroundState,
        Command::Evolve,
        Command::Dichotomy,
        Command::Stabilize,
        Command::Blowup,
        Command::Check,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GroundState => "ground-state",
            Command::Evolve => "evolve",
            Command::Dichotomy => "dichotomy",
            Command::Stabilize => "stabilize",
            Command::Blowup => "blowup",
            Command::Check => "check",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub scenario: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
    pub errors: Vec<String>,
    pub summary: Map<String, Value>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.errors.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Directory that relative paths in the configuration refer to.
    pub base_dir: PathBuf,
    pub exec: Execution,
    pub write_files: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            base_dir: PathBuf::from("."),
            exec: Execution::default(),
            write_files: true,
        }
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[derive(Default)]
struct Outcome {
    checks: Vec<Check>,
    files: Vec<(String, String)>,
    errors: Vec<String>,
    summary: Map<String, Value>,
}

impl Outcome {
    fn check(&mut self, name: &str, passed: bool, value: f64, tolerance: f64) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            value,
            tolerance,
        });
    }

    /// Records a failed check for a step that could not be evaluated.
    fn failure(&mut self, name: &str, err: impl fmt::Display) {
        self.errors.push(format!("{name}: {err}"));
        self.check(name, false, f64::NAN, f64::NAN);
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn file(&mut self, name: String, contents: String) {
        self.files.push((name, contents));
    }

    fn merge(&mut self, prefix: &str, other: Outcome) {
        for mut c in other.checks {
            c.name = format!("{prefix}.{}", c.name);
            self.checks.push(c);
        }
        self.files.extend(other.files);
        self.errors
            .extend(other.errors.into_iter().map(|e| format!("{prefix}.{e}")));
        self.summary.insert(prefix.to_string(), Value::Object(other.summary));
    }
}

struct Context<'a> {
    cfg: &'a ScenarioConfig,
    dom: Domain,
    gs: GroundState,
    wells: WellConstants,
    q_h01: f64,
    eq: Equation,
    exec: Execution,
    base_dir: PathBuf,
    petviashvili_iterations: Option<usize>,
}

impl<'a> Context<'a> {
    fn build(cfg: &'a ScenarioConfig, opts: &RunOptions) -> Result<Self, String> {
        let dom = Domain::new(cfg.domain).map_err(|e| e.to_string())?;
        let (gs, iterations) = match &cfg.ground_state.record {
            Some(path) => {
                let full = opts.base_dir.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| format!("{}: {e}", full.display()))?;
                let rec = GroundStateRecord::from_json(&text).map_err(|e| e.to_string())?;
                (rec.to_ground_state(&dom).map_err(|e| e.to_string())?, None)
            }
            None => {
                let popts = PetviashviliOptions {
                    tol: cfg.ground_state.tol,
                    max_iters: cfg.ground_state.max_iters,
                    ..Default::default()
                };
                let gs = petviashvili_solve(&dom, &popts).map_err(|e| e.to_string())?;
                let it = gs.iterations;
                (gs, Some(it))
            }
        };
        let wells = gs.well_constants(&dom).map_err(|e| e.to_string())?;
        let q_h01 = wells.q_h01_norm_sq.sqrt();
        let eq = if cfg.nonlinear {
            Equation::default()
        } else {
            Equation::linear()
        };
        Ok(Self {
            cfg,
            dom,
            gs,
            wells,
            q_h01,
            eq,
            exec: opts.exec,
            base_dir: opts.base_dir.clone(),
            petviashvili_iterations: iterations,
        })
    }

    fn damping(&self, kind: DampingKind) -> Result<DampingProfile, String> {
        DampingProfile::new(&self.dom, kind).map_err(|e| e.to_string())
    }

    fn initial(&self) -> Result<(Field, Field), String> {
        self.cfg
            .initial
            .realize(&self.dom, &self.gs.q, &self.base_dir)
            .map_err(|e| e.to_string())
    }

    fn run(
        &self,
        damping: &DampingProfile,
        u0: &Field,
        ut0: &Field,
        time: TimeConfig,
    ) -> Result<Trajectory, String> {
        let s0 = State::new(&self.dom, damping, &self.eq, u0.clone(), ut0.clone())
            .map_err(|e| e.to_string())?;
        let opts = EvolveOptions {
            dt: time.dt,
            t_end: time.t_end,
            sample_every: time.sample_every,
            blowup_scale: Some(s0.h01().max(self.q_h01)),
            ..Default::default()
        };
        evolve(&self.dom, damping, &self.eq, s0, &opts).map_err(|e| e.to_string())
    }

    fn energies(&self, u: &Field, ut: &Field) -> Result<EnergyTriple, String> {
        energies(&self.dom, u, ut).map_err(|e| e.to_string())
    }
}

/// `kind` with its level replaced by `alpha`; no damping when `alpha = 0`.
pub fn damping_with_level(kind: DampingKind, alpha: f64) -> DampingKind {
    if alpha == 0.0 {
        return DampingKind::Zero;
    }
    match kind {
        DampingKind::Zero | DampingKind::Constant { .. } => DampingKind::Constant { level: alpha },
        DampingKind::Indicator { a, b, .. } => DampingKind::Indicator { a, b, level: alpha },
        DampingKind::Smooth { a, b, .. } => DampingKind::Smooth { a, b, level: alpha },
    }
}

fn termination_name(traj: &Trajectory) -> &'static str {
    match traj.termination {
        crate::dynamics::Termination::Completed => "completed",
        crate::dynamics::Termination::BlowUp { .. } => "blow_up",
        crate::dynamics::Termination::NonFinite { .. } => "non_finite",
    }
}

fn t_detect(traj: &Trajectory) -> Option<f64> {
    match traj.termination {
        crate::dynamics::Termination::BlowUp { t_detect, .. } => Some(t_detect),
        _ => None,
    }
}

/// Per-trajectory invariants along the samples.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryStats {
    pub well: Option<WellSet>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub termination: String,
    pub t_detect: Option<f64>,
    /// Largest `|E(t) - E(0) + dissipated(t)| / |E(0)|` over samples.
    pub max_relative_residual: f64,
    /// Largest energy increase between samples, relative to `|E(0)|`.
    pub max_energy_increase: f64,
    /// Samples where `K` left the sign class of the initial well.
    pub sign_changes: usize,
    /// Largest relative violation of `2E <= |u|_H^2 + |u_t|^2 <= 4E`.
    pub equivalence_violation: f64,
    /// Samples where a coercivity bound on `K` failed or could not be checked.
    pub lemma_failures: usize,
    pub samples: usize,
}

fn trajectory_stats(ctx: &Context, traj: &Trajectory) -> TrajectoryStats {
    let wc = &ctx.wells;
    let first = &traj.samples[0];
    let e0 = first.energy;
    let scale = e0.abs().max(f64::MIN_POSITIVE);
    let well = ctx
        .energies(&first.u, &first.ut)
        .ok()
        .filter(|_| !ctx.eq.is_linear())
        .map(|en| classify_energies(wc, &en).verdict);
    let delta = wc.d - e0;
    let lemma_delta = (delta > 0.0 && delta <= wc.d).then_some(delta);
    let mut stats = TrajectoryStats {
        well,
        initial_energy: e0,
        final_energy: traj.samples.last().map_or(e0, |s| s.energy),
        termination: termination_name(traj).into(),
        t_detect: t_detect(traj),
        max_relative_residual: 0.0,
        max_energy_increase: 0.0,
        sign_changes: 0,
        equivalence_violation: 0.0,
        lemma_failures: 0,
        samples: traj.samples.len(),
    };
    let mut prev = e0;
    for s in &traj.samples {
        stats.max_relative_residual = stats.max_relative_residual.max(s.residual / scale);
        stats.max_energy_increase = stats.max_energy_increase.max((s.energy - prev) / scale);
        prev = s.energy;
        let k = s.nehari;
        match well {
            Some(WellSet::KPlus) => {
                if k < 0.0 {
                    stats.sign_changes += 1;
                }
                let total = s.h01 * s.h01 + s.l2t * s.l2t;
                let e = s.energy;
                let floor = e.abs().max(f64::MIN_POSITIVE);
                let v = ((2.0 * e - total) / floor).max((total - 4.0 * e) / floor).max(0.0);
                stats.equivalence_violation = stats.equivalence_violation.max(v);
            }
            Some(WellSet::KMinus) => {
                if k >= 0.0 {
                    stats.sign_changes += 1;
                }
            }
            _ => {}
        }
        if let (Some(delta), Some(WellSet::KPlus | WellSet::KMinus)) = (lemma_delta, well) {
            match lemma12_bounds(&ctx.dom, wc, delta, &s.u) {
                Ok(r) if r.all_hold() => {}
                _ => stats.lemma_failures += 1,
            }
        }
    }
    stats
}

fn trajectory_checks(out: &mut Outcome, ctx: &Context, stats: &TrajectoryStats) {
    let tol = ctx.cfg.checks.relative_tolerance;
    let etol = ctx.cfg.checks.energy_tolerance;
    if stats.termination == "completed" {
        out.check(
            "energy_equality",
            stats.max_relative_residual <= etol,
            stats.max_relative_residual,
            etol,
        );
        out.check(
            "energy_nonincreasing",
            stats.max_energy_increase <= etol,
            stats.max_energy_increase,
            etol,
        );
    }
    if matches!(stats.well, Some(WellSet::KPlus | WellSet::KMinus)) {
        out.check("forward_invariance", stats.sign_changes == 0, stats.sign_changes as f64, 0.0);
        out.check(
            "coercivity_bounds",
            stats.lemma_failures == 0,
            stats.lemma_failures as f64,
            0.0,
        );
    }
    if stats.well == Some(WellSet::KPlus) {
        out.check(
            "energy_equivalence",
            stats.equivalence_violation <= tol,
            stats.equivalence_violation,
            tol,
        );
    }
}

fn fields_csv(traj: &Trajectory) -> String {
    let mut s = String::new();
    for smp in &traj.samples {
        s.push_str(&format!("{:?}", smp.t));
        for v in &smp.u.values {
            s.push_str(&format!(",{v:?}"));
        }
        s.push('\n');
    }
    s
}

fn emit_trajectory(out: &mut Outcome, ctx: &Context, stem: &str, traj: &Trajectory) {
    if ctx.cfg.outputs.csv {
        out.file(format!("{stem}.csv"), traj.to_csv_string());
    }
    if ctx.cfg.outputs.fields {
        out.file(format!("{stem}_fields.csv"), fields_csv(traj));
    }
}

fn ground_state_command(ctx: &Context) -> Outcome {
    let mut out = Outcome::default();
    let dom = &ctx.dom;
    let gs = &ctx.gs;
    let wc = &ctx.wells;
    let d = wc.d;
    let gcfg = &ctx.cfg.ground_state;
    out.note("d", d);
    out.note("q_h01_norm_sq", wc.q_h01_norm_sq);
    out.note("q_l4_norm_4", wc.q_l4_norm_4);
    out.check("petviashvili_residual", gs.residual < gcfg.tol, gs.residual, gcfg.tol);
    if let Some(it) = ctx.petviashvili_iterations {
        out.note("iterations", it);
        let budget = gcfg.iteration_budget as f64;
        out.check("petviashvili_iterations", (it as f64) < budget, it as f64, budget);
    }
    let k_rel = (wc.q_h01_norm_sq - wc.q_l4_norm_4).abs() / wc.q_h01_norm_sq;
    out.check("nehari_identity", k_rel < 1e-8, k_rel, 1e-8);
    let level_rel = (d - 0.25 * wc.q_l4_norm_4).abs() / d;
    out.check("level_identity", level_rel < 1e-8, level_rel, 1e-8);

    match shooting_oracle(dom, &ShootingOptions::default()) {
        Ok(sh) => {
            let q_inf = gs.q.max_abs();
            let dist = gs.q.sub(&sh.ground_state.q).max_abs() / q_inf;
            out.note("shooting_slope", sh.slope);
            out.note("shooting_boundary_miss", sh.boundary_miss);
            out.check("shooting_agreement", dist < 1e-6, dist, 1e-6);
        }
        Err(e) => out.failure("shooting_agreement", e),
    }

    let trials = gcfg.certify_trials;
    let mut certified = gs.clone();
    match certify_well_constants(dom, &mut certified, trials, gcfg.seed, ctx.exec) {
        Ok(_) => {
            let min_ratio = certified.certification.as_ref().map_or(f64::NAN, |c| c.min_ratio);
            out.note("certification_min_ratio", min_ratio);
            out.check("mountain_pass_certificate", true, 1.0 - min_ratio, 1e-6);
        }
        Err(e) => out.failure("mountain_pass_certificate", e),
    }
    let slacks = ctx.exec.map_range(trials, |t| {
        let u = certification_trial(dom, gs, gcfg.seed ^ 0x5eed, t);
        explicit_sobolev_check(dom, wc, &u)
    });
    match slacks.into_iter().collect::<Result<Vec<f64>, _>>() {
        Ok(v) => {
            let min = v.into_iter().fold(f64::INFINITY, f64::min);
            out.check("sobolev_slack", min >= -1e-8, min, -1e-8);
        }
        Err(e) => out.failure("sobolev_slack", e),
    }
    match GroundStateRecord::from_ground_state(dom, &certified) {
        Ok(rec) => out.file("ground_state.json".into(), rec.to_json()),
        Err(e) => out.failure("ground_state_record", e),
    }
    out
}

fn evolve_command(ctx: &Context) -> Outcome {
    let mut out = Outcome::default();
    let result = (|| {
        let damping = ctx.damping(ctx.cfg.damping)?;
        let (u0, ut0) = ctx.initial()?;
        let traj = ctx.run(&damping, &u0, &ut0, ctx.cfg.time)?;
        Ok::<_, String>(traj)
    })();
    let traj = match result {
        Ok(t) => t,
        Err(e) => {
            out.failure("evolve", e);
            return out;
        }
    };
    let stats = trajectory_stats(ctx, &traj);
    trajectory_checks(&mut out, ctx, &stats);
    if let Some(WellSet::KMinus) = stats.well {
        out.check(
            "unstable_well_blows_up",
            traj.termination.is_blow_up(),
            stats.t_detect.unwrap_or(f64::INFINITY),
            ctx.cfg.time.t_end,
        );
    }
    out.note("trajectory", &stats);
    emit_trajectory(&mut out, ctx, "trajectory", &traj);
    out
}

fn label(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    lambda: f64,
    alpha: f64,
    expected: &'static str,
    stats: TrajectoryStats,
}

fn dichotomy_command(ctx: &Context) -> Outcome {
    let mut out = Outcome::default();
    let sw = &ctx.cfg.sweep;
    let mut jobs: Vec<(f64, f64, bool)> = sw
        .stable_lambdas
        .iter()
        .map(|&l| (l, sw.stable_alpha, true))
        .collect();
    for &l in &sw.unstable_lambdas {
        for &a in &sw.alphas {
            jobs.push((l, a, false));
        }
    }
    let runs = ctx.exec.map(&jobs, |&(lambda, alpha, stable)| {
        let damping = ctx.damping(damping_with_level(ctx.cfg.damping, alpha))?;
        let u0 = ctx.gs.q.scaled(lambda);
        let time = TimeConfig {
            t_end: if stable { sw.stable_t_end } else { sw.blowup_t_end },
            ..ctx.cfg.time
        };
        let traj = ctx.run(&damping, &u0, &ctx.dom.zero_field(), time)?;
        let stats = trajectory_stats(ctx, &traj);
        Ok::<_, String>((traj, stats))
    });
    let mut rows = Vec::new();
    let mut misclassified = 0usize;
    let mut worst_decay = 0.0f64;
    let mut latest_blowup = 0.0f64;
    let mut sign_changes = 0usize;
    let mut equivalence = 0.0f64;
    let mut above_level = 0usize;
    let mut csv = String::from("lambda,alpha,expected,termination,t_detect,E0,E_end,sign_changes\n");
    for (&(lambda, alpha, stable), run) in jobs.iter().zip(runs) {
        let (traj, stats) = match run {
            Ok(r) => r,
            Err(e) => {
                out.failure(&format!("run_lambda{}_alpha{}", label(lambda), label(alpha)), e);
                misclassified += 1;
                continue;
            }
        };
        let ok = if stable {
            let ratio = stats.final_energy / stats.initial_energy;
            worst_decay = worst_decay.max(ratio);
            traj.termination.is_completed() && ratio < sw.decay_factor
        } else {
            if stats.initial_energy >= ctx.wells.d {
                above_level += 1;
            }
            let t = stats.t_detect.unwrap_or(f64::INFINITY);
            latest_blowup = latest_blowup.max(t);
            t < sw.blowup_t_end
        };
        if !ok {
            misclassified += 1;
        }
        sign_changes += stats.sign_changes;
        equivalence = equivalence.max(stats.equivalence_violation);
        csv.push_str(&format!(
            "{:?},{:?},{},{},{},{:?},{:?},{}\n",
            lambda,
            alpha,
            if stable { "completed" } else { "blow_up" },
            stats.termination,
            stats.t_detect.map_or(String::new(), |t| format!("{t:?}")),
            stats.initial_energy,
            stats.final_energy,
            stats.sign_changes
        ));
        emit_trajectory(
            &mut out,
            ctx,
            &format!("dichotomy_lambda{}_alpha{}", label(lambda), label(alpha)),
            &traj,
        );
        rows.push(SweepRow {
            lambda,
            alpha,
            expected: if stable { "completed" } else { "blow_up" },
            stats,
        });
    }
    out.check("misclassifications", misclassified == 0, misclassified as f64, 0.0);
    out.check("stable_decay", worst_decay < sw.decay_factor, worst_decay, sw.decay_factor);
    out.check(
        "unstable_blowup_time",
        latest_blowup < sw.blowup_t_end,
        latest_blowup,
        sw.blowup_t_end,
    );
    out.check("unstable_below_level", above_level == 0, above_level as f64, 0.0);
    out.check("forward_invariance", sign_changes == 0, sign_changes as f64, 0.0);
    let tol = ctx.cfg.checks.relative_tolerance;
    out.check("energy_equivalence", equivalence <= tol, equivalence, tol);
    out.note("runs", &rows);
    out.file("dichotomy.csv".into(), csv);
    out
}

/// Virial residuals at `dt` and `dt / 2`, every step sampled, up to `t_max`.
fn virial_halving(
    ctx: &Context,
    damping: &DampingProfile,
    u0: &Field,
    ut0: &Field,
    t_max: f64,
) -> Result<(f64, f64), String> {
    let mut devs = [0.0; 2];
    for (i, dev) in devs.iter_mut().enumerate() {
        let dt = ctx.cfg.time.dt / (1 << i) as f64;
        let time = TimeConfig {
            dt,
            t_end: t_max + 2.0 * dt,
            sample_every: 1,
        };
        let traj = ctx.run(damping, u0, ut0, time)?;
        let v = virial_series(&ctx.dom, damping, &ctx.eq, &traj, Some(&ctx.wells))
            .map_err(|e| e.to_string())?;
        *dev = v.max_mpp_deviation(t_max);
    }
    Ok((devs[0], devs[1]))
}

fn virial_check(out: &mut Outcome, ctx: &Context, halving: Result<(f64, f64), String>) {
    let (lo, hi) = ctx.cfg.checks.virial_ratio;
    match halving {
        Ok((a, b)) => {
            let ratio = a / b;
            out.note("virial_deviation", [a, b]);
            out.check("virial_halving_ratio", ratio >= lo && ratio <= hi, ratio, hi);
        }
        Err(e) => out.failure("virial_halving_ratio", e),
    }
}

fn stabilize_command(ctx: &Context) -> Outcome {
    let mut out = Outcome::default();
    let st = &ctx.cfg.stabilize;
    let damping = match ctx.damping(ctx.cfg.damping) {
        Ok(d) => d,
        Err(e) => {
            out.failure("damping", e);
            return out;
        }
    };
    let gcc = gcc_check_1d(&ctx.dom, &damping);
    out.note("gcc", gcc);
    out.check("geometric_control", gcc.holds, gcc.l_control, ctx.dom.extent() * 2.0);

    let (u0, ut0) = match ctx.initial() {
        Ok(v) => v,
        Err(e) => {
            out.failure("initial_data", e);
            return out;
        }
    };
    let mut family: Vec<Option<f64>> = st.family.iter().map(|&l| Some(l)).collect();
    family.push(None);
    let window_end = st.observability_t0 + st.observability_window;
    let runs = ctx.exec.map(&family, |lambda| match lambda {
        None => ctx.run(&damping, &u0, &ut0, ctx.cfg.time),
        Some(l) => {
            let time = TimeConfig {
                t_end: window_end,
                sample_every: 1,
                ..ctx.cfg.time
            };
            ctx.run(&damping, &ctx.gs.q.scaled(*l), &ctx.dom.zero_field(), time)
        }
    });
    let mut runs = runs.into_iter();
    let mut ratios = Vec::new();
    let mut obs_csv = String::from("lambda,t0,T,E_t0,dissipated,ratio\n");
    for (&lambda, run) in st.family.iter().zip(runs.by_ref()) {
        match run.and_then(|t| {
            observability_ratio(&damping, &t, st.observability_t0, st.observability_window)
                .map_err(|e| e.to_string())
        }) {
            Ok(r) => {
                obs_csv.push_str(&format!(
                    "{:?},{:?},{:?},{:?},{:?},{:?}\n",
                    lambda, r.t0, r.t_window, r.energy, r.dissipated, r.ratio
                ));
                ratios.push(r.ratio);
            }
            Err(e) => out.failure(&format!("observability_lambda{}", label(lambda)), e),
        }
    }
    let fam = observability_family(&ratios, st.observability_bound);
    out.check("observability_spread", fam.bounded, fam.max_over_median, fam.bound);
    out.note("observability", &fam);
    out.file("observability.csv".into(), obs_csv);

    let traj = match runs.next().expect("main run") {
        Ok(t) => t,
        Err(e) => {
            out.failure("stabilization_run", e);
            return out;
        }
    };
    let stats = trajectory_stats(ctx, &traj);
    trajectory_checks(&mut out, ctx, &stats);
    match fit_decay(&traj, None) {
        Ok(fit) => {
            out.note("decay_fit", fit);
            out.check("decay_rate", fit.lambda_fit > 0.0, fit.lambda_fit, 0.0);
            out.check(
                "decay_fit_quality",
                fit.r_squared >= st.r_squared_min,
                fit.r_squared,
                st.r_squared_min,
            );
        }
        Err(e) => out.failure("decay_rate", e),
    }
    let t_tail = st.t_tail.unwrap_or(ctx.cfg.time.t_end);
    match detect_equilibrium(&ctx.dom, &ctx.gs, &traj, t_tail) {
        Ok(r) => {
            out.note("equilibrium", r);
            out.check(
                "equilibrium_zero",
                r.verdict == Equilibrium::Zero,
                r.distances[0],
                r.threshold,
            );
        }
        Err(e) => out.failure("equilibrium_zero", e),
    }
    let mut sandwich_failures = 0usize;
    let mut eps0_min = f64::INFINITY;
    for s in &traj.samples {
        match lyapunov_eps(&ctx.dom, &ctx.wells, &s.u, &s.ut, st.lyapunov_eps) {
            Ok(r) => {
                eps0_min = eps0_min.min(r.eps0);
                if !r.sandwich_ok {
                    sandwich_failures += 1;
                }
            }
            Err(_) => sandwich_failures += 1,
        }
    }
    out.note("lyapunov_eps0", eps0_min);
    out.check(
        "lyapunov_sandwich",
        sandwich_failures == 0,
        sandwich_failures as f64,
        0.0,
    );
    let t_max = ctx.cfg.checks.virial_t_max.unwrap_or(ctx.cfg.time.t_end.min(10.0));
    virial_check(&mut out, ctx, virial_halving(ctx, &damping, &u0, &ut0, t_max));
    out.note("trajectory", &stats);
    emit_trajectory(&mut out, ctx, "stabilize", &traj);
    out
}

/// Blow-up runs from the configured data, or from `(lambda Q, 0)` when given.
fn blowup_command(ctx: &Context, lambda: Option<f64>) -> Outcome {
    let mut out = Outcome::default();
    let sw = &ctx.cfg.sweep;
    let initial = match lambda {
        Some(l) => Ok((ctx.gs.q.scaled(l), ctx.dom.zero_field())),
        None => ctx.initial(),
    };
    let (u0, ut0) = match initial {
        Ok(v) => v,
        Err(e) => {
            out.failure("initial_data", e);
            return out;
        }
    };
    let time = TimeConfig {
        t_end: sw.blowup_t_end,
        ..ctx.cfg.time
    };
    let runs = ctx.exec.map(&sw.blowup_alphas, |&alpha| {
        let damping = ctx.damping(damping_with_level(ctx.cfg.damping, alpha))?;
        let traj = ctx.run(&damping, &u0, &ut0, time)?;
        let virial = virial_series(&ctx.dom, &damping, &ctx.eq, &traj, Some(&ctx.wells))
            .map_err(|e| e.to_string())?;
        Ok::<_, String>((damping, traj, virial))
    });
    let mut csv = String::from("alpha,termination,t_detect,E0,convexity_tail\n");
    let mut missed = 0usize;
    let mut convexity_failures = 0usize;
    let mut lemma_failures = 0usize;
    let mut first_run = None;
    let mut latest = 0.0f64;
    for (&alpha, run) in sw.blowup_alphas.iter().zip(runs) {
        let (damping, traj, virial) = match run {
            Ok(r) => r,
            Err(e) => {
                out.failure(&format!("run_alpha{}", label(alpha)), e);
                missed += 1;
                continue;
            }
        };
        let stats = trajectory_stats(ctx, &traj);
        if stats.well != Some(WellSet::KMinus) {
            out.errors.push(format!(
                "initial data is not in the unstable well (alpha {alpha})"
            ));
        }
        let t = stats.t_detect.unwrap_or(f64::INFINITY);
        latest = latest.max(t);
        if !traj.termination.is_blow_up() {
            missed += 1;
        }
        if virial.convexity_tail != Some(true) {
            convexity_failures += 1;
        }
        lemma_failures += stats.lemma_failures + stats.sign_changes;
        csv.push_str(&format!(
            "{:?},{},{},{:?},{}\n",
            alpha,
            stats.termination,
            stats.t_detect.map_or(String::new(), |t| format!("{t:?}")),
            stats.initial_energy,
            virial.convexity_tail.unwrap_or(false)
        ));
        emit_trajectory(&mut out, ctx, &format!("blowup_alpha{}", label(alpha)), &traj);
        if first_run.is_none() {
            first_run = Some((damping, t));
        }
    }
    out.check("blowup_every_alpha", missed == 0, latest, sw.blowup_t_end);
    out.check("virial_convexity", convexity_failures == 0, convexity_failures as f64, 0.0);
    out.check("coercivity_bounds", lemma_failures == 0, lemma_failures as f64, 0.0);
    if let Some((damping, t)) = first_run {
        let t_max = ctx.cfg.checks.virial_t_max.unwrap_or(0.75 * t.min(sw.blowup_t_end));
        virial_check(&mut out, ctx, virial_halving(ctx, &damping, &u0, &ut0, t_max));
    }
    out.file("blowup.csv".into(), csv);
    out
}

fn dispatch(cmd: Command, ctx: &Context) -> Outcome {
    match cmd {
        Command::GroundState => ground_state_command(ctx),
        Command::Evolve => evolve_command(ctx),
        Command::Dichotomy => dichotomy_command(ctx),
        Command::Stabilize => stabilize_command(ctx),
        Command::Blowup => blowup_command(ctx, None),
        Command::Check => {
            let mut all = Outcome::default();
            for sub in &Command::ALL[..4] {
                all.merge(sub.name(), dispatch(*sub, ctx));
            }
            let lambda = ctx.cfg.sweep.blowup_lambda;
            all.merge(Command::Blowup.name(), blowup_command(ctx, Some(lambda)));
            all
        }
    }
}

/// Runs `cmd` on `cfg`. Module errors end up in the report, never in a panic.
pub fn run_scenario(cmd: Command, cfg: &ScenarioConfig, opts: &RunOptions) -> RunReport {
    let start = Instant::now();
    let mut out = match Context::build(cfg, opts) {
        Ok(ctx) => dispatch(cmd, &ctx),
        Err(e) => {
            let mut o = Outcome::default();
            o.failure("setup", e);
            o
        }
    };
    let mut files = Vec::new();
    let report_name = format!("{}_report.json", cmd.name());
    if opts.write_files {
        if let Err(e) = std::fs::create_dir_all(&opts.out_dir) {
            out.errors.push(format!("{}: {e}", opts.out_dir.display()));
        }
        for (name, contents) in &out.files {
            let path = opts.out_dir.join(name);
            match write_atomic(&path, contents.as_bytes()) {
                Ok(()) => files.push(path.display().to_string()),
                Err(e) => out.errors.push(format!("{}: {e}", path.display())),
            }
        }
        files.push(opts.out_dir.join(&report_name).display().to_string());
    }
    let mut report = RunReport {
        command: cmd.name().to_string(),
        scenario: cfg.name.clone(),
        passed: false,
        checks: out.checks,
        files,
        errors: out.errors,
        summary: out.summary,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    report.passed = report.all_passed();
    if opts.write_files {
        let path = opts.out_dir.join(&report_name);
        if let Err(e) = write_atomic(&path, report.to_json().as_bytes()) {
            report.errors.push(format!("{}: {e}", path.display()));
            report.passed = false;
        }
    }
    report
}

/// In-memory variant used by tests: no files, summary as JSON.
pub fn run_scenario_in_memory(cmd: Command, cfg: &ScenarioConfig, exec: Execution) -> RunReport {
    let opts = RunOptions {
        out_dir: PathBuf::new(),
        base_dir: PathBuf::from("."),
        exec,
        write_files: false,
    };
    run_scenario(cmd, cfg, &opts)
}
