//! Time integration of `u_tt + (-Laplacian + beta) u + gamma u_t = kappa u^3`
//! with an energy ledger.
//!
//! One step of size `h` is the symmetric composition
//!
//! ```text
//! D(h/2) K(h/2) A(h) K(h/2) D(h/2)
//! ```
//!
//! * `A` is the exact flow of the linear Klein-Gordon part, a rotation of each
//!   sine mode with frequency `omega_k = sqrt(lambda_k + beta)`.
//! * `D` is the exact pointwise damping flow `u_t <- exp(-gamma tau) u_t`.
//! * `K` is the cubic kick `u_t += tau kappa F(h omega) u^3` with the filter
//!   `F(x) = tan(x/2) / (x/2)`. The filter makes every stationary solution of
//!   the semi-discrete equation an exact fixed point of the step, which keeps
//!   the (linearly unstable) ground state in place.
//!
//! The ledger records `E(t)` and the trapezoid-in-time dissipation
//! `int_0^t int gamma u_t^2`; the residual of the energy equality is measured,
//! never imposed.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{Domain, DomainError, Field};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid damping profile: {0}")]
    InvalidDamping(String),
    #[error("invalid evolution options: {0}")]
    InvalidOptions(String),
    #[error("time step {dt} exceeds the stability guard {dt_max}")]
    StepTooLarge { dt: f64, dt_max: f64 },
    #[error("blow-up detected at t = {t}: |u|_H = {h01:e}")]
    BlowUpDetected { t: f64, h01: f64 },
    #[error("non-finite values at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Shape of the damping coefficient `gamma(x) >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DampingKind {
    Zero,
    Constant { level: f64 },
    /// `level` on `[a, b]`, zero elsewhere.
    Indicator { a: f64, b: f64, level: f64 },
    /// `level` on `[a, b]` with smooth ramps to zero of width `L / 10` outside.
    Smooth { a: f64, b: f64, level: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DampingProfile {
    pub kind: DampingKind,
    /// `gamma` at the grid nodes.
    pub values: Field,
}

fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

impl DampingProfile {
    pub fn new(dom: &Domain, kind: DampingKind) -> Result<Self, DynamicsError> {
        let extent = dom.extent();
        let check_level = |level: f64| {
            if level.is_finite() && level > 0.0 {
                Ok(())
            } else {
                Err(DynamicsError::InvalidDamping(format!(
                    "level must be positive, got {level}"
                )))
            }
        };
        let check_core = |a: f64, b: f64| {
            if 0.0 <= a && a < b && b <= extent {
                Ok(())
            } else {
                Err(DynamicsError::InvalidDamping(format!(
                    "core [{a}, {b}] must satisfy 0 <= a < b <= {extent}"
                )))
            }
        };
        let values = match kind {
            DampingKind::Zero => dom.zero_field(),
            DampingKind::Constant { level } => {
                check_level(level)?;
                dom.sample(|_| level)
            }
            DampingKind::Indicator { a, b, level } => {
                check_level(level)?;
                check_core(a, b)?;
                dom.sample(|x| if a <= x && x <= b { level } else { 0.0 })
            }
            DampingKind::Smooth { a, b, level } => {
                check_level(level)?;
                check_core(a, b)?;
                let w = 0.1 * extent;
                dom.sample(|x| {
                    if x < a {
                        level * smooth_step((x - (a - w)) / w)
                    } else if x > b {
                        level * smooth_step(((b + w) - x) / w)
                    } else {
                        level
                    }
                })
            }
        };
        Ok(Self { kind, values })
    }

    pub fn zero(dom: &Domain) -> Self {
        Self {
            kind: DampingKind::Zero,
            values: dom.zero_field(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.is_zero()
    }

    /// Region where `gamma >= level`, as `(a, b)`; `None` without damping.
    pub fn core(&self, extent: f64) -> Option<(f64, f64)> {
        match self.kind {
            DampingKind::Zero => None,
            DampingKind::Constant { .. } => Some((0.0, extent)),
            DampingKind::Indicator { a, b, .. } | DampingKind::Smooth { a, b, .. } => Some((a, b)),
        }
    }

    /// Lower bound of `gamma` on its core.
    pub fn level(&self) -> f64 {
        match self.kind {
            DampingKind::Zero => 0.0,
            DampingKind::Constant { level }
            | DampingKind::Indicator { level, .. }
            | DampingKind::Smooth { level, .. } => level,
        }
    }
}

/// Coefficient of the cubic term; 1 for the standard equation, 0 for the
/// linear damped Klein-Gordon equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equation {
    pub coupling: f64,
}

impl Default for Equation {
    fn default() -> Self {
        Self { coupling: 1.0 }
    }
}

impl Equation {
    pub fn linear() -> Self {
        Self { coupling: 0.0 }
    }

    pub fn with_coupling(coupling: f64) -> Self {
        Self { coupling }
    }

    pub fn is_linear(&self) -> bool {
        self.coupling == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub energy: f64,
    pub static_energy: f64,
    pub nehari: f64,
    /// Cumulative `int_0^t int gamma u_t^2`.
    pub dissipated: f64,
    /// `|E(t) - E(0) + dissipated(t)|`.
    pub equality_residual: f64,
    pub initial_energy: f64,
    /// Current `int gamma u_t^2`.
    pub dissipation_rate: f64,
    pub h01_sq: f64,
    pub l4_4: f64,
    pub l2t_sq: f64,
}

impl EnergyLedger {
    fn from_norms(eq: &Equation, h01_sq: f64, l4_4: f64, l2t_sq: f64, rate: f64) -> Self {
        let j = 0.5 * h01_sq - 0.25 * eq.coupling * l4_4;
        let e = j + 0.5 * l2t_sq;
        Self {
            energy: e,
            static_energy: j,
            nehari: h01_sq - eq.coupling * l4_4,
            dissipated: 0.0,
            equality_residual: 0.0,
            initial_energy: e,
            dissipation_rate: rate,
            h01_sq,
            l4_4,
            l2t_sq,
        }
    }

    /// Next ledger entry after a step of size `dt`.
    fn advance(&self, next: EnergyLedger, dt: f64) -> Self {
        let dissipated = self.dissipated + 0.5 * dt * (self.dissipation_rate + next.dissipation_rate);
        Self {
            dissipated,
            initial_energy: self.initial_energy,
            equality_residual: (next.energy - self.initial_energy + dissipated).abs(),
            ..next
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Field,
    pub ut: Field,
    pub t: f64,
    pub ledger: EnergyLedger,
}

impl State {
    /// State at `t = 0` with a fresh ledger.
    pub fn new(
        dom: &Domain,
        damping: &DampingProfile,
        eq: &Equation,
        u: Field,
        ut: Field,
    ) -> Result<Self, DynamicsError> {
        let c = dom.forward_transform(&u)?;
        dom.l2_norm_sq(&ut)?;
        let ledger = EnergyLedger::from_norms(
            eq,
            dom.h01_from_coeffs(&c.coeffs),
            dom.quartic_from_coeffs(&c.coeffs),
            dom.inner_unchecked(&ut.values, &ut.values),
            dom.weighted_inner(&damping.values.values, &ut.values, &ut.values),
        );
        Ok(Self {
            u,
            ut,
            t: 0.0,
            ledger,
        })
    }

    pub fn h01(&self) -> f64 {
        self.ledger.h01_sq.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub dt_used: f64,
    pub blow_up: bool,
    pub h01_norm: f64,
}

/// Exact flow of `u_tt + (-Laplacian + beta) u = 0` on coefficient pairs.
pub fn linear_propagator(dom: &Domain, c: &[f64], ct: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = Vec::with_capacity(c.len());
    let mut ct1 = Vec::with_capacity(c.len());
    for (k, (a, b)) in c.iter().zip(ct).enumerate() {
        let w = dom.symbol(k).sqrt();
        let (s, co) = (w * dt).sin_cos();
        c1.push(a * co + b * s / w);
        ct1.push(-a * w * s + b * co);
    }
    (c1, ct1)
}

/// Linear energy `sum (omega_k^2 c_k^2 + ct_k^2)` (up to the mass factor).
pub fn linear_energy(dom: &Domain, c: &[f64], ct: &[f64]) -> f64 {
    c.iter()
        .zip(ct)
        .enumerate()
        .map(|(k, (a, b))| dom.symbol(k) * a * a + b * b)
        .sum()
}

/// Largest step accepted by [`Stepper`]: the kick filter needs
/// `h omega_max < pi`, and `pi / 2` keeps it below 1.28.
pub fn dt_max(dom: &Domain, eq: &Equation) -> f64 {
    if eq.is_linear() {
        f64::INFINITY
    } else {
        0.5 * PI / dom.omega_max()
    }
}

/// Step-size dependent tables.
#[derive(Debug, Clone)]
struct Kernel {
    dt: f64,
    /// Rotation by `dt omega` as three shears `c += a ct; ct -= b c; c += a ct`,
    /// preceded by a sign flip when `flip` is set.
    shear_a: Vec<f64>,
    shear_b: Vec<f64>,
    flip: Vec<bool>,
    /// `(dt / 2) kappa F(dt omega)`.
    kick: Vec<f64>,
    /// `exp(-gamma dt / 2)` at the nodes.
    decay: Option<Vec<f64>>,
}

impl Kernel {
    fn new(dom: &Domain, damping: &DampingProfile, eq: &Equation, dt: f64) -> Self {
        let n = dom.n_modes();
        let mut shear_a = Vec::with_capacity(n);
        let mut shear_b = Vec::with_capacity(n);
        let mut flip = Vec::with_capacity(n);
        let mut kick = Vec::with_capacity(n);
        for k in 0..n {
            let w = dom.symbol(k).sqrt();
            let x = w * dt;
            let mut r = x.rem_euclid(2.0 * PI);
            if r > PI {
                r -= 2.0 * PI;
            }
            let flipped = r.abs() > 0.5 * PI;
            if flipped {
                r -= PI.copysign(r);
            }
            shear_a.push((0.5 * r).tan() / w);
            shear_b.push(r.sin() * w);
            flip.push(flipped);
            let filter = if x.abs() < 1e-6 {
                1.0 + x * x / 12.0
            } else {
                (0.5 * x).tan() / (0.5 * x)
            };
            kick.push(0.5 * dt * eq.coupling * filter);
        }
        let decay = (!damping.is_zero()).then(|| {
            damping
                .values
                .values
                .iter()
                .map(|g| (-0.5 * g * dt).exp())
                .collect()
        });
        Self {
            dt,
            shear_a,
            shear_b,
            flip,
            kick,
            decay,
        }
    }
}

/// Working representation: coefficients of `u` and `u_t`, plus `u_t` on the grid.
#[derive(Debug, Clone)]
struct Phase {
    c: Vec<f64>,
    ct: Vec<f64>,
    ut: Vec<f64>,
    ledger: EnergyLedger,
}

/// Repeated stepping against fixed domain, damping, and equation.
pub struct Stepper<'a> {
    dom: &'a Domain,
    damping: &'a DampingProfile,
    eq: Equation,
    uq: Vec<f64>,
    scratch: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(dom: &'a Domain, damping: &'a DampingProfile, eq: Equation) -> Self {
        let m = dom.quadrature_size();
        Self {
            dom,
            damping,
            eq,
            uq: vec![0.0; m],
            scratch: vec![0.0; m],
            g: vec![0.0; dom.n_modes()],
        }
    }

    fn phase(&self, s: &State) -> Result<Phase, DynamicsError> {
        Ok(Phase {
            c: self.dom.forward_transform(&s.u)?.coeffs,
            ct: self.dom.forward_transform(&s.ut)?.coeffs,
            ut: s.ut.values.clone(),
            ledger: s.ledger,
        })
    }

    fn state(&self, p: &Phase, t: f64) -> State {
        let mut u = vec![0.0; self.dom.n_modes()];
        self.dom.inverse_into(&p.c, &mut u);
        State {
            u: Field::new(u),
            ut: Field::new(p.ut.clone()),
            t,
            ledger: p.ledger,
        }
    }

    fn kick(&mut self, k: &Kernel, p: &mut Phase) {
        self.dom.quad_values(&p.c, &mut self.uq);
        if self.eq.is_linear() {
            return;
        }
        self.dom.cubic_from_quad(&self.uq, &mut self.scratch, &mut self.g);
        for ((ct, g), w) in p.ct.iter_mut().zip(&self.g).zip(&k.kick) {
            *ct += w * g;
        }
    }

    fn advance(&mut self, k: &Kernel, p: &mut Phase) {
        let dom = self.dom;
        if let Some(decay) = &k.decay {
            for (v, e) in p.ut.iter_mut().zip(decay) {
                *v *= e;
            }
            dom.forward_into(&p.ut, &mut p.ct);
        }
        self.kick(k, p);
        for i in 0..p.c.len() {
            let (mut a, mut b) = (p.c[i], p.ct[i]);
            if k.flip[i] {
                a = -a;
                b = -b;
            }
            a += k.shear_a[i] * b;
            b -= k.shear_b[i] * a;
            a += k.shear_a[i] * b;
            p.c[i] = a;
            p.ct[i] = b;
        }
        self.kick(k, p);
        dom.inverse_into(&p.ct, &mut p.ut);
        if let Some(decay) = &k.decay {
            for (v, e) in p.ut.iter_mut().zip(decay) {
                *v *= e;
            }
        }
        let h01_sq = dom.h01_from_coeffs(&p.c);
        let l4_4 = dom.quartic_from_quad(&self.uq);
        let l2t_sq = dom.inner_unchecked(&p.ut, &p.ut);
        let rate = dom.weighted_inner(&self.damping.values.values, &p.ut, &p.ut);
        let next = EnergyLedger::from_norms(&self.eq, h01_sq, l4_4, l2t_sq, rate);
        p.ledger = p.ledger.advance(next, k.dt);
    }

    fn kernel(&self, dt: f64) -> Kernel {
        Kernel::new(self.dom, self.damping, &self.eq, dt)
    }

    /// One step from `s`. Fails with `BlowUpDetected` when `|u|_H` exceeds
    /// `blowup_threshold` afterwards.
    pub fn step(
        &mut self,
        s: &State,
        dt: f64,
        blowup_threshold: f64,
    ) -> Result<(State, StepReport), DynamicsError> {
        let guard = dt_max(self.dom, &self.eq);
        if !(dt > 0.0 && dt <= guard) {
            return Err(DynamicsError::StepTooLarge { dt, dt_max: guard });
        }
        let kernel = self.kernel(dt);
        let mut p = self.phase(s)?;
        self.advance(&kernel, &mut p);
        let t = s.t + dt;
        if !p.ledger.energy.is_finite() || p.c.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { t });
        }
        let h01 = p.ledger.h01_sq.sqrt();
        let report = StepReport {
            dt_used: dt,
            blow_up: h01 > blowup_threshold,
            h01_norm: h01,
        };
        if report.blow_up {
            return Err(DynamicsError::BlowUpDetected { t, h01 });
        }
        Ok((self.state(&p, t), report))
    }
}

/// Single Strang step; see [`Stepper::step`].
pub fn step(
    dom: &Domain,
    damping: &DampingProfile,
    eq: &Equation,
    s: &State,
    dt: f64,
    blowup_threshold: f64,
) -> Result<(State, StepReport), DynamicsError> {
    Stepper::new(dom, damping, *eq).step(s, dt, blowup_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub dt: f64,
    pub t_end: f64,
    /// Record a sample every this many nominal steps.
    pub sample_every: usize,
    /// Reference size of the data; defaults to `|u^0|_H` (or 1 for zero data).
    pub blowup_scale: Option<f64>,
    /// Blow-up is declared at `blowup_factor * blowup_scale`.
    pub blowup_factor: f64,
    /// Relative growth of `|u|_H` in one step that triggers dt halving.
    pub growth_limit: f64,
    pub max_halvings: u32,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 10.0,
            sample_every: 10,
            blowup_scale: None,
            blowup_factor: 1e3,
            growth_limit: 0.1,
            max_halvings: 20,
        }
    }
}

impl EvolveOptions {
    fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidOptions(m.into()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return bad("t_end must be nonnegative");
        }
        if self.sample_every == 0 {
            return bad("sample_every must be at least 1");
        }
        if self.max_halvings > 30 {
            return bad("max_halvings must be at most 30");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub energy: f64,
    pub static_energy: f64,
    pub nehari: f64,
    pub h01: f64,
    pub l2t: f64,
    pub dissipated: f64,
    pub residual: f64,
    pub dissipation_rate: f64,
    /// `true` when `t` is a multiple of the sampling interval.
    pub on_grid: bool,
    pub u: Field,
    pub ut: Field,
}

impl Sample {
    fn from_state(s: &State, on_grid: bool) -> Self {
        let l = &s.ledger;
        Self {
            t: s.t,
            energy: l.energy,
            static_energy: l.static_energy,
            nehari: l.nehari,
            h01: l.h01_sq.sqrt(),
            l2t: l.l2t_sq.sqrt(),
            dissipated: l.dissipated,
            residual: l.equality_residual,
            dissipation_rate: l.dissipation_rate,
            on_grid,
            u: s.u.clone(),
            ut: s.ut.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    BlowUp { t_detect: f64, h01: f64 },
    NonFinite { t: f64 },
}

impl Termination {
    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }

    pub fn is_blow_up(&self) -> bool {
        matches!(self, Termination::BlowUp { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub termination: Termination,
    pub final_state: State,
    /// Nominal step and sampling interval.
    pub dt: f64,
    pub sample_interval: f64,
    pub steps: usize,
    /// Deepest dt-halving level reached.
    pub halvings: u32,
    pub blowup_threshold: f64,
}

pub const CSV_HEADER: &str = "t,E,J,K,h01,l2t,dissipated,residual";

impl Trajectory {
    /// Leading samples with uniform spacing.
    pub fn uniform_samples(&self) -> &[Sample] {
        let end = self
            .samples
            .iter()
            .position(|s| !s.on_grid)
            .unwrap_or(self.samples.len());
        &self.samples[..end]
    }

    /// Last sample with `t <= time` (within half a sampling interval of round-off).
    pub fn sample_at(&self, time: f64) -> Option<&Sample> {
        let slack = 1e-9 * self.sample_interval.max(1.0);
        self.samples.iter().rev().find(|s| s.t <= time + slack)
    }

    /// Time series as CSV, floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                s.t, s.energy, s.static_energy, s.nehari, s.h01, s.l2t, s.dissipated, s.residual
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Ticks of the finest step per nominal (sub)step.
const TICK_SHIFT: u32 = 30;

pub fn evolve(
    dom: &Domain,
    damping: &DampingProfile,
    eq: &Equation,
    s0: State,
    opts: &EvolveOptions,
) -> Result<Trajectory, DynamicsError> {
    evolve_observed(dom, damping, eq, s0, opts, &mut |_| {})
}

/// Fixed-step integration to `t_end` with dt halving on blow-up approach.
///
/// Nominal steps above [`dt_max`] are split into equal substeps. The observer
/// sees every recorded sample. Step failures end the run with the matching
/// [`Termination`]; only invalid options or mis-sized fields return an error.
pub fn evolve_observed(
    dom: &Domain,
    damping: &DampingProfile,
    eq: &Equation,
    s0: State,
    opts: &EvolveOptions,
    observer: &mut dyn FnMut(&Sample),
) -> Result<Trajectory, DynamicsError> {
    opts.validate()?;
    if s0.u.len() != dom.n_modes() || s0.ut.len() != dom.n_modes() {
        return Err(DomainError::SizeMismatch {
            expected: dom.n_modes(),
            found: s0.u.len().min(s0.ut.len()),
        }
        .into());
    }
    if !(s0.u.is_finite() && s0.ut.is_finite()) {
        return Err(DynamicsError::NonFinite { t: s0.t });
    }
    let guard = dt_max(dom, eq);
    let substeps = if opts.dt > guard {
        (opts.dt / guard).ceil() as u64
    } else {
        1
    };
    let base_dt = opts.dt / substeps as f64;
    let unit = base_dt / (1u64 << TICK_SHIFT) as f64;
    let step_ticks = 1u64 << TICK_SHIFT;
    let sample_ticks = opts.sample_every as u64 * substeps * step_ticks;
    let end_ticks = (opts.t_end / base_dt).round() as u64 * step_ticks;
    let t0 = s0.t;

    let scale = opts.blowup_scale.unwrap_or_else(|| s0.h01());
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let threshold = opts.blowup_factor * scale;
    let max_halvings = opts.max_halvings.min(TICK_SHIFT);

    let mut stepper = Stepper::new(dom, damping, *eq);
    let mut kernels: Vec<Option<Kernel>> = vec![None; max_halvings as usize + 1];
    let mut level = 0u32;
    let mut phase = stepper.phase(&s0)?;
    let mut ticks = 0u64;
    let mut steps = 0usize;
    let mut samples = Vec::new();
    let record = |s: &State, on_grid: bool, samples: &mut Vec<Sample>, obs: &mut dyn FnMut(&Sample)| {
        let sample = Sample::from_state(s, on_grid);
        obs(&sample);
        samples.push(sample);
    };
    record(&s0, true, &mut samples, observer);
    let mut termination = Termination::Completed;
    let mut last_state = s0;

    while ticks < end_ticks {
        let before = phase.clone();
        let h_before = before.ledger.h01_sq.sqrt();
        let kernel = kernels[level as usize]
            .get_or_insert_with(|| stepper.kernel(base_dt / (1u64 << level) as f64))
            .clone();
        stepper.advance(&kernel, &mut phase);
        let finite = phase.ledger.energy.is_finite() && phase.c.iter().all(|v| v.is_finite());
        let h_after = phase.ledger.h01_sq.sqrt();
        let growing = !finite || h_after > (1.0 + opts.growth_limit) * h_before;
        if growing && h_before >= scale && level < max_halvings {
            phase = before;
            level += 1;
            continue;
        }
        ticks += step_ticks >> level;
        steps += 1;
        let t = t0 + ticks as f64 * unit;
        if !finite {
            termination = Termination::NonFinite { t };
            break;
        }
        if h_after > threshold {
            last_state = stepper.state(&phase, t);
            termination = Termination::BlowUp {
                t_detect: t,
                h01: h_after,
            };
            break;
        }
        if ticks % sample_ticks == 0 {
            last_state = stepper.state(&phase, t);
            record(&last_state, true, &mut samples, observer);
        } else if ticks >= end_ticks {
            last_state = stepper.state(&phase, t);
        }
    }
    if !termination.is_completed() || samples.last().map(|s| s.t) != Some(last_state.t) {
        if !matches!(termination, Termination::NonFinite { .. }) {
            record(&last_state, false, &mut samples, observer);
        }
    }
    Ok(Trajectory {
        samples,
        termination,
        final_state: last_state,
        dt: opts.dt,
        sample_interval: opts.dt * opts.sample_every as f64,
        steps,
        halvings: level,
        blowup_threshold: threshold,
    })
}

/// Runs the equation from `(u0, ut0)` and the equation with coupling scaled by
/// `alpha^2` from `(u0, ut0) / alpha`, and returns
/// `max_t |u_a(t) / alpha - u_b(t)|_H` over the common samples.
#[allow(clippy::too_many_arguments)]
pub fn scaled_covariance_check(
    dom: &Domain,
    damping: &DampingProfile,
    eq: &Equation,
    u0: &Field,
    ut0: &Field,
    alpha: f64,
    opts: &EvolveOptions,
) -> Result<f64, DynamicsError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DynamicsError::InvalidOptions(format!(
            "scale must be positive, got {alpha}"
        )));
    }
    let scaled_eq = Equation::with_coupling(eq.coupling * alpha * alpha);
    let sa = State::new(dom, damping, eq, u0.clone(), ut0.clone())?;
    let sb = State::new(dom, damping, &scaled_eq, u0.scaled(1.0 / alpha), ut0.scaled(1.0 / alpha))?;
    let scale = opts.blowup_scale.unwrap_or_else(|| sa.h01());
    let opts_a = EvolveOptions {
        blowup_scale: Some(scale),
        ..*opts
    };
    let opts_b = EvolveOptions {
        blowup_scale: Some(scale / alpha),
        ..*opts
    };
    let ta = evolve(dom, damping, eq, sa, &opts_a)?;
    let tb = evolve(dom, damping, &scaled_eq, sb, &opts_b)?;
    let mut worst = 0.0f64;
    for (a, b) in ta.samples.iter().zip(&tb.samples) {
        let diff = a.u.scaled(1.0 / alpha).sub(&b.u);
        worst = worst.max(dom.h01_norm_sq(&diff)?.sqrt());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{DomainSpec, SpectralCoeffs};
    use approx::assert_relative_eq;

    fn dom(n: usize) -> Domain {
        Domain::new(DomainSpec::interval(PI, n)).unwrap()
    }

    #[test]
    fn full_period_is_identity() {
        let d = dom(16);
        let w1 = 2f64.sqrt();
        let c = SpectralCoeffs::unit(16, 1).coeffs;
        let ct = vec![0.0; 16];
        let (c1, ct1) = linear_propagator(&d, &c, &ct, 2.0 * PI / w1);
        assert!((c1[0] - 1.0).abs() < 1e-13);
        assert!(ct1[0].abs() < 1e-13);
    }

    #[test]
    fn propagator_reverses_and_conserves() {
        let d = dom(32);
        let c: Vec<f64> = (0..32).map(|k| 1.0 / (1.0 + k as f64)).collect();
        let ct: Vec<f64> = (0..32).map(|k| ((k as f64) * 0.7).sin()).collect();
        let (c1, ct1) = linear_propagator(&d, &c, &ct, 0.37);
        let (c2, ct2) = linear_propagator(&d, &c1, &ct1, -0.37);
        for i in 0..32 {
            assert!((c2[i] - c[i]).abs() < 1e-13);
            assert!((ct2[i] - ct[i]).abs() < 1e-13);
        }
        assert_relative_eq!(
            linear_energy(&d, &c, &ct),
            linear_energy(&d, &c1, &ct1),
            max_relative = 1e-13
        );
    }

    #[test]
    fn damping_profiles() {
        let d = dom(64);
        let l = PI;
        let g = DampingProfile::new(&d, DampingKind::Indicator { a: 0.0, b: l / 4.0, level: 2.0 }).unwrap();
        for (x, v) in d.grid_points.iter().zip(&g.values.values) {
            assert_eq!(*v, if *x <= l / 4.0 { 2.0 } else { 0.0 });
        }
        let s = DampingProfile::new(&d, DampingKind::Smooth { a: 1.0, b: 2.0, level: 1.5 }).unwrap();
        for (x, v) in d.grid_points.iter().zip(&s.values.values) {
            assert!(*v >= 0.0 && *v <= 1.5);
            if (1.0..=2.0).contains(x) {
                assert_eq!(*v, 1.5);
            }
            if *x < 1.0 - 0.1 * l || *x > 2.0 + 0.1 * l {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(DampingProfile::new(&d, DampingKind::Constant { level: 0.0 }).is_err());
        assert!(DampingProfile::new(&d, DampingKind::Indicator { a: 2.0, b: 1.0, level: 1.0 }).is_err());
        assert!(DampingProfile::new(&d, DampingKind::Indicator { a: 0.0, b: 4.0, level: 1.0 }).is_err());
        assert!(DampingProfile::zero(&d).is_zero());
    }

    #[test]
    fn step_guard_and_errors() {
        let d = dom(64);
        let g = DampingProfile::zero(&d);
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, d.sample(|x| 0.1 * x.sin()), d.zero_field()).unwrap();
        assert!(matches!(
            step(&d, &g, &eq, &s, 1.0, 1e9),
            Err(DynamicsError::StepTooLarge { .. })
        ));
        let (s1, rep) = step(&d, &g, &eq, &s, 0.01, 1e9).unwrap();
        assert!(!rep.blow_up);
        assert_eq!(rep.dt_used, 0.01);
        assert_relative_eq!(s1.t, 0.01);
        assert!(matches!(
            step(&d, &g, &eq, &s, 0.01, 1e-3),
            Err(DynamicsError::BlowUpDetected { .. })
        ));
    }

    #[test]
    fn zero_data_stays_zero() {
        let d = dom(32);
        let g = DampingProfile::new(&d, DampingKind::Constant { level: 1.0 }).unwrap();
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, d.zero_field(), d.zero_field()).unwrap();
        let opts = EvolveOptions {
            t_end: 2.0,
            ..Default::default()
        };
        let tr = evolve(&d, &g, &eq, s, &opts).unwrap();
        assert!(tr.termination.is_completed());
        assert_eq!(tr.samples.len(), 21);
        assert!(tr.samples.iter().all(|s| s.u.is_zero() && s.ut.is_zero() && s.energy == 0.0));
    }

    #[test]
    fn invalid_options() {
        let d = dom(16);
        let g = DampingProfile::zero(&d);
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, d.zero_field(), d.zero_field()).unwrap();
        let opts = EvolveOptions {
            sample_every: 0,
            ..Default::default()
        };
        assert!(evolve(&d, &g, &eq, s.clone(), &opts).is_err());
        let opts = EvolveOptions {
            dt: -1.0,
            ..Default::default()
        };
        assert!(evolve(&d, &g, &eq, s, &opts).is_err());
    }

    #[test]
    fn linear_energy_is_conserved_over_many_steps() {
        let d = dom(64);
        let g = DampingProfile::zero(&d);
        let eq = Equation::linear();
        let u = d.sample(|x| x * (PI - x) * (3.0 * x).cos());
        let ut = d.sample(|x| (2.0 * x).sin());
        let s = State::new(&d, &g, &eq, u, ut).unwrap();
        let e0 = s.ledger.energy;
        let opts = EvolveOptions {
            dt: 0.01,
            t_end: 1000.0,
            sample_every: 10_000,
            ..Default::default()
        };
        let tr = evolve(&d, &g, &eq, s, &opts).unwrap();
        assert_eq!(tr.steps, 100_000);
        for smp in &tr.samples {
            assert!((smp.energy - e0).abs() <= 1e-12 * e0, "drift {}", smp.energy - e0);
        }
        let c0 = d.forward_transform(&tr.samples[0].u).unwrap().coeffs;
        let ct0 = d.forward_transform(&tr.samples[0].ut).unwrap().coeffs;
        let c1 = d.forward_transform(&tr.final_state.u).unwrap().coeffs;
        let ct1 = d.forward_transform(&tr.final_state.ut).unwrap().coeffs;
        let (l0, l1) = (linear_energy(&d, &c0, &ct0), linear_energy(&d, &c1, &ct1));
        assert!((l1 - l0).abs() <= 1e-12 * l0);
    }

    #[test]
    fn csv_header_and_rows() {
        let d = dom(16);
        let g = DampingProfile::zero(&d);
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, d.sample(|x| 0.1 * x.sin()), d.zero_field()).unwrap();
        let opts = EvolveOptions {
            t_end: 0.5,
            ..Default::default()
        };
        let tr = evolve(&d, &g, &eq, s, &opts).unwrap();
        let csv = tr.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), tr.samples.len());
        for (row, smp) in rows.iter().zip(&tr.samples) {
            let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 8);
            assert_eq!(vals[0].to_bits(), smp.t.to_bits());
            assert_eq!(vals[1].to_bits(), smp.energy.to_bits());
        }
    }

    fn ground_state(d: &Domain) -> Field {
        crate::ground_state::petviashvili_solve(d, &Default::default())
            .unwrap()
            .q
    }

    #[test]
    fn ground_state_is_a_fixed_point() {
        let d = dom(128);
        let q = ground_state(&d);
        let g = DampingProfile::new(&d, DampingKind::Constant { level: 1.0 }).unwrap();
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, q.clone(), d.zero_field()).unwrap();
        let opts = EvolveOptions {
            t_end: 5.0,
            ..Default::default()
        };
        let tr = evolve(&d, &g, &eq, s, &opts).unwrap();
        assert!(tr.termination.is_completed());
        let worst = tr
            .samples
            .iter()
            .map(|s| s.u.sub(&q).max_abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "drift from Q: {worst:e}");
    }

    #[test]
    fn supercritical_scaling_blows_up() {
        let d = dom(128);
        let q = ground_state(&d);
        let g = DampingProfile::new(&d, DampingKind::Constant { level: 1.0 }).unwrap();
        let eq = Equation::default();
        let s = State::new(&d, &g, &eq, q.scaled(1.2), d.zero_field()).unwrap();
        let opts = EvolveOptions {
            t_end: 30.0,
            blowup_scale: Some(s.h01()),
            ..Default::default()
        };
        let tr = evolve(&d, &g, &eq, s, &opts).unwrap();
        assert!(tr.termination.is_blow_up(), "{:?}", tr.termination);
        assert!(tr.halvings > 0);
    }

    #[test]
    fn second_order_in_time() {
        let d = dom(64);
        let g = DampingProfile::zero(&d);
        let eq = Equation::default();
        let run = |dt: f64| {
            let s = State::new(&d, &g, &eq, d.sample(|x| 0.1 * x.sin()), d.zero_field()).unwrap();
            let opts = EvolveOptions {
                dt,
                t_end: 10.0,
                sample_every: 1_000_000,
                ..Default::default()
            };
            evolve(&d, &g, &eq, s, &opts).unwrap().final_state
        };
        let reference = run(0.00125);
        let err = |dt: f64| {
            let s = run(dt);
            d.h01_norm_sq(&s.u.sub(&reference.u)).unwrap().sqrt()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 4.0).abs() <= 0.8, "ratio {ratio}");
    }

    #[test]
    fn covariance_under_scaling() {
        let d = dom(64);
        let g = DampingProfile::new(&d, DampingKind::Constant { level: 1.0 }).unwrap();
        let u = d.sample(|x| 0.3 * x.sin() + 0.1 * (2.0 * x).sin());
        let ut = d.sample(|x| 0.2 * (3.0 * x).sin());
        let opts = EvolveOptions {
            t_end: 5.0,
            ..Default::default()
        };
        let eq = Equation::default();
        assert_eq!(scaled_covariance_check(&d, &g, &eq, &u, &ut, 1.0, &opts).unwrap(), 0.0);
        let dev = scaled_covariance_check(&d, &g, &eq, &u, &ut, 2.0, &opts).unwrap();
        assert!(dev < 1e-12, "deviation {dev:e}");
        let lin = Equation::linear();
        let dev = scaled_covariance_check(&d, &DampingProfile::zero(&d), &lin, &u, &ut, 3.0, &opts).unwrap();
        assert!(dev <= 1e-12, "deviation {dev:e}");
        assert!(scaled_covariance_check(&d, &g, &eq, &u, &ut, 0.0, &opts).is_err());
    }
}
