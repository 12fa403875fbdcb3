//! Post-processing of trajectories: virial identities, decay fits, geometric
//! control, observability ratios, the perturbed energy `E_eps`, and detection
//! of the limiting equilibrium.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DampingProfile, DynamicsError, Equation, Sample, Trajectory};
use crate::functionals::{classify_energies, energies, FunctionalError, WellConstants, WellSet};
use crate::ground_state::GroundState;
use crate::spectral::{Domain, DomainError, Field};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("need at least {needed} uniform samples, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("energy is not positive at t = {t}")]
    NonPositiveEnergy { t: f64 },
    #[error("window [{t0}, {t1}] is not covered by samples on [{start}, {end}]")]
    WindowOutOfRange { t0: f64, t1: f64, start: f64, end: f64 },
    #[error("no dissipation over the window")]
    NoDissipation,
    #[error("state is not in the stable well (K = {k}, E = {e})")]
    NotKPlus { k: f64, e: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirialSample {
    pub t: f64,
    /// `|u|_2^2`.
    pub m: f64,
    /// `2 int u u_t`.
    pub mp: f64,
    /// `-2|u|_H^2 + 2 kappa |u|_4^4 + 2|u_t|_2^2 - 2 int gamma u u_t`.
    pub mpp_formula: f64,
    /// `M'' - E'/eps` with the admissible `eps` of the convexity argument.
    pub surrogate: Option<f64>,
}

/// Central differences at interior sample `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirialDifference {
    pub t: f64,
    /// `(M_{i+1} - 2 M_i + M_{i-1}) / h^2 - M''_formula`.
    pub mpp_from_m: f64,
    /// `(M'_{i+1} - M'_{i-1}) / 2h - M''_formula`.
    pub mpp_from_mp: f64,
    /// `(M_{i+1} - M_{i-1}) / 2h - M'`.
    pub mp_from_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirialSeries {
    pub samples: Vec<VirialSample>,
    pub differences: Vec<VirialDifference>,
    /// Only for runs starting in the unstable well: `surrogate >= 0` on the
    /// second half of the samples.
    pub convexity_tail: Option<bool>,
    pub spacing: f64,
}

impl VirialSeries {
    /// Largest `|FD(M') - M''_formula|` over interior samples with `t <= t_max`.
    pub fn max_mpp_deviation(&self, t_max: f64) -> f64 {
        self.differences
            .iter()
            .filter(|d| d.t <= t_max)
            .fold(0.0, |m, d| m.max(d.mpp_from_mp.abs()))
    }

    /// Largest `|FD2(M) - M''_formula|` over interior samples with `t <= t_max`.
    pub fn max_second_difference_deviation(&self, t_max: f64) -> f64 {
        self.differences
            .iter()
            .filter(|d| d.t <= t_max)
            .fold(0.0, |m, d| m.max(d.mpp_from_m.abs()))
    }

    /// Largest `|FD(M) - M'|` over interior samples with `t <= t_max`.
    pub fn max_mp_deviation(&self, t_max: f64) -> f64 {
        self.differences
            .iter()
            .filter(|d| d.t <= t_max)
            .fold(0.0, |m, d| m.max(d.mp_from_m.abs()))
    }
}

/// Weight `eps` for which `|2 int gamma u u_t| <= eps c2 |u|_H^2 - E'/eps`
/// leaves `M'' - E'/eps >= c2 |u|_H^2` in the unstable well, where
/// `K <= -c2 |u|_H^2`.
fn convexity_eps(dom: &Domain, damping: &DampingProfile, wc: &WellConstants, delta: f64) -> Option<f64> {
    let gamma_max = damping.values.max_abs();
    if gamma_max == 0.0 {
        return None;
    }
    let root = (wc.d * delta).sqrt();
    let c2 = (delta + root) / (wc.d + root);
    (c2 > 0.0).then(|| c2 * dom.symbol(0) / gamma_max)
}

/// Virial quantities on the uniform prefix of `traj`.
///
/// With `wells`, runs that start in the unstable well also get the convexity
/// surrogate `M'' + D/eps`, where `D = int gamma u_t^2 = -E'`.
pub fn virial_series(
    dom: &Domain,
    damping: &DampingProfile,
    eq: &Equation,
    traj: &Trajectory,
    wells: Option<&WellConstants>,
) -> Result<VirialSeries, LabError> {
    let uniform = traj.uniform_samples();
    if uniform.len() < 5 {
        return Err(LabError::InsufficientSamples {
            needed: 5,
            found: uniform.len(),
        });
    }
    let gamma = &damping.values;
    let first = &uniform[0];
    let unstable = wells.and_then(|wc| {
        let en = energies(dom, &first.u, &first.ut).ok()?;
        let delta = wc.d - en.e;
        (classify_energies(wc, &en).verdict == WellSet::KMinus && delta > 0.0)
            .then(|| convexity_eps(dom, damping, wc, delta))
    });
    let mut samples = Vec::with_capacity(uniform.len());
    for s in uniform {
        let h = dom.h01_norm_sq(&s.u)?;
        let l4 = dom.l4_norm_4(&s.u)?;
        let m = dom.l2_norm_sq(&s.u)?;
        let cross = dom.inner(&s.u, &s.ut)?;
        let damped_cross = weighted(dom, gamma, &s.u, &s.ut)?;
        let mpp = -2.0 * h + 2.0 * eq.coupling * l4 + 2.0 * s.l2t * s.l2t - 2.0 * damped_cross;
        let surrogate = unstable.map(|eps| match eps {
            Some(eps) => mpp + s.dissipation_rate / eps,
            None => mpp,
        });
        samples.push(VirialSample {
            t: s.t,
            m,
            mp: 2.0 * cross,
            mpp_formula: mpp,
            surrogate,
        });
    }
    let spacing = traj.sample_interval;
    let differences = samples
        .windows(3)
        .map(|w| VirialDifference {
            t: w[1].t,
            mpp_from_m: (w[2].m - 2.0 * w[1].m + w[0].m) / (spacing * spacing) - w[1].mpp_formula,
            mpp_from_mp: (w[2].mp - w[0].mp) / (2.0 * spacing) - w[1].mpp_formula,
            mp_from_m: (w[2].m - w[0].m) / (2.0 * spacing) - w[1].mp,
        })
        .collect();
    let convexity_tail = unstable.map(|_| {
        let half = samples.len() / 2;
        samples[half..]
            .iter()
            .all(|s| s.surrogate.is_some_and(|v| v >= 0.0))
    });
    Ok(VirialSeries {
        samples,
        differences,
        convexity_tail,
        spacing,
    })
}

fn weighted(dom: &Domain, w: &Field, f: &Field, g: &Field) -> Result<f64, DomainError> {
    let prod = Field::new(
        w.values
            .iter()
            .zip(&f.values)
            .map(|(a, b)| a * b)
            .collect(),
    );
    dom.inner(&prod, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub lambda_fit: f64,
    pub c_fit: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Energies below this fraction of the first value end the fit window.
pub const ENERGY_FLOOR: f64 = 1e-14;

/// Least squares fit of `log e = log c - lambda t` over `window`.
///
/// The window is cut at the first energy below `ENERGY_FLOOR * e[0]`.
pub fn fit_log_linear(t: &[f64], e: &[f64], window: (f64, f64)) -> Result<DecayFit, LabError> {
    let e0 = e.first().copied().unwrap_or(0.0);
    if !(e0 > 0.0) {
        return Err(LabError::NonPositiveEnergy {
            t: t.first().copied().unwrap_or(0.0),
        });
    }
    let floor = ENERGY_FLOOR * e0;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &ei) in t.iter().zip(e) {
        if ei < floor {
            break;
        }
        if ti >= window.0 && ti <= window.1 {
            xs.push(ti);
            ys.push(ei.ln());
        }
    }
    if xs.len() < 3 {
        return Err(LabError::InsufficientSamples {
            needed: 3,
            found: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(DecayFit {
        lambda_fit: -slope,
        c_fit: intercept.exp(),
        r_squared,
        window: (xs[0], *xs.last().expect("nonempty")),
        points: xs.len(),
    })
}

/// Exponential fit of `E(t)` on the uniform samples. The default window is the
/// last 60% of the run.
pub fn fit_decay(traj: &Trajectory, window: Option<(f64, f64)>) -> Result<DecayFit, LabError> {
    let uniform = traj.uniform_samples();
    let (Some(first), Some(last)) = (uniform.first(), uniform.last()) else {
        return Err(LabError::InsufficientSamples { needed: 3, found: 0 });
    };
    let window = window.unwrap_or((last.t - 0.6 * (last.t - first.t), last.t));
    let t: Vec<f64> = uniform.iter().map(|s| s.t).collect();
    let e: Vec<f64> = uniform.iter().map(|s| s.energy).collect();
    fit_log_linear(&t, &e, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GccCheck {
    pub holds: bool,
    /// Longest reflected path that misses the damping core.
    pub l_control: f64,
}

/// Geometric control on an interval (or along radii of the ball), where rays
/// bounce between the endpoints.
pub fn gcc_check_1d(dom: &Domain, damping: &DampingProfile) -> GccCheck {
    let l = dom.extent();
    match damping.core(l) {
        Some((a, b)) if b > a => GccCheck {
            holds: true,
            l_control: 2.0 * a.max(l - b) + (b - a),
        },
        _ => GccCheck {
            holds: false,
            l_control: f64::INFINITY,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub t0: f64,
    pub t_window: f64,
    pub energy: f64,
    pub dissipated: f64,
    /// `E(t0) / int_{t0}^{t0+T} int gamma u_t^2`.
    pub ratio: f64,
    /// `(t, E, dissipated)` inside the window.
    pub samples: Vec<(f64, f64, f64)>,
}

fn sample_near(traj: &Trajectory, t: f64) -> Option<&Sample> {
    let slack = 1e-9 * traj.sample_interval.max(1e-300);
    traj.samples.iter().find(|s| (s.t - t).abs() <= slack)
}

pub fn observability_ratio(
    damping: &DampingProfile,
    traj: &Trajectory,
    t0: f64,
    t_window: f64,
) -> Result<ObservabilityReport, LabError> {
    let out_of_range = || LabError::WindowOutOfRange {
        t0,
        t1: t0 + t_window,
        start: traj.samples.first().map_or(f64::NAN, |s| s.t),
        end: traj.samples.last().map_or(f64::NAN, |s| s.t),
    };
    if !(t_window > 0.0) {
        return Err(out_of_range());
    }
    let a = sample_near(traj, t0).ok_or_else(out_of_range)?;
    let b = sample_near(traj, t0 + t_window).ok_or_else(out_of_range)?;
    let dissipated = b.dissipated - a.dissipated;
    if damping.is_zero() || !(dissipated > 0.0) {
        return Err(LabError::NoDissipation);
    }
    let samples = traj
        .samples
        .iter()
        .filter(|s| s.t >= a.t && s.t <= b.t)
        .map(|s| (s.t, s.energy, s.dissipated))
        .collect();
    Ok(ObservabilityReport {
        t0: a.t,
        t_window,
        energy: a.energy,
        dissipated,
        ratio: a.energy / dissipated,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityFamily {
    pub ratios: Vec<f64>,
    pub median: f64,
    pub max: f64,
    pub max_over_median: f64,
    pub bound: f64,
    pub bounded: bool,
}

/// Spread of observability ratios across a family of runs.
pub fn observability_family(ratios: &[f64], bound: f64) -> ObservabilityFamily {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let max = sorted.last().copied().unwrap_or(f64::NAN);
    let max_over_median = max / median;
    ObservabilityFamily {
        ratios: ratios.to_vec(),
        median,
        max,
        max_over_median,
        bound,
        bounded: n > 0 && sorted[0] > 0.0 && max_over_median <= bound,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub energy: f64,
    pub e_eps: f64,
    pub eps: f64,
    pub sandwich_ok: bool,
    /// Largest `eps` with `E/2 <= E_eps <= 3E/2`: `E / (2 |int u u_t|)`.
    pub eps0: f64,
}

/// `E_eps = E + eps int u u_t` for a state in the stable well.
pub fn lyapunov_eps(
    dom: &Domain,
    wc: &WellConstants,
    u: &Field,
    ut: &Field,
    eps: f64,
) -> Result<LyapunovReport, LabError> {
    let en = energies(dom, u, ut)?;
    if classify_energies(wc, &en).verdict != WellSet::KPlus {
        return Err(LabError::NotKPlus { k: en.k, e: en.e });
    }
    let cross = dom.inner(u, ut)?;
    let e_eps = en.e + eps * cross;
    let eps0 = if cross == 0.0 {
        f64::INFINITY
    } else {
        en.e / (2.0 * cross.abs())
    };
    Ok(LyapunovReport {
        energy: en.e,
        e_eps,
        eps,
        sandwich_ok: 0.5 * en.e <= e_eps && e_eps <= 1.5 * en.e,
        eps0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equilibrium {
    Zero,
    PlusQ,
    MinusQ,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub verdict: Equilibrium,
    pub t: f64,
    /// `|u - w|_H + |u_t|_2` for `w = 0, Q, -Q`.
    pub distances: [f64; 3],
    pub threshold: f64,
    pub limit_energy: f64,
    /// Which of the levels `0` and `d` the final energy is closer to.
    pub nearest_level: f64,
}

/// Fraction of `|Q|_H` within which a state counts as converged.
pub const EQUILIBRIUM_RADIUS: f64 = 0.05;

/// Nearest of `{0, Q, -Q}` at the last sample with `t <= t_tail`.
pub fn detect_equilibrium(
    dom: &Domain,
    gs: &GroundState,
    traj: &Trajectory,
    t_tail: f64,
) -> Result<EquilibriumReport, LabError> {
    let qh = dom.h01_norm_sq(&gs.q)?.sqrt();
    let threshold = EQUILIBRIUM_RADIUS * qh;
    let undecided = |t: f64, e: f64| EquilibriumReport {
        verdict: Equilibrium::Undecided,
        t,
        distances: [f64::INFINITY; 3],
        threshold,
        limit_energy: e,
        nearest_level: f64::NAN,
    };
    if !traj.termination.is_completed() {
        return Ok(undecided(traj.final_state.t, traj.final_state.ledger.energy));
    }
    let Some(s) = traj.sample_at(t_tail) else {
        return Ok(undecided(f64::NAN, f64::NAN));
    };
    let kinetic = s.l2t;
    let d0 = dom.h01_norm_sq(&s.u)?.sqrt();
    let dp = dom.h01_norm_sq(&s.u.sub(&gs.q))?.sqrt();
    let dm = dom.h01_norm_sq(&s.u.sub(&gs.q.scaled(-1.0)))?.sqrt();
    let distances = [d0 + kinetic, dp + kinetic, dm + kinetic];
    let (idx, best) = distances
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let verdict = if best < threshold {
        [Equilibrium::Zero, Equilibrium::PlusQ, Equilibrium::MinusQ][idx]
    } else {
        Equilibrium::Undecided
    };
    let nearest_level = if s.energy.abs() <= (s.energy - gs.d_level).abs() {
        0.0
    } else {
        gs.d_level
    };
    Ok(EquilibriumReport {
        verdict,
        t: s.t,
        distances,
        threshold,
        limit_energy: s.energy,
        nearest_level,
    })
}
