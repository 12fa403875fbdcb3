//! Positive stationary solution `Q` of `-Laplacian Q + beta Q = Q^3` and the
//! mountain-pass level `d = J(Q)`.
//!
//! The main solver is the Petviashvili iteration in coefficient space,
//!
//! ```text
//! c <- m(c)^{3/2} (lambda + beta)^{-1} g(c),   m(c) = <(lambda + beta) c, c> / <g(c), c>
//! ```
//!
//! where `g(c)` are the coefficients of the cubic force. The independent
//! oracle integrates the stationary ODE by shooting on the initial slope.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::functionals::{lambda_star, FieldNorms, FunctionalError, WellConstants};
use crate::spectral::{Domain, DomainError, DomainSpec, Field, Geometry, SpectralCoeffs};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundStateError {
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("iterate changed sign at iteration {iteration} (min/max = {ratio:e}); restart with another seed")]
    SignFlip { iteration: usize, ratio: f64 },
    #[error("no sign change of the shooting predicate in slope bracket [{lo}, {hi}]")]
    BracketingFailure { lo: f64, hi: f64 },
    #[error("boundary condition missed by {miss:e} at the far end")]
    BoundaryMiss { miss: f64 },
    #[error("Nehari trial {trial} gives J = {value} below d = {d}")]
    CertificationFailure {
        trial: usize,
        value: f64,
        d: f64,
        coeffs: Vec<f64>,
    },
    #[error("invalid ground-state record: {0}")]
    Record(String),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub trials: usize,
    /// `min J(lambda* u) / d` over the trials.
    pub min_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundState {
    pub q: Field,
    pub d_level: f64,
    /// `|(-Laplacian + beta) Q - Q^3| / |Q^3|` in L^2.
    pub residual: f64,
    pub iterations: usize,
    pub certified: bool,
    /// Final Petviashvili factor `m(Q)`; 1 at a fixed point.
    pub stabilizing_factor: f64,
    pub certification: Option<Certification>,
}

impl GroundState {
    fn from_coeffs(dom: &Domain, c: &[f64], iterations: usize) -> Result<Self, DomainError> {
        let q = dom.inverse_transform(&SpectralCoeffs::new(c.to_vec()))?;
        let (residual, m) = residual_and_factor(dom, c);
        let norms = FieldNorms::of(dom, &q, &dom.zero_field())?;
        Ok(Self {
            q,
            d_level: norms.energies().j,
            residual,
            iterations,
            certified: false,
            stabilizing_factor: m,
            certification: None,
        })
    }

    pub fn norms(&self, dom: &Domain) -> Result<FieldNorms, DomainError> {
        FieldNorms::of(dom, &self.q, &dom.zero_field())
    }

    /// Well constants read off the ground state without the Nehari sweep.
    pub fn well_constants(&self, dom: &Domain) -> Result<WellConstants, DomainError> {
        let n = self.norms(dom)?;
        Ok(WellConstants::new(self.d_level, n.l4_4, n.h01_sq))
    }
}

fn residual_and_factor(dom: &Domain, c: &[f64]) -> (f64, f64) {
    let g = dom
        .cubic_coeffs(&SpectralCoeffs::new(c.to_vec()))
        .expect("coefficient length matches domain");
    let mut num = 0.0;
    let mut den = 0.0;
    let mut res = 0.0;
    let mut gn = 0.0;
    for (k, (ck, gk)) in c.iter().zip(&g.coeffs).enumerate() {
        let s = dom.symbol(k);
        num += s * ck * ck;
        den += gk * ck;
        res += (s * ck - gk).powi(2);
        gn += gk * gk;
    }
    let residual = if gn > 0.0 { (res / gn).sqrt() } else { f64::INFINITY };
    (residual, num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PetviashviliOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Stabilizing exponent, `p / (p - 1) = 3/2` for the cubic.
    pub exponent: f64,
}

impl Default for PetviashviliOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 10_000,
            exponent: 1.5,
        }
    }
}

/// First Dirichlet eigenfunction with unit `H^1_0` norm.
pub fn default_seed(dom: &Domain) -> SpectralCoeffs {
    let mut c = SpectralCoeffs::zeros(dom.n_modes());
    c.coeffs[0] = 1.0 / (dom.mass() * dom.symbol(0)).sqrt();
    c
}

pub fn petviashvili_solve(
    dom: &Domain,
    opts: &PetviashviliOptions,
) -> Result<GroundState, GroundStateError> {
    petviashvili_from(dom, default_seed(dom), opts)
}

pub fn petviashvili_from(
    dom: &Domain,
    seed: SpectralCoeffs,
    opts: &PetviashviliOptions,
) -> Result<GroundState, GroundStateError> {
    let n = dom.n_modes();
    let m_quad = dom.quadrature_size();
    let mut c = seed.coeffs;
    if c.len() != n {
        return Err(DomainError::SizeMismatch {
            expected: n,
            found: c.len(),
        }
        .into());
    }
    let mut uq = vec![0.0; m_quad];
    let mut scratch = vec![0.0; m_quad];
    let mut g = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iteration in 0..=opts.max_iters {
        dom.quad_values(&c, &mut uq);
        let (lo, hi) = uq
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= 0.0 || lo < -1e-6 * hi {
            return Err(GroundStateError::SignFlip {
                iteration,
                ratio: lo / hi,
            });
        }
        dom.cubic_from_quad(&uq, &mut scratch, &mut g);
        let mut num = 0.0;
        let mut den = 0.0;
        let mut res = 0.0;
        let mut gn = 0.0;
        for (k, (ck, gk)) in c.iter().zip(&g).enumerate() {
            let s = dom.symbol(k);
            num += s * ck * ck;
            den += gk * ck;
            res += (s * ck - gk).powi(2);
            gn += gk * gk;
        }
        residual = (res / gn).sqrt();
        let m = num / den;
        if residual <= opts.tol && (m - 1.0).abs() <= opts.tol {
            return Ok(GroundState::from_coeffs(dom, &c, iteration)?);
        }
        if iteration == opts.max_iters {
            break;
        }
        let factor = m.powf(opts.exponent);
        for (k, (ck, gk)) in c.iter_mut().zip(&g).enumerate() {
            *ck = factor * gk / dom.symbol(k);
        }
    }
    Err(GroundStateError::NonConvergence {
        iterations: opts.max_iters,
        residual,
    })
}

/// Result of a monotone bisection on a boolean predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Bisection {
    /// Largest point known to satisfy `!pred`.
    pub lo: f64,
    /// Smallest point known to satisfy `pred`.
    pub hi: f64,
    /// Bracket width after each step.
    pub widths: Vec<f64>,
}

/// Bisects `[lo, hi]` with `pred(lo) = false`, `pred(hi) = true` until the
/// bracket is below `rel_tol * hi` or stops shrinking.
pub fn bisect(mut lo: f64, mut hi: f64, rel_tol: f64, pred: impl Fn(f64) -> bool) -> Bisection {
    let mut widths = Vec::new();
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= rel_tol * hi.abs() {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        widths.push(hi - lo);
    }
    Bisection { lo, hi, widths }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShootingOptions {
    /// RK4 steps per grid cell.
    pub substeps: usize,
    /// Required `|v(L)| / max |v|` at the far end.
    pub boundary_tol: f64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            substeps: 32,
            boundary_tol: 1e-10,
        }
    }
}

/// Integrates `v'' = beta v - w(r) v^3` from `v(0) = 0, v'(0) = slope`, with
/// `w = 1` on the interval and `w = 1/r^2` on the ball. Returns `v` at the
/// cell boundaries `j L / (N + 1)`, `j = 0..=N+1`, and whether `v` went
/// negative anywhere on `(0, L]`.
fn shoot(dom: &Domain, slope: f64, substeps: usize) -> (Vec<f64>, bool) {
    let beta = dom.beta();
    let radial = dom.is_radial();
    let cells = dom.n_modes() + 1;
    let h = dom.extent() / (cells * substeps) as f64;
    let accel = |r: f64, v: f64| {
        let w = if radial {
            if r == 0.0 {
                0.0
            } else {
                1.0 / (r * r)
            }
        } else {
            1.0
        };
        beta * v - w * v * v * v
    };
    let mut v = 0.0;
    let mut p = slope;
    let mut out = Vec::with_capacity(cells + 1);
    out.push(0.0);
    let mut crossed = false;
    for cell in 0..cells {
        for s in 0..substeps {
            let r = (cell * substeps + s) as f64 * h;
            let k1v = p;
            let k1p = accel(r, v);
            let k2v = p + 0.5 * h * k1p;
            let k2p = accel(r + 0.5 * h, v + 0.5 * h * k1v);
            let k3v = p + 0.5 * h * k2p;
            let k3p = accel(r + 0.5 * h, v + 0.5 * h * k2v);
            let k4v = p + h * k3p;
            let k4p = accel(r + h, v + h * k3v);
            v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
            p += h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
            if v < 0.0 || !v.is_finite() {
                crossed = true;
            }
        }
        out.push(v);
    }
    (out, crossed)
}

/// Result of the shooting oracle, with the slope bisection trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingResult {
    pub ground_state: GroundState,
    pub slope: f64,
    pub bisection: Bisection,
    /// `|v(L)| / max |v|`.
    pub boundary_miss: f64,
}

pub fn shooting_oracle(
    dom: &Domain,
    opts: &ShootingOptions,
) -> Result<ShootingResult, GroundStateError> {
    let overshoots = |s: f64| shoot(dom, s, opts.substeps).1;
    let mut lo = 1e-6;
    let mut hi = 1.0;
    if overshoots(lo) {
        return Err(GroundStateError::BracketingFailure { lo, hi });
    }
    let mut doublings = 0;
    while !overshoots(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(GroundStateError::BracketingFailure { lo: 1e-6, hi });
        }
    }
    let bisection = bisect(lo, hi, 4.0 * f64::EPSILON, overshoots);
    let slope = bisection.lo;
    let (profile, _) = shoot(dom, slope, opts.substeps);
    let vmax = profile.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let boundary_miss = profile.last().copied().unwrap_or(0.0).abs() / vmax;
    if boundary_miss > opts.boundary_tol {
        return Err(GroundStateError::BoundaryMiss {
            miss: boundary_miss,
        });
    }
    let q = Field::new(profile[1..profile.len() - 1].to_vec());
    let c = dom.forward_transform(&q)?;
    let mut gs = GroundState::from_coeffs(dom, &c.coeffs, bisection.widths.len())?;
    gs.q = q;
    Ok(ShootingResult {
        ground_state: gs,
        slope,
        bisection,
        boundary_miss,
    })
}

/// `lambda*(u) u`, the radial projection onto the Nehari manifold.
pub fn nehari_project(dom: &Domain, u: &Field) -> Result<Field, FunctionalError> {
    Ok(u.scaled(lambda_star(dom, u)?))
}

/// Mountain-pass tolerance of the certification sweep, relative to `d`.
pub const CERTIFICATION_TOL: f64 = 1e-6;

/// Deterministic trial field number `trial` of a certification sweep.
///
/// Trial 0 is `Q`. The rest cycle through random decaying spectra, small
/// perturbations of `Q`, and random combinations of a few low modes.
pub fn certification_trial(dom: &Domain, gs: &GroundState, seed: u64, trial: usize) -> Field {
    if trial == 0 {
        return gs.q.clone();
    }
    let n = dom.n_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let coeffs: Vec<f64> = match trial % 3 {
        0 => {
            let decay = 0.5 + 2.0 * (normal().abs().min(1.0));
            (1..=n).map(|k| normal() / (k as f64).powf(decay)).collect()
        }
        1 => {
            let qc = dom.forward_transform(&gs.q).expect("ground state sized to domain");
            let scale = qc.coeffs[0].abs() * 10f64.powf(-3.0 + 2.5 * normal().abs().min(1.0));
            qc.coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c + scale * normal() / (1.0 + k as f64).powi(2))
                .collect()
        }
        _ => {
            let mut c = vec![0.0; n];
            let modes = 1 + (normal().abs() * 2.0) as usize % 4;
            for _ in 0..modes {
                let k = ((normal().abs() * 3.0) as usize).min(n - 1);
                c[k] += normal();
            }
            if c.iter().all(|&x| x == 0.0) {
                c[0] = 1.0;
            }
            c
        }
    };
    dom.inverse_transform(&SpectralCoeffs::new(coeffs))
        .expect("coefficients sized to domain")
}

/// Checks `J(lambda*(u) u) >= d (1 - 1e-6)` on `trial_count` trial fields and
/// marks the ground state certified.
pub fn certify_well_constants(
    dom: &Domain,
    gs: &mut GroundState,
    trial_count: usize,
    seed: u64,
    exec: Execution,
) -> Result<WellConstants, GroundStateError> {
    let d = gs.d_level;
    let zero = dom.zero_field();
    let outcomes = exec.map_range(trial_count, |trial| {
        let u = certification_trial(dom, gs, seed, trial);
        let j = nehari_project(dom, &u)
            .map_err(GroundStateError::from)
            .and_then(|p| Ok(FieldNorms::of(dom, &p, &zero)?.energies().j));
        (trial, u, j)
    });
    let mut min_ratio = f64::INFINITY;
    for (trial, u, j) in outcomes {
        let j = j?;
        if j < d * (1.0 - CERTIFICATION_TOL) {
            let coeffs = dom.forward_transform(&u)?.coeffs;
            return Err(GroundStateError::CertificationFailure {
                trial,
                value: j,
                d,
                coeffs,
            });
        }
        min_ratio = min_ratio.min(j / d);
    }
    gs.certified = true;
    gs.certification = Some(Certification {
        trials: trial_count,
        min_ratio,
    });
    Ok(gs.well_constants(dom)?)
}

/// JSON record of a ground state. Coefficients are decimal strings with 17
/// significant digits, which round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStateRecord {
    pub geometry: String,
    #[serde(rename = "L_or_R")]
    pub l_or_r: f64,
    pub beta: f64,
    pub n_modes: usize,
    #[serde(default = "default_true")]
    pub dealias: bool,
    pub d: f64,
    pub residual: f64,
    pub coeffs: Vec<String>,
}

fn default_true() -> bool {
    true
}

pub fn format_f64_17(x: f64) -> String {
    format!("{x:.16e}")
}

impl GroundStateRecord {
    pub fn from_ground_state(dom: &Domain, gs: &GroundState) -> Result<Self, DomainError> {
        let c = dom.forward_transform(&gs.q)?;
        Ok(Self {
            geometry: dom.spec.geometry.name().to_string(),
            l_or_r: dom.extent(),
            beta: dom.beta(),
            n_modes: dom.n_modes(),
            dealias: dom.spec.dealias,
            d: gs.d_level,
            residual: gs.residual,
            coeffs: c.coeffs.iter().map(|&x| format_f64_17(x)).collect(),
        })
    }

    pub fn domain_spec(&self) -> Result<DomainSpec, GroundStateError> {
        let geometry = match self.geometry.as_str() {
            "interval" => Geometry::Interval {
                length: self.l_or_r,
            },
            "radial_ball" => Geometry::RadialBall {
                radius: self.l_or_r,
            },
            other => return Err(GroundStateError::Record(format!("unknown geometry {other:?}"))),
        };
        Ok(DomainSpec {
            geometry,
            n_modes: self.n_modes,
            beta: self.beta,
            dealias: self.dealias,
        })
    }

    pub fn coefficients(&self) -> Result<SpectralCoeffs, GroundStateError> {
        let coeffs = self
            .coeffs
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| GroundStateError::Record(format!("coefficient {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if coeffs.len() != self.n_modes {
            return Err(GroundStateError::Record(format!(
                "{} coefficients for n_modes = {}",
                coeffs.len(),
                self.n_modes
            )));
        }
        Ok(SpectralCoeffs::new(coeffs))
    }

    /// Rebuilds the ground state on `dom`, which must match the record.
    pub fn to_ground_state(&self, dom: &Domain) -> Result<GroundState, GroundStateError> {
        if self.domain_spec()? != dom.spec {
            return Err(GroundStateError::Record(
                "record does not match the domain".into(),
            ));
        }
        let c = self.coefficients()?;
        let mut gs = GroundState::from_coeffs(dom, &c.coeffs, 0)?;
        gs.d_level = self.d;
        Ok(gs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GroundStateError> {
        serde_json::from_str(text).map_err(|e| GroundStateError::Record(e.to_string()))
    }
}

/// `J(lambda Q) = d (2 lambda^2 - lambda^4)`, valid when `K(Q) = 0`.
pub fn scaled_ground_state_energy(d: f64, lambda: f64) -> f64 {
    d * (2.0 * lambda * lambda - lambda.powi(4))
}
