//! Static energy, energy, Nehari functional, and the potential-well constants.
//!
//! With `|u|_H^2 = int |grad u|^2 + beta u^2` and `|u|_4^4 = int u^4`:
//!
//! * `J(u) = 1/2 |u|_H^2 - 1/4 |u|_4^4`
//! * `E(u, u_t) = J(u) + 1/2 |u_t|_2^2`
//! * `K(u) = |u|_H^2 - |u|_4^4`
//!
//! The well constants derive from the ground-state level `d = J(Q) = |Q|_4^4 / 4`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{Domain, DomainError, Field};

/// Absolute floor applied under every relative tolerance.
pub const ABS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FunctionalError {
    #[error("field is identically zero")]
    ZeroField,
    #[error("negative input {0}")]
    NegativeInput(f64),
    #[error("delta = {delta} outside [0, d = {d}]")]
    DeltaOutOfRange { delta: f64, d: f64 },
    #[error("precondition violated: J(u) = {j} > d - delta = {bound}")]
    PreconditionViolated { j: f64, bound: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// The three squared/quartic norms every functional is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldNorms {
    pub h01_sq: f64,
    pub l4_4: f64,
    pub l2t_sq: f64,
}

impl FieldNorms {
    pub fn of(dom: &Domain, u: &Field, ut: &Field) -> Result<Self, DomainError> {
        let c = dom.forward_transform(u)?;
        Ok(Self {
            h01_sq: dom.h01_from_coeffs(&c.coeffs),
            l4_4: dom.quartic_from_coeffs(&c.coeffs),
            l2t_sq: dom.l2_norm_sq(ut)?,
        })
    }

    pub fn energies(&self) -> EnergyTriple {
        let j = 0.5 * self.h01_sq - 0.25 * self.l4_4;
        EnergyTriple {
            j,
            e: j + 0.5 * self.l2t_sq,
            k: self.h01_sq - self.l4_4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTriple {
    /// Static energy `J(u)`.
    pub j: f64,
    /// Energy `E(u, u_t)`.
    pub e: f64,
    /// Nehari functional `K(u)`.
    pub k: f64,
}

pub fn energies(dom: &Domain, u: &Field, ut: &Field) -> Result<EnergyTriple, DomainError> {
    Ok(FieldNorms::of(dom, u, ut)?.energies())
}

/// Level set data of the potential well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WellConstants {
    /// Mountain-pass level.
    pub d: f64,
    pub q_l4_norm_4: f64,
    pub q_h01_norm_sq: f64,
    pub x_minus: f64,
    pub x_plus: f64,
    pub delta: f64,
}

impl WellConstants {
    /// Constants for `delta = 0`, where `x_- = x_+ = 2 sqrt(d)`.
    pub fn new(d: f64, q_l4_norm_4: f64, q_h01_norm_sq: f64) -> Self {
        let x = 2.0 * d.sqrt();
        Self {
            d,
            q_l4_norm_4,
            q_h01_norm_sq,
            x_minus: x,
            x_plus: x,
            delta: 0.0,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self, FunctionalError> {
        let (xm, xp) = x_pm(&self, delta)?;
        self.delta = delta;
        self.x_minus = xm;
        self.x_plus = xp;
        Ok(self)
    }

    /// `|Q|_{L^4}`.
    pub fn q_l4_norm(&self) -> f64 {
        self.q_l4_norm_4.powf(0.25)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellSet {
    KPlus,
    KMinus,
    AboveThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: WellSet,
    pub margin: f64,
}

/// Positive maximizer of `lambda -> J(lambda u)`: `|u|_H / |u|_4^2`.
pub fn lambda_star(dom: &Domain, u: &Field) -> Result<f64, FunctionalError> {
    let c = dom.forward_transform(u)?;
    let l4 = dom.quartic_from_coeffs(&c.coeffs);
    if l4 <= 0.0 {
        return Err(FunctionalError::ZeroField);
    }
    Ok(dom.h01_from_coeffs(&c.coeffs).sqrt() / l4.sqrt())
}

pub fn classify_energies(wc: &WellConstants, en: &EnergyTriple) -> Classification {
    if en.e < wc.d {
        let verdict = if en.k >= 0.0 {
            WellSet::KPlus
        } else {
            WellSet::KMinus
        };
        Classification {
            verdict,
            margin: (wc.d - en.e).min(en.k.abs()),
        }
    } else {
        Classification {
            verdict: WellSet::AboveThreshold,
            margin: wc.d - en.e,
        }
    }
}

pub fn classify(
    dom: &Domain,
    wc: &WellConstants,
    u: &Field,
    ut: &Field,
) -> Result<Classification, DomainError> {
    Ok(classify_energies(wc, &energies(dom, u, ut)?))
}

/// Slack `|u|_H - |u|_4 |Q|_4` of the Sobolev inequality with the ground-state
/// constant; nonnegative when `Q` is the minimizer.
pub fn explicit_sobolev_check(
    dom: &Domain,
    wc: &WellConstants,
    u: &Field,
) -> Result<f64, DomainError> {
    let c = dom.forward_transform(u)?;
    let h = dom.h01_from_coeffs(&c.coeffs).sqrt();
    let l4 = dom.quartic_from_coeffs(&c.coeffs).powf(0.25);
    Ok(h - l4 * wc.q_l4_norm())
}

/// `alpha(x) = x^2/2 - x^4 / (4 |Q|_4^4)`.
pub fn well_curve(wc: &WellConstants, x: f64) -> Result<f64, FunctionalError> {
    if x < 0.0 {
        return Err(FunctionalError::NegativeInput(x));
    }
    Ok(0.5 * x * x - x.powi(4) / (4.0 * wc.q_l4_norm_4))
}

/// Roots of `alpha(x) = d - delta`: `x_± = 2 sqrt(d ± sqrt(d delta))`.
pub fn x_pm(wc: &WellConstants, delta: f64) -> Result<(f64, f64), FunctionalError> {
    if !(0.0..=wc.d).contains(&delta) {
        return Err(FunctionalError::DeltaOutOfRange { delta, d: wc.d });
    }
    let root = (wc.d * delta).sqrt();
    let x_minus = 2.0 * (wc.d - root).max(0.0).sqrt();
    let x_plus = 2.0 * (wc.d + root).sqrt();
    Ok((x_minus, x_plus))
}

/// `x_+` alone, defined for every `delta >= 0`.
pub fn x_plus(wc: &WellConstants, delta: f64) -> Result<f64, FunctionalError> {
    if delta < 0.0 {
        return Err(FunctionalError::NegativeInput(delta));
    }
    Ok(2.0 * (wc.d + (wc.d * delta).sqrt()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub holds: bool,
    /// Positive when the bound holds with room to spare.
    pub slack: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma12Report {
    pub delta: f64,
    pub k: f64,
    pub h01_sq: f64,
    pub nehari_nonnegative: bool,
    pub checks: Vec<BoundCheck>,
}

impl Lemma12Report {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Relative tolerance used for the explicit coercivity bounds.
pub const LEMMA12_TOL: f64 = 1e-8;

/// Explicit coercivity bounds on `K` below the level `d - delta`.
///
/// If `K(u) >= 0`: `K >= sqrt(delta/d) |u|_H^2`. If `K(u) < 0`:
/// `K <= -4 delta - 4 sqrt(d delta)` and
/// `K <= -(delta + sqrt(d delta)) / (d + sqrt(d delta)) |u|_H^2`.
pub fn lemma12_bounds(
    dom: &Domain,
    wc: &WellConstants,
    delta: f64,
    u: &Field,
) -> Result<Lemma12Report, FunctionalError> {
    if !(0.0..=wc.d).contains(&delta) {
        return Err(FunctionalError::DeltaOutOfRange { delta, d: wc.d });
    }
    let zero = Field::zeros(u.len());
    let norms = FieldNorms::of(dom, u, &zero)?;
    let en = norms.energies();
    let bound = wc.d - delta;
    if en.j > bound + LEMMA12_TOL * wc.d {
        return Err(FunctionalError::PreconditionViolated { j: en.j, bound });
    }
    let h = norms.h01_sq;
    let k = en.k;
    let tol_h = LEMMA12_TOL * h.max(ABS_FLOOR);
    let root = (wc.d * delta).sqrt();
    let mut checks = Vec::new();
    if k >= 0.0 {
        let slack = k - (delta / wc.d).sqrt() * h;
        checks.push(BoundCheck {
            name: "K >= sqrt(delta/d) |u|_H^2".into(),
            holds: slack >= -tol_h,
            slack,
            tolerance: tol_h,
        });
    } else {
        let slack_abs = -4.0 * delta - 4.0 * root - k;
        let tol_d = LEMMA12_TOL * wc.d.max(ABS_FLOOR);
        checks.push(BoundCheck {
            name: "K <= -4 delta - 4 sqrt(d delta)".into(),
            holds: slack_abs >= -tol_d,
            slack: slack_abs,
            tolerance: tol_d,
        });
        let ratio = (delta + root) / (wc.d + root);
        let slack_rel = -ratio * h - k;
        checks.push(BoundCheck {
            name: "K <= -(delta + sqrt(d delta))/(d + sqrt(d delta)) |u|_H^2".into(),
            holds: slack_rel >= -tol_h,
            slack: slack_rel,
            tolerance: tol_h,
        });
    }
    Ok(Lemma12Report {
        delta,
        k,
        h01_sq: h,
        nehari_nonnegative: k >= 0.0,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    use crate::spectral::DomainSpec;

    fn dom(beta: f64) -> Domain {
        Domain::new(DomainSpec::interval(PI, 64).with_beta(beta)).unwrap()
    }

    #[test]
    fn energies_of_zero_and_sine() {
        let d = dom(0.0);
        let z = d.zero_field();
        let e = energies(&d, &z, &z).unwrap();
        assert_eq!((e.j, e.e, e.k), (0.0, 0.0, 0.0));
        let s = d.sample(f64::sin);
        let e = energies(&d, &s, &z).unwrap();
        assert_relative_eq!(e.j, 5.0 * PI / 32.0, max_relative = 1e-13);
        assert_relative_eq!(e.e, 5.0 * PI / 32.0, max_relative = 1e-13);
        assert_relative_eq!(e.k, PI / 8.0, max_relative = 1e-13);
        // kinetic term
        let e = energies(&d, &s, &s).unwrap();
        assert_relative_eq!(e.e - e.j, PI / 4.0, max_relative = 1e-13);
    }

    #[test]
    fn lambda_star_of_sine_and_homogeneity() {
        let d = dom(0.0);
        let s = d.sample(f64::sin);
        let ls = lambda_star(&d, &s).unwrap();
        assert_relative_eq!(ls, 2.0 / 3f64.sqrt(), max_relative = 1e-13);
        assert_relative_eq!(lambda_star(&d, &s.scaled(2.5)).unwrap(), ls / 2.5, max_relative = 1e-13);
        assert_eq!(lambda_star(&d, &d.zero_field()), Err(FunctionalError::ZeroField));
        // K vanishes on the projection
        let p = s.scaled(ls);
        let e = energies(&d, &p, &d.zero_field()).unwrap();
        assert!(e.k.abs() <= 1e-13 * d.h01_norm_sq(&p).unwrap());
    }

    fn toy_constants() -> WellConstants {
        // d = 1, |Q|_4^4 = 4, |Q|_H^2 = 4
        WellConstants::new(1.0, 4.0, 4.0)
    }

    #[test]
    fn well_curve_shape() {
        let wc = toy_constants();
        assert_eq!(well_curve(&wc, 0.0).unwrap(), 0.0);
        let top = wc.q_l4_norm_4.sqrt();
        assert_relative_eq!(well_curve(&wc, top).unwrap(), wc.d, max_relative = 1e-14);
        assert!(well_curve(&wc, top * 0.99).unwrap() < wc.d);
        assert!(well_curve(&wc, top * 1.01).unwrap() < wc.d);
        assert_eq!(well_curve(&wc, -1.0), Err(FunctionalError::NegativeInput(-1.0)));
    }

    #[test]
    fn x_pm_values() {
        let wc = WellConstants::new(0.7, 2.8, 2.8);
        let d = wc.d;
        let (xm, xp) = x_pm(&wc, 0.0).unwrap();
        assert_relative_eq!(xm, 2.0 * d.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(xp, 2.0 * d.sqrt(), max_relative = 1e-15);
        let (xm, xp) = x_pm(&wc, d).unwrap();
        assert_eq!(xm, 0.0);
        assert_relative_eq!(xp, 2.0 * (2.0 * d).sqrt(), max_relative = 1e-15);
        let (xm, xp) = x_pm(&wc, d / 4.0).unwrap();
        assert_relative_eq!(xm, 2.0 * (d / 2.0).sqrt(), max_relative = 1e-14);
        assert_relative_eq!(xp, 2.0 * (1.5 * d).sqrt(), max_relative = 1e-14);
        for delta in [0.0, 0.1, 0.35, 0.7] {
            let (xm, xp) = x_pm(&wc, delta).unwrap();
            assert_relative_eq!(well_curve(&wc, xm).unwrap(), d - delta, epsilon = 1e-8 * d);
            assert_relative_eq!(well_curve(&wc, xp).unwrap(), d - delta, epsilon = 1e-8 * d);
            assert!(xm <= 2.0 * d.sqrt() && 2.0 * d.sqrt() <= xp);
        }
        assert!(matches!(x_pm(&wc, 1.0), Err(FunctionalError::DeltaOutOfRange { .. })));
        // x_+ alone exists above d
        let xp = x_plus(&wc, 2.0).unwrap();
        assert_relative_eq!(well_curve(&wc, xp).unwrap(), d - 2.0, epsilon = 1e-8);
    }

    #[test]
    fn classification_boundaries() {
        let wc = toy_constants();
        let c = classify_energies(&wc, &EnergyTriple { j: 0.5, e: 0.5, k: 0.3 });
        assert_eq!(c.verdict, WellSet::KPlus);
        assert_relative_eq!(c.margin, 0.3);
        let c = classify_energies(&wc, &EnergyTriple { j: 0.9, e: 0.9, k: -0.5 });
        assert_eq!(c.verdict, WellSet::KMinus);
        assert_relative_eq!(c.margin, 0.1, max_relative = 1e-12);
        let c = classify_energies(&wc, &EnergyTriple { j: 1.0, e: 1.0, k: 0.0 });
        assert_eq!(c.verdict, WellSet::AboveThreshold);
        assert_eq!(c.margin, 0.0);
        // K = 0 below d counts as K+
        let c = classify_energies(&wc, &EnergyTriple { j: 0.0, e: 0.0, k: 0.0 });
        assert_eq!(c.verdict, WellSet::KPlus);
    }

    #[test]
    fn lemma12_zero_field_with_full_delta() {
        let d = dom(1.0);
        let wc = toy_constants();
        let rep = lemma12_bounds(&d, &wc, wc.d, &d.zero_field()).unwrap();
        assert!(rep.nehari_nonnegative);
        assert!(rep.all_hold());
    }

    #[test]
    fn lemma12_precondition() {
        let d = dom(0.0);
        let wc = toy_constants();
        // J(sin) = 5 pi / 32 ~ 0.49 > d - 0.9
        let s = d.sample(f64::sin);
        assert!(matches!(
            lemma12_bounds(&d, &wc, 0.9, &s),
            Err(FunctionalError::PreconditionViolated { .. })
        ));
        assert!(matches!(
            lemma12_bounds(&d, &wc, 1.5, &s),
            Err(FunctionalError::DeltaOutOfRange { .. })
        ));
    }
}
