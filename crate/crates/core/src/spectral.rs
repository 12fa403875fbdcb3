//! Dirichlet sine-spectral discretization of an interval or of the radial
//! reduction of a 3D ball.
//!
//! A field is stored by its values at the interior nodes `x_j = j L / (N + 1)`,
//! `j = 1..N`, and expanded as `f(x) = sum_k c_k sin(k pi x / L)`. On that grid
//! the discrete sine transform (DST-I) is exactly orthogonal, so every grid
//! function has exactly one coefficient vector and the trapezoid rule
//! integrates products of two resolved modes exactly.
//!
//! For the ball, radial data `u(r)` is stored as `v = r u`, which vanishes at
//! `r = 0` and `r = R` and on which the radial Laplacian acts as `v''`. All
//! integrals are true 3D integrals, including the `4 pi` solid angle:
//!
//! * `int |grad u|^2 = 4 pi int v'^2 dr`
//! * `int u^2 = 4 pi int v^2 dr`
//! * `int u^4 = 4 pi int v^4 / r^2 dr`
//!
//! The quartic functional and the cubic nonlinearity are evaluated on a
//! quadrature grid. With `dealias` the grid is the `2N + 1` node sine grid,
//! which integrates quartic products of resolved modes exactly and projects
//! `u^3` onto modes `1..N` without aliasing (Galerkin). Without it, the
//! computational grid itself is used (collocation). Either way the cubic force
//! is the exact gradient of the discrete quartic functional.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("invalid domain specification: {0}")]
    InvalidSpec(String),
    #[error("Poincare condition violated: lambda_1 + beta = {lambda1} + {beta} <= 0")]
    PoincareViolation { lambda1: f64, beta: f64 },
    #[error("size mismatch: expected {expected} values, found {found}")]
    SizeMismatch { expected: usize, found: usize },
}

/// Shape of the physical domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Interval { length: f64 },
    RadialBall { radius: f64 },
}

impl Geometry {
    /// `L` for the interval, `R` for the ball.
    pub fn extent(&self) -> f64 {
        match *self {
            Geometry::Interval { length } => length,
            Geometry::RadialBall { radius } => radius,
        }
    }

    pub fn is_radial(&self) -> bool {
        matches!(self, Geometry::RadialBall { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Geometry::Interval { .. } => "interval",
            Geometry::RadialBall { .. } => "radial_ball",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub geometry: Geometry,
    pub n_modes: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_dealias")]
    pub dealias: bool,
}

fn default_beta() -> f64 {
    1.0
}

fn default_dealias() -> bool {
    true
}

impl DomainSpec {
    pub const MIN_MODES: usize = 8;

    pub fn interval(length: f64, n_modes: usize) -> Self {
        Self {
            geometry: Geometry::Interval { length },
            n_modes,
            beta: 1.0,
            dealias: true,
        }
    }

    pub fn radial_ball(radius: f64, n_modes: usize) -> Self {
        Self {
            geometry: Geometry::RadialBall { radius },
            n_modes,
            beta: 1.0,
            dealias: true,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_dealias(mut self, dealias: bool) -> Self {
        self.dealias = dealias;
        self
    }
}

/// Real grid function. For the ball the stored values are `v = r u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Sine coefficients `c_1..c_N` (index 0 holds mode 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCoeffs {
    pub coeffs: Vec<f64>,
}

impl SpectralCoeffs {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn zeros(n: usize) -> Self {
        Self { coeffs: vec![0.0; n] }
    }

    /// Unit vector for mode `k` (1-based).
    pub fn unit(n: usize, k: usize) -> Self {
        let mut coeffs = vec![0.0; n];
        coeffs[k - 1] = 1.0;
        Self { coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Sine grid with a precomputed synthesis matrix `sin(pi q k / (M + 1))`.
#[derive(Debug, Clone)]
struct SineGrid {
    size: usize,
    nodes: Vec<f64>,
    /// Row-major `size x n_modes`.
    synthesis: Vec<f64>,
    /// Trapezoid weight times the geometric measure (1 or 4 pi).
    weight: f64,
    /// Extra pointwise weight of the quartic term: 1, or `1/r^2` on the ball.
    quartic_weight: Vec<f64>,
}

impl SineGrid {
    fn new(size: usize, n_modes: usize, extent: f64, measure: f64, radial: bool) -> Self {
        let period = 2 * (size + 1);
        // sin(pi m / (M + 1)) for m in [0, 2(M + 1)), exact symmetric table
        let table: Vec<f64> = (0..period)
            .map(|m| (PI * m as f64 / (size + 1) as f64).sin())
            .collect();
        let mut synthesis = vec![0.0; size * n_modes];
        for q in 0..size {
            for k in 0..n_modes {
                synthesis[q * n_modes + k] = table[((q + 1) * (k + 1)) % period];
            }
        }
        let spacing = extent / (size + 1) as f64;
        let nodes: Vec<f64> = (1..=size).map(|q| q as f64 * spacing).collect();
        let quartic_weight = if radial {
            nodes.iter().map(|r| 1.0 / (r * r)).collect()
        } else {
            vec![1.0; size]
        };
        Self {
            size,
            nodes,
            synthesis,
            weight: spacing * measure,
            quartic_weight,
        }
    }

    fn synthesize(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = coeffs.len();
        for (q, o) in out.iter_mut().enumerate() {
            let row = &self.synthesis[q * n..(q + 1) * n];
            *o = row.iter().zip(coeffs).map(|(s, c)| s * c).sum();
        }
    }

    /// Projection onto modes `1..N`: `c_k = 2/(M+1) sum_q f_q sin(pi q k/(M+1))`.
    fn analyze(&self, values: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (q, &f) in values.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &self.synthesis[q * n..(q + 1) * n];
            for (o, s) in out.iter_mut().zip(row) {
                *o += s * f;
            }
        }
        let scale = 2.0 / (self.size + 1) as f64;
        out.iter_mut().for_each(|o| *o *= scale);
    }
}

/// Immutable discretization of the domain.
#[derive(Debug, Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    /// Dirichlet eigenvalues `lambda_k = (k pi / L)^2`.
    pub eigenvalues: Vec<f64>,
    pub grid_points: Vec<f64>,
    /// Weights acting on stored values: `int f g = sum_j w_j f_j g_j`.
    pub quadrature_weights: Vec<f64>,
    /// `r_j^2` at the nodes, present only for the ball.
    pub radial_weight: Option<Vec<f64>>,
    grid: SineGrid,
    quad: Option<SineGrid>,
    /// Mass factor of the coefficient inner product: `measure * L / 2`.
    mass: f64,
}

pub fn build_domain(spec: DomainSpec) -> Result<Domain, DomainError> {
    Domain::new(spec)
}

impl Domain {
    pub fn new(spec: DomainSpec) -> Result<Self, DomainError> {
        let extent = spec.geometry.extent();
        if !(extent.is_finite() && extent > 0.0) {
            return Err(DomainError::InvalidSpec(format!(
                "extent must be positive, got {extent}"
            )));
        }
        if spec.n_modes < DomainSpec::MIN_MODES {
            return Err(DomainError::InvalidSpec(format!(
                "n_modes must be at least {}, got {}",
                DomainSpec::MIN_MODES,
                spec.n_modes
            )));
        }
        if !spec.beta.is_finite() {
            return Err(DomainError::InvalidSpec("beta must be finite".into()));
        }
        let n = spec.n_modes;
        let eigenvalues: Vec<f64> = (1..=n)
            .map(|k| (k as f64 * PI / extent).powi(2))
            .collect();
        if eigenvalues[0] + spec.beta <= 0.0 {
            return Err(DomainError::PoincareViolation {
                lambda1: eigenvalues[0],
                beta: spec.beta,
            });
        }
        let radial = spec.geometry.is_radial();
        let measure = if radial { 4.0 * PI } else { 1.0 };
        let grid = SineGrid::new(n, n, extent, measure, radial);
        let quad = spec
            .dealias
            .then(|| SineGrid::new(2 * n + 1, n, extent, measure, radial));
        let radial_weight = radial.then(|| grid.nodes.iter().map(|r| r * r).collect());
        Ok(Self {
            spec,
            eigenvalues,
            grid_points: grid.nodes.clone(),
            quadrature_weights: vec![grid.weight; n],
            radial_weight,
            mass: measure * extent / 2.0,
            grid,
            quad,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.spec.n_modes
    }

    pub fn beta(&self) -> f64 {
        self.spec.beta
    }

    pub fn extent(&self) -> f64 {
        self.spec.geometry.extent()
    }

    pub fn is_radial(&self) -> bool {
        self.spec.geometry.is_radial()
    }

    /// `lambda_k + beta`, the symbol of `-Laplacian + beta`.
    pub fn symbol(&self, k: usize) -> f64 {
        self.eigenvalues[k] + self.spec.beta
    }

    /// Linear frequencies `omega_k = sqrt(lambda_k + beta)`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_modes()).map(|k| self.symbol(k).sqrt()).collect()
    }

    /// Coefficient-space mass factor: `int f g = mass * sum_k a_k b_k`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    fn check_len(&self, found: usize) -> Result<(), DomainError> {
        if found != self.n_modes() {
            return Err(DomainError::SizeMismatch {
                expected: self.n_modes(),
                found,
            });
        }
        Ok(())
    }

    pub fn zero_field(&self) -> Field {
        Field::zeros(self.n_modes())
    }

    /// Samples `f` at the nodes. For the ball, `f` is the stored quantity `v(r)`.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        Field::new(self.grid_points.iter().map(|&x| f(x)).collect())
    }

    pub fn forward_transform(&self, f: &Field) -> Result<SpectralCoeffs, DomainError> {
        self.check_len(f.len())?;
        let mut out = vec![0.0; self.n_modes()];
        self.grid.analyze(&f.values, &mut out);
        Ok(SpectralCoeffs::new(out))
    }

    pub fn inverse_transform(&self, c: &SpectralCoeffs) -> Result<Field, DomainError> {
        self.check_len(c.len())?;
        let mut out = vec![0.0; self.n_modes()];
        self.grid.synthesize(&c.coeffs, &mut out);
        Ok(Field::new(out))
    }

    pub(crate) fn forward_into(&self, values: &[f64], out: &mut [f64]) {
        self.grid.analyze(values, out);
    }

    pub(crate) fn inverse_into(&self, coeffs: &[f64], out: &mut [f64]) {
        self.grid.synthesize(coeffs, out);
    }

    /// `int (|grad u|^2 + beta u^2)`.
    pub fn h01_norm_sq(&self, f: &Field) -> Result<f64, DomainError> {
        let c = self.forward_transform(f)?;
        Ok(self.h01_from_coeffs(&c.coeffs))
    }

    pub fn h01_from_coeffs(&self, c: &[f64]) -> f64 {
        let sum: f64 = c
            .iter()
            .enumerate()
            .map(|(k, ck)| self.symbol(k) * ck * ck)
            .sum();
        self.mass * sum
    }

    pub fn l2_norm_sq(&self, f: &Field) -> Result<f64, DomainError> {
        self.check_len(f.len())?;
        Ok(self.inner_unchecked(&f.values, &f.values))
    }

    pub fn l4_norm_4(&self, f: &Field) -> Result<f64, DomainError> {
        let c = self.forward_transform(f)?;
        Ok(self.quartic_from_coeffs(&c.coeffs))
    }

    /// `int f g` for stored grid values.
    pub fn inner(&self, f: &Field, g: &Field) -> Result<f64, DomainError> {
        self.check_len(f.len())?;
        self.check_len(g.len())?;
        Ok(self.inner_unchecked(&f.values, &g.values))
    }

    pub(crate) fn inner_unchecked(&self, f: &[f64], g: &[f64]) -> f64 {
        self.grid.weight * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `int w f g` with a nodal weight (e.g. the damping coefficient).
    pub(crate) fn weighted_inner(&self, w: &[f64], f: &[f64], g: &[f64]) -> f64 {
        self.grid.weight
            * w.iter()
                .zip(f)
                .zip(g)
                .map(|((w, a), b)| w * a * b)
                .sum::<f64>()
    }

    fn quad_grid(&self) -> &SineGrid {
        self.quad.as_ref().unwrap_or(&self.grid)
    }

    pub fn quadrature_size(&self) -> usize {
        self.quad_grid().size
    }

    /// Values of the field on the quadrature grid.
    pub(crate) fn quad_values(&self, c: &[f64], out: &mut [f64]) {
        self.quad_grid().synthesize(c, out);
    }

    /// `int u^4` from values on the quadrature grid.
    pub(crate) fn quartic_from_quad(&self, uq: &[f64]) -> f64 {
        let g = self.quad_grid();
        g.weight
            * uq.iter()
                .zip(&g.quartic_weight)
                .map(|(u, w)| w * u.powi(4))
                .sum::<f64>()
    }

    pub fn quartic_from_coeffs(&self, c: &[f64]) -> f64 {
        let mut uq = vec![0.0; self.quadrature_size()];
        self.quad_values(c, &mut uq);
        self.quartic_from_quad(&uq)
    }

    /// Coefficients of the cubic force, the gradient of `1/4 int u^4` with
    /// respect to the coefficient inner product. `scratch` holds the quadrature
    /// values of `u` on entry.
    pub(crate) fn cubic_from_quad(&self, uq: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let g = self.quad_grid();
        for ((s, u), w) in scratch.iter_mut().zip(uq).zip(&g.quartic_weight) {
            *s = w * u * u * u;
        }
        g.analyze(scratch, out);
    }

    /// Cubic force coefficients of the field with coefficients `c`.
    pub fn cubic_coeffs(&self, c: &SpectralCoeffs) -> Result<SpectralCoeffs, DomainError> {
        self.check_len(c.len())?;
        let m = self.quadrature_size();
        let mut uq = vec![0.0; m];
        let mut scratch = vec![0.0; m];
        let mut out = vec![0.0; self.n_modes()];
        self.quad_values(&c.coeffs, &mut uq);
        self.cubic_from_quad(&uq, &mut scratch, &mut out);
        Ok(SpectralCoeffs::new(out))
    }

    /// Multiplies `c_k` by `lambda_k + beta`.
    pub fn apply_laplacian_like(&self, c: &SpectralCoeffs) -> SpectralCoeffs {
        SpectralCoeffs::new(
            c.coeffs
                .iter()
                .enumerate()
                .map(|(k, ck)| ck * self.symbol(k))
                .collect(),
        )
    }

    /// Inverse of [`Domain::apply_laplacian_like`].
    pub fn solve_laplacian_like(&self, c: &SpectralCoeffs) -> SpectralCoeffs {
        SpectralCoeffs::new(
            c.coeffs
                .iter()
                .enumerate()
                .map(|(k, ck)| ck / self.symbol(k))
                .collect(),
        )
    }

    /// Physical values `u` at the nodes (`v / r` on the ball).
    pub fn physical_values(&self, f: &Field) -> Vec<f64> {
        match &self.spec.geometry {
            Geometry::Interval { .. } => f.values.clone(),
            Geometry::RadialBall { .. } => f
                .values
                .iter()
                .zip(&self.grid_points)
                .map(|(v, r)| v / r)
                .collect(),
        }
    }

    /// `u(0) = v'(0)` on the ball, the limit of `v / r` as `r -> 0`.
    pub fn radial_origin_value(&self, f: &Field) -> Result<f64, DomainError> {
        let c = self.forward_transform(f)?;
        let scale = PI / self.extent();
        Ok(c.coeffs
            .iter()
            .enumerate()
            .map(|(k, ck)| ck * (k + 1) as f64 * scale)
            .sum())
    }

    /// Largest linear frequency.
    pub fn omega_max(&self) -> f64 {
        self.symbol(self.n_modes() - 1).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interval(n: usize, beta: f64) -> Domain {
        Domain::new(DomainSpec::interval(PI, n).with_beta(beta)).unwrap()
    }

    #[test]
    fn eigenvalues_of_pi_interval_are_squares() {
        let d = interval(64, 1.0);
        assert_relative_eq!(d.eigenvalues[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(d.eigenvalues[1], 4.0, epsilon = 1e-14);
        assert!(d.eigenvalues.windows(2).all(|w| w[0] < w[1]));
        assert!(d.radial_weight.is_none());
    }

    #[test]
    fn poincare_guard() {
        assert!(Domain::new(DomainSpec::interval(PI, 64).with_beta(-0.5)).is_ok());
        assert!(matches!(
            Domain::new(DomainSpec::interval(PI, 64).with_beta(-2.0)),
            Err(DomainError::PoincareViolation { .. })
        ));
        assert!(matches!(
            Domain::new(DomainSpec::interval(PI, 64).with_beta(-1.0)),
            Err(DomainError::PoincareViolation { .. })
        ));
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            Domain::new(DomainSpec::interval(0.0, 64)),
            Err(DomainError::InvalidSpec(_))
        ));
        assert!(matches!(
            Domain::new(DomainSpec::radial_ball(-1.0, 64)),
            Err(DomainError::InvalidSpec(_))
        ));
        assert!(matches!(
            Domain::new(DomainSpec::interval(1.0, 7)),
            Err(DomainError::InvalidSpec(_))
        ));
        let b = Domain::new(DomainSpec::radial_ball(2.0, 16)).unwrap();
        assert_eq!(b.radial_weight.as_ref().unwrap().len(), 16);
    }

    #[test]
    fn transform_of_eigenfunctions() {
        let d = interval(64, 1.0);
        let c = d.forward_transform(&d.sample(f64::sin)).unwrap();
        assert_relative_eq!(c.coeffs[0], 1.0, epsilon = 1e-13);
        assert!(c.coeffs[1..].iter().all(|x| x.abs() < 1e-13));

        let f = d.sample(|x| x.sin() + 0.5 * (3.0 * x).sin());
        let c = d.forward_transform(&f).unwrap();
        assert_relative_eq!(c.coeffs[0], 1.0, epsilon = 1e-13);
        assert_relative_eq!(c.coeffs[2], 0.5, epsilon = 1e-13);
        for (k, ck) in c.coeffs.iter().enumerate() {
            if k != 0 && k != 2 {
                assert!(ck.abs() < 1e-13, "mode {} = {}", k + 1, ck);
            }
        }
    }

    #[test]
    fn size_mismatch() {
        let d = interval(16, 1.0);
        assert!(matches!(
            d.forward_transform(&Field::zeros(15)),
            Err(DomainError::SizeMismatch {
                expected: 16,
                found: 15
            })
        ));
        assert!(d.inverse_transform(&SpectralCoeffs::zeros(17)).is_err());
        assert!(d.h01_norm_sq(&Field::zeros(3)).is_err());
        assert!(d.l2_norm_sq(&Field::zeros(3)).is_err());
        assert!(d.l4_norm_4(&Field::zeros(3)).is_err());
    }

    #[test]
    fn norms_of_sine() {
        for dealias in [true, false] {
            let d0 = Domain::new(DomainSpec::interval(PI, 64).with_beta(0.0).with_dealias(dealias))
                .unwrap();
            let d1 = Domain::new(DomainSpec::interval(PI, 64).with_dealias(dealias)).unwrap();
            let s = d0.sample(f64::sin);
            assert_relative_eq!(d0.h01_norm_sq(&s).unwrap(), PI / 2.0, max_relative = 1e-13);
            assert_relative_eq!(d1.h01_norm_sq(&s).unwrap(), PI, max_relative = 1e-13);
            assert_relative_eq!(d0.l2_norm_sq(&s).unwrap(), PI / 2.0, max_relative = 1e-13);
            assert_relative_eq!(d0.l4_norm_4(&s).unwrap(), 3.0 * PI / 8.0, max_relative = 1e-13);
            assert_relative_eq!(
                d0.l4_norm_4(&s.scaled(2.0)).unwrap(),
                6.0 * PI,
                max_relative = 1e-13
            );
            let z = d0.zero_field();
            assert_eq!(d0.h01_norm_sq(&z).unwrap(), 0.0);
            assert_eq!(d0.l2_norm_sq(&z).unwrap(), 0.0);
            assert_eq!(d0.l4_norm_4(&z).unwrap(), 0.0);
        }
    }

    #[test]
    fn dealiased_quartic_is_exact_for_high_modes() {
        // (sin 40x + sin 50x)^4 has cosine content up to mode 200 > 2(N+1)
        let d = interval(64, 1.0);
        let l4 = d.l4_norm_4(&d.sample(|x| (40.0 * x).sin() + (50.0 * x).sin())).unwrap();
        // (a+b)^4 integrates to 3pi/8 + 3pi/8 + 6 * pi/4 = 9pi/4
        assert_relative_eq!(l4, 9.0 * PI / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn laplacian_like_and_inverse() {
        let d1 = interval(16, 1.0);
        let e1 = SpectralCoeffs::unit(16, 1);
        let two_e1 = d1.apply_laplacian_like(&e1);
        assert_relative_eq!(two_e1.coeffs[0], 2.0, epsilon = 1e-14);
        let back = d1.solve_laplacian_like(&two_e1);
        assert_relative_eq!(back.coeffs[0], 1.0, epsilon = 1e-14);
        let d0 = interval(16, 0.0);
        let e2 = d0.apply_laplacian_like(&SpectralCoeffs::unit(16, 2));
        assert_relative_eq!(e2.coeffs[1], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn random_round_trips() {
        let d = interval(128, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let f = Field::new((0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
            let back = d.inverse_transform(&d.forward_transform(&f).unwrap()).unwrap();
            let err = f.sub(&back).max_abs();
            assert!(err <= 1e-12 * f.max_abs(), "round trip error {err}");
        }
    }

    #[test]
    fn radial_integrals_match_dense_quadrature() {
        let r_ball = 2.5;
        let d = Domain::new(DomainSpec::radial_ball(r_ball, 64).with_beta(0.7)).unwrap();
        // u(r) = exp(-r^2) * sin(pi r / R) / r, v = r u
        let v = |r: f64| (-r * r).exp() * (PI * r / r_ball).sin();
        let vp = |r: f64| {
            (-r * r).exp() * (PI / r_ball * (PI * r / r_ball).cos() - 2.0 * r * (PI * r / r_ball).sin())
        };
        let f = d.sample(v);
        // composite Simpson on [0, R] with 200k panels
        let simpson = |g: &dyn Fn(f64) -> f64| {
            let n = 200_000;
            let h = r_ball / n as f64;
            let mut s = g(0.0) + g(r_ball);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * g(i as f64 * h);
            }
            s * h / 3.0
        };
        let four_pi = 4.0 * PI;
        let h01_ref = four_pi * simpson(&|r| vp(r).powi(2) + 0.7 * v(r).powi(2));
        let l2_ref = four_pi * simpson(&|r| v(r).powi(2));
        let l4_ref = four_pi
            * simpson(&|r| {
                if r == 0.0 {
                    0.0
                } else {
                    v(r).powi(4) / (r * r)
                }
            });
        assert_relative_eq!(d.h01_norm_sq(&f).unwrap(), h01_ref, max_relative = 1e-8);
        assert_relative_eq!(d.l2_norm_sq(&f).unwrap(), l2_ref, max_relative = 1e-8);
        assert_relative_eq!(d.l4_norm_4(&f).unwrap(), l4_ref, max_relative = 1e-8);
        // u(0) = v'(0); the odd extension of g is smooth at both ends
        let g = d.sample(|r| {
            let s = (PI * r / r_ball).sin();
            s * (-s * s).exp()
        });
        assert_relative_eq!(
            d.radial_origin_value(&g).unwrap(),
            PI / r_ball,
            max_relative = 1e-12
        );
    }
}
