//! Numerical laboratory for the damped focusing cubic Klein-Gordon equation
//!
//! ```text
//! u_tt - Laplacian u + gamma(x) u_t + beta u = u^3   in Omega,   u = 0 on the boundary,
//! ```
//!
//! on an interval or on radial data in a 3D ball. The crate computes the
//! ground state and the potential-well constants, classifies initial data into
//! the stable and unstable wells, integrates the flow with a splitting scheme
//! that keeps an exact-in-the-limit dissipation ledger, and provides the
//! diagnostics (virial identities, decay fits, observability ratios,
//! convergence to equilibrium) used by the `pwlab` scenario runner.

pub mod dynamics;
pub mod exec;
pub mod functionals;
pub mod ground_state;
pub mod lab;
pub mod spectral;

pub use exec::Execution;
pub use functionals::{
    classify, energies, lambda_star, Classification, EnergyTriple, FieldNorms, WellConstants,
    WellSet,
};
pub use ground_state::{
    certify_well_constants, nehari_project, petviashvili_solve, shooting_oracle, GroundState,
    GroundStateRecord, PetviashviliOptions, ShootingOptions,
};
pub use spectral::{build_domain, Domain, DomainError, DomainSpec, Field, Geometry, SpectralCoeffs};
