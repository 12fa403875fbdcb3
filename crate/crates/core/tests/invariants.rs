//! Property tests: energy identities, the Sobolev slack, Parseval and
//! transform round trips on random sine series.

use std::f64::consts::PI;
use std::sync::OnceLock;

use approx::assert_relative_eq;
use proptest::prelude::*;
use pwlab_core::functionals::{explicit_sobolev_check, lambda_star};
use pwlab_core::{
    classify, energies, petviashvili_solve, Domain, DomainSpec, FieldNorms, GroundState,
    PetviashviliOptions, SpectralCoeffs, WellConstants, WellSet,
};

struct Fixture {
    dom: Domain,
    gs: GroundState,
    wc: WellConstants,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dom = Domain::new(DomainSpec::interval(PI, 64)).unwrap();
        let gs = petviashvili_solve(&dom, &PetviashviliOptions::default()).unwrap();
        let wc = gs.well_constants(&dom).unwrap();
        Fixture { dom, gs, wc }
    })
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, 64), 0.5f64..3.0).prop_map(|(c, p)| {
        c.iter()
            .enumerate()
            .map(|(k, v)| v / ((k + 1) as f64).powf(p))
            .collect()
    })
}

fn nonzero(c: &[f64]) -> bool {
    c.iter().map(|v| v * v).sum::<f64>() > 1e-8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transform_round_trip(c in coeffs()) {
        let f = fixture();
        let u = f.dom.inverse_transform(&SpectralCoeffs::new(c.clone())).unwrap();
        let back = f.dom.forward_transform(&u).unwrap();
        for (a, b) in c.iter().zip(&back.coeffs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval(c in coeffs()) {
        let f = fixture();
        let u = f.dom.inverse_transform(&SpectralCoeffs::new(c.clone())).unwrap();
        let l2 = f.dom.l2_norm_sq(&u).unwrap();
        let from_coeffs = 0.5 * PI * c.iter().map(|v| v * v).sum::<f64>();
        prop_assert!((l2 - from_coeffs).abs() <= 1e-12 * from_coeffs.max(1e-300) + 1e-15);
    }

    #[test]
    fn energy_identities(c in coeffs(), ct in coeffs()) {
        let f = fixture();
        let u = f.dom.inverse_transform(&SpectralCoeffs::new(c)).unwrap();
        let ut = f.dom.inverse_transform(&SpectralCoeffs::new(ct)).unwrap();
        let n = FieldNorms::of(&f.dom, &u, &ut).unwrap();
        let e = energies(&f.dom, &u, &ut).unwrap();
        let scale = n.h01_sq + n.l4_4 + n.l2t_sq + 1e-300;
        // E = J + |u_t|^2 / 2 and J - K/4 = |u|_H^2 / 4
        prop_assert!((e.e - e.j - 0.5 * n.l2t_sq).abs() <= 1e-12 * scale);
        prop_assert!((e.j - 0.25 * e.k - 0.25 * n.h01_sq).abs() <= 1e-12 * scale);
    }

    #[test]
    fn sobolev_slack_nonnegative(c in coeffs()) {
        prop_assume!(nonzero(&c));
        let f = fixture();
        let u = f.dom.inverse_transform(&SpectralCoeffs::new(c)).unwrap();
        let slack = explicit_sobolev_check(&f.dom, &f.wc, &u).unwrap();
        prop_assert!(slack >= -1e-8);
    }

    #[test]
    fn nehari_projection_bounded_below_by_d(c in coeffs()) {
        prop_assume!(nonzero(&c));
        let f = fixture();
        let u = f.dom.inverse_transform(&SpectralCoeffs::new(c)).unwrap();
        let v = u.scaled(lambda_star(&f.dom, &u).unwrap());
        let e = energies(&f.dom, &v, &f.dom.zero_field()).unwrap();
        prop_assert!(e.k.abs() <= 1e-9 * (1.0 + e.j.abs()));
        prop_assert!(e.j >= f.wc.d * (1.0 - 1e-6));
    }

    #[test]
    fn scaled_ground_state_classification(lambda in 0.05f64..1.95) {
        prop_assume!((lambda - 1.0).abs() > 1e-3);
        let f = fixture();
        let zero = f.dom.zero_field();
        let cls = classify(&f.dom, &f.wc, &f.gs.q.scaled(lambda), &zero).unwrap();
        let expected = if lambda < 1.0 { WellSet::KPlus } else { WellSet::KMinus };
        prop_assert_eq!(cls.verdict, expected);
    }
}

#[test]
fn ground_state_level_matches_quartic_norm() {
    let f = fixture();
    let n = FieldNorms::of(&f.dom, &f.gs.q, &f.dom.zero_field()).unwrap();
    assert_relative_eq!(f.wc.d, 0.25 * n.l4_4, max_relative = 1e-10);
    assert_relative_eq!(n.h01_sq, n.l4_4, max_relative = 1e-10);
}
