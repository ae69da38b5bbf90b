mod common;

use common::{aprox_oracle, conj_deriv_oracle};
use ifyot::divergences::{catalogue, Divergence};
use proptest::prelude::*;

fn smooth() -> Vec<Divergence> {
    vec![
        Divergence::Kl { tau: 0.7 },
        Divergence::ChiSquared { tau: 1.3 },
        Divergence::Hellinger { tau: 0.8 },
        Divergence::JensenShannon { tau: 2.0 },
        Divergence::Alpha { a: 0.5, tau: 1.0 },
        Divergence::Alpha { a: -0.4, tau: 0.6 },
    ]
}

#[test]
fn aprox_matches_bisection() {
    for d in smooth() {
        for &eta in &[0.05, 0.3, 1.0, 4.0] {
            for k in 0..21 {
                let p = -3.0 + 0.3 * k as f64;
                let got = d.aprox(p, eta);
                let want = aprox_oracle(&d, p, eta);
                assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{d} p={p} eta={eta}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn aprox_closed_forms() {
    let kl = Divergence::Kl { tau: 2.0 };
    assert!((kl.aprox(3.0, 1.0) - 2.0).abs() < 1e-15);
    assert_eq!(Divergence::Balanced.aprox(-0.4, 0.2), -0.4);
    let range = Divergence::Range { lo: 0.5, hi: 2.0 };
    // q = p − η log hi when that is positive, q = p − η log lo when negative, else 0
    assert!((range.aprox(1.0, 0.5) - (1.0 - 0.5 * 2f64.ln())).abs() < 1e-15);
    assert!((range.aprox(-1.0, 0.5) - (-1.0 - 0.5 * 0.5f64.ln())).abs() < 1e-15);
    assert_eq!(range.aprox(0.1, 0.5), 0.0);
}

#[test]
fn conjugate_derivative_matches_generator() {
    for d in smooth() {
        let sup = d.recession_slope().min(5.0);
        for k in 0..30 {
            let y = -4.0 + (sup + 4.0) * (k as f64 + 0.5) / 30.0;
            let got = d.conjugate_deriv(y);
            let want = conj_deriv_oracle(&d, y);
            assert!((got - want).abs() <= 1e-9 * (1.0 + want), "{d} y={y}: {got} vs {want}");
        }
    }
}

#[test]
fn conjugate_derivatives_by_finite_differences() {
    let h = 1e-5;
    for d in smooth() {
        let sup = d.recession_slope().min(3.0);
        for k in 0..15 {
            let y = -3.0 + (sup - 0.2 + 3.0) * k as f64 / 15.0;
            let fd1 = (d.conjugate(y + h) - d.conjugate(y - h)) / (2.0 * h);
            let fd2 = (d.conjugate_deriv(y + h) - d.conjugate_deriv(y - h)) / (2.0 * h);
            assert!((fd1 - d.conjugate_deriv(y)).abs() < 1e-6 * (1.0 + fd1.abs()), "{d} y={y}");
            assert!((fd2 - d.conjugate_deriv2(y)).abs() < 1e-5 * (1.0 + fd2.abs()), "{d} y={y}");
        }
    }
}

#[test]
fn generators_vanish_at_one() {
    for d in catalogue() {
        assert!(d.generator(1.0).abs() < 1e-14, "{d}");
        assert!(d.conjugate(0.0).abs() < 1e-14, "{d}");
    }
}

#[test]
fn display_roundtrip() {
    for d in catalogue().into_iter().chain(smooth()) {
        let back: Divergence = d.to_string().parse().unwrap();
        assert_eq!(back, d);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<Divergence>(&json).unwrap(), d);
    }
}

#[test]
fn rejects_bad_parameters() {
    for s in ["kl:0", "kl:-1", "chi2", "range:1.5:2", "range:0.5:0.9", "alpha:1:1", "alpha:0.2", "tv:1", "kl:x"] {
        assert!(s.parse::<Divergence>().is_err(), "{s}");
    }
    assert!(Divergence::Hellinger { tau: f64::NAN }.validate().is_err());
}

#[test]
fn mass_condition() {
    let b = Divergence::Balanced;
    let kl = Divergence::Kl { tau: 1.0 };
    assert!(Divergence::bounded_mass_condition(&kl, &kl, 1.0, 3.0));
    assert!(!Divergence::bounded_mass_condition(&b, &b, 1.0, 1.0));
    assert!(Divergence::bounded_mass_condition(&b, &kl, 1.0, 2.0));
}

proptest! {
    #[test]
    fn fenchel_young_inequality(k in 0usize..7, x in 0.0f64..5.0, y in -5.0f64..0.6) {
        let d = catalogue()[k];
        let gap = d.generator(x) + d.conjugate(y) - x * y;
        prop_assert!(gap >= -1e-12);
    }

    #[test]
    fn fenchel_young_equality(k in 0usize..7, y in -5.0f64..0.6) {
        let d = catalogue()[k];
        let x = d.conjugate_deriv(y);
        prop_assume!(x.is_finite());
        let gap = d.generator(x) + d.conjugate(y) - x * y;
        prop_assert!(gap.abs() < 1e-10 * (1.0 + (x * y).abs()), "{} {} {}", d, y, gap);
    }

    #[test]
    fn divergence_nonnegative(k in 0usize..7, rho in prop::collection::vec(0.0f64..3.0, 1..6)) {
        let d = catalogue()[k];
        let base: Vec<f64> = rho.iter().map(|_| 1.0).collect();
        prop_assert!(d.divergence_value(&rho, &base) >= -1e-12);
    }
}
