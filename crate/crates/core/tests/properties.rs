//! Property tests for the model, the discrete resolvents and the balayage.

use proptest::prelude::*;

use sdelab_core::potential::{chains, is_excessive, reduced_function, DiscreteResolvent, ROUTE_TOL};
use sdelab_core::{DriftSpec, GalerkinModel, Potential};

fn potential() -> impl Strategy<Value = Potential> {
    prop_oneof![
        Just(Potential::Zero),
        (0.1f64..5.0).prop_map(|c| Potential::Abs { c }),
        (0.1f64..5.0).prop_map(|c| Potential::Quadratic { c }),
        (0.1f64..3.0, 1.0f64..4.0).prop_map(|(c, p)| Potential::AbsPower { c, p }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prox_is_one_lipschitz(pot in potential(), lambda in 1e-3f64..10.0, x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let px = pot.prox_1d(lambda, x).unwrap();
        let py = pot.prox_1d(lambda, y).unwrap();
        prop_assert!((px - py).abs() <= (x - y).abs() * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn yosida_approximation_increases_to_minimal_selection(pot in potential(), x in -5.0f64..5.0) {
        let f0 = pot.min_norm_drift_1d(x).abs();
        let mut last = 0.0;
        for h in [1e-1, 1e-2, 1e-3, 1e-4] {
            let y = ((x - pot.prox_1d(h, x).unwrap()) / h).abs();
            prop_assert!(y + 1e-6 >= last, "h = {h}: {y} < {last}");
            prop_assert!(y <= f0 + 1e-6, "h = {h}: {y} > {f0}");
            last = y;
        }
    }

    #[test]
    fn drift_without_perturbation_is_dissipative(
        pot in potential(),
        lambdas in prop::collection::vec(0.1f64..20.0, 1..5),
        omega in -2.0f64..2.0,
        seed in prop::collection::vec(-3.0f64..3.0, 10),
    ) {
        let d = lambdas.len();
        let model = GalerkinModel::diagonal(lambdas, omega).unwrap();
        let drift = DriftSpec::unperturbed(pot);
        let x = &seed[..d];
        let y = &seed[5..5 + d];
        let fx = sdelab_core::model::min_norm_drift(&drift, x);
        let fy = sdelab_core::model::min_norm_drift(&drift, y);
        let mut ax = vec![0.0; d];
        let mut ay = vec![0.0; d];
        model.apply_a(x, &mut ax);
        model.apply_a(y, &mut ay);
        let lhs: f64 = (0..d).map(|k| (ax[k] + fx[k] - ay[k] - fy[k]) * (x[k] - y[k])).sum();
        let r2: f64 = (0..d).map(|k| (x[k] - y[k]).powi(2)).sum();
        prop_assert!(lhs <= omega * r2 + 1e-9 * (1.0 + r2));
    }
}

fn chain() -> impl Strategy<Value = (usize, f64, f64, f64)> {
    (2usize..25, 0.1f64..3.0, 0.1f64..3.0, 0.0f64..0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolvent_equation_holds(c in chain(), a in 0.05f64..10.0, b in 0.05f64..10.0) {
        let (n, up, down, kill) = c;
        let res = DiscreteResolvent::from_generator(chains::birth_death(n, up, down, kill), &[a], None).unwrap();
        let ua = res.kernel(a).unwrap();
        let ub = res.kernel(b).unwrap();
        let e = &ua - &ub + (&ua * &ub) * (a - b);
        let scale = 1.0f64.max(ua.amax()).max(ub.amax());
        prop_assert!(e.amax() <= 1e-10 * scale);
        for i in 0..n {
            prop_assert!(a * ua.row(i).sum() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn balayage_is_monotone(
        c in chain(),
        alpha in 0.05f64..5.0,
        mask in prop::collection::vec(0u8..3, 25),
        f in prop::collection::vec(0.0f64..2.0, 25),
    ) {
        let (n, up, down, kill) = c;
        let res = DiscreteResolvent::from_generator(chains::birth_death(n, up, down, kill), &[alpha], None).unwrap();
        let a: Vec<bool> = mask[..n].iter().map(|m| *m == 2).collect();
        let bigger: Vec<bool> = mask[..n].iter().map(|m| *m >= 1).collect();
        let u = res.apply(alpha, &f[..n]).unwrap();
        let ra = reduced_function(&res, &a, &u, alpha).unwrap();
        let rb = reduced_function(&res, &bigger, &u, alpha).unwrap();
        for i in 0..n {
            prop_assert!(ra.balayage[i] <= rb.balayage[i] + 1e-12);
            prop_assert!(rb.balayage[i] <= u[i] + 1e-12);
        }
    }

    #[test]
    fn routes_agree_for_excessive_functions(
        c in chain(),
        alpha in 0.05f64..5.0,
        mask in prop::collection::vec(any::<bool>(), 25),
        f in prop::collection::vec(0.0f64..2.0, 25),
    ) {
        let (n, up, down, kill) = c;
        let res = DiscreteResolvent::from_generator(chains::birth_death(n, up, down, kill), &[alpha], None).unwrap();
        let u = res.apply(alpha, &f[..n]).unwrap();
        let r = reduced_function(&res, &mask[..n], &u, alpha).unwrap();
        prop_assert!(r.agreement <= ROUTE_TOL, "gap {}", r.agreement);
    }

    #[test]
    fn potentials_are_excessive(c in chain(), beta in 0.1f64..3.0, f in prop::collection::vec(0.0f64..2.0, 25)) {
        let (n, up, down, kill) = c;
        let res = DiscreteResolvent::from_generator(chains::birth_death(n, up, down, kill), &[beta], None).unwrap();
        let w = res.apply(beta, &f[..n]).unwrap();
        let r = is_excessive(&res, &w, beta).unwrap();
        prop_assert!(r.supermedian && r.excessive);
        for i in 0..n {
            prop_assert!(r.finite_sup[i] <= w[i] + 1e-12);
        }
    }
}
