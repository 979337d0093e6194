mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stgncde::spline::fit_natural_cubic;

fn knots() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..15).prop_flat_map(|k| {
        (
            proptest::collection::vec(0.05f64..2.0, k),
            proptest::collection::vec(-5.0f64..5.0, k),
        )
            .prop_map(|(gaps, values)| {
                let times = gaps
                    .iter()
                    .scan(-1.0, |t, g| {
                        *t += g;
                        Some(*t)
                    })
                    .collect();
                (times, values)
            })
    })
}

proptest! {
    #[test]
    fn natural_spline_properties((times, values) in knots(), probes in proptest::collection::vec(-3.0f64..30.0, 100)) {
        let s = fit_natural_cubic(&times, &values).unwrap();
        let r = check_spline(&s, &times, &values, &probes);
        prop_assert!(r.interpolation < 1e-10, "{:?}", r);
        prop_assert!(r.continuity() < 1e-8, "{:?}", r);
        prop_assert!(r.boundary_curvature < 1e-8, "{:?}", r);
        prop_assert!(r.derivative_vs_fd < 1e-6, "{:?}", r);
    }

    #[test]
    fn two_knots_reproduce_the_line(t0 in -5.0f64..5.0, dt in 0.1f64..4.0, a in -5.0f64..5.0, b in -5.0f64..5.0, probe in -10.0f64..10.0) {
        let s = fit_natural_cubic(&[t0, t0 + dt], &[a, a + b * dt]).unwrap();
        prop_assert!((s.eval(probe) - (a + b * (probe - t0))).abs() < 1e-9);
        prop_assert!((s.eval_derivative(probe) - b).abs() < 1e-12);
    }

    #[test]
    fn masked_window_paths(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = spline_suite_window(&mut rng, 6, 20);
        prop_assert!(r.interpolation < 1e-10 && r.continuity() < 1e-8 && r.derivative_vs_fd < 1e-6, "{:?}", r);
    }
}
