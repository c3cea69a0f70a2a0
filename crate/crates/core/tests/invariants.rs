use approx::assert_relative_eq;
use calvnet::autodiff::{ParameterStore, Tape, Tensor};
use calvnet::experiment::relative_error;
use calvnet::geodesic::{arc_length, energy, hypar_instance, sphere_instance, Point};
use calvnet::io::{parse_csv, format_csv, Checkpoint};
use calvnet::kalman::KalmanSystem;
use calvnet::mintime::{control_argmin, MinTimeProblem, MinTimeSetup};
use calvnet::networks::{glorot_values, Head, Mlp, MlpSpec, NetworkShape};
use calvnet::oracles::{project_onto_surface, rk4_integrate, riccati_solve, OdeProblem};
use calvnet::variational::{curriculum_step, sample_times, TrainConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(head: Head, out: usize, seed: u64) -> (Mlp, ParameterStore) {
    let mut spec = MlpSpec::new(1, 6, out, head);
    spec.hidden_widths = vec![6, 6];
    let spec = spec.with_input_range(0.0, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.push("n", &glorot_values(&spec, &mut rng)).unwrap();
    (Mlp::bind("n", spec, &store).unwrap(), store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psd_network_output_and_derivatives_stay_structured(seed in any::<u64>(), t in 0.0f64..2.0) {
        let (n, store) = net(Head::Psd, 4, seed);
        let (v, d1, d2) = n.eval_with_input_derivs(store.values(), t, 2).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &v);
        prop_assert!(m.symmetric_eigen().eigenvalues.iter().all(|&e| e >= -1e-12));
        for d in [&v, &d1, &d2] {
            prop_assert!((d[1] - d[2]).abs() <= 1e-14 * (1.0 + d[1].abs()));
        }
    }

    #[test]
    fn symmetric_and_bounded_heads(seed in any::<u64>(), t in 0.0f64..2.0) {
        let (s, store) = net(Head::Symmetric, 9, seed);
        let v = s.forward(store.values(), &[t]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(v[3 * i + j], v[3 * j + i]);
            }
        }
        let (b, store) = net(Head::Bounded, 3, seed);
        prop_assert!(b.forward(store.values(), &[t]).unwrap().iter().all(|u| u.abs() < 1.0));
    }

    #[test]
    fn control_argmin_is_odd(l in -10.0f64..10.0) {
        prop_assume!(l.abs() > 1e-3);
        let a = control_argmin(l, 1e-3).value().unwrap();
        let b = control_argmin(-l, 1e-3).value().unwrap();
        prop_assert_eq!(a, -b);
        prop_assert_eq!(a, -l.signum());
    }

    #[test]
    fn hamiltonian_regret_is_nonnegative(rows in proptest::collection::vec((-3.0f64..3.0, -1.0f64..1.0), 1..20)) {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 2, hidden_layers: 1 }, 0).unwrap();
        let n = rows.len();
        let mut tape = Tape::new(store.values());
        let lam: Vec<f64> = rows.iter().flat_map(|&(l, _)| [0.5, l]).collect();
        let u: Vec<f64> = rows.iter().map(|&(_, u)| u).collect();
        let z = vec![0.0; 2 * n];
        let x = tape.constant(Tensor::from_channels(n, 2, z.clone(), z.clone(), z.clone()));
        let l = tape.constant(Tensor::from_channels(n, 2, lam, z.clone(), z));
        let u = tape.constant(Tensor::from_values(n, 1, u));
        let [_, _, r] = p.record_path_residuals(&mut tape, x, l, u).unwrap();
        prop_assert!(tape.value(r).chan(0).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cauchy_schwarz_on_random_curves(c in proptest::collection::vec(-2.0f64..2.0, 9)) {
        // γ̇(t) = a + b t + c t² componentwise
        let vel = |t: f64| -> Point { std::array::from_fn(|j| c[j] + c[3 + j] * t + c[6 + j] * t * t) };
        let (l, e) = (arc_length(vel, 1000), energy(vel, 1000));
        prop_assert!(l * l <= e + 1e-12);
    }

    #[test]
    fn projection_lands_on_surface(x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.0f64..1.0) {
        let hypar = hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]).unwrap();
        let p = project_onto_surface(&hypar, [x, y, z]).unwrap();
        prop_assert!(hypar.f(&p).abs() < 1e-12);
        prop_assume!(x * x + y * y + z * z > 0.01);
        let sphere = sphere_instance([0.0, 0.0, 1.0]).unwrap();
        let q = project_onto_surface(&sphere, [x, y, z]).unwrap();
        prop_assert!(sphere.f(&q).abs() < 1e-12);
    }

    #[test]
    fn rk4_exact_on_cubic_forcing(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0) {
        let p = OdeProblem {
            rhs: move |t: f64, _y: &[f64]| vec![a + b * t + c * t * t + d * t * t * t],
            y0: vec![0.0],
            t0: 0.0,
            t1: 1.0,
            step: 0.25,
        };
        let exact = a + b / 2.0 + c / 3.0 + d / 4.0;
        prop_assert!((rk4_integrate(&p).unwrap().last()[0] - exact).abs() < 1e-13);
    }

    #[test]
    fn optimal_gain_zeroes_hamiltonian_gradient(s in proptest::collection::vec(-1.0f64..1.0, 16), l in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let sys = KalmanSystem::double_integrator();
        let a = DMatrix::from_row_slice(4, 4, &s);
        let sigma = &a * a.transpose();
        let lam = DMatrix::from_row_slice(4, 4, &l);
        let g = sys.optimal_gain(&sigma).unwrap();
        prop_assert!(sys.hamiltonian_grad_g(&lam, &sigma, &g).unwrap().amax() < 1e-12);
    }

    #[test]
    fn sampled_times_lie_in_horizon(seed in any::<u64>(), n in 1usize..200, horizon in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_times(n, horizon, &mut rng).unwrap();
        prop_assert_eq!(t.len(), n);
        prop_assert!(t.iter().all(|&v| (0.0..=horizon).contains(&v)));
    }

    #[test]
    fn curriculum_never_decreases(epochs in 1usize..20_000) {
        let cfg = TrainConfig::default();
        let mut a = cfg.alpha0;
        for e in 0..epochs.min(12_000) {
            let next = curriculum_step(a, e, &cfg);
            prop_assert!(next >= a);
            a = next;
        }
    }

    #[test]
    fn relative_error_is_scale_invariant(l in -1e3f64..1e3, o in 1e-3f64..1e3, k in 1e-3f64..1e3) {
        let r = relative_error(l, o);
        prop_assert!(r >= 0.0);
        prop_assert!((relative_error(k * l, k * o) - r).abs() <= 1e-9 * (1.0 + r));
    }

    #[test]
    fn csv_round_trip_is_bit_exact(rows in proptest::collection::vec(proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), 0..10)) {
        let (_, back) = parse_csv(&format_csv(&["a", "b", "c"], &rows)).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (r, s) in rows.iter().zip(&back) {
            for (x, y) in r.iter().zip(s) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40), seed in any::<u64>()) {
        let mut params = ParameterStore::new();
        params.push("a", &values).unwrap();
        params.push("b", &[1.5]).unwrap();
        let c = Checkpoint {
            problem: "geodesic-hypar".into(),
            seed,
            shape: NetworkShape { width: 3, hidden_layers: 4 },
            heads: vec![("a".into(), Head::Symmetric)],
            params,
        };
        prop_assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn riccati_keeps_covariance_symmetric_psd(s in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let mut sys = KalmanSystem::double_integrator();
        let a = DMatrix::from_row_slice(4, 4, &s);
        sys.sigma0 = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
        sys.horizon = 1.0;
        let sol = riccati_solve(&sys, 1e-2).unwrap();
        for m in sol.sigma.iter().step_by(10) {
            prop_assert!((m - m.transpose()).amax() < 1e-10);
            prop_assert!(m.clone().symmetric_eigen().eigenvalues.iter().all(|&e| e > -1e-10));
        }
        assert_relative_eq!(sol.sigma_inf.trace(), 3.4641016151377544, max_relative = 1e-6);
    }
}
