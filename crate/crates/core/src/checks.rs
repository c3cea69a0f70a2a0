//! Invariant suite: gradient checks, integrator order, oracle consistency and
//! closure of the residual code on known solutions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, NodeId, ParameterStore, Tape};
use crate::error::Result;
use crate::experiment::Check;
use crate::geodesic::{hypar_instance, sphere_instance, GeodesicProblem};
use crate::kalman::{KalmanProblem, KalmanSystem};
use crate::mintime::{MinTimeProblem, MinTimeSetup};
use crate::networks::{glorot_values, Head, Mlp, MlpSpec, NetworkShape};
use crate::oracles::{
    bangbang_analytic, polyline_geodesic_oracle, riccati_solve, rk4_integrate, rollout_kalman, OdeProblem,
    PolylineConfig,
};
use crate::variational::{assemble_terms, VariationalProblem};

pub const FD_STEP: f64 = 1e-6;

fn random_mlp(rng: &mut ChaCha8Rng, input_dim: usize) -> (Mlp, ParameterStore) {
    let head = [Head::Linear, Head::Psd, Head::Symmetric, Head::Bounded][rng.gen_range(0..4)];
    let output_dim = match head {
        Head::Psd | Head::Symmetric => {
            let n = rng.gen_range(1..=2);
            n * n
        }
        _ => rng.gen_range(1..=3),
    };
    let layers = rng.gen_range(1..=3);
    let mut spec = MlpSpec::new(input_dim, 4, output_dim, head);
    spec.hidden_widths = (0..layers).map(|_| rng.gen_range(2..=6)).collect();
    if input_dim == 1 {
        spec = spec.with_input_range(0.0, rng.gen_range(0.5..3.0));
    }
    let mut store = ParameterStore::new();
    store.push("net", &glorot_values(&spec, rng)).expect("fresh store");
    let net = Mlp::bind("net", spec, &store).expect("layout matches");
    (net, store)
}

fn problem_loss<P: VariationalProblem>(p: &P, tape: &mut Tape<'_>, times: &[f64]) -> Result<NodeId> {
    let mut terms = p.path_terms(tape, times)?;
    terms.extend(p.point_terms(tape)?);
    assemble_terms(tape, &terms, 1.3, 1.0 / times.len() as f64)
}

/// Worst finite-difference disagreement of one randomly drawn network and
/// loss. Cases cycle through plain outputs, losses on the first and second
/// input-derivative channels, and the three problem losses.
pub fn random_gradient_check(case: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let small = NetworkShape {
        width: rng.gen_range(3..=5),
        hidden_layers: rng.gen_range(1..=2),
    };
    let seed = rng.gen::<u64>();
    match case % 6 {
        0 => {
            let dim = rng.gen_range(1..=3);
            let (net, store) = random_mlp(rng, dim);
            let rows = rng.gen_range(1..=4);
            let inputs: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let weights: Vec<f64> = (0..rows * net.spec.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let build = |tape: &mut Tape<'_>| {
                let y = net.record_values(tape, rows, inputs.clone())?;
                let w = tape.constant(crate::autodiff::Tensor::from_values(rows, net.spec.output_dim, weights.clone()));
                let yw = tape.mul(y, w)?;
                let s = tape.sum(yw);
                let sq = tape.sum_squares(y);
                let sq = tape.scale(sq, 0.5);
                tape.add(s, sq)
            };
            finite_difference_check(build, store.values(), FD_STEP)
        }
        1 | 2 => {
            let (net, store) = random_mlp(rng, 1);
            let horizon = 1.0 / net.spec.input_scale * 2.0;
            let times: Vec<f64> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0.0..horizon)).collect();
            let channel = case % 6;
            let build = |tape: &mut Tape<'_>| {
                let y = net.record_times(tape, &times)?;
                let d = tape.channel(y, channel)?;
                let v = tape.channel(y, 0)?;
                let dv = tape.mul(d, v)?;
                let a = tape.sum_squares(d);
                let b = tape.sum(dv);
                tape.add(a, b)
            };
            finite_difference_check(build, store.values(), FD_STEP)
        }
        3 => {
            let (p, store) = KalmanProblem::new(KalmanSystem::double_integrator(), &small, seed)?;
            let times: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..5.0)).collect();
            finite_difference_check(|t| problem_loss(&p, t, &times), store.values(), FD_STEP)
        }
        4 => {
            let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &small, seed)?;
            let times: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.9)).collect();
            finite_difference_check(|t| problem_loss(&p, t, &times), store.values(), FD_STEP)
        }
        _ => {
            let spec = if rng.gen_bool(0.5) {
                sphere_instance([1f64.sin(), 0.0, 1f64.cos()])?
            } else {
                hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0])?
            };
            let (p, mut store) = GeodesicProblem::new(spec, &small, seed)?;
            store.set_scalar(GeodesicProblem::TERMINAL_MULTIPLIER, rng.gen_range(-1.0..1.0))?;
            let times: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            finite_difference_check(|t| problem_loss(&p, t, &times), store.values(), FD_STEP)
        }
    }
}

/// Worst error over `count` random gradient checks.
pub fn gradient_checks(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..count {
        worst = worst.max(random_gradient_check(case, &mut rng)?);
    }
    Ok(worst)
}

/// Observed order of RK4 on `ẏ = y` over `[0, 1]` from steps `0.1` and `0.05`.
pub fn rk4_order() -> Result<f64> {
    let err = |h: f64| -> Result<f64> {
        let p = OdeProblem {
            rhs: |_t: f64, y: &[f64]| vec![y[0]],
            y0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
            step: h,
        };
        Ok((rk4_integrate(&p)?.last()[0] - 1f64.exp()).abs())
    };
    Ok((err(0.1)? / err(0.05)?).log2())
}

/// `(algebraic Riccati residual, max gap between the exact-gain rollout and
/// the Riccati integration)` for the double integrator.
pub fn riccati_consistency(h: f64) -> Result<(f64, f64)> {
    let sys = KalmanSystem::double_integrator();
    let sol = riccati_solve(&sys, h)?;
    let roll = rollout_kalman(|s| sys.optimal_gain(s), &sys, h, sys.horizon)?;
    let gap = roll
        .sigma
        .iter()
        .zip(&sol.sigma)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0, f64::max);
    Ok((sol.are_residual, gap))
}

/// Largest residual norm of the Kalman conditions on the Riccati oracle.
pub fn kalman_closure(h: f64) -> Result<f64> {
    let sys = KalmanSystem::double_integrator();
    let sol = riccati_solve(&sys, h)?;
    let shape = NetworkShape { width: 2, hidden_layers: 1 };
    let (p, _) = KalmanProblem::new(sys, &shape, 0)?;
    let report = p.oracle_closure(&sol)?;
    Ok(report.conditions.values().fold(0.0, |m: f64, v| m.max(*v)))
}

/// Largest RMS residual of the min-time conditions on the analytic
/// bang-bang solution, at times at least `0.01` away from the switch.
pub fn bangbang_closure() -> Result<f64> {
    let setup = MinTimeSetup::default();
    let b = bangbang_analytic(setup.x0)?;
    let (p, store) = MinTimeProblem::new(setup, &NetworkShape { width: 2, hidden_layers: 1 }, 0)?;
    let times: Vec<f64> = (0..=400)
        .map(|i| b.t_f * i as f64 / 400.0)
        .filter(|t| (t - b.t_m).abs() > 1e-2)
        .collect();
    Ok(p.oracle_closure(store.values(), &b, &times)?.into_iter().fold(0.0, f64::max))
}

/// Largest length increase between consecutive iterations of the polyline
/// oracle after the first ten (non-positive when descent is monotone).
pub fn polyline_monotonicity() -> Result<f64> {
    let spec = sphere_instance([1f64.sin(), 0.0, 1f64.cos()])?;
    let cfg = PolylineConfig {
        segments: 32,
        iters: 2000,
        ..PolylineConfig::default()
    };
    let r = polyline_geodesic_oracle(&spec, &cfg)?;
    Ok(r.history[10..].windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max))
}

/// Runs every invariant with its threshold.
pub fn run_invariant_suite() -> Result<Vec<Check>> {
    let h = crate::oracles::DEFAULT_STEP;
    let (are, gap) = riccati_consistency(h)?;
    let check = |name: &str, value: f64, threshold: f64| Check {
        name: name.to_string(),
        value: Some(value),
        threshold,
        passed: value <= threshold,
    };
    let order = rk4_order()?;
    Ok(vec![
        check("gradient_fd_error", gradient_checks(120, 0)?, 1e-4),
        Check {
            name: "rk4_order".into(),
            value: Some(order),
            threshold: 3.8,
            passed: order >= 3.8,
        },
        check("riccati_are_residual", are, 1e-6),
        check("exact_gain_rollout_gap", gap, 1e-8),
        check("kalman_oracle_closure", kalman_closure(h)?, 1e-6),
        check("bangbang_closure", bangbang_closure()?, 1e-12),
        check("polyline_length_increase", polyline_monotonicity()?, 1e-14),
    ])
}
