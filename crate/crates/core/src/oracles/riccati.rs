use nalgebra::DMatrix;

use super::ode::{rk4_step, step_count};
use crate::error::{Error, Result};
use crate::kalman::{flatten, unflatten, KalmanSystem};

const DIVERGENCE_NORM: f64 = 1e9;
const SETTLE_RATE: f64 = 1e-8;
const SETTLE_CAP: f64 = 100.0;

/// Optimal covariance, gain and costate trajectories on `[0, T]` plus the
/// steady state.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub step: f64,
    /// Every integration step.
    pub times: Vec<f64>,
    pub sigma: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
    /// Costate from the backward sweep `λ(T) = I`, sampled every second step.
    pub costate_times: Vec<f64>,
    pub costate: Vec<DMatrix<f64>>,
    pub sigma_inf: DMatrix<f64>,
    pub gain_inf: DMatrix<f64>,
    /// Time at which `‖Σ̇‖` dropped below the settling rate (or the cap).
    pub settle_time: f64,
    /// `‖AΣ∞ + Σ∞Aᵀ + BQBᵀ − Σ∞CᵀR⁻¹CΣ∞‖`.
    pub are_residual: f64,
}

impl RiccatiSolution {
    pub fn trace_at_horizon(&self) -> f64 {
        self.sigma.last().expect("non-empty").trace()
    }

    /// Rows `t, Σ, G, λ, tr Σ` at the costate sample times.
    pub fn table(&self) -> Vec<Vec<f64>> {
        self.costate_times
            .iter()
            .zip(&self.costate)
            .enumerate()
            .map(|(j, (&t, l))| {
                let s = &self.sigma[2 * j];
                let mut row = vec![t];
                row.extend(flatten(s));
                row.extend(flatten(&self.gain[2 * j]));
                row.extend(flatten(l));
                row.push(s.trace());
                row
            })
            .collect()
    }
}

fn riccati_rhs<'a>(sys: &'a KalmanSystem, r_inv: &DMatrix<f64>) -> impl Fn(f64, &[f64]) -> Vec<f64> + 'a {
    let n = sys.n();
    let ct_rinv = sys.c.transpose() * r_inv;
    move |_t, y| {
        let s = unflatten(n, n, y);
        let g = &s * &ct_rinv;
        flatten(&sys.sigma_rhs(&s, &g).expect("shapes checked"))
    }
}

fn check_divergence(y: &[f64], t: f64) -> Result<()> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            time: t,
            reason: format!("covariance norm {norm:e}"),
        });
    }
    Ok(())
}

/// Integrates the Riccati equation from `Σ₀` with RK4, continues past `T`
/// until `‖Σ̇‖ < 1e-8` (at most 100 s) for the steady state, and sweeps the
/// costate backward from `λ(T) = I`.
pub fn riccati_solve(sys: &KalmanSystem, h: f64) -> Result<RiccatiSolution> {
    sys.validate()?;
    let n = sys.n();
    let steps = step_count(sys.horizon, h)?;
    if steps % 2 != 0 {
        return Err(Error::usage("Riccati step must divide the horizon an even number of times"));
    }
    let r_inv = sys.r_inv()?;
    let rhs = riccati_rhs(sys, &r_inv);
    let mut times = Vec::with_capacity(steps + 1);
    let mut flat = Vec::with_capacity(steps + 1);
    times.push(0.0);
    flat.push(flatten(&sys.sigma0));
    for k in 0..steps {
        let t = k as f64 * h;
        let y = rk4_step(&rhs, t, &flat[k], h);
        check_divergence(&y, t + h)?;
        times.push((k + 1) as f64 * h);
        flat.push(y);
    }
    let sigma: Vec<DMatrix<f64>> = flat.iter().map(|y| unflatten(n, n, y)).collect();
    let gain: Vec<DMatrix<f64>> = sigma.iter().map(|s| s * sys.c.transpose() * &r_inv).collect();

    // steady state
    let mut y = flat.last().unwrap().clone();
    let mut t = sys.horizon;
    loop {
        let rate = rhs(t, &y).iter().map(|v| v * v).sum::<f64>().sqrt();
        if rate < SETTLE_RATE || t >= SETTLE_CAP {
            break;
        }
        y = rk4_step(&rhs, t, &y, h);
        t += h;
        check_divergence(&y, t)?;
    }
    let sigma_inf = unflatten(n, n, &y);
    let gain_inf = &sigma_inf * sys.c.transpose() * &r_inv;
    let are_residual = sys.algebraic_riccati_residual(&sigma_inf)?;

    // costate, backward with step 2h so that midpoints fall on stored samples
    let f_at = |k: usize| &sys.a - &gain[k] * &sys.c;
    let lam_rhs = |l: &DMatrix<f64>, f: &DMatrix<f64>| -(l * f) - f.transpose() * l;
    let mut costate = vec![DMatrix::identity(n, n)];
    let mut k = steps;
    while k >= 2 {
        let l = costate.last().unwrap();
        let (f0, fm, f1) = (f_at(k), f_at(k - 1), f_at(k - 2));
        let hb = -2.0 * h;
        let k1 = lam_rhs(l, &f0);
        let k2 = lam_rhs(&(l + &k1 * (0.5 * hb)), &fm);
        let k3 = lam_rhs(&(l + &k2 * (0.5 * hb)), &fm);
        let k4 = lam_rhs(&(l + &k3 * hb), &f1);
        let next = l + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hb / 6.0);
        costate.push(next);
        k -= 2;
    }
    costate.reverse();
    let costate_times = (0..=steps / 2).map(|j| times[2 * j]).collect();

    Ok(RiccatiSolution {
        step: h,
        times,
        sigma,
        gain,
        costate_times,
        costate,
        sigma_inf,
        gain_inf,
        settle_time: t,
        are_residual,
    })
}

/// Covariance rollout under a supplied gain law.
#[derive(Debug, Clone)]
pub struct KalmanRollout {
    pub times: Vec<f64>,
    pub sigma: Vec<DMatrix<f64>>,
    pub trace_at_horizon: f64,
    pub max_trace: f64,
}

impl KalmanRollout {
    pub fn final_trace(&self) -> f64 {
        self.sigma.last().expect("non-empty").trace()
    }
}

/// Integrates `Σ̇ = sigma_rhs(Σ, G(Σ))` from `Σ₀` to `t_end ≥ T`, recording
/// `tr Σ(T)`.
pub fn rollout_kalman<G>(gain: G, sys: &KalmanSystem, h: f64, t_end: f64) -> Result<KalmanRollout>
where
    G: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    sys.validate()?;
    if t_end < sys.horizon {
        return Err(Error::usage("rollout must reach the horizon"));
    }
    let n = sys.n();
    let steps = step_count(t_end, h)?;
    let horizon_step = step_count(sys.horizon, h)?;
    let mut times = vec![0.0];
    let mut sigma = vec![sys.sigma0.clone()];
    let mut failure = None;
    let rhs = |_t: f64, y: &[f64]| -> Vec<f64> {
        let s = unflatten(n, n, y);
        match gain(&s).and_then(|g| sys.sigma_rhs(&s, &g)) {
            Ok(d) => flatten(&d),
            Err(_) => vec![f64::NAN; y.len()],
        }
    };
    for k in 0..steps {
        let t = k as f64 * h;
        let y = rk4_step(&rhs, t, &flatten(&sigma[k]), h);
        if let Err(e) = check_divergence(&y, t + h) {
            failure = Some(e);
            break;
        }
        times.push((k + 1) as f64 * h);
        sigma.push(unflatten(n, n, &y));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let trace_at_horizon = sigma[horizon_step].trace();
    let max_trace = sigma.iter().map(|s| s.trace()).fold(f64::NEG_INFINITY, f64::max);
    Ok(KalmanRollout {
        times,
        sigma,
        trace_at_horizon,
        max_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys(sigma0: f64) -> KalmanSystem {
        let one = DMatrix::from_element(1, 1, 1.0);
        KalmanSystem {
            a: DMatrix::zeros(1, 1),
            b: one.clone(),
            c: one.clone(),
            q: one.clone(),
            r: one,
            sigma0: DMatrix::from_element(1, 1, sigma0),
            horizon: 1.0,
        }
    }

    #[test]
    fn scalar_steady_state_is_one() {
        let sol = riccati_solve(&scalar_sys(3.0), 1e-3).unwrap();
        assert!((sol.sigma_inf[(0, 0)] - 1.0).abs() < 1e-7);
        assert!(sol.are_residual < 1e-6);
        // closed form Σ(t) = coth(t + acoth 3)
        let c0 = 0.5 * ((3.0f64 + 1.0) / (3.0 - 1.0)).ln();
        let exact = 1.0 / (1.0 + c0).tanh();
        assert!((sol.trace_at_horizon() - exact).abs() < 1e-10);
    }

    #[test]
    fn fixed_point_stays_put() {
        let sol = riccati_solve(&scalar_sys(1.0), 1e-3).unwrap();
        assert!(sol.sigma.iter().all(|s| (s[(0, 0)] - 1.0).abs() < 1e-8));
    }

    #[test]
    fn exact_gain_rollout_reproduces_riccati() {
        let sys = KalmanSystem::double_integrator();
        let sol = riccati_solve(&sys, 1e-3).unwrap();
        let roll = rollout_kalman(|s| sys.optimal_gain(s), &sys, 1e-3, sys.horizon).unwrap();
        let gap = roll
            .sigma
            .iter()
            .zip(&sol.sigma)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8);
        assert!(sol.are_residual < 1e-6);
        let tr = sol.trace_at_horizon();
        assert!(tr > 0.6 && tr < 60.0, "order of magnitude {tr}");
    }

    #[test]
    fn zero_gain_grows_without_bound() {
        let sys = KalmanSystem::double_integrator();
        let roll = rollout_kalman(|_| Ok(DMatrix::zeros(4, 4)), &sys, 1e-2, 50.0).unwrap();
        let traces: Vec<f64> = roll.sigma.iter().map(|s| s.trace()).collect();
        assert!(traces.windows(2).all(|w| w[1] > w[0]));
        assert!(roll.final_trace() > 1e4);
    }

    #[test]
    fn costate_is_identity_at_horizon_and_symmetric() {
        let sys = KalmanSystem::double_integrator();
        let sol = riccati_solve(&sys, 1e-3).unwrap();
        assert_eq!(sol.costate.len(), sol.costate_times.len());
        assert_eq!(sol.costate.last().unwrap(), &DMatrix::identity(4, 4));
        for l in &sol.costate {
            assert!((l - l.transpose()).amax() < 1e-12);
        }
        assert_eq!(sol.table()[0].len(), 1 + 16 + 16 + 16 + 1);
    }
}
