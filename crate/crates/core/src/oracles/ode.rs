use crate::error::{Error, Result};

/// Fixed-step initial value problem on `[t0, t1]`.
pub struct OdeProblem<F> {
    pub rhs: F,
    pub y0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub step: f64,
}

/// Sampled states at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step<F>(rhs: &F, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let axpy = |k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, &axpy(&k1, 0.5 * h));
    let k3 = rhs(t + 0.5 * h, &axpy(&k2, 0.5 * h));
    let k4 = rhs(t + h, &axpy(&k3, h));
    (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Number of steps of size `h` covering `span`; the step must divide the
/// span up to rounding.
pub(crate) fn step_count(span: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(span >= 0.0) {
        return Err(Error::usage("integration needs a positive step and t1 >= t0"));
    }
    let n = (span / h).round();
    if (n * h - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::usage(format!("step {h} does not divide the span {span}")));
    }
    Ok(n as usize)
}

/// Integrates with RK4, recording every step.
pub fn rk4_integrate<F>(problem: &OdeProblem<F>) -> Result<Trajectory>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let h = problem.step;
    let n = step_count(problem.t1 - problem.t0, h)?;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(problem.t0);
    states.push(problem.y0.clone());
    for k in 0..n {
        let t = problem.t0 + k as f64 * h;
        let y = rk4_step(&problem.rhs, t, &states[k], h);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: t,
                reason: "non-finite state".into(),
            });
        }
        times.push(problem.t0 + (k + 1) as f64 * h);
        states.push(y);
    }
    Ok(Trajectory { times, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_problem(h: f64) -> OdeProblem<impl Fn(f64, &[f64]) -> Vec<f64>> {
        OdeProblem {
            rhs: |_t: f64, y: &[f64]| vec![y[0]],
            y0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
            step: h,
        }
    }

    #[test]
    fn one_step_of_exponential() {
        let y = rk4_step(&|_t: f64, y: &[f64]| vec![y[0]], 0.0, &[1.0], 0.1);
        assert!((y[0] - 1.10517083).abs() < 5e-9);
        assert!((y[0] - 0.1f64.exp()).abs() > 5e-8);
    }

    #[test]
    fn zero_rhs_is_constant() {
        let p = OdeProblem {
            rhs: |_t: f64, y: &[f64]| vec![0.0; y.len()],
            y0: vec![2.0, -3.0],
            t0: 0.0,
            t1: 1.0,
            step: 0.25,
        };
        let tr = rk4_integrate(&p).unwrap();
        assert_eq!(tr.times.len(), 5);
        assert!(tr.states.iter().all(|s| s == &vec![2.0, -3.0]));
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn fourth_order_convergence() {
        let e1 = (rk4_integrate(&exp_problem(0.1)).unwrap().last()[0] - 1f64.exp()).abs();
        let e2 = (rk4_integrate(&exp_problem(0.05)).unwrap().last()[0] - 1f64.exp()).abs();
        assert!((e1 / e2).log2() >= 3.8);
    }

    #[test]
    fn blow_up_reports_time() {
        let p = OdeProblem {
            rhs: |_t: f64, y: &[f64]| vec![y[0] * y[0]],
            y0: vec![1.0],
            t0: 0.0,
            t1: 2.0,
            step: 0.01,
        };
        match rk4_integrate(&p) {
            Err(Error::Divergence { time, .. }) => assert!(time > 0.9 && time < 2.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn step_must_divide_span() {
        assert!(step_count(1.0, 0.3).is_err());
        assert_eq!(step_count(5.0, 1e-3).unwrap(), 5000);
        assert!(step_count(1.0, 0.0).is_err());
    }
}
