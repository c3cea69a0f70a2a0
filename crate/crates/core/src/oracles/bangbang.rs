use super::ode::{rk4_step, step_count};
use crate::error::{Error, Result};

/// Time-optimal solution for the double integrator `ẋ₁ = x₂, ẋ₂ = u`,
/// `|u| ≤ 1`, steering `x₀` to the origin with a single switch.
///
/// The control is `a` on `[0, t_m]` and `−a` on `[t_m, t_f]`; the costates
/// are `λ₁ = c₁`, `λ₂ = −c₁t + c₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BangBang {
    pub x0: [f64; 2],
    pub t_f: f64,
    pub t_m: f64,
    pub a: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Solves the one-switch case.
///
/// With `a = −sign(p₀ + v₀|v₀|/2)`, matching the terminal state gives
/// `t_m = −a v₀ + √(v₀²/2 − a p₀)` and `t_f = 2t_m + a v₀`; `λ₂(t_m) = 0` and
/// `1 + λ₂(t_f)u(t_f) = 0` fix `c₁ = −a/(t_f − t_m)`, `c₂ = c₁t_m`.
pub fn bangbang_analytic(x0: [f64; 2]) -> Result<BangBang> {
    let [p0, v0] = x0;
    let s = p0 + 0.5 * v0 * v0.abs();
    if s == 0.0 {
        return Err(Error::NotImplemented(
            "initial state on the switching curve (no switch)".into(),
        ));
    }
    let a = -s.signum();
    let t_m = -a * v0 + (0.5 * v0 * v0 - a * p0).sqrt();
    let d = t_m + a * v0;
    if !(t_m > 0.0 && d > 0.0) {
        return Err(Error::NotImplemented(format!(
            "initial state {x0:?} has no interior switch"
        )));
    }
    let t_f = t_m + d;
    let c1 = -a / d;
    Ok(BangBang {
        x0,
        t_f,
        t_m,
        a,
        c1,
        c2: c1 * t_m,
    })
}

impl BangBang {
    pub fn control(&self, t: f64) -> f64 {
        if t < self.t_m {
            self.a
        } else {
            -self.a
        }
    }

    /// `(x₁, x₂)` at `t ∈ [0, t_f]`.
    pub fn state(&self, t: f64) -> [f64; 2] {
        let [p0, v0] = self.x0;
        let a = self.a;
        if t <= self.t_m {
            [p0 + v0 * t + 0.5 * a * t * t, v0 + a * t]
        } else {
            let tm = self.t_m;
            let x1m = p0 + v0 * tm + 0.5 * a * tm * tm;
            let x2m = v0 + a * tm;
            let s = t - tm;
            [x1m + x2m * s - 0.5 * a * s * s, x2m - a * s]
        }
    }

    /// `(ẋ₁, ẋ₂)`.
    pub fn state_dot(&self, t: f64) -> [f64; 2] {
        [self.state(t)[1], self.control(t)]
    }

    pub fn costate(&self, t: f64) -> [f64; 2] {
        [self.c1, -self.c1 * t + self.c2]
    }

    /// Rows `t, x₁, x₂, λ₁, λ₂, u` on a uniform grid over `[0, t_f]`.
    pub fn table(&self, points: usize) -> Vec<Vec<f64>> {
        let points = points.max(2);
        (0..points)
            .map(|i| {
                let t = self.t_f * i as f64 / (points - 1) as f64;
                let x = self.state(t);
                let l = self.costate(t);
                vec![t, x[0], x[1], l[0], l[1], self.control(t)]
            })
            .collect()
    }
}

/// Outcome of a closed-loop min-time rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct MinTimeRollout {
    pub times: Vec<f64>,
    pub states: Vec<[f64; 2]>,
    /// First step boundary with `‖x‖ ≤ ε`.
    pub hit_time: Option<f64>,
    /// Smallest `‖x‖` seen.
    pub closest: f64,
}

/// Integrates `ẋ = (x₂, u(t))` from `x0` until `‖x‖ ≤ ε` or `t > T`.
pub fn rollout_mintime<U>(u: U, x0: [f64; 2], eps: f64, horizon: f64, h: f64) -> Result<MinTimeRollout>
where
    U: Fn(f64) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::usage("target radius must be positive"));
    }
    let steps = step_count(horizon, h)?;
    let rhs = |t: f64, y: &[f64]| vec![y[1], u(t)];
    let norm = |x: &[f64; 2]| x[0].hypot(x[1]);
    let mut times = vec![0.0];
    let mut states = vec![x0];
    let mut closest = norm(&x0);
    let mut hit_time = (closest <= eps).then_some(0.0);
    let mut k = 0;
    while hit_time.is_none() && k < steps {
        let t = k as f64 * h;
        let y = rk4_step(&rhs, t, &states[k], h);
        let x = [y[0], y[1]];
        k += 1;
        let t1 = k as f64 * h;
        times.push(t1);
        states.push(x);
        let r = norm(&x);
        closest = closest.min(r);
        if r <= eps {
            hit_time = Some(t1);
        }
    }
    Ok(MinTimeRollout {
        times,
        states,
        hit_time,
        closest,
    })
}
