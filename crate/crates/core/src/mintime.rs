//! Minimum-time control of the double integrator with a learnable terminal
//! time.
//!
//! Estimators: state `x_θ(t) ∈ ℝ²`, costate `λ_θ(t) ∈ ℝ²` and a control
//! network reading `(x, λ)` with a bounded head, so the trained control is
//! `u_θ(t) = u_net(x_θ(t), λ_θ(t))`. The terminal time `t_f` is a parameter
//! fed to the state and costate networks as their time input, which makes
//! the terminal residuals differentiable in `t_f`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{glorot_values, Head, LearnableScalar, Mlp, NetworkShape};
use crate::oracles::BangBang;
use crate::variational::{AlternatingProblem, Term, VariationalProblem};

/// Lower clamp of the learnable terminal time.
pub const MIN_TERMINAL_TIME: f64 = 1e-3;

/// Below this `|λ₂|` the optimal control is indeterminate.
pub const INDETERMINATE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinTimeSetup {
    pub x0: [f64; 2],
    pub xf: [f64; 2],
    /// Sampling horizon, larger than the expected minimum time.
    pub horizon: f64,
    /// Initial value of the learnable terminal time.
    pub tf_init: f64,
}

impl Default for MinTimeSetup {
    fn default() -> Self {
        Self {
            x0: [1.0, 0.0],
            xf: [0.0, 0.0],
            horizon: 3.0,
            tf_init: 3.0,
        }
    }
}

/// `(x₂, u)`.
pub fn dynamics_rhs(x: [f64; 2], u: f64) -> [f64; 2] {
    [x[1], u]
}

/// `1 + λ₁x₂ + λ₂u`.
pub fn hamiltonian(x: [f64; 2], u: f64, lambda: [f64; 2]) -> f64 {
    1.0 + lambda[0] * x[1] + lambda[1] * u
}

/// Pointwise minimizer of the Hamiltonian over `|u| ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlChoice {
    Minus,
    Plus,
    Indeterminate,
}

impl ControlChoice {
    pub fn value(self) -> Option<f64> {
        match self {
            ControlChoice::Minus => Some(-1.0),
            ControlChoice::Plus => Some(1.0),
            ControlChoice::Indeterminate => None,
        }
    }
}

/// `−sign(λ₂)` when `|λ₂| > tol`.
pub fn control_argmin(lambda2: f64, tol: f64) -> ControlChoice {
    if lambda2.abs() <= tol {
        ControlChoice::Indeterminate
    } else if lambda2 > 0.0 {
        ControlChoice::Minus
    } else {
        ControlChoice::Plus
    }
}

#[derive(Debug, Clone)]
pub struct MinTimeProblem {
    pub setup: MinTimeSetup,
    pub state_net: Mlp,
    pub costate_net: Mlp,
    pub control_net: Mlp,
    pub tf: LearnableScalar,
    tf_offset: usize,
    pub tol: f64,
}

impl MinTimeProblem {
    pub const STATE: &'static str = "state";
    pub const COSTATE: &'static str = "costate";
    pub const CONTROL: &'static str = "control";
    pub const TF: &'static str = "t_f";

    pub fn new(setup: MinTimeSetup, shape: &NetworkShape, seed: u64) -> Result<(Self, ParameterStore)> {
        if !(setup.horizon > 0.0) {
            return Err(Error::config("mintime.horizon", "must be positive"));
        }
        if !(setup.tf_init > 0.0 && setup.tf_init <= setup.horizon) {
            return Err(Error::config("mintime.tf_init", "must lie in (0, horizon]"));
        }
        let (state, costate, control) = Self::specs(&setup, shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.push(Self::STATE, &glorot_values(&state, &mut rng))?;
        store.push(Self::COSTATE, &glorot_values(&costate, &mut rng))?;
        store.push(Self::CONTROL, &glorot_values(&control, &mut rng))?;
        store.push(Self::TF, &[setup.tf_init])?;
        Self::bind(setup, shape, &store).map(|p| (p, store))
    }

    fn specs(setup: &MinTimeSetup, shape: &NetworkShape) -> (crate::networks::MlpSpec, crate::networks::MlpSpec, crate::networks::MlpSpec) {
        (
            shape.spec(1, 2, Head::Linear).with_input_range(0.0, setup.horizon),
            shape.spec(1, 2, Head::Linear).with_input_range(0.0, setup.horizon),
            shape.spec(4, 1, Head::Bounded),
        )
    }

    pub fn bind(setup: MinTimeSetup, shape: &NetworkShape, store: &ParameterStore) -> Result<Self> {
        let (state, costate, control) = Self::specs(&setup, shape);
        let tf_offset = store
            .slice(Self::TF)
            .ok_or_else(|| Error::usage("missing terminal time parameter"))?
            .offset;
        Ok(Self {
            state_net: Mlp::bind(Self::STATE, state, store)?,
            costate_net: Mlp::bind(Self::COSTATE, costate, store)?,
            control_net: Mlp::bind(Self::CONTROL, control, store)?,
            tf: LearnableScalar::new(Self::TF, setup.tf_init).bounded(MIN_TERMINAL_TIME, setup.horizon),
            tf_offset,
            tol: INDETERMINATE_TOL,
            setup,
        })
    }

    pub fn terminal_time(&self, params: &[f64]) -> f64 {
        params[self.tf_offset]
    }

    /// `(x, λ, u)` at `t`.
    pub fn evaluate(&self, params: &[f64], t: f64) -> Result<([f64; 2], [f64; 2], f64)> {
        let x = self.state_net.forward(params, &[t])?;
        let l = self.costate_net.forward(params, &[t])?;
        let u = self.control_net.forward(params, &[x[0], x[1], l[0], l[1]])?[0];
        Ok(([x[0], x[1]], [l[0], l[1]], u))
    }

    /// Control `u_net(x, λ)` on plain inputs.
    pub fn control_of(&self, params: &[f64], x: [f64; 2], lambda: [f64; 2]) -> Result<f64> {
        Ok(self.control_net.forward(params, &[x[0], x[1], lambda[0], lambda[1]])?[0])
    }

    /// Path residuals on batch nodes: `x` and `λ` carry time derivatives in
    /// channel 1, `u` is a plain column. Returns `(ψ₁, ψ₂, ψ₃)` where `ψ₃` is
    /// the Hamiltonian regret `λ₂u + |λ₂|` with indeterminate rows zeroed.
    pub fn record_path_residuals(
        &self,
        tape: &mut Tape<'_>,
        x_full: NodeId,
        l_full: NodeId,
        u: NodeId,
    ) -> Result<[NodeId; 3]> {
        let rows = tape.value(x_full).rows();
        let x_dot = tape.channel(x_full, 1)?;
        let l = tape.channel(l_full, 0)?;
        let l_dot = tape.channel(l_full, 1)?;
        let x = tape.channel(x_full, 0)?;

        let x2 = tape.cols(x, 1, 1)?;
        let rhs = tape.concat(vec![x2, u])?;
        let psi1 = tape.sub(x_dot, rhs)?;

        let l1 = tape.cols(l, 0, 1)?;
        let zero = tape.constant(Tensor::from_values(rows, 1, vec![0.0; rows]));
        let costate_rhs = tape.concat(vec![zero, l1])?;
        let psi2 = tape.add(l_dot, costate_rhs)?;

        let l2 = tape.cols(l, 1, 1)?;
        let l2v = tape.value(l2).chan(0).to_vec();
        let sign: Vec<f64> = l2v
            .iter()
            .map(|&v| if v.abs() <= self.tol { 0.0 } else { v.signum() })
            .collect();
        let mask: Vec<f64> = sign.iter().map(|s| s.abs()).collect();
        let sign = tape.constant(Tensor::from_values(rows, 1, sign));
        let mask = tape.constant(Tensor::from_values(rows, 1, mask));
        let l2u = tape.mul(l2, u)?;
        let l2u = tape.mul(l2u, mask)?;
        let abs_l2 = tape.mul(l2, sign)?;
        let psi3 = tape.add(l2u, abs_l2)?;
        Ok([psi1, psi2, psi3])
    }

    fn record_control(&self, tape: &mut Tape<'_>, x: NodeId, l: NodeId) -> Result<NodeId> {
        let xv = tape.channel(x, 0)?;
        let lv = tape.channel(l, 0)?;
        let input = tape.concat(vec![xv, lv])?;
        self.control_net.record(tape, input)
    }

    /// Point residuals with the terminal time given as a `1 × 1` node:
    /// `x(0) − x₀`, `x(t_f) − x_f` and `1 + λ₁x₂ + λ₂u` at `t_f`.
    pub fn record_point_residuals(&self, tape: &mut Tape<'_>, tf: NodeId) -> Result<[NodeId; 3]> {
        let x0 = self.state_net.record_values(tape, 1, vec![0.0])?;
        let x0_target = tape.constant(Tensor::from_values(1, 2, self.setup.x0.to_vec()));
        let r0 = tape.sub(x0, x0_target)?;

        let xf = self.state_net.record(tape, tf)?;
        let lf = self.costate_net.record(tape, tf)?;
        let xf_target = tape.constant(Tensor::from_values(1, 2, self.setup.xf.to_vec()));
        let rf = tape.sub(xf, xf_target)?;

        let uf = self.record_control(tape, xf, lf)?;
        let x2 = tape.cols(xf, 1, 1)?;
        let l1 = tape.cols(lf, 0, 1)?;
        let l2 = tape.cols(lf, 1, 1)?;
        let a = tape.mul(l1, x2)?;
        let b = tape.mul(l2, uf)?;
        let h = tape.add(a, b)?;
        let h = tape.add_const(h, 1.0);
        Ok([r0, rf, h])
    }

    /// Root-mean-square path residuals `(ψ₁, ψ₂, ψ₃)` of the analytic
    /// bang-bang solution at `times`; the networks are not used.
    pub fn oracle_closure(&self, params: &[f64], b: &BangBang, times: &[f64]) -> Result<[f64; 3]> {
        let rows = times.len();
        let (mut xv, mut xd, mut lv, mut ld, mut uv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &t in times {
            xv.extend(b.state(t));
            xd.extend(b.state_dot(t));
            lv.extend(b.costate(t));
            ld.extend([0.0, -b.c1]);
            uv.push(b.control(t));
        }
        let mut tape = Tape::new(params);
        let z = vec![0.0; 2 * rows];
        let x = tape.constant(Tensor::from_channels(rows, 2, xv, xd, z.clone()));
        let l = tape.constant(Tensor::from_channels(rows, 2, lv, ld, z));
        let u = tape.constant(Tensor::from_values(rows, 1, uv));
        let r = self.record_path_residuals(&mut tape, x, l, u)?;
        let rms = |tape: &mut Tape<'_>, n: NodeId| {
            let s = tape.sum_squares(n);
            (tape.scalar(s) / rows.max(1) as f64).sqrt()
        };
        Ok([rms(&mut tape, r[0]), rms(&mut tape, r[1]), rms(&mut tape, r[2])])
    }

    /// Times at which the path conditions apply: `t ≤ t_f`.
    pub fn active_times(&self, params: &[f64], times: &[f64]) -> Vec<f64> {
        let tf = self.terminal_time(params);
        times.iter().copied().filter(|&t| t <= tf).collect()
    }

    /// Trajectory rows `t, x₁, x₂, λ₁, λ₂, u`.
    pub fn trajectory(&self, params: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
        times
            .iter()
            .map(|&t| {
                let (x, l, u) = self.evaluate(params, t)?;
                Ok(vec![t, x[0], x[1], l[0], l[1], u])
            })
            .collect()
    }
}

impl VariationalProblem for MinTimeProblem {
    fn name(&self) -> &str {
        "mintime"
    }

    fn horizon(&self) -> f64 {
        self.setup.horizon
    }

    fn path_terms(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<Vec<Term>> {
        let active = self.active_times(tape.params(), times);
        let names = ["psi_dynamics", "psi_costate", "psi_control"];
        if active.is_empty() {
            return Ok(names
                .iter()
                .map(|n| {
                    let z = tape.constant_scalar(0.0);
                    Term::condition(n, z)
                })
                .collect());
        }
        let x = self.state_net.record_times(tape, &active)?;
        let l = self.costate_net.record_times(tape, &active)?;
        let u = self.record_control(tape, x, l)?;
        let psi = self.record_path_residuals(tape, x, l, u)?;
        Ok(names
            .iter()
            .zip(psi)
            .map(|(n, p)| {
                let s = tape.sum_squares(p);
                Term::condition(n, s)
            })
            .collect())
    }

    fn point_terms(&self, tape: &mut Tape<'_>) -> Result<Vec<Term>> {
        let tf = tape.param(self.tf_offset, 1, 1)?;
        let [r0, rf, h] = self.record_point_residuals(tape, tf)?;
        let s0 = tape.sum_squares(r0);
        let sf = tape.sum_squares(rf);
        let sh = tape.sum_squares(h);
        Ok(vec![
            Term::boundary("initial_state", s0),
            Term::boundary("terminal_state", sf),
            Term::condition("psi_transversality", sh),
        ])
    }

    fn scalar_names(&self) -> Vec<String> {
        vec![Self::TF.to_string()]
    }

    fn project(&self, params: &mut ParameterStore) {
        if let Some(v) = params.scalar(Self::TF) {
            let _ = params.set_scalar(Self::TF, self.tf.clamp(v));
        }
    }
}

impl AlternatingProblem for MinTimeProblem {
    fn control_slices(&self) -> Vec<String> {
        vec![Self::CONTROL.to_string()]
    }

    fn state_slices(&self) -> Vec<String> {
        vec![Self::STATE.to_string(), Self::COSTATE.to_string(), Self::TF.to_string()]
    }

    fn control_input_box(&self, params: &[f64], times: &[f64]) -> Result<Vec<(f64, f64)>> {
        let mut active = self.active_times(params, times);
        if active.is_empty() {
            active.push(0.0);
        }
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); 4];
        for &t in &active {
            let x = self.state_net.forward(params, &[t])?;
            let l = self.costate_net.forward(params, &[t])?;
            for (b, v) in bounds.iter_mut().zip(x.iter().chain(&l)) {
                b.0 = b.0.min(*v);
                b.1 = b.1.max(*v);
            }
        }
        Ok(bounds)
    }

    fn hamiltonian_loss(&self, tape: &mut Tape<'_>, inputs: &[f64]) -> Result<NodeId> {
        let rows = inputs.len() / 4;
        let input = tape.constant(Tensor::from_values(rows, 4, inputs.to_vec()));
        let u = self.control_net.record(tape, input)?;
        let x2 = tape.cols(input, 1, 1)?;
        let l1 = tape.cols(input, 2, 1)?;
        let l2 = tape.cols(input, 3, 1)?;
        let a = tape.mul(l1, x2)?;
        let b = tape.mul(l2, u)?;
        let h = tape.add(a, b)?;
        let h = tape.add_const(h, 1.0);
        let s = tape.sum(h);
        Ok(tape.scale(s, 1.0 / rows as f64))
    }
}

/// Summary statistics of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinTimeDiagnostics {
    pub t_f: f64,
    /// Zero crossing of `λ₂,θ` on `[0, t_f]`, if any.
    pub switch_time: Option<f64>,
    /// Number of sign changes of `λ₂,θ` on `[0, t_f]`.
    pub sign_changes: usize,
    pub lambda1_variance: f64,
    /// Root-mean-square residual of a least-squares line through `λ₂,θ`,
    /// divided by the range of `λ₂,θ`.
    pub lambda2_affine_residual: f64,
}

pub fn diagnostics(problem: &MinTimeProblem, params: &[f64], points: usize) -> Result<MinTimeDiagnostics> {
    let tf = problem.terminal_time(params);
    let points = points.max(3);
    let ts: Vec<f64> = (0..points).map(|i| tf * i as f64 / (points - 1) as f64).collect();
    let mut l1 = Vec::with_capacity(points);
    let mut l2 = Vec::with_capacity(points);
    for &t in &ts {
        let l = problem.costate_net.forward(params, &[t])?;
        l1.push(l[0]);
        l2.push(l[1]);
    }
    let n = points as f64;
    let mean1 = l1.iter().sum::<f64>() / n;
    let lambda1_variance = l1.iter().map(|v| (v - mean1).powi(2)).sum::<f64>() / n;

    let mt = ts.iter().sum::<f64>() / n;
    let m2 = l2.iter().sum::<f64>() / n;
    let stt: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
    let st2: f64 = ts.iter().zip(&l2).map(|(t, v)| (t - mt) * (v - m2)).sum();
    let slope = if stt > 0.0 { st2 / stt } else { 0.0 };
    let rms_res = (ts
        .iter()
        .zip(&l2)
        .map(|(t, v)| (v - (m2 + slope * (t - mt))).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let range = l2.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - l2.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda2_affine_residual = if range > 0.0 { rms_res / range } else { 0.0 };

    let mut switch_time = None;
    let mut sign_changes = 0;
    for i in 1..points {
        if (l2[i - 1] > 0.0) != (l2[i] > 0.0) {
            sign_changes += 1;
            if switch_time.is_none() {
                let w = l2[i - 1] / (l2[i - 1] - l2[i]);
                switch_time = Some(ts[i - 1] + w * (ts[i] - ts[i - 1]));
            }
        }
    }
    Ok(MinTimeDiagnostics {
        t_f: tf,
        switch_time,
        sign_changes,
        lambda1_variance,
        lambda2_affine_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::bangbang_analytic;

    #[test]
    fn dynamics_and_hamiltonian_examples() {
        assert_eq!(dynamics_rhs([1.0, 0.0], -1.0), [0.0, -1.0]);
        assert_eq!(dynamics_rhs([0.5, -1.0], 1.0), [-1.0, 1.0]);
        assert_eq!(dynamics_rhs([3.0, 2.0], 0.0), [2.0, 0.0]);
        assert_eq!(hamiltonian([0.3, 0.7], 0.4, [0.0, 0.0]), 1.0);
        assert_eq!(hamiltonian([0.0, 0.0], 1.0, [0.0, -1.0]), 0.0);
        assert_eq!(hamiltonian([0.0, 2.0], -1.0, [1.0, 1.0]), 2.0);
    }

    #[test]
    fn control_argmin_examples() {
        assert_eq!(control_argmin(0.5, 1e-3), ControlChoice::Minus);
        assert_eq!(control_argmin(-2.0, 1e-3), ControlChoice::Plus);
        assert_eq!(control_argmin(0.0, 1e-3), ControlChoice::Indeterminate);
        assert_eq!(control_argmin(5e-4, 1e-3), ControlChoice::Indeterminate);
    }

    #[test]
    fn residuals_vanish_on_analytic_solution() {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        let times: Vec<f64> = (0..=200).map(|i| 0.01 * i as f64).filter(|t| (t - 1.0f64).abs() > 1e-3).collect();
        let b = bangbang_analytic([1.0, 0.0]).unwrap();
        for r in p.oracle_closure(store.values(), &b, &times).unwrap() {
            assert!(r < 1e-12);
        }
        let lf = b.costate(2.0);
        assert_eq!(hamiltonian(b.state(2.0), b.control(2.0), lf), 0.0);
    }

    #[test]
    fn regret_is_nonnegative_and_zero_at_argmin() {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        let mut tape = Tape::new(store.values());
        let rows = 6;
        let lam2 = [0.7, -0.3, 0.0005, 2.0, -1.0, 0.2];
        let uu = [0.2, -0.9, 0.5, -1.0, 1.0, 0.99];
        let mut lv = Vec::new();
        for v in lam2 {
            lv.extend([1.0, v]);
        }
        let z = vec![0.0; 2 * rows];
        let x = tape.constant(Tensor::from_channels(rows, 2, z.clone(), z.clone(), z.clone()));
        let l = tape.constant(Tensor::from_channels(rows, 2, lv, z.clone(), z));
        let u = tape.constant(Tensor::from_values(rows, 1, uu.to_vec()));
        let [_, _, r] = p.record_path_residuals(&mut tape, x, l, u).unwrap();
        let r = tape.value(r).chan(0).to_vec();
        assert!(r.iter().all(|&v| v >= 0.0));
        assert_eq!(r[2], 0.0);
        assert_eq!(r[3], 0.0);
        assert_eq!(r[4], 0.0);
        assert!((r[0] - 0.7 * 1.2).abs() < 1e-15);
    }

    #[test]
    fn terminal_time_is_clamped() {
        let (p, mut store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        store.set_scalar(MinTimeProblem::TF, -0.1).unwrap();
        p.project(&mut store);
        assert_eq!(store.scalar(MinTimeProblem::TF), Some(MIN_TERMINAL_TIME));
        store.set_scalar(MinTimeProblem::TF, 7.0).unwrap();
        p.project(&mut store);
        assert_eq!(store.scalar(MinTimeProblem::TF), Some(3.0));
    }

    #[test]
    fn zero_networks_have_unit_initial_residual() {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        let mut zero = vec![0.0; store.len()];
        zero[p.tf_offset] = 2.0;
        let mut tape = Tape::new(&zero);
        let terms = p.point_terms(&mut tape).unwrap();
        assert_eq!(tape.scalar(terms[0].node), 1.0);
    }

    #[test]
    fn terminal_residual_gradient_in_tf() {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 6, hidden_layers: 2 }, 3).unwrap();
        let build = |tape: &mut Tape<'_>| {
            let terms = p.point_terms(tape)?;
            crate::variational::assemble_terms(tape, &terms, 1.0, 1.0)
        };
        let err = crate::autodiff::finite_difference_check(build, store.values(), 1e-6).unwrap();
        assert!(err < 1e-4);
        let mut tape = Tape::new(store.values());
        let loss = build(&mut tape).unwrap();
        tape.finalize(loss).unwrap();
        let g = tape.gradient().unwrap();
        assert!(g[p.tf_offset] != 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (p, mut store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 6, hidden_layers: 2 }, 5).unwrap();
        store.set_scalar(MinTimeProblem::TF, 2.5).unwrap();
        let times: Vec<f64> = (0..10).map(|i| 0.27 * i as f64).collect();
        let build = |tape: &mut Tape<'_>| {
            let mut terms = p.path_terms(tape, &times)?;
            terms.extend(p.point_terms(tape)?);
            crate::variational::assemble_terms(tape, &terms, 1.0, 0.1)
        };
        let err = crate::autodiff::finite_difference_check(build, store.values(), 1e-6).unwrap();
        assert!(err < 1e-4, "{err:e}");
    }

    #[test]
    fn diagnostics_on_affine_costate() {
        let (p, store) = MinTimeProblem::new(MinTimeSetup::default(), &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        let d = diagnostics(&p, store.values(), 100).unwrap();
        assert!(d.lambda1_variance.is_finite() && d.lambda2_affine_residual.is_finite());
        assert_eq!(d.t_f, 3.0);
    }
}
