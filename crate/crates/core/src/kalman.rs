//! Optimal Kalman gain as a fixed-horizon variational problem.
//!
//! The error covariance obeys `Σ̇ = (A−GC)Σ + Σ(A−GC)ᵀ + BQBᵀ + GRGᵀ` and the
//! cost is `tr Σ(T)`. Three networks are trained: `Σ_θ(t)` (PSD head),
//! `λ_θ(t)` (symmetric head) and the gain `G_θ(Σ)` which reads the flattened
//! covariance.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{glorot_values, Head, Mlp, MlpSpec, NetworkShape};
use crate::oracles::RiccatiSolution;
use crate::variational::{ResidualReport, Term, VariationalProblem};

/// Linear system, noise intensities and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
    pub horizon: f64,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

impl KalmanSystem {
    /// Planar double integrator with unit noise intensities, `Σ₀ = I` and
    /// `T = 5`.
    pub fn double_integrator() -> Self {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        Self {
            a,
            b,
            c: DMatrix::identity(4, 4),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(4, 4),
            sigma0: DMatrix::identity(4, 4),
            horizon: 5.0,
        }
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Measurement dimension `m`; the gain is `n × m`.
    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        let shape = |key: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                Err(Error::config(key, format!("expected {r}x{c}, got {}x{}", mat.nrows(), mat.ncols())))
            } else if mat.iter().any(|v| !v.is_finite()) {
                Err(Error::config(key, "entries must be finite"))
            } else {
                Ok(())
            }
        };
        shape("kalman.a", &self.a, n, n)?;
        shape("kalman.b", &self.b, n, self.b.ncols())?;
        shape("kalman.c", &self.c, m, n)?;
        shape("kalman.q", &self.q, self.b.ncols(), self.b.ncols())?;
        shape("kalman.r", &self.r, m, m)?;
        shape("kalman.sigma0", &self.sigma0, n, n)?;
        for (key, mat) in [("kalman.q", &self.q), ("kalman.sigma0", &self.sigma0), ("kalman.r", &self.r)] {
            if !is_symmetric(mat) {
                return Err(Error::config(key, "matrix must be symmetric"));
            }
        }
        if min_eigenvalue(&self.q) < -1e-12 {
            return Err(Error::config("kalman.q", "matrix must be positive semidefinite"));
        }
        if min_eigenvalue(&self.sigma0) < -1e-12 {
            return Err(Error::config("kalman.sigma0", "matrix must be positive semidefinite"));
        }
        if min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::config("kalman.r", "matrix must be positive definite"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("kalman.horizon", "must be positive"));
        }
        Ok(())
    }

    pub fn r_inv(&self) -> Result<DMatrix<f64>> {
        self.r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::usage("measurement noise matrix is singular"))
    }

    /// Optimal gain for a given covariance, `ΣCᵀR⁻¹`.
    pub fn optimal_gain(&self, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(sigma * self.c.transpose() * self.r_inv()?)
    }

    fn check(&self, what: &str, m: &DMatrix<f64>, r: usize, c: usize) -> Result<()> {
        if m.nrows() != r || m.ncols() != c {
            return Err(Error::usage(format!(
                "{what} must be {r}x{c}, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(())
    }

    /// `[A−GC]Σ + Σ[A−GC]ᵀ + BQBᵀ + GRGᵀ`.
    pub fn sigma_rhs(&self, sigma: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m());
        self.check("covariance", sigma, n, n)?;
        self.check("gain", g, n, m)?;
        let f = &self.a - g * &self.c;
        Ok(&f * sigma + sigma * f.transpose() + &self.b * &self.q * self.b.transpose() + g * &self.r * g.transpose())
    }

    /// `−λ[A−GC] − [A−GC]ᵀλ`.
    pub fn costate_rhs(&self, lambda: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m());
        self.check("costate", lambda, n, n)?;
        self.check("gain", g, n, m)?;
        let f = &self.a - g * &self.c;
        Ok(-(lambda * &f) - f.transpose() * lambda)
    }

    /// `∂ tr(λᵀ Σ̇) / ∂G = 2λ(GR − ΣCᵀ)` for symmetric `λ`.
    pub fn hamiltonian_grad_g(
        &self,
        lambda: &DMatrix<f64>,
        sigma: &DMatrix<f64>,
        g: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m());
        self.check("costate", lambda, n, n)?;
        self.check("covariance", sigma, n, n)?;
        self.check("gain", g, n, m)?;
        Ok(2.0 * lambda * (g * &self.r - sigma * self.c.transpose()))
    }

    /// `‖AΣ + ΣAᵀ + BQBᵀ − ΣCᵀR⁻¹CΣ‖` (Frobenius).
    pub fn algebraic_riccati_residual(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        let g = self.optimal_gain(sigma)?;
        Ok(self.sigma_rhs(sigma, &g)?.norm())
    }
}

/// Row-major flattening.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Inverse of [`flatten`].
pub fn unflatten(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// Residual definition of the optimal gain problem.
#[derive(Debug, Clone)]
pub struct KalmanProblem {
    pub sys: KalmanSystem,
    pub sigma_net: Mlp,
    pub lambda_net: Mlp,
    pub gain_net: Mlp,
    /// Replace the necessary conditions by the direct `tr Σ(T)` objective.
    pub direct_cost: bool,
    r_inv: DMatrix<f64>,
}

impl KalmanProblem {
    pub const SIGMA: &'static str = "sigma";
    pub const LAMBDA: &'static str = "lambda";
    pub const GAIN: &'static str = "gain";

    /// Builds the three networks with Glorot initialization.
    pub fn new(sys: KalmanSystem, shape: &NetworkShape, seed: u64) -> Result<(Self, ParameterStore)> {
        sys.validate()?;
        let (n, m) = (sys.n(), sys.m());
        let hidden = |out: usize, inp: usize, head: Head| shape.spec(inp, out, head);
        let sigma_spec = hidden(n * n, 1, Head::Psd).with_input_range(0.0, sys.horizon);
        let lambda_spec = hidden(n * n, 1, Head::Symmetric).with_input_range(0.0, sys.horizon);
        let gain_spec = hidden(n * m, n * n, Head::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.push(Self::SIGMA, &glorot_values(&sigma_spec, &mut rng))?;
        store.push(Self::LAMBDA, &glorot_values(&lambda_spec, &mut rng))?;
        store.push(Self::GAIN, &glorot_values(&gain_spec, &mut rng))?;
        Self::bind(sys, sigma_spec, lambda_spec, gain_spec, &store).map(|p| (p, store))
    }

    pub fn bind(
        sys: KalmanSystem,
        sigma_spec: MlpSpec,
        lambda_spec: MlpSpec,
        gain_spec: MlpSpec,
        store: &ParameterStore,
    ) -> Result<Self> {
        sys.validate()?;
        let r_inv = sys.r_inv()?;
        Ok(Self {
            sigma_net: Mlp::bind(Self::SIGMA, sigma_spec, store)?,
            lambda_net: Mlp::bind(Self::LAMBDA, lambda_spec, store)?,
            gain_net: Mlp::bind(Self::GAIN, gain_spec, store)?,
            direct_cost: false,
            r_inv,
            sys,
        })
    }

    fn const_matrix(tape: &mut Tape<'_>, m: &DMatrix<f64>) -> NodeId {
        tape.constant(Tensor::from_values(1, m.len(), flatten(m)))
    }

    /// Records `(Σ̇ − rhs, λ̇ − costate rhs, 2λ(GR − ΣCᵀ))` for a batch,
    /// each as a `rows × entries` value node.
    pub fn record_residuals(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<[NodeId; 3]> {
        let sigma_full = self.sigma_net.record_times(tape, times)?;
        let lambda_full = self.lambda_net.record_times(tape, times)?;
        self.record_residuals_from(tape, sigma_full, lambda_full, None)
    }

    /// Residuals for given covariance and costate nodes carrying time
    /// derivatives in their first derivative channel. Without an explicit
    /// `gain` node the gain network is applied to the covariance.
    pub fn record_residuals_from(
        &self,
        tape: &mut Tape<'_>,
        sigma_full: NodeId,
        lambda_full: NodeId,
        gain: Option<NodeId>,
    ) -> Result<[NodeId; 3]> {
        let (n, m) = (self.sys.n(), self.sys.m());
        let sigma = tape.channel(sigma_full, 0)?;
        let sigma_dot = tape.channel(sigma_full, 1)?;
        let lambda = tape.channel(lambda_full, 0)?;
        let lambda_dot = tape.channel(lambda_full, 1)?;
        let g = match gain {
            Some(g) => g,
            None => self.gain_net.record(tape, sigma)?,
        };

        let a = Self::const_matrix(tape, &self.sys.a);
        let c = Self::const_matrix(tape, &self.sys.c);
        let r = Self::const_matrix(tape, &self.sys.r);
        let bqbt = Self::const_matrix(tape, &(&self.sys.b * &self.sys.q * self.sys.b.transpose()));
        let ct = Self::const_matrix(tape, &self.sys.c.transpose());

        // F = A − GC
        let gc = tape.batch_matmul(g, c, n, m, n)?;
        let f = tape.sub(a, gc)?;
        let ft = tape.transpose(f, n, n)?;

        // ψ₁
        let fs = tape.batch_matmul(f, sigma, n, n, n)?;
        let sft = tape.batch_matmul(sigma, ft, n, n, n)?;
        let gr = tape.batch_matmul(g, r, n, m, m)?;
        let gt = tape.transpose(g, n, m)?;
        let grgt = tape.batch_matmul(gr, gt, n, m, n)?;
        let mut rhs = tape.add(fs, sft)?;
        rhs = tape.add(rhs, bqbt)?;
        rhs = tape.add(rhs, grgt)?;
        let psi1 = tape.sub(sigma_dot, rhs)?;

        // ψ₂: λ̇ + λF + Fᵀλ
        let lf = tape.batch_matmul(lambda, f, n, n, n)?;
        let ftl = tape.batch_matmul(ft, lambda, n, n, n)?;
        let mut psi2 = tape.add(lambda_dot, lf)?;
        psi2 = tape.add(psi2, ftl)?;

        // ψ₃ = 2λ(GR − ΣCᵀ)
        let sct = tape.batch_matmul(sigma, ct, n, n, m)?;
        let diff = tape.sub(gr, sct)?;
        let ld = tape.batch_matmul(lambda, diff, n, n, m)?;
        let psi3 = tape.scale(ld, 2.0);
        Ok([psi1, psi2, psi3])
    }

    /// `Σ_θ(t)` as a matrix.
    pub fn sigma_at(&self, params: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let n = self.sys.n();
        Ok(unflatten(n, n, &self.sigma_net.forward(params, &[t])?))
    }

    pub fn lambda_at(&self, params: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let n = self.sys.n();
        Ok(unflatten(n, n, &self.lambda_net.forward(params, &[t])?))
    }

    /// `G_θ(Σ)`.
    pub fn gain_of(&self, params: &[f64], sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(unflatten(self.sys.n(), self.sys.m(), &self.gain_net.forward(params, &flatten(sigma))?))
    }

    /// Relative gap `‖G_θ(Σ) − ΣCᵀR⁻¹‖ / ‖ΣCᵀR⁻¹‖`.
    pub fn gain_relation_error(&self, params: &[f64], sigma: &DMatrix<f64>) -> Result<f64> {
        let exact = sigma * self.sys.c.transpose() * &self.r_inv;
        let learned = self.gain_of(params, sigma)?;
        Ok((learned - &exact).norm() / exact.norm().max(1e-12))
    }

    /// Trajectory table with columns `t, Σ (n²), G (nm), λ (n²), tr Σ`.
    pub fn trajectory(&self, params: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
        times
            .iter()
            .map(|&t| {
                let s = self.sigma_at(params, t)?;
                let g = self.gain_of(params, &s)?;
                let l = self.lambda_at(params, t)?;
                let mut row = vec![t];
                row.extend(flatten(&s));
                row.extend(flatten(&g));
                row.extend(flatten(&l));
                row.push(s.trace());
                Ok(row)
            })
            .collect()
    }

    pub fn trajectory_header(&self) -> Vec<String> {
        let (n, m) = (self.sys.n(), self.sys.m());
        let mut h = vec!["t".to_string()];
        for (name, r, c) in [("sigma", n, n), ("gain", n, m), ("lambda", n, n)] {
            for i in 0..r {
                for j in 0..c {
                    h.push(format!("{name}_{i}{j}"));
                }
            }
        }
        h.push("trace_sigma".into());
        h
    }
}

/// Five-point central difference at `i` on samples spaced `h`.
fn central_difference(samples: &[DMatrix<f64>], i: usize, h: f64) -> DMatrix<f64> {
    (&samples[i - 2] - &samples[i + 2] + (&samples[i + 1] - &samples[i - 1]) * 8.0) / (12.0 * h)
}

impl KalmanProblem {
    /// Residual norms of the necessary conditions evaluated on the Riccati
    /// oracle: covariance, costate and optimal gain trajectories, with time
    /// derivatives taken by central differences of the integrated samples.
    pub fn oracle_closure(&self, sol: &RiccatiSolution) -> Result<ResidualReport> {
        let n = self.sys.n();
        let h = sol.step;
        let last = sol.costate.len() - 1;
        let idx: Vec<usize> = (2..=last.saturating_sub(2)).collect();
        if idx.is_empty() {
            return Err(Error::usage("oracle trajectory too short for differencing"));
        }
        let rows = idx.len();
        let mut sv = Vec::new();
        let mut sd = Vec::new();
        let mut lv = Vec::new();
        let mut ld = Vec::new();
        let mut gv = Vec::new();
        for &j in &idx {
            sv.extend(flatten(&sol.sigma[2 * j]));
            sd.extend(flatten(&central_difference(&sol.sigma, 2 * j, h)));
            lv.extend(flatten(&sol.costate[j]));
            ld.extend(flatten(&central_difference(&sol.costate, j, 2.0 * h)));
            gv.extend(flatten(&sol.gain[2 * j]));
        }
        let zeros = vec![0.0; rows * n * n];
        let params: Vec<f64> = Vec::new();
        let mut tape = Tape::new(&params);
        let s = tape.constant(Tensor::from_channels(rows, n * n, sv, sd, zeros.clone()));
        let l = tape.constant(Tensor::from_channels(rows, n * n, lv, ld, zeros));
        let g = tape.constant(Tensor::from_values(rows, n * self.sys.m(), gv));
        let psi = self.record_residuals_from(&mut tape, s, l, Some(g))?;
        let mut report = ResidualReport::default();
        for (name, node) in ["psi_dynamics", "psi_costate", "psi_gain"].iter().zip(psi) {
            let sq = tape.sum_squares(node);
            report.conditions.insert(name.to_string(), tape.scalar(sq) / rows as f64);
        }
        let s0 = (&sol.sigma[0] - &self.sys.sigma0).norm_squared();
        let lt = (sol.costate.last().unwrap() - DMatrix::<f64>::identity(n, n)).norm_squared();
        report.boundary.insert("initial_covariance".into(), s0);
        report.conditions.insert("psi_transversality".into(), lt);
        Ok(report)
    }
}

impl VariationalProblem for KalmanProblem {
    fn name(&self) -> &str {
        if self.direct_cost {
            "kalman-direct-cost"
        } else {
            "kalman"
        }
    }

    fn horizon(&self) -> f64 {
        self.sys.horizon
    }

    fn path_terms(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<Vec<Term>> {
        let [psi1, psi2, psi3] = self.record_residuals(tape, times)?;
        let s1 = tape.sum_squares(psi1);
        if self.direct_cost {
            return Ok(vec![Term::condition("psi_dynamics", s1)]);
        }
        let s2 = tape.sum_squares(psi2);
        let s3 = tape.sum_squares(psi3);
        Ok(vec![
            Term::condition("psi_dynamics", s1),
            Term::condition("psi_costate", s2),
            Term::condition("psi_gain", s3),
        ])
    }

    fn point_terms(&self, tape: &mut Tape<'_>) -> Result<Vec<Term>> {
        let n = self.sys.n();
        let s0 = self.sigma_net.record_values(tape, 1, vec![0.0])?;
        let target = Self::const_matrix(tape, &self.sys.sigma0);
        let d0 = tape.sub(s0, target)?;
        let b0 = tape.sum_squares(d0);
        if self.direct_cost {
            let st = self.sigma_net.record_values(tape, 1, vec![self.sys.horizon])?;
            let tr = tape.trace(st, n)?;
            return Ok(vec![
                Term::boundary("initial_covariance", b0),
                Term::boundary("terminal_cost", tr),
            ]);
        }
        let lt = self.lambda_net.record_values(tape, 1, vec![self.sys.horizon])?;
        let eye = Self::const_matrix(tape, &DMatrix::identity(n, n));
        let dt = tape.sub(lt, eye)?;
        let st = tape.sum_squares(dt);
        Ok(vec![
            Term::boundary("initial_covariance", b0),
            Term::condition("psi_transversality", st),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys() -> KalmanSystem {
        let one = DMatrix::from_element(1, 1, 1.0);
        KalmanSystem {
            a: DMatrix::zeros(1, 1),
            b: one.clone(),
            c: one.clone(),
            q: one.clone(),
            r: one.clone(),
            sigma0: one,
            horizon: 1.0,
        }
    }

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn sigma_rhs_examples() {
        let sys = KalmanSystem::double_integrator();
        let z = DMatrix::zeros(4, 4);
        let bqbt = &sys.b * &sys.q * sys.b.transpose();
        assert_eq!(sys.sigma_rhs(&z, &z).unwrap(), bqbt);
        assert_eq!(scalar_sys().sigma_rhs(&s(1.0), &s(1.0)).unwrap()[(0, 0)], 0.0);
        assert!(sys.sigma_rhs(&DMatrix::zeros(3, 3), &z).is_err());
    }

    #[test]
    fn costate_rhs_examples() {
        let sys = KalmanSystem::double_integrator();
        let z = DMatrix::zeros(4, 4);
        let i = DMatrix::identity(4, 4);
        assert_eq!(sys.costate_rhs(&i, &z).unwrap(), -(&sys.a + sys.a.transpose()));
        assert_eq!(sys.costate_rhs(&z, &z).unwrap(), z);
        let mut sc = scalar_sys();
        sc.a = s(1.0);
        assert_eq!(sc.costate_rhs(&s(2.0), &s(0.0)).unwrap()[(0, 0)], -4.0);
    }

    #[test]
    fn gain_gradient_examples() {
        let sc = scalar_sys();
        assert_eq!(sc.hamiltonian_grad_g(&s(1.0), &s(2.0), &s(5.0)).unwrap()[(0, 0)], 6.0);
        let sys = KalmanSystem::double_integrator();
        let sigma = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.3 });
        let g = sys.optimal_gain(&sigma).unwrap();
        let lam = DMatrix::from_fn(4, 4, |i, j| (i + j) as f64);
        assert!(sys.hamiltonian_grad_g(&lam, &sigma, &g).unwrap().amax() < 1e-14);
        let z = DMatrix::zeros(4, 4);
        assert_eq!(sys.hamiltonian_grad_g(&z, &sigma, &g).unwrap(), z);
    }

    #[test]
    fn validation_rejects_bad_matrices() {
        let mut sys = KalmanSystem::double_integrator();
        sys.q[(0, 1)] = 0.5;
        assert!(matches!(sys.validate(), Err(Error::Config { ref key, .. }) if key == "kalman.q"));
        let mut sys = KalmanSystem::double_integrator();
        sys.sigma0[(0, 0)] = -1.0;
        assert!(sys.validate().is_err());
        let mut sys = KalmanSystem::double_integrator();
        sys.r[(3, 3)] = 0.0;
        assert!(sys.validate().is_err());
        assert!(KalmanSystem::double_integrator().validate().is_ok());
    }

    fn small_problem(width: usize) -> (KalmanProblem, ParameterStore) {
        let shape = NetworkShape {
            width,
            hidden_layers: 2,
        };
        KalmanProblem::new(KalmanSystem::double_integrator(), &shape, 11).unwrap()
    }

    #[test]
    fn tape_residuals_match_matrix_formulas() {
        let (p, store) = small_problem(8);
        let params = store.values();
        let t = 1.3;
        let mut tape = Tape::new(params);
        let psi = p.record_residuals(&mut tape, &[t]).unwrap();
        let sigma = p.sigma_at(params, t).unwrap();
        let lambda = p.lambda_at(params, t).unwrap();
        let g = p.gain_of(params, &sigma).unwrap();
        let sd = unflatten(4, 4, &p.sigma_net.eval_with_input_derivs(params, t, 1).unwrap().1);
        let ld = unflatten(4, 4, &p.lambda_net.eval_with_input_derivs(params, t, 1).unwrap().1);
        let expect = [
            &sd - p.sys.sigma_rhs(&sigma, &g).unwrap(),
            &ld - p.sys.costate_rhs(&lambda, &g).unwrap(),
            p.sys.hamiltonian_grad_g(&lambda, &sigma, &g).unwrap(),
        ];
        for (node, e) in psi.iter().zip(&expect) {
            let got = unflatten(4, 4, tape.value(*node).chan(0));
            assert!((got - e).amax() < 1e-10 * e.amax().max(1.0));
        }
    }

    #[test]
    fn zero_networks_give_unit_boundary_per_diagonal_entry() {
        let (p, store) = small_problem(4);
        let zero = vec![0.0; store.len()];
        let mut tape = Tape::new(&zero);
        let terms = p.point_terms(&mut tape).unwrap();
        assert_eq!(tape.scalar(terms[0].node), 4.0);
    }

    #[test]
    fn direct_cost_adds_terminal_trace() {
        let (mut p, store) = small_problem(4);
        p.direct_cost = true;
        let mut tape = Tape::new(store.values());
        let terms = p.point_terms(&mut tape).unwrap();
        let tr = p.sigma_at(store.values(), 5.0).unwrap().trace();
        let term = terms.iter().find(|t| t.name == "terminal_cost").unwrap();
        assert!((tape.scalar(term.node) - tr).abs() < 1e-12);
        assert_eq!(p.path_terms(&mut tape, &[0.5]).unwrap().len(), 1);
    }

    #[test]
    fn gain_gradient_closed_form_matches_autodiff() {
        let sys = KalmanSystem::double_integrator();
        let sigma = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.5 } else { 0.2 });
        let lambda = DMatrix::from_fn(4, 4, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let g = DMatrix::from_fn(4, 4, |i, j| 0.1 * (i as f64) - 0.05 * (j as f64));
        let params = flatten(&g);
        let mut tape = Tape::new(&params);
        let gn = tape.param(0, 1, 16).unwrap();
        let c = tape.constant(Tensor::from_values(1, 16, flatten(&sys.c)));
        let a = tape.constant(Tensor::from_values(1, 16, flatten(&sys.a)));
        let r = tape.constant(Tensor::from_values(1, 16, flatten(&sys.r)));
        let s = tape.constant(Tensor::from_values(1, 16, flatten(&sigma)));
        let l = tape.constant(Tensor::from_values(1, 16, flatten(&lambda)));
        let gc = tape.batch_matmul(gn, c, 4, 4, 4).unwrap();
        let f = tape.sub(a, gc).unwrap();
        let ft = tape.transpose(f, 4, 4).unwrap();
        let fs = tape.batch_matmul(f, s, 4, 4, 4).unwrap();
        let sft = tape.batch_matmul(s, ft, 4, 4, 4).unwrap();
        let gr = tape.batch_matmul(gn, r, 4, 4, 4).unwrap();
        let gt = tape.transpose(gn, 4, 4).unwrap();
        let grgt = tape.batch_matmul(gr, gt, 4, 4, 4).unwrap();
        let x = tape.add(fs, sft).unwrap();
        let x = tape.add(x, grgt).unwrap();
        let prod = tape.mul(l, x).unwrap();
        let h = tape.sum(prod);
        tape.finalize(h).unwrap();
        let ad = unflatten(4, 4, &tape.gradient().unwrap());
        let closed = sys.hamiltonian_grad_g(&lambda, &sigma, &g).unwrap();
        assert!((ad - closed).amax() < 1e-10);
    }

    #[test]
    fn residuals_vanish_on_riccati_oracle() {
        let (p, _) = small_problem(4);
        let sol = crate::oracles::riccati_solve(&p.sys, 1e-3).unwrap();
        let rep = p.oracle_closure(&sol).unwrap();
        for (name, v) in rep.conditions.iter().chain(&rep.boundary) {
            assert!(*v < 1e-6, "{name} = {v:e}");
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (p, store) = small_problem(6);
        let times: Vec<f64> = (0..10).map(|i| 0.5 * i as f64).collect();
        let build = |tape: &mut Tape<'_>| {
            let mut terms = p.path_terms(tape, &times)?;
            terms.extend(p.point_terms(tape)?);
            crate::variational::assemble_terms(tape, &terms, 1.0, 0.1)
        };
        let err = crate::autodiff::finite_difference_check(build, store.values(), 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn flatten_round_trip() {
        let m = DMatrix::from_fn(2, 3, |i, j| (3 * i + j) as f64);
        assert_eq!(flatten(&m), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(unflatten(2, 3, &flatten(&m)), m);
    }
}
