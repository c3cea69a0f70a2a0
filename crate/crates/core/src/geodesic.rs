//! Shortest curves on implicit surfaces, trained through the energy
//! functional.
//!
//! `γ_θ : [0,1] → ℝ³` is a network with a scalar multiplier network `λ_θ(t)`
//! for the surface constraint `f(γ) = 0` and a learnable terminal multiplier
//! `λ_f` for the stopping set `φ(γ) = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{glorot_values, Head, LearnableScalar, Mlp, NetworkShape};
use crate::variational::{Term, VariationalProblem};

pub type Point = [f64; 3];

/// Implicit surface `f = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surface {
    /// `x² + y² + z² − 1`
    Sphere,
    /// `z − x² + y²`
    Hypar,
}

/// Where the curve must end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StoppingSet {
    /// `φ = (x²+y²+z²−1)² + z`, the equator of the unit sphere.
    Equator,
    /// `φ = ‖γ − p₁‖²`.
    Point(Point),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub surface: Surface,
    pub stop: StoppingSet,
    pub p0: Point,
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

const ON_SURFACE_TOL: f64 = 1e-9;

/// Unit sphere, curve from `p0` to the equator.
pub fn sphere_instance(p0: Point) -> Result<ManifoldSpec> {
    let spec = ManifoldSpec {
        surface: Surface::Sphere,
        stop: StoppingSet::Equator,
        p0,
    };
    if spec.f(&p0).abs() > ON_SURFACE_TOL {
        return Err(Error::usage(format!("start point {p0:?} is not on the unit sphere")));
    }
    Ok(spec)
}

/// Hyperbolic paraboloid `z = x² − y²`, curve from `p0` to `p1`.
pub fn hypar_instance(p0: Point, p1: Point) -> Result<ManifoldSpec> {
    let spec = ManifoldSpec {
        surface: Surface::Hypar,
        stop: StoppingSet::Point(p1),
        p0,
    };
    for p in [p0, p1] {
        if spec.f(&p).abs() > ON_SURFACE_TOL {
            return Err(Error::usage(format!("point {p:?} is not on z = x² − y²")));
        }
    }
    Ok(spec)
}

impl ManifoldSpec {
    pub fn f(&self, p: &Point) -> f64 {
        match self.surface {
            Surface::Sphere => dot(p, p) - 1.0,
            Surface::Hypar => p[2] - p[0] * p[0] + p[1] * p[1],
        }
    }

    pub fn grad_f(&self, p: &Point) -> Point {
        match self.surface {
            Surface::Sphere => [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]],
            Surface::Hypar => [-2.0 * p[0], 2.0 * p[1], 1.0],
        }
    }

    pub fn phi(&self, p: &Point) -> f64 {
        match self.stop {
            StoppingSet::Equator => {
                let r = dot(p, p) - 1.0;
                r * r + p[2]
            }
            StoppingSet::Point(q) => {
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                dot(&d, &d)
            }
        }
    }

    pub fn grad_phi(&self, p: &Point) -> Point {
        match self.stop {
            StoppingSet::Equator => {
                let r = dot(p, p) - 1.0;
                [4.0 * r * p[0], 4.0 * r * p[1], 4.0 * r * p[2] + 1.0]
            }
            StoppingSet::Point(q) => [2.0 * (p[0] - q[0]), 2.0 * (p[1] - q[1]), 2.0 * (p[2] - q[2])],
        }
    }

    /// Fixed endpoint, if the stopping set is a single point.
    pub fn endpoint(&self) -> Option<Point> {
        match self.stop {
            StoppingSet::Point(q) => Some(q),
            StoppingSet::Equator => None,
        }
    }
}

/// `∫₀¹ ‖γ̇‖² dt` by the composite trapezoid rule on `points` nodes.
pub fn energy<F: Fn(f64) -> Point>(velocity: F, points: usize) -> f64 {
    trapezoid(|t| {
        let v = velocity(t);
        dot(&v, &v)
    }, points)
}

/// `∫₀¹ ‖γ̇‖ dt` by the composite trapezoid rule on `points` nodes.
pub fn arc_length<F: Fn(f64) -> Point>(velocity: F, points: usize) -> f64 {
    trapezoid(|t| norm(&velocity(t)), points)
}

/// Batch mean of `‖γ̇‖²`, the Monte-Carlo energy estimate.
pub fn sampled_energy(velocities: &[Point]) -> f64 {
    velocities.iter().map(|v| dot(v, v)).sum::<f64>() / velocities.len().max(1) as f64
}

fn trapezoid<F: Fn(f64) -> f64>(g: F, points: usize) -> f64 {
    let n = points.max(2) - 1;
    let h = 1.0 / n as f64;
    let inner: f64 = (1..n).map(|i| g(i as f64 * h)).sum();
    h * (0.5 * (g(0.0) + g(1.0)) + inner)
}

/// Tape versions of the surface and stopping-set functions on a `rows × 3`
/// node of points.
impl ManifoldSpec {
    fn coords(tape: &mut Tape<'_>, p: NodeId) -> Result<[NodeId; 3]> {
        Ok([tape.cols(p, 0, 1)?, tape.cols(p, 1, 1)?, tape.cols(p, 2, 1)?])
    }

    pub fn record_f(&self, tape: &mut Tape<'_>, p: NodeId) -> Result<NodeId> {
        let [x, y, z] = Self::coords(tape, p)?;
        Ok(match self.surface {
            Surface::Sphere => {
                let sq = tape.square(p);
                let s = tape.sum_cols(sq);
                tape.add_const(s, -1.0)
            }
            Surface::Hypar => {
                let x2 = tape.square(x);
                let y2 = tape.square(y);
                let d = tape.sub(z, x2)?;
                tape.add(d, y2)?
            }
        })
    }

    pub fn record_grad_f(&self, tape: &mut Tape<'_>, p: NodeId) -> Result<NodeId> {
        let [x, y, _] = Self::coords(tape, p)?;
        Ok(match self.surface {
            Surface::Sphere => tape.scale(p, 2.0),
            Surface::Hypar => {
                let gx = tape.scale(x, -2.0);
                let gy = tape.scale(y, 2.0);
                let rows = tape.value(p).rows();
                let one = tape.constant(Tensor::from_values(rows, 1, vec![1.0; rows]));
                tape.concat(vec![gx, gy, one])?
            }
        })
    }

    fn record_offset(&self, tape: &mut Tape<'_>, p: NodeId, q: Point) -> Result<NodeId> {
        let c = tape.constant(Tensor::from_values(1, 3, q.to_vec()));
        tape.sub(p, c)
    }

    pub fn record_phi(&self, tape: &mut Tape<'_>, p: NodeId) -> Result<NodeId> {
        Ok(match self.stop {
            StoppingSet::Equator => {
                let sq = tape.square(p);
                let s = tape.sum_cols(sq);
                let r = tape.add_const(s, -1.0);
                let r2 = tape.square(r);
                let z = tape.cols(p, 2, 1)?;
                tape.add(r2, z)?
            }
            StoppingSet::Point(q) => {
                let d = self.record_offset(tape, p, q)?;
                let sq = tape.square(d);
                tape.sum_cols(sq)
            }
        })
    }

    pub fn record_grad_phi(&self, tape: &mut Tape<'_>, p: NodeId) -> Result<NodeId> {
        Ok(match self.stop {
            StoppingSet::Equator => {
                let sq = tape.square(p);
                let s = tape.sum_cols(sq);
                let r = tape.add_const(s, -1.0);
                let r4 = tape.scale(r, 4.0);
                let radial = tape.mul(p, r4)?;
                let ez = tape.constant(Tensor::from_values(1, 3, vec![0.0, 0.0, 1.0]));
                tape.add(radial, ez)?
            }
            StoppingSet::Point(q) => {
                let d = self.record_offset(tape, p, q)?;
                tape.scale(d, 2.0)
            }
        })
    }
}

/// Curve, multiplier networks and terminal multiplier for one instance.
#[derive(Debug, Clone)]
pub struct GeodesicProblem {
    pub spec: ManifoldSpec,
    pub curve_net: Mlp,
    pub multiplier_net: Mlp,
    pub terminal_multiplier: LearnableScalar,
    lf_offset: usize,
}

impl GeodesicProblem {
    pub const CURVE: &'static str = "curve";
    pub const MULTIPLIER: &'static str = "multiplier";
    pub const TERMINAL_MULTIPLIER: &'static str = "lambda_f";

    pub fn new(spec: ManifoldSpec, shape: &NetworkShape, seed: u64) -> Result<(Self, ParameterStore)> {
        let (curve, mult) = Self::specs(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        store.push(Self::CURVE, &glorot_values(&curve, &mut rng))?;
        store.push(Self::MULTIPLIER, &glorot_values(&mult, &mut rng))?;
        store.push(Self::TERMINAL_MULTIPLIER, &[0.0])?;
        Self::bind(spec, shape, &store).map(|p| (p, store))
    }

    fn specs(shape: &NetworkShape) -> (crate::networks::MlpSpec, crate::networks::MlpSpec) {
        (
            shape.spec(1, 3, Head::Linear).with_input_range(0.0, 1.0),
            shape.spec(1, 1, Head::Linear).with_input_range(0.0, 1.0),
        )
    }

    pub fn bind(spec: ManifoldSpec, shape: &NetworkShape, store: &ParameterStore) -> Result<Self> {
        let (curve, mult) = Self::specs(shape);
        let lf_offset = store
            .slice(Self::TERMINAL_MULTIPLIER)
            .ok_or_else(|| Error::usage("missing terminal multiplier parameter"))?
            .offset;
        Ok(Self {
            spec,
            curve_net: Mlp::bind(Self::CURVE, curve, store)?,
            multiplier_net: Mlp::bind(Self::MULTIPLIER, mult, store)?,
            terminal_multiplier: LearnableScalar::new(Self::TERMINAL_MULTIPLIER, 0.0),
            lf_offset,
        })
    }

    /// `(ψ₁, ψ₂)` for given curve (with velocity and acceleration channels)
    /// and multiplier nodes: `f(γ)` and `λ∇f(γ) − γ̈`.
    pub fn record_path_residuals(&self, tape: &mut Tape<'_>, curve: NodeId, multiplier: NodeId) -> Result<[NodeId; 2]> {
        let g = tape.channel(curve, 0)?;
        let acc = tape.channel(curve, 2)?;
        let lam = tape.channel(multiplier, 0)?;
        let psi1 = self.spec.record_f(tape, g)?;
        let grad = self.spec.record_grad_f(tape, g)?;
        let lg = tape.mul(grad, lam)?;
        let psi2 = tape.sub(lg, acc)?;
        Ok([psi1, psi2])
    }

    pub fn curve_at(&self, params: &[f64], t: f64) -> Result<(Point, Point, Point)> {
        let (v, d1, d2) = self.curve_net.eval_with_input_derivs(params, t, 2)?;
        let p = |w: &[f64]| [w[0], w[1], w[2]];
        Ok((p(&v), p(&d1), p(&d2)))
    }

    pub fn multiplier_at(&self, params: &[f64], t: f64) -> Result<f64> {
        Ok(self.multiplier_net.forward(params, &[t])?[0])
    }

    pub fn terminal_multiplier_value(&self, params: &[f64]) -> f64 {
        params[self.lf_offset]
    }

    /// Rows `t, γ₁, γ₂, γ₃, speed, f(γ), λ` on a uniform grid.
    pub fn curve_table(&self, params: &[f64], points: usize) -> Result<Vec<Vec<f64>>> {
        let n = points.max(2) - 1;
        (0..=n)
            .map(|i| {
                let t = i as f64 / n as f64;
                let (g, v, _) = self.curve_at(params, t)?;
                Ok(vec![t, g[0], g[1], g[2], norm(&v), self.spec.f(&g), self.multiplier_at(params, t)?])
            })
            .collect()
    }
}

impl VariationalProblem for GeodesicProblem {
    fn name(&self) -> &str {
        match self.spec.surface {
            Surface::Sphere => "geodesic-sphere",
            Surface::Hypar => "geodesic-hypar",
        }
    }

    fn horizon(&self) -> f64 {
        1.0
    }

    fn path_terms(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<Vec<Term>> {
        let curve = self.curve_net.record_times(tape, times)?;
        let mult = self.multiplier_net.record_times(tape, times)?;
        let [psi1, psi2] = self.record_path_residuals(tape, curve, mult)?;
        let s1 = tape.sum_squares(psi1);
        let s2 = tape.sum_squares(psi2);
        Ok(vec![Term::condition("psi_surface", s1), Term::condition("psi_geodesic", s2)])
    }

    fn point_terms(&self, tape: &mut Tape<'_>) -> Result<Vec<Term>> {
        let start = self.curve_net.record_values(tape, 1, vec![0.0])?;
        let d0 = self.record_offset(tape, start, self.spec.p0)?;
        let b0 = tape.sum_squares(d0);
        let mut terms = vec![Term::boundary("initial_point", b0)];
        match self.spec.stop {
            StoppingSet::Point(q) => {
                let end = self.curve_net.record_values(tape, 1, vec![1.0])?;
                let d1 = self.record_offset(tape, end, q)?;
                let b1 = tape.sum_squares(d1);
                terms.push(Term::boundary("terminal_point", b1));
            }
            StoppingSet::Equator => {
                let end_full = self.curve_net.record_times(tape, &[1.0])?;
                let end = tape.channel(end_full, 0)?;
                let vel = tape.channel(end_full, 1)?;
                let phi = self.spec.record_phi(tape, end)?;
                let b1 = tape.square(phi);
                terms.push(Term::boundary("stopping_set", b1));
                let grad = self.spec.record_grad_phi(tape, end)?;
                let lf = tape.param(self.lf_offset, 1, 1)?;
                let scaled = tape.mul(grad, lf)?;
                let psi3 = tape.sub(vel, scaled)?;
                let s3 = tape.sum_squares(psi3);
                terms.push(Term::condition("psi_transversality", s3));
            }
        }
        Ok(terms)
    }

    fn scalar_names(&self) -> Vec<String> {
        match self.spec.stop {
            StoppingSet::Equator => vec![Self::TERMINAL_MULTIPLIER.to_string()],
            StoppingSet::Point(_) => Vec::new(),
        }
    }
}

impl GeodesicProblem {
    fn record_offset(&self, tape: &mut Tape<'_>, p: NodeId, q: Point) -> Result<NodeId> {
        self.spec.record_offset(tape, p, q)
    }
}

/// Evaluation of a trained curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    pub length: f64,
    pub energy: f64,
    pub max_surface_residual: f64,
    /// Standard deviation over mean of the speed on a 200-point grid.
    pub speed_variation: f64,
    /// Angle in degrees between the lines spanned by `γ̇(1)` and `∇φ(γ(1))`;
    /// the multiplier `λ_f` may have either sign.
    pub transversality_angle_deg: f64,
    /// Largest tangential acceleration component over the largest
    /// acceleration, on a 200-point grid.
    pub orthogonality_defect: f64,
    pub start_error: f64,
    pub end_phi: f64,
}

pub const QUADRATURE_POINTS: usize = 1000;

pub fn curve_metrics(problem: &GeodesicProblem, params: &[f64]) -> Result<CurveMetrics> {
    let spec = &problem.spec;
    let mut err = None;
    let mut vel = |t: f64| match problem.curve_at(params, t) {
        Ok((_, v, _)) => v,
        Err(e) => {
            err = Some(e);
            [f64::NAN; 3]
        }
    };
    let grid: Vec<f64> = (0..QUADRATURE_POINTS).map(|i| i as f64 / (QUADRATURE_POINTS - 1) as f64).collect();
    let speeds: Vec<f64> = grid.iter().map(|&t| norm(&vel(t))).collect();
    if let Some(e) = err {
        return Err(e);
    }
    let h = 1.0 / (QUADRATURE_POINTS - 1) as f64;
    let trap = |vals: &[f64]| h * (vals.iter().sum::<f64>() - 0.5 * (vals[0] + vals[vals.len() - 1]));
    let length = trap(&speeds);
    let energy = trap(&speeds.iter().map(|s| s * s).collect::<Vec<_>>());

    let mut max_f: f64 = 0.0;
    for &t in &grid {
        let (g, _, _) = problem.curve_at(params, t)?;
        max_f = max_f.max(spec.f(&g).abs());
    }

    let coarse: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
    let mut sp = Vec::with_capacity(200);
    let mut max_tan: f64 = 0.0;
    let mut max_acc: f64 = 0.0;
    for &t in &coarse {
        let (g, v, a) = problem.curve_at(params, t)?;
        sp.push(norm(&v));
        let n = spec.grad_f(&g);
        let nn = dot(&n, &n).max(1e-300);
        let an = dot(&a, &n) / nn;
        let tan: Point = std::array::from_fn(|j| a[j] - an * n[j]);
        max_tan = max_tan.max(norm(&tan));
        max_acc = max_acc.max(norm(&a));
    }
    let mean = sp.iter().sum::<f64>() / sp.len() as f64;
    let sd = (sp.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sp.len() as f64).sqrt();

    let (g1, v1, _) = problem.curve_at(params, 1.0)?;
    let gp = spec.grad_phi(&g1);
    let cos = dot(&v1, &gp) / (norm(&v1) * norm(&gp)).max(1e-300);
    let (g0, _, _) = problem.curve_at(params, 0.0)?;
    let d0: Point = std::array::from_fn(|j| g0[j] - spec.p0[j]);
    Ok(CurveMetrics {
        length,
        energy,
        max_surface_residual: max_f,
        speed_variation: if mean > 0.0 { sd / mean } else { 0.0 },
        transversality_angle_deg: cos.abs().min(1.0).acos().to_degrees(),
        orthogonality_defect: if max_acc > 0.0 { max_tan / max_acc } else { 0.0 },
        start_error: norm(&d0),
        end_phi: spec.phi(&g1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_functions() {
        let s = sphere_instance([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.f(&[0.0, 0.0, 1.0]), 0.0);
        assert_eq!(s.phi(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(s.phi(&[0.0, 0.0, 1.0]), 1.0);
        assert!(sphere_instance([0.0, 0.0, 1.1]).is_err());
    }

    #[test]
    fn hypar_functions() {
        let h = hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]).unwrap();
        assert_eq!(h.f(&[1.0, 1.0, 0.0]), 0.0);
        assert_eq!(h.f(&[1.0, 0.0, 1.0]), 0.0);
        assert_eq!(h.f(&[1.0, 0.0, 0.0]), -1.0);
        // midpoint of the straight chord leaves the surface
        assert_ne!(h.f(&[0.0, 1.0, 0.0]), 0.0);
        assert!(hypar_instance([1.0, 0.0, 0.0], [-1.0, 1.0, 0.0]).is_err());
    }

    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn energy_and_length_examples() {
        assert_eq!(energy(|_| [0.0; 3], 1000), 0.0);
        assert!((energy(|_| [1.0, 0.0, 0.0], 1000) - 1.0).abs() < 1e-12);
        assert!((arc_length(|_| [1.0, 0.0, 0.0], 1000) - 1.0).abs() < 1e-12);
        let meridian = |t: f64| {
            let w = FRAC_PI_2;
            [w * (w * t).cos(), 0.0, -w * (w * t).sin()]
        };
        assert!((energy(meridian, 1000) - FRAC_PI_2 * FRAC_PI_2).abs() < 1e-9);
        assert!((arc_length(meridian, 1000) - FRAC_PI_2).abs() < 1e-9);
        // reparameterized by s = t², speed no longer constant
        let re = |t: f64| {
            let w = FRAC_PI_2;
            let s = t * t;
            [w * (w * s).cos() * 2.0 * t, 0.0, -w * (w * s).sin() * 2.0 * t]
        };
        assert!((arc_length(re, 1000) - FRAC_PI_2).abs() < 1e-5);
        let (l, e) = (arc_length(re, 1000), energy(re, 1000));
        assert!(l * l <= e);
        assert!((sampled_energy(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]) - 2.5).abs() < 1e-15);
    }

    fn meridian_nodes(tape: &mut Tape<'_>, times: &[f64]) -> (NodeId, NodeId) {
        let w = FRAC_PI_2;
        let rows = times.len();
        let (mut v, mut d1, mut d2) = (Vec::new(), Vec::new(), Vec::new());
        for &t in times {
            let (s, c) = (w * t).sin_cos();
            v.extend([s, 0.0, c]);
            d1.extend([w * c, 0.0, -w * s]);
            d2.extend([-w * w * s, 0.0, -w * w * c]);
        }
        let curve = tape.constant(Tensor::from_channels(rows, 3, v, d1, d2));
        let z = vec![0.0; rows];
        let m = tape.constant(Tensor::from_channels(rows, 1, vec![-w * w / 2.0; rows], z.clone(), z));
        (curve, m)
    }

    #[test]
    fn meridian_satisfies_geodesic_conditions() {
        let spec = sphere_instance([0.0, 0.0, 1.0]).unwrap();
        let (p, store) = GeodesicProblem::new(spec, &NetworkShape { width: 4, hidden_layers: 1 }, 0).unwrap();
        let times: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let mut tape = Tape::new(store.values());
        let (c, m) = meridian_nodes(&mut tape, &times);
        for node in p.record_path_residuals(&mut tape, c, m).unwrap() {
            let s = tape.sum_squares(node);
            assert!(tape.scalar(s) < 1e-28);
        }
    }

    #[test]
    fn tape_functions_match_plain_ones() {
        let pts = [[0.3, -0.7, 0.4], [1.0, 1.0, 0.0], [0.0, 0.2, 0.9]];
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        for spec in [
            sphere_instance([1.0, 0.0, 0.0]).unwrap(),
            hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]).unwrap(),
        ] {
            let params: Vec<f64> = Vec::new();
            let mut tape = Tape::new(&params);
            let p = tape.constant(Tensor::from_values(3, 3, flat.clone()));
            let nodes = [
                spec.record_f(&mut tape, p).unwrap(),
                spec.record_phi(&mut tape, p).unwrap(),
                spec.record_grad_f(&mut tape, p).unwrap(),
                spec.record_grad_phi(&mut tape, p).unwrap(),
            ];
            for (i, q) in pts.iter().enumerate() {
                assert!((tape.value(nodes[0]).value(i, 0) - spec.f(q)).abs() < 1e-15);
                assert!((tape.value(nodes[1]).value(i, 0) - spec.phi(q)).abs() < 1e-15);
                for j in 0..3 {
                    assert!((tape.value(nodes[2]).value(i, j) - spec.grad_f(q)[j]).abs() < 1e-15);
                    assert!((tape.value(nodes[3]).value(i, j) - spec.grad_phi(q)[j]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn loss_gradient_through_second_derivative_matches_finite_differences() {
        for spec in [
            sphere_instance([1f64.sin(), 0.0, 1f64.cos()]).unwrap(),
            hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]).unwrap(),
        ] {
            let (p, mut store) = GeodesicProblem::new(spec, &NetworkShape { width: 6, hidden_layers: 2 }, 9).unwrap();
            store.set_scalar(GeodesicProblem::TERMINAL_MULTIPLIER, 0.3).unwrap();
            let times: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 + 0.05).collect();
            let build = |tape: &mut Tape<'_>| {
                let mut terms = p.path_terms(tape, &times)?;
                terms.extend(p.point_terms(tape)?);
                crate::variational::assemble_terms(tape, &terms, 1.0, 0.1)
            };
            let err = crate::autodiff::finite_difference_check(build, store.values(), 1e-6).unwrap();
            assert!(err < 1e-4, "{err:e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = [
            sphere_instance([1.0, 0.0, 0.0]).unwrap(),
            hypar_instance([1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]).unwrap(),
        ];
        let p = [0.3, -0.7, 0.4];
        let h = 1e-6;
        for s in &specs {
            let (gf, gp) = (s.grad_f(&p), s.grad_phi(&p));
            for i in 0..3 {
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                assert!(((s.f(&a) - s.f(&b)) / (2.0 * h) - gf[i]).abs() < 1e-8);
                assert!(((s.phi(&a) - s.phi(&b)) / (2.0 * h) - gp[i]).abs() < 1e-8);
            }
        }
    }
}
