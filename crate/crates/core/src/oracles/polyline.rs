use crate::error::{Error, Result};
use crate::geodesic::{norm, ManifoldSpec, Point, StoppingSet};

const NEWTON_ITERS: usize = 50;
const NEWTON_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineConfig {
    /// Final segment count.
    pub segments: usize,
    /// Iterations per refinement level.
    pub iters: usize,
    /// Gradient step is `step_scale / K`.
    pub step_scale: f64,
    /// Segment count of the coarsest level; doubled until `segments`.
    pub start_segments: usize,
}

impl Default for PolylineConfig {
    fn default() -> Self {
        Self {
            segments: 256,
            iters: 20_000,
            step_scale: 0.05,
            start_segments: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolylineResult {
    pub vertices: Vec<Point>,
    pub length: f64,
    /// Discrete energy `K Σ ‖γₖ₊₁ − γₖ‖²`.
    pub energy: f64,
    /// Length after every iteration of the finest level.
    pub history: Vec<f64>,
}

impl PolylineResult {
    /// Rows `t, γ₁, γ₂, γ₃, speed, f, λ`, with the multiplier estimated from
    /// the discrete acceleration projected on the surface normal.
    pub fn table(&self, spec: &ManifoldSpec) -> Vec<Vec<f64>> {
        let k = self.vertices.len() - 1;
        let kf = k as f64;
        (0..=k)
            .map(|i| {
                let v = self.vertices[i];
                let (a, b) = if i == k { (i - 1, i) } else { (i, i + 1) };
                let d = sub(&self.vertices[b], &self.vertices[a]);
                let speed = kf * norm(&d);
                let lambda = if i == 0 || i == k {
                    f64::NAN
                } else {
                    let acc: Point = std::array::from_fn(|j| {
                        kf * kf * (self.vertices[i + 1][j] - 2.0 * v[j] + self.vertices[i - 1][j])
                    });
                    let g = spec.grad_f(&v);
                    dot(&acc, &g) / dot(&g, &g)
                };
                vec![i as f64 / kf, v[0], v[1], v[2], speed, spec.f(&v), lambda]
            })
            .collect()
    }
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Newton iteration along `∇f` onto `f = 0`.
pub fn project_onto_surface(spec: &ManifoldSpec, p: Point) -> Result<Point> {
    let mut p = p;
    for _ in 0..NEWTON_ITERS {
        let f = spec.f(&p);
        if f.abs() < NEWTON_TOL {
            return Ok(p);
        }
        let g = spec.grad_f(&p);
        let gg = dot(&g, &g);
        if gg == 0.0 {
            break;
        }
        for j in 0..3 {
            p[j] -= f / gg * g[j];
        }
    }
    if spec.f(&p).abs() < 1e-12 {
        return Ok(p);
    }
    Err(Error::Projection(format!("surface projection did not converge from {p:?}")))
}

/// Gauss–Newton onto `{f = 0, φ = 0}` with minimum-norm steps.
fn project_onto_stopping_set(spec: &ManifoldSpec, p: Point) -> Result<Point> {
    if let StoppingSet::Point(q) = spec.stop {
        return Ok(q);
    }
    let mut p = p;
    for _ in 0..NEWTON_ITERS {
        let c = [spec.f(&p), spec.phi(&p)];
        if c[0].abs() < NEWTON_TOL && c[1].abs() < NEWTON_TOL {
            return Ok(p);
        }
        let (g1, g2) = (spec.grad_f(&p), spec.grad_phi(&p));
        let (a, b, d) = (dot(&g1, &g1), dot(&g1, &g2), dot(&g2, &g2));
        let det = a * d - b * b;
        if det.abs() < 1e-300 {
            break;
        }
        let y0 = (d * c[0] - b * c[1]) / det;
        let y1 = (a * c[1] - b * c[0]) / det;
        for j in 0..3 {
            p[j] -= y0 * g1[j] + y1 * g2[j];
        }
    }
    if spec.f(&p).abs() < 1e-12 && spec.phi(&p).abs() < 1e-12 {
        return Ok(p);
    }
    Err(Error::Projection(format!("stopping-set projection did not converge from {p:?}")))
}

fn polyline_length(v: &[Point]) -> f64 {
    v.windows(2).map(|w| norm(&sub(&w[1], &w[0]))).sum()
}

/// Discrete geodesic from `p₀` to the stopping set by projected gradient
/// descent on the polyline energy, refined coarse to fine.
pub fn polyline_geodesic_oracle(spec: &ManifoldSpec, cfg: &PolylineConfig) -> Result<PolylineResult> {
    if cfg.segments < 8 || cfg.start_segments < 1 || cfg.start_segments > cfg.segments {
        return Err(Error::usage("polyline oracle needs at least 8 segments"));
    }
    let p0 = spec.p0;
    let end = project_onto_stopping_set(spec, p0)?;
    let k0 = cfg.start_segments;
    let mut v: Vec<Point> = (0..=k0)
        .map(|i| {
            let s = i as f64 / k0 as f64;
            std::array::from_fn(|j| (1.0 - s) * p0[j] + s * end[j])
        })
        .collect();
    for i in 1..k0 {
        v[i] = project_onto_surface(spec, v[i])?;
    }
    let mut history = Vec::new();
    loop {
        let k = v.len() - 1;
        let finest = k >= cfg.segments;
        let rate = cfg.step_scale / k as f64 * 2.0 * k as f64;
        for _ in 0..cfg.iters {
            let old = v.clone();
            for i in 1..k {
                for j in 0..3 {
                    v[i][j] -= rate * (2.0 * old[i][j] - old[i - 1][j] - old[i + 1][j]);
                }
                v[i] = project_onto_surface(spec, v[i])?;
            }
            if spec.endpoint().is_none() {
                for j in 0..3 {
                    v[k][j] -= rate * (old[k][j] - old[k - 1][j]);
                }
                v[k] = project_onto_stopping_set(spec, v[k])?;
            }
            if finest {
                history.push(polyline_length(&v));
            }
        }
        if finest {
            break;
        }
        let mut refined = Vec::with_capacity(2 * k + 1);
        for i in 0..k {
            refined.push(v[i]);
            let mid: Point = std::array::from_fn(|j| 0.5 * (v[i][j] + v[i + 1][j]));
            refined.push(project_onto_surface(spec, mid)?);
        }
        refined.push(v[k]);
        v = refined;
    }
    let k = (v.len() - 1) as f64;
    let energy = k * v.windows(2).map(|w| dot(&sub(&w[1], &w[0]), &sub(&w[1], &w[0]))).sum::<f64>();
    Ok(PolylineResult {
        length: polyline_length(&v),
        energy,
        vertices: v,
        history,
    })
}
