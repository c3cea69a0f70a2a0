//! Strict TOML run configuration.
//!
//! ```toml
//! problem = "mintime"        # kalman | mintime | geodesic-sphere | geodesic-hypar
//! seed = 0
//! output_dir = "runs/mintime"
//!
//! [train]                    # any TrainConfig field
//! epochs = 8000
//! optimizer = "adam"
//!
//! [network]
//! width = 32
//!
//! [mintime]                  # only the section of the chosen problem
//! x0 = [1.0, 0.0]
//!
//! [thresholds]
//! t_f_tolerance = 0.05
//! ```
//!
//! Matrices are arrays of rows. Unknown keys are rejected. The resolved
//! configuration, with every default filled in, is what gets echoed next to
//! the results.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{hypar_instance, sphere_instance, ManifoldSpec, Point};
use crate::io::read_text;
use crate::kalman::KalmanSystem;
use crate::mintime::MinTimeSetup;
use crate::networks::NetworkShape;
use crate::variational::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Kalman,
    Mintime,
    GeodesicSphere,
    GeodesicHypar,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::Kalman => "kalman",
            ProblemKind::Mintime => "mintime",
            ProblemKind::GeodesicSphere => "geodesic-sphere",
            ProblemKind::GeodesicHypar => "geodesic-hypar",
        }
    }
}

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    pub a: Rows,
    pub b: Rows,
    pub c: Rows,
    pub q: Rows,
    pub r: Rows,
    pub sigma0: Rows,
    pub horizon: f64,
    /// Train on the terminal trace plus the dynamics residual only.
    pub direct_cost: bool,
    /// The learned gain is rolled out up to this time.
    pub rollout_end: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let s = KalmanSystem::double_integrator();
        Self {
            a: rows_of(&s.a),
            b: rows_of(&s.b),
            c: rows_of(&s.c),
            q: rows_of(&s.q),
            r: rows_of(&s.r),
            sigma0: rows_of(&s.sigma0),
            horizon: s.horizon,
            direct_cost: false,
            rollout_end: 10.0,
        }
    }
}

fn matrix(key: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::config(key, "matrix must be non-empty"));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::config(key, "rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(key, "entries must be finite"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl KalmanConfig {
    pub fn system(&self) -> Result<KalmanSystem> {
        let sys = KalmanSystem {
            a: matrix("kalman.a", &self.a)?,
            b: matrix("kalman.b", &self.b)?,
            c: matrix("kalman.c", &self.c)?,
            q: matrix("kalman.q", &self.q)?,
            r: matrix("kalman.r", &self.r)?,
            sigma0: matrix("kalman.sigma0", &self.sigma0)?,
            horizon: self.horizon,
        };
        sys.validate()?;
        if !(self.rollout_end >= self.horizon) {
            return Err(Error::config("kalman.rollout_end", "must be at least the horizon"));
        }
        Ok(sys)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinTimeConfig {
    pub x0: [f64; 2],
    pub xf: [f64; 2],
    pub horizon: f64,
    pub tf_init: f64,
    /// Radius of the target ball for the rollout of the learned control.
    pub hit_radius: f64,
    /// Adam iterations fitting the costate estimator to a non-zero profile
    /// before training; 0 disables it.
    pub pretrain_iters: usize,
    pub pretrain_tolerance: f64,
}

impl Default for MinTimeConfig {
    fn default() -> Self {
        let s = MinTimeSetup::default();
        Self {
            x0: s.x0,
            xf: s.xf,
            horizon: s.horizon,
            tf_init: s.tf_init,
            hit_radius: 0.05,
            pretrain_iters: 5000,
            pretrain_tolerance: 1e-4,
        }
    }
}

impl MinTimeConfig {
    pub fn setup(&self) -> Result<MinTimeSetup> {
        if self.xf != [0.0, 0.0] {
            return Err(Error::config("mintime.xf", "only the origin is supported as target"));
        }
        if !(self.hit_radius > 0.0) {
            return Err(Error::config("mintime.hit_radius", "must be positive"));
        }
        Ok(MinTimeSetup {
            x0: self.x0,
            xf: self.xf,
            horizon: self.horizon,
            tf_init: self.tf_init,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicConfig {
    pub p0: Option<Point>,
    /// Endpoint; only for the hyperbolic paraboloid.
    pub p1: Option<Point>,
    pub oracle_segments: usize,
    pub oracle_iters: usize,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            p0: None,
            p1: None,
            oracle_segments: 256,
            oracle_iters: 20_000,
        }
    }
}

pub const SPHERE_P0: Point = [0.8414709848078965, 0.0, 0.5403023058681398];
pub const HYPAR_P0: Point = [1.0, 1.0, 0.0];
pub const HYPAR_P1: Point = [-1.0, 1.0, 0.0];

impl GeodesicConfig {
    fn resolve(&mut self, kind: ProblemKind) -> Result<()> {
        match kind {
            ProblemKind::GeodesicSphere => {
                if self.p1.is_some() {
                    return Err(Error::config("geodesic.p1", "the sphere instance ends on the equator"));
                }
                self.p0.get_or_insert(SPHERE_P0);
            }
            _ => {
                self.p0.get_or_insert(HYPAR_P0);
                self.p1.get_or_insert(HYPAR_P1);
            }
        }
        if self.oracle_segments < 8 {
            return Err(Error::config("geodesic.oracle_segments", "must be at least 8"));
        }
        Ok(())
    }

    pub fn manifold(&self, kind: ProblemKind) -> Result<ManifoldSpec> {
        let p0 = self.p0.ok_or_else(|| Error::config("geodesic.p0", "missing"))?;
        let r = match kind {
            ProblemKind::GeodesicSphere => sphere_instance(p0),
            _ => hypar_instance(p0, self.p1.ok_or_else(|| Error::config("geodesic.p1", "missing"))?),
        };
        r.map_err(|e| Error::config("geodesic", e.to_string()))
    }
}

/// Acceptance thresholds; each problem uses the ones that apply to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Headline metric against its oracle.
    pub relative_error: f64,
    pub gain_error: f64,
    /// Continued Kalman rollout must stay below this multiple of `tr Σ∞`.
    pub bounded_factor: f64,
    pub t_f_tolerance: f64,
    pub switch_tolerance: f64,
    pub lambda1_variance: f64,
    pub affine_residual: f64,
    pub surface_residual: f64,
    pub speed_variation: f64,
    pub transversality_deg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            relative_error: 0.02,
            gain_error: 0.05,
            bounded_factor: 10.0,
            t_f_tolerance: 0.05,
            switch_tolerance: 0.1,
            lambda1_variance: 1e-3,
            affine_residual: 1e-2,
            surface_residual: 1e-2,
            speed_variation: 0.05,
            transversality_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// RK4 step of every oracle and rollout.
    pub step: f64,
    /// Rows of the exported learned trajectory.
    pub trajectory_points: usize,
    /// Also write the oracle trajectory next to the learned one.
    pub dump_oracle: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            step: crate::oracles::DEFAULT_STEP,
            trajectory_points: 501,
            dump_oracle: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    /// Seeds initialization and sampling; overrides `train.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub network: NetworkShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kalman: Option<KalmanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mintime: Option<MinTimeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geodesic: Option<GeodesicConfig>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Default configuration of a problem, already resolved.
    pub fn for_problem(problem: ProblemKind) -> Self {
        let mut cfg = Self {
            problem,
            seed: 0,
            output_dir: None,
            train: TrainConfig::default(),
            network: NetworkShape::default(),
            kalman: None,
            mintime: None,
            geodesic: None,
            thresholds: Thresholds::default(),
            evaluation: EvaluationConfig::default(),
        };
        cfg.resolve().expect("defaults are valid");
        cfg
    }

    /// Fills in defaults and validates.
    pub fn resolve(&mut self) -> Result<()> {
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::config("train.seed", "set the top-level `seed` instead"));
        }
        self.train.seed = self.seed;
        self.train.validate()?;
        if self.network.width == 0 || self.network.hidden_layers == 0 {
            return Err(Error::config("network", "width and hidden_layers must be positive"));
        }
        if !(self.evaluation.step > 0.0) {
            return Err(Error::config("evaluation.step", "must be positive"));
        }
        if self.evaluation.trajectory_points < 2 {
            return Err(Error::config("evaluation.trajectory_points", "must be at least 2"));
        }
        let kind = self.problem;
        let stray = |name: &str| Error::config(name, format!("section does not apply to problem `{}`", kind.as_str()));
        match kind {
            ProblemKind::Kalman => {
                if self.mintime.is_some() {
                    return Err(stray("mintime"));
                }
                if self.geodesic.is_some() {
                    return Err(stray("geodesic"));
                }
                self.kalman.get_or_insert_with(KalmanConfig::default).system()?;
            }
            ProblemKind::Mintime => {
                if self.kalman.is_some() {
                    return Err(stray("kalman"));
                }
                if self.geodesic.is_some() {
                    return Err(stray("geodesic"));
                }
                self.mintime.get_or_insert_with(MinTimeConfig::default).setup()?;
            }
            ProblemKind::GeodesicSphere | ProblemKind::GeodesicHypar => {
                if self.kalman.is_some() {
                    return Err(stray("kalman"));
                }
                if self.mintime.is_some() {
                    return Err(stray("mintime"));
                }
                let g = self.geodesic.get_or_insert_with(GeodesicConfig::default);
                g.resolve(kind)?;
                g.manifold(kind)?;
            }
        }
        self.output_dir
            .get_or_insert_with(|| PathBuf::from("runs").join(kind.as_str()));
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.problem.as_str()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }
}

/// Parses and resolves configuration text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let key = e
            .message()
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "<document>".to_string());
        Error::config(key, e.message().trim().to_string())
    })?;
    cfg.resolve()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = parse_config_str(&read_text(path)?)?;
    if let Some(dir) = &cfg.output_dir {
        if dir.is_relative() {
            if let Some(base) = path.parent() {
                cfg.output_dir = Some(base.join(dir));
            }
        }
    }
    Ok(cfg)
}
