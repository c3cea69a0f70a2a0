//! Train, evaluate against the oracles and export results.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::config::{ProblemKind, RunConfig};
use crate::error::{Error, Result};
use crate::geodesic::{curve_metrics, GeodesicProblem, ManifoldSpec, StoppingSet, Surface};
use crate::io::{write_csv, write_text, Checkpoint};
use crate::kalman::KalmanProblem;
use crate::mintime::{diagnostics, MinTimeProblem};
use crate::networks::{Head, Mlp};
use crate::oracles::{
    bangbang_analytic, polyline_geodesic_oracle, riccati_solve, rollout_kalman, rollout_mintime, PolylineConfig,
};
use crate::variational::{
    alternating_train, assemble_loss, pretrain_costate, residual_report, train, OptimizerKind, ResidualReport,
    TrainingLog, VariationalProblem,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "training_log.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const ORACLE_FILE: &str = "oracle_trajectory.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const ORACLE_METRICS_FILE: &str = "oracle.json";

/// `|learned − oracle| / max(|oracle|, 1e-12)`.
pub fn relative_error(learned: f64, oracle: f64) -> f64 {
    (learned - oracle).abs() / oracle.abs().max(1e-12)
}

/// One acceptance threshold and how the run fared against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the quantity could not be measured (counts as a miss).
    pub value: Option<f64>,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: Option<f64>, threshold: f64) -> Self {
        let value = value.filter(|v| v.is_finite());
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value.is_some_and(|v| v <= threshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub name: String,
    pub learned: f64,
    pub oracle: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub problem: String,
    pub seed: u64,
    pub epochs: usize,
    pub converged: bool,
    /// Loss with unit weight on a uniform grid of `points_per_epoch` times.
    pub final_loss: f64,
    pub residuals: ResidualReport,
    pub headline: Headline,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::usage(format!("metrics serialization: {e}")))
    }

    /// JSON with the wall-clock field zeroed, identical across re-runs.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        r.to_json()
    }

    pub fn failed_checks(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// A configured problem with its networks bound.
#[derive(Debug, Clone)]
pub enum Problem {
    Kalman(KalmanProblem),
    Mintime(MinTimeProblem),
    Geodesic(GeodesicProblem),
}

struct Assessment {
    headline: Headline,
    metrics: BTreeMap<String, f64>,
    checks: Vec<Check>,
    trajectory: (Vec<String>, Vec<Vec<f64>>),
}

fn names(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub const MINTIME_COLUMNS: [&str; 6] = ["t", "x1", "x2", "lambda1", "lambda2", "u"];
pub const CURVE_COLUMNS: [&str; 7] = ["t", "gamma1", "gamma2", "gamma3", "speed", "f", "lambda"];

fn uniform(a: f64, b: f64, points: usize) -> Vec<f64> {
    let n = points.max(2) - 1;
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

/// Closed-form distance on the unit sphere from `p0` to the equator.
pub fn sphere_equator_distance(spec: &ManifoldSpec) -> f64 {
    spec.p0[2].abs().min(1.0).asin()
}

impl Problem {
    /// Builds the problem of `cfg` with freshly initialized parameters.
    pub fn build(cfg: &RunConfig) -> Result<(Self, ParameterStore)> {
        let shape = &cfg.network;
        Ok(match cfg.problem {
            ProblemKind::Kalman => {
                let k = cfg.kalman.clone().unwrap_or_default();
                let (mut p, store) = KalmanProblem::new(k.system()?, shape, cfg.seed)?;
                p.direct_cost = k.direct_cost;
                (Problem::Kalman(p), store)
            }
            ProblemKind::Mintime => {
                let setup = cfg.mintime.clone().unwrap_or_default().setup()?;
                let (p, store) = MinTimeProblem::new(setup, shape, cfg.seed)?;
                (Problem::Mintime(p), store)
            }
            ProblemKind::GeodesicSphere | ProblemKind::GeodesicHypar => {
                let spec = cfg.geodesic.clone().unwrap_or_default().manifold(cfg.problem)?;
                let (p, store) = GeodesicProblem::new(spec, shape, cfg.seed)?;
                (Problem::Geodesic(p), store)
            }
        })
    }

    pub fn networks(&self) -> Vec<&Mlp> {
        match self {
            Problem::Kalman(p) => vec![&p.sigma_net, &p.lambda_net, &p.gain_net],
            Problem::Mintime(p) => vec![&p.state_net, &p.costate_net, &p.control_net],
            Problem::Geodesic(p) => vec![&p.curve_net, &p.multiplier_net],
        }
    }

    pub fn heads(&self) -> Vec<(String, Head)> {
        self.networks()
            .into_iter()
            .map(|n| (n.name.clone(), n.spec.head))
            .collect()
    }

    pub fn variational(&self) -> &dyn VariationalProblem {
        match self {
            Problem::Kalman(p) => p,
            Problem::Mintime(p) => p,
            Problem::Geodesic(p) => p,
        }
    }

    /// Runs the training procedure of the problem.
    pub fn train(&self, store: ParameterStore, cfg: &RunConfig) -> Result<(ParameterStore, TrainingLog)> {
        match self {
            Problem::Kalman(p) => train(p, store, &cfg.train),
            Problem::Geodesic(p) => train(p, store, &cfg.train),
            Problem::Mintime(p) => {
                let m = cfg.mintime.clone().unwrap_or_default();
                let mut store = store;
                if m.pretrain_iters > 0 {
                    let horizon = p.setup.horizon;
                    let pre = crate::variational::TrainConfig {
                        learning_rate: 1e-3,
                        optimizer: OptimizerKind::Adam,
                        ..cfg.train.clone()
                    };
                    pretrain_costate(
                        &p.costate_net,
                        &mut store,
                        |t| vec![1.0, 1.0 - 2.0 * t / horizon],
                        horizon,
                        m.pretrain_tolerance,
                        &pre,
                        m.pretrain_iters,
                    )?;
                }
                alternating_train(p, store, &cfg.train)
            }
        }
    }

    fn assess(&self, params: &[f64], cfg: &RunConfig) -> Result<Assessment> {
        match self {
            Problem::Kalman(p) => assess_kalman(p, params, cfg),
            Problem::Mintime(p) => assess_mintime(p, params, cfg),
            Problem::Geodesic(p) => assess_geodesic(p, params, cfg),
        }
    }
}

fn assess_kalman(p: &KalmanProblem, params: &[f64], cfg: &RunConfig) -> Result<Assessment> {
    let th = &cfg.thresholds;
    let k = cfg.kalman.clone().unwrap_or_default();
    let h = cfg.evaluation.step;
    let sys = &p.sys;
    let sol = riccati_solve(sys, h)?;
    let oracle = sol.trace_at_horizon();
    let gain = |s: &nalgebra::DMatrix<f64>| p.gain_of(params, s);
    let learned = match rollout_kalman(gain, sys, h, sys.horizon) {
        Ok(r) => r.trace_at_horizon,
        Err(Error::Divergence { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    let continuation = match rollout_kalman(gain, sys, h, k.rollout_end) {
        Ok(r) => Some(r),
        Err(Error::Divergence { .. }) => None,
        Err(e) => return Err(e),
    };
    let trace_inf = sol.sigma_inf.trace();
    let gain_err = (p.gain_of(params, &sol.sigma_inf)? - &sol.gain_inf).norm() / sol.gain_inf.norm().max(1e-300);
    let rel = relative_error(learned, oracle);

    let mut metrics = BTreeMap::new();
    metrics.insert("tr_sigma_T".into(), learned);
    metrics.insert("tr_sigma_T_oracle".into(), oracle);
    metrics.insert("tr_sigma_T_network".into(), p.sigma_at(params, sys.horizon)?.trace());
    metrics.insert("relative_error".into(), rel);
    metrics.insert("gain_error".into(), gain_err);
    metrics.insert("tr_sigma_inf".into(), trace_inf);
    metrics.insert("settle_time".into(), sol.settle_time);
    metrics.insert("are_residual".into(), sol.are_residual);
    metrics.insert("rollout_end".into(), k.rollout_end);
    let end_ratio = continuation.as_ref().map(|r| r.final_trace() / trace_inf);
    if let Some(r) = &continuation {
        metrics.insert("continuation_final_trace".into(), r.final_trace());
        metrics.insert("continuation_max_trace".into(), r.max_trace);
    }
    metrics.retain(|_, v| v.is_finite());
    metrics.insert("rollout_bounded".into(), f64::from(u8::from(end_ratio.is_some_and(|r| r <= th.bounded_factor))));

    let checks = vec![
        Check::at_most("relative_error", Some(rel), th.relative_error),
        Check::at_most("gain_error", Some(gain_err), th.gain_error),
        Check::at_most("continuation_trace_over_steady_state", end_ratio, th.bounded_factor),
    ];
    let times = uniform(0.0, sys.horizon, cfg.evaluation.trajectory_points);
    Ok(Assessment {
        headline: Headline {
            name: "tr_sigma_T".into(),
            learned,
            oracle,
            relative_error: rel,
        },
        metrics,
        checks,
        trajectory: (p.trajectory_header(), p.trajectory(params, &times)?),
    })
}

fn assess_mintime(p: &MinTimeProblem, params: &[f64], cfg: &RunConfig) -> Result<Assessment> {
    let th = &cfg.thresholds;
    let m = cfg.mintime.clone().unwrap_or_default();
    let bb = bangbang_analytic(m.x0)?;
    let d = diagnostics(p, params, 1000)?;
    let control = |t: f64| p.evaluate(params, t).map_or(f64::NAN, |(_, _, u)| u);
    let roll = rollout_mintime(control, m.x0, m.hit_radius, p.setup.horizon, cfg.evaluation.step)?;
    let rel = relative_error(d.t_f, bb.t_f);

    let mut metrics = BTreeMap::new();
    metrics.insert("t_f_learned".into(), d.t_f);
    metrics.insert("t_f_oracle".into(), bb.t_f);
    metrics.insert("relative_error".into(), rel);
    if let Some(s) = d.switch_time {
        metrics.insert("switch_time_estimate".into(), s);
    }
    metrics.insert("switch_time_oracle".into(), bb.t_m);
    metrics.insert("sign_changes".into(), d.sign_changes as f64);
    metrics.insert("lambda1_variance".into(), d.lambda1_variance);
    metrics.insert("lambda2_affine_residual".into(), d.lambda2_affine_residual);
    metrics.insert("terminal_miss_distance".into(), roll.closest);
    if let Some(t) = roll.hit_time {
        metrics.insert("hit_time".into(), t);
    }
    metrics.retain(|_, v| v.is_finite());

    let checks = vec![
        Check::at_most("t_f_error", Some((d.t_f - bb.t_f).abs()), th.t_f_tolerance),
        Check::at_most("terminal_miss_distance", Some(roll.closest), m.hit_radius),
        Check::at_most("switch_time_error", d.switch_time.map(|s| (s - bb.t_m).abs()), th.switch_tolerance),
        Check::at_most("lambda1_variance", Some(d.lambda1_variance), th.lambda1_variance),
        Check::at_most("lambda2_affine_residual", Some(d.lambda2_affine_residual), th.affine_residual),
    ];
    let times = uniform(0.0, d.t_f, cfg.evaluation.trajectory_points);
    Ok(Assessment {
        headline: Headline {
            name: "t_f".into(),
            learned: d.t_f,
            oracle: bb.t_f,
            relative_error: rel,
        },
        metrics,
        checks,
        trajectory: (names(&MINTIME_COLUMNS), p.trajectory(params, &times)?),
    })
}

fn polyline_config(cfg: &RunConfig) -> PolylineConfig {
    let g = cfg.geodesic.clone().unwrap_or_default();
    PolylineConfig {
        segments: g.oracle_segments,
        iters: g.oracle_iters,
        ..PolylineConfig::default()
    }
}

fn assess_geodesic(p: &GeodesicProblem, params: &[f64], cfg: &RunConfig) -> Result<Assessment> {
    let th = &cfg.thresholds;
    let spec = &p.spec;
    let c = curve_metrics(p, params)?;
    let poly = polyline_geodesic_oracle(spec, &polyline_config(cfg))?;
    let oracle = match spec.surface {
        Surface::Sphere => sphere_equator_distance(spec),
        Surface::Hypar => poly.length,
    };
    let rel = relative_error(c.length, oracle);

    let mut metrics = BTreeMap::new();
    metrics.insert("length".into(), c.length);
    metrics.insert("energy".into(), c.energy);
    metrics.insert("length_oracle".into(), oracle);
    metrics.insert("polyline_length".into(), poly.length);
    metrics.insert("polyline_energy".into(), poly.energy);
    metrics.insert("relative_error".into(), rel);
    metrics.insert("max_surface_residual".into(), c.max_surface_residual);
    metrics.insert("speed_variation".into(), c.speed_variation);
    metrics.insert("orthogonality_defect".into(), c.orthogonality_defect);
    metrics.insert("start_error".into(), c.start_error);
    metrics.insert("end_phi".into(), c.end_phi);
    metrics.insert("cauchy_schwarz_gap".into(), c.energy - c.length * c.length);

    let mut checks = vec![
        Check::at_most("relative_error", Some(rel), th.relative_error),
        Check::at_most("max_surface_residual", Some(c.max_surface_residual), th.surface_residual),
        Check::at_most("cauchy_schwarz_violation", Some(c.length * c.length - c.energy), 1e-12),
        Check::at_most(
            "oracle_cauchy_schwarz_violation",
            Some(poly.length * poly.length - poly.energy),
            1e-12,
        ),
    ];
    if let StoppingSet::Equator = spec.stop {
        let lf = p.terminal_multiplier_value(params);
        metrics.insert("terminal_multiplier".into(), lf);
        metrics.insert("transversality_angle_deg".into(), c.transversality_angle_deg);
        checks.push(Check::at_most("speed_variation", Some(c.speed_variation), th.speed_variation));
        checks.push(Check::at_most(
            "transversality_angle_deg",
            Some(c.transversality_angle_deg),
            th.transversality_deg,
        ));
    }
    metrics.retain(|_, v| v.is_finite());
    Ok(Assessment {
        headline: Headline {
            name: "curve_length".into(),
            learned: c.length,
            oracle,
            relative_error: rel,
        },
        metrics,
        checks,
        trajectory: (names(&CURVE_COLUMNS), p.curve_table(params, cfg.evaluation.trajectory_points)?),
    })
}

/// Oracle trajectory in the problem's CSV schema.
pub fn oracle_trajectory(cfg: &RunConfig) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (problem, _) = Problem::build(cfg)?;
    Ok(match &problem {
        Problem::Kalman(p) => (p.trajectory_header(), riccati_solve(&p.sys, cfg.evaluation.step)?.table()),
        Problem::Mintime(p) => (
            names(&MINTIME_COLUMNS),
            bangbang_analytic(p.setup.x0)?.table(cfg.evaluation.trajectory_points),
        ),
        Problem::Geodesic(p) => (
            names(&CURVE_COLUMNS),
            polyline_geodesic_oracle(&p.spec, &polyline_config(cfg))?.table(&p.spec),
        ),
    })
}

/// Headline oracle values of a configuration.
pub fn oracle_metrics(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let (problem, _) = Problem::build(cfg)?;
    let mut m = BTreeMap::new();
    match &problem {
        Problem::Kalman(p) => {
            let sol = riccati_solve(&p.sys, cfg.evaluation.step)?;
            m.insert("tr_sigma_T".into(), sol.trace_at_horizon());
            m.insert("tr_sigma_inf".into(), sol.sigma_inf.trace());
            m.insert("settle_time".into(), sol.settle_time);
            m.insert("are_residual".into(), sol.are_residual);
        }
        Problem::Mintime(p) => {
            let bb = bangbang_analytic(p.setup.x0)?;
            m.insert("t_f".into(), bb.t_f);
            m.insert("switch_time".into(), bb.t_m);
            m.insert("c1".into(), bb.c1);
            m.insert("c2".into(), bb.c2);
        }
        Problem::Geodesic(p) => {
            let poly = polyline_geodesic_oracle(&p.spec, &polyline_config(cfg))?;
            m.insert("polyline_length".into(), poly.length);
            m.insert("polyline_energy".into(), poly.energy);
            if p.spec.surface == Surface::Sphere {
                m.insert("closed_form_length".into(), sphere_equator_distance(&p.spec));
            }
        }
    }
    Ok(m)
}

/// Writes the oracle trajectory and headline values to the output directory.
pub fn run_oracle(cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let dir = cfg.output_dir();
    let (header, rows) = oracle_trajectory(cfg)?;
    write_csv(&dir.join(ORACLE_FILE), &header, &rows)?;
    let m = oracle_metrics(cfg)?;
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::usage(e.to_string()))?;
    write_text(&dir.join(ORACLE_METRICS_FILE), &json)?;
    Ok(m)
}

/// Evaluates trained parameters and assembles the report.
pub fn evaluate_params(
    problem: &Problem,
    params: &ParameterStore,
    cfg: &RunConfig,
    log: &TrainingLog,
) -> Result<(MetricsReport, (Vec<String>, Vec<Vec<f64>>))> {
    let vp = problem.variational();
    let grid = uniform(0.0, vp.horizon(), cfg.train.points_per_epoch);
    let residuals = residual_report(vp, params.values(), &grid)?;
    let a = problem.assess(params.values(), cfg)?;
    let passed = a.checks.iter().all(|c| c.passed);
    let report = MetricsReport {
        problem: vp.name().to_string(),
        seed: cfg.seed,
        epochs: log.epochs,
        converged: log.converged,
        final_loss: assemble_loss(&residuals, 1.0),
        residuals,
        headline: a.headline,
        metrics: a.metrics,
        checks: a.checks,
        passed,
        wall_clock_seconds: 0.0,
    };
    Ok((report, a.trajectory))
}

fn write_outputs(
    cfg: &RunConfig,
    report: &MetricsReport,
    trajectory: &(Vec<String>, Vec<Vec<f64>>),
    log: Option<&TrainingLog>,
) -> Result<()> {
    let dir = cfg.output_dir();
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    if let Some(log) = log {
        write_text(&dir.join(LOG_FILE), &log.to_csv())?;
    }
    write_csv(&dir.join(TRAJECTORY_FILE), &trajectory.0, &trajectory.1)?;
    if cfg.evaluation.dump_oracle {
        let (h, rows) = oracle_trajectory(cfg)?;
        write_csv(&dir.join(ORACLE_FILE), &h, &rows)?;
    }
    write_text(&dir.join(METRICS_FILE), &report.to_json()?)
}

/// Trains the configured problem, evaluates it against its oracle and
/// writes the config echo, training log, trajectories, checkpoint and
/// metrics to the output directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<MetricsReport> {
    let start = Instant::now();
    let (problem, store) = Problem::build(cfg)?;
    let (params, log) = problem.train(store, cfg)?;
    let checkpoint = Checkpoint {
        problem: cfg.problem.as_str().to_string(),
        seed: cfg.seed,
        shape: cfg.network,
        heads: problem.heads(),
        params,
    };
    checkpoint.write(&cfg.output_dir().join(CHECKPOINT_FILE))?;
    let (mut report, trajectory) = evaluate_params(&problem, &checkpoint.params, cfg, &log)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(cfg, &report, &trajectory, Some(&log))?;
    Ok(report)
}

/// Re-evaluates a checkpoint written by [`run_experiment`] under `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<MetricsReport> {
    let start = Instant::now();
    let ckpt = Checkpoint::read(path)?;
    if ckpt.problem != cfg.problem.as_str() {
        return Err(Error::config(
            "problem",
            format!("checkpoint is for `{}`, config is for `{}`", ckpt.problem, cfg.problem.as_str()),
        ));
    }
    if ckpt.shape != cfg.network {
        return Err(Error::config("network", "checkpoint network shape differs from the config"));
    }
    let (problem, template) = Problem::build(cfg)?;
    let params = ckpt.restore_into(&template)?;
    let (mut report, trajectory) = evaluate_params(&problem, &params, cfg, &TrainingLog::default())?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(cfg, &report, &trajectory, None)?;
    Ok(report)
}
