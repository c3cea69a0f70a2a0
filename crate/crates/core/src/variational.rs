//! Problem-agnostic training engine.
//!
//! Each epoch samples collocation times uniformly on `[0, T]`, records the
//! problem's condition residuals on a tape, assembles
//! `loss = Σ boundary + α · Σ ‖ψᵢ‖²` and takes one gradient step on all
//! learnable parameters (network weights and learnable scalars alike).
//!
//! Path conditions are normalized by the batch size (mean over the batch of
//! the squared residual norm); point conditions enter as plain squares.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::networks::Mlp;

/// Whether a loss term is a boundary fit (weight 1) or a necessary
/// condition (weight α).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Boundary,
    Condition,
}

/// One recorded loss contribution: for path terms the sum over the recorded
/// points of `‖ψ(t)‖²`, for point terms the squared residual norm.
#[derive(Debug, Clone)]
pub struct Term {
    pub name: String,
    pub kind: TermKind,
    pub node: NodeId,
}

impl Term {
    pub fn condition(name: &str, node: NodeId) -> Self {
        Self {
            name: name.to_string(),
            kind: TermKind::Condition,
            node,
        }
    }

    pub fn boundary(name: &str, node: NodeId) -> Self {
        Self {
            name: name.to_string(),
            kind: TermKind::Boundary,
            node,
        }
    }
}

/// A functional optimization problem expressed through its necessary
/// conditions.
pub trait VariationalProblem: Sync {
    fn name(&self) -> &str;

    /// Collocation times are drawn from `[0, horizon]`.
    fn horizon(&self) -> f64;

    /// Path conditions summed over `times`.
    fn path_terms(&self, tape: &mut Tape<'_>, times: &[f64]) -> Result<Vec<Term>>;

    /// Point conditions (initial, terminal, transversality).
    fn point_terms(&self, tape: &mut Tape<'_>) -> Result<Vec<Term>>;

    /// Names of learnable scalars reported in the training log.
    fn scalar_names(&self) -> Vec<String> {
        Vec::new()
    }

    /// Re-imposes parameter constraints after an update.
    fn project(&self, _params: &mut ParameterStore) {}
}

/// Per-condition residual norms and boundary residuals for one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub conditions: BTreeMap<String, f64>,
    pub boundary: BTreeMap<String, f64>,
}

impl ResidualReport {
    pub fn psi(&self) -> f64 {
        self.conditions.values().sum()
    }

    pub fn boundary_total(&self) -> f64 {
        self.boundary.values().sum()
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.boundary
            .iter()
            .chain(&self.conditions)
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.conditions
            .get(name)
            .or_else(|| self.boundary.get(name))
            .copied()
    }

    fn add(&mut self, kind: TermKind, name: &str, v: f64) {
        let map = match kind {
            TermKind::Boundary => &mut self.boundary,
            TermKind::Condition => &mut self.conditions,
        };
        *map.entry(name.to_string()).or_insert(0.0) += v;
    }
}

/// `Σ boundary + α · Σ conditions`.
pub fn assemble_loss(report: &ResidualReport, alpha: f64) -> f64 {
    report.boundary_total() + alpha * report.psi()
}

/// Records the weighted loss `scale · (Σ boundary + α Σ conditions)` on the
/// tape as a single scalar node.
pub fn assemble_terms(tape: &mut Tape<'_>, terms: &[Term], alpha: f64, scale: f64) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for term in terms {
        let w = match term.kind {
            TermKind::Boundary => scale,
            TermKind::Condition => scale * alpha,
        };
        let weighted = tape.scale(term.node, w);
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant_scalar(0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// When set, the step size decays geometrically to this value over the
    /// epoch budget.
    pub final_learning_rate: Option<f64>,
    pub epochs: usize,
    pub points_per_epoch: usize,
    pub curriculum_period: usize,
    pub curriculum_factor: f64,
    pub alpha0: f64,
    pub alternating_n: usize,
    pub control_batch: usize,
    pub optimizer: OptimizerKind,
    /// Stop once the total loss falls below this value.
    pub tolerance: f64,
    /// Points per recorded tape; chunks may be evaluated in parallel.
    pub chunk_size: usize,
    /// Record a log row every `log_every` epochs (and at the last epoch).
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            final_learning_rate: None,
            epochs: 60_000,
            points_per_epoch: 5000,
            curriculum_period: 5000,
            curriculum_factor: 1.04,
            alpha0: 1.0,
            alternating_n: 5,
            control_batch: 256,
            optimizer: OptimizerKind::Sgd,
            tolerance: 1e-5,
            chunk_size: 1000,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0) {
                return Err(Error::config("train.final_learning_rate", "must be positive"));
            }
        }
        if !(self.curriculum_factor >= 1.0) {
            return Err(Error::config("train.curriculum_factor", "must be at least 1"));
        }
        if !(self.alpha0 >= 0.0) {
            return Err(Error::config("train.alpha0", "must be non-negative"));
        }
        if self.points_per_epoch == 0 {
            return Err(Error::config("train.points_per_epoch", "must be positive"));
        }
        if self.chunk_size == 0 {
            return Err(Error::config("train.chunk_size", "must be positive"));
        }
        if self.curriculum_period == 0 {
            return Err(Error::config("train.curriculum_period", "must be positive"));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Step size used at `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.final_learning_rate {
            Some(f) if self.epochs > 1 => {
                let s = epoch as f64 / (self.epochs - 1) as f64;
                self.learning_rate * (f / self.learning_rate).powf(s)
            }
            _ => self.learning_rate,
        }
    }
}

/// Weight update `α ← α · factor` at every positive multiple of the period.
pub fn curriculum_step(alpha: f64, epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch > 0 && epoch % cfg.curriculum_period == 0 {
        alpha * cfg.curriculum_factor
    } else {
        alpha
    }
}

/// `n` i.i.d. uniform draws on `[0, horizon]`.
pub fn sample_times(n: usize, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if n == 0 || !(horizon > 0.0) {
        return Err(Error::usage("sample_times needs n >= 1 and a positive horizon"));
    }
    let dist = Uniform::new_inclusive(0.0, horizon);
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Plain SGD or Adam over a flat parameter array.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: vec![0; state],
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Updates only the parameters inside `ranges`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], ranges: &[Range<usize>]) {
        for r in ranges {
            for i in r.clone() {
                match self.kind {
                    OptimizerKind::Sgd => params[i] -= self.lr * grad[i],
                    OptimizerKind::Adam => {
                        self.steps[i] += 1;
                        let t = self.steps[i] as i32;
                        self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
                        self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                        let mh = self.m[i] / (1.0 - Self::BETA1.powi(t));
                        let vh = self.v[i] / (1.0 - Self::BETA2.powi(t));
                        params[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub residuals: ResidualReport,
    pub scalars: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Epochs actually run.
    pub epochs: usize,
    pub converged: bool,
}

impl TrainingLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// Header and rows as CSV text: epoch, loss, alpha, one column per
    /// residual, one column per learnable scalar.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.rows.first() else {
            out.push_str("epoch,loss,alpha\n");
            return out;
        };
        let res_names: Vec<&String> = first
            .residuals
            .boundary
            .keys()
            .chain(first.residuals.conditions.keys())
            .collect();
        out.push_str("epoch,loss,alpha");
        for n in &res_names {
            out.push(',');
            out.push_str(n);
        }
        for (n, _) in &first.scalars {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{:e},{:e}", row.epoch, row.loss, row.alpha));
            for n in &res_names {
                out.push_str(&format!(",{:e}", row.residuals.get(n).unwrap_or(f64::NAN)));
            }
            for (_, v) in &row.scalars {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Thread pool honoring `CALVNET_THREADS`.
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("CALVNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Evaluates the residual report, the loss and its gradient.
///
/// Chunks of collocation points are recorded independently (possibly in
/// parallel) and reduced in index order, so results do not depend on the
/// number of threads.
pub fn evaluate<P: VariationalProblem + ?Sized>(
    problem: &P,
    params: &[f64],
    times: &[f64],
    alpha: f64,
    chunk_size: usize,
    pool: &rayon::ThreadPool,
) -> Result<(ResidualReport, f64, Vec<f64>)> {
    let n = times.len().max(1) as f64;
    let chunk_results: Vec<Result<(Vec<(TermKind, String, f64)>, Vec<f64>)>> = pool.install(|| {
        times
            .par_chunks(chunk_size.max(1))
            .map(|chunk| {
                let mut tape = Tape::new(params);
                let terms = problem.path_terms(&mut tape, chunk)?;
                let loss = assemble_terms(&mut tape, &terms, alpha, 1.0 / n)?;
                tape.finalize(loss)?;
                let grad = tape.gradient()?;
                let vals = terms
                    .iter()
                    .map(|t| (t.kind, t.name.clone(), tape.scalar(t.node) / n))
                    .collect();
                Ok((vals, grad))
            })
            .collect()
    });
    let mut report = ResidualReport::default();
    let mut grad = vec![0.0; params.len()];
    for r in chunk_results {
        let (vals, g) = r?;
        for (kind, name, v) in vals {
            report.add(kind, &name, v);
        }
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let mut tape = Tape::new(params);
    let terms = problem.point_terms(&mut tape)?;
    if !terms.is_empty() {
        let loss = assemble_terms(&mut tape, &terms, alpha, 1.0)?;
        tape.finalize(loss)?;
        tape.accumulate_gradient(&mut grad)?;
        for t in &terms {
            report.add(t.kind, &t.name, tape.scalar(t.node));
        }
    }
    let loss = assemble_loss(&report, alpha);
    Ok((report, loss, grad))
}

/// Residual report on a fixed set of times, without gradients.
pub fn residual_report<P: VariationalProblem + ?Sized>(
    problem: &P,
    params: &[f64],
    times: &[f64],
) -> Result<ResidualReport> {
    let pool = thread_pool();
    evaluate(problem, params, times, 1.0, 1000, &pool).map(|(r, _, _)| r)
}

fn log_row<P: VariationalProblem + ?Sized>(
    problem: &P,
    params: &ParameterStore,
    epoch: usize,
    loss: f64,
    alpha: f64,
    report: &ResidualReport,
) -> LogRow {
    LogRow {
        epoch,
        loss,
        alpha,
        residuals: report.clone(),
        scalars: problem
            .scalar_names()
            .into_iter()
            .map(|n| {
                let v = params.scalar(&n).unwrap_or(f64::NAN);
                (n, v)
            })
            .collect(),
    }
}

fn check_finite(report: &ResidualReport, loss: f64, grad: &[f64], epoch: usize) -> Result<()> {
    if let Some(name) = report.first_non_finite() {
        return Err(Error::TrainingAborted {
            epoch,
            residual: name.to_string(),
        });
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingAborted {
            epoch,
            residual: "gradient".to_string(),
        });
    }
    Ok(())
}

/// Gradient training on all parameters.
pub fn train<P: VariationalProblem + ?Sized>(
    problem: &P,
    init: ParameterStore,
    cfg: &TrainConfig,
) -> Result<(ParameterStore, TrainingLog)> {
    let all: Vec<String> = init.slices().iter().map(|s| s.name.clone()).collect();
    train_subset(problem, init, cfg, &all)
}

/// Gradient training that only updates the named parameter slices.
pub fn train_subset<P: VariationalProblem + ?Sized, S: AsRef<str>>(
    problem: &P,
    init: ParameterStore,
    cfg: &TrainConfig,
    trainable: &[S],
) -> Result<(ParameterStore, TrainingLog)> {
    cfg.validate()?;
    let mut params = init;
    let ranges = params.ranges_of(trainable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let pool = thread_pool();
    let mut log = TrainingLog::default();
    let mut alpha = cfg.alpha0;
    for epoch in 0..cfg.epochs {
        alpha = curriculum_step(alpha, epoch, cfg);
        opt.set_learning_rate(cfg.learning_rate_at(epoch));
        let times = sample_times(cfg.points_per_epoch, problem.horizon(), &mut rng)?;
        let (report, loss, grad) =
            evaluate(problem, params.values(), &times, alpha, cfg.chunk_size, &pool)?;
        check_finite(&report, loss, &grad, epoch)?;
        let last = epoch + 1 == cfg.epochs;
        let converged = loss < cfg.tolerance;
        if epoch % cfg.log_every.max(1) == 0 || last || converged {
            log.rows.push(log_row(problem, &params, epoch, loss, alpha, &report));
        }
        if converged {
            log.converged = true;
            log.epochs = epoch;
            return Ok((params, log));
        }
        opt.step(params.values_mut(), &grad, &ranges);
        problem.project(&mut params);
    }
    log.epochs = cfg.epochs;
    Ok((params, log))
}

/// A problem whose control estimator maps `(x, λ)` to `u` and can be trained
/// on its own by minimizing the Hamiltonian.
pub trait AlternatingProblem: VariationalProblem {
    /// Parameter slices of the control estimator.
    fn control_slices(&self) -> Vec<String>;

    /// Parameter slices of the state/costate estimators and learnable scalars.
    fn state_slices(&self) -> Vec<String>;

    /// Per-coordinate `(min, max)` of the control inputs `(x, λ)` produced by
    /// the state and costate estimators at `times`.
    fn control_input_box(&self, params: &[f64], times: &[f64]) -> Result<Vec<(f64, f64)>>;

    /// Mean Hamiltonian over control inputs given row-major in `inputs`.
    fn hamiltonian_loss(&self, tape: &mut Tape<'_>, inputs: &[f64]) -> Result<NodeId>;
}

/// Sequential and alternate training, at the fixed weight `alpha0`.
///
/// Each round (a) freezes the state and costate estimators, draws random
/// `(x, λ)` from the box spanned by their latest outputs (expanded by 20%)
/// and takes `alternating_n` steps on the control estimator minimizing the
/// Hamiltonian, then (b) freezes the control estimator and takes one step on
/// the state/costate estimators and learnable scalars over a fresh batch.
pub fn alternating_train<P: AlternatingProblem + ?Sized>(
    problem: &P,
    init: ParameterStore,
    cfg: &TrainConfig,
) -> Result<(ParameterStore, TrainingLog)> {
    cfg.validate()?;
    let mut params = init;
    let control = params.ranges_of(&problem.control_slices())?;
    let state = params.ranges_of(&problem.state_slices())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let pool = thread_pool();
    let mut log = TrainingLog::default();
    let alpha = cfg.alpha0;
    for epoch in 0..cfg.epochs {
        opt.set_learning_rate(cfg.learning_rate_at(epoch));
        let times = sample_times(cfg.points_per_epoch, problem.horizon(), &mut rng)?;

        // (a) control estimator on random (x, λ)
        let bounds: Vec<(f64, f64)> = problem
            .control_input_box(params.values(), &times)?
            .into_iter()
            .map(|(lo, hi)| {
                let pad = 0.1 * (hi - lo).max(1e-6);
                (lo - pad, hi + pad)
            })
            .collect();
        for _ in 0..cfg.alternating_n {
            let inputs: Vec<f64> = (0..cfg.control_batch)
                .flat_map(|_| bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rand::Rng::gen::<f64>(&mut rng)).collect::<Vec<_>>())
                .collect();
            let mut tape = Tape::new(params.values());
            let h = problem.hamiltonian_loss(&mut tape, &inputs)?;
            tape.finalize(h)?;
            let grad = tape.gradient()?;
            if !tape.scalar(h).is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    residual: "hamiltonian".into(),
                });
            }
            opt.step(params.values_mut(), &grad, &control);
        }

        // (b) state, costate and learnable scalars
        let (report, loss, grad) =
            evaluate(problem, params.values(), &times, alpha, cfg.chunk_size, &pool)?;
        check_finite(&report, loss, &grad, epoch)?;
        let last = epoch + 1 == cfg.epochs;
        if epoch % cfg.log_every.max(1) == 0 || last {
            log.rows.push(log_row(problem, &params, epoch, loss, alpha, &report));
        }
        opt.step(params.values_mut(), &grad, &state);
        problem.project(&mut params);
    }
    log.epochs = cfg.epochs;
    Ok((params, log))
}

/// Fits `net` to a fixed, non-zero profile by mean-squared error over uniform
/// samples on `[0, horizon]`, so that a costate estimator does not start out
/// as the zero function. Returns the final mean-squared error.
pub fn pretrain_costate<F>(
    net: &Mlp,
    params: &mut ParameterStore,
    target: F,
    horizon: f64,
    tol: f64,
    cfg: &TrainConfig,
    max_iters: usize,
) -> Result<f64>
where
    F: Fn(f64) -> Vec<f64>,
{
    let grid: Vec<f64> = (0..=100).map(|i| horizon * i as f64 / 100.0).collect();
    let peak = grid
        .iter()
        .flat_map(|&t| target(t))
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::usage("pretraining target must not be the zero function"));
    }
    let range = params.ranges_of(&[net.name.as_str()])?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let batch = cfg.points_per_epoch.clamp(1, 512);
    let dim = net.spec.output_dim;
    let mut mse = f64::INFINITY;
    for _ in 0..max_iters {
        let times = sample_times(batch, horizon, &mut rng)?;
        let targets: Vec<f64> = times.iter().flat_map(|&t| target(t)).collect();
        let mut tape = Tape::new(params.values());
        let y = net.record_values(&mut tape, batch, times.clone())?;
        let tgt = tape.constant(crate::autodiff::Tensor::from_values(batch, dim, targets));
        let d = tape.sub(y, tgt)?;
        let s = tape.sum_squares(d);
        let l = tape.scale(s, 1.0 / (batch * dim) as f64);
        tape.finalize(l)?;
        mse = tape.scalar(l);
        if mse < tol {
            break;
        }
        let g = tape.gradient()?;
        opt.step(params.values_mut(), &g, &range);
    }
    Ok(mse)
}
