//! Classical solvers used as ground truth: RK4 integration, the Riccati
//! covariance equation, the analytic bang-bang solution and a discrete
//! polyline geodesic optimizer.
//!
//! All oracles are single-threaded pure functions.

mod bangbang;
mod ode;
mod polyline;
mod riccati;

pub use bangbang::{bangbang_analytic, rollout_mintime, BangBang, MinTimeRollout};
pub use ode::{rk4_integrate, rk4_step, OdeProblem, Trajectory};
pub use polyline::{polyline_geodesic_oracle, project_onto_surface, PolylineConfig, PolylineResult};
pub use riccati::{riccati_solve, rollout_kalman, KalmanRollout, RiccatiSolution};

/// Default integration step for all rollouts.
pub const DEFAULT_STEP: f64 = 1e-3;
