//! Consensus-horizon model-predictive planning over a mixture of affine
//! time-varying predictions.
//!
//! The ego vehicle follows a reference path parameterized by arc length.  One
//! quadratic program couples all retained prediction modes: each mode carries
//! its own copy of the joint state (augmented with the ego's path coordinate)
//! and its own control sequence, mode dynamics enter as equality constraints
//! with the ego rows replaced by the linearized unicycle, and the control
//! sequences are tied together over the first few steps so a single action
//! can be executed regardless of which mode the world realizes.

use crate::dynamics::{self, AgentClass, DynamicsError};
use crate::mixture::{
    assemble, AgentNominal, BlockLayout, LearnedStep, MatsSystem, StructureError,
};
use crate::qp::{
    solve_qp, CscMatrix, QpError, QpProblem, QpSettings, QpSolution, QpStatus, QP_INF,
};
use crate::scenes::IntersectionScenario;
use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

/// Errors from path fitting, QP construction, and planning.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("reference path is degenerate: {0}")]
    DegeneratePath(String),
    #[error("bad planner configuration: {0}")]
    BadConfig(String),
    #[error("ego agent must be a vehicle")]
    EgoNotVehicle,
    #[error("initial state violates bounds: {0}")]
    InfeasibleBoxes(String),
    #[error("plan infeasible even with reduced collision margin")]
    Infeasible,
    #[error("prediction provider failed: {0}")]
    Provider(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("i/o failure")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Reference path
// ---------------------------------------------------------------------------

/// One-dimensional natural cubic spline on strictly increasing knots.
struct Spline1 {
    knots: Vec<f64>,
    vals: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    m: Vec<f64>,
}

impl Spline1 {
    fn fit(knots: &[f64], vals: &[f64]) -> Spline1 {
        let n = knots.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let mut diag = vec![0.0; n];
            let mut upper = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            let mut sub = vec![0.0; n];
            for i in 1..n - 1 {
                let h0 = knots[i] - knots[i - 1];
                let h1 = knots[i + 1] - knots[i];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                upper[i] = h1 / 6.0;
                rhs[i] = (vals[i + 1] - vals[i]) / h1 - (vals[i] - vals[i - 1]) / h0;
            }
            for i in 2..n - 1 {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[n - 2] = rhs[n - 2] / diag[n - 2];
            for i in (1..n - 2).rev() {
                m[i] = (rhs[i] - upper[i] * m[i + 1]) / diag[i];
            }
        }
        Spline1 {
            knots: knots.to_vec(),
            vals: vals.to_vec(),
            m,
        }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.knots.len();
        match self.knots.partition_point(|&k| k <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - t) / h;
        let b = (t - self.knots[i]) / h;
        a * self.vals[i]
            + b * self.vals[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    fn deriv(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - t) / h;
        let b = (t - self.knots[i]) / h;
        (self.vals[i + 1] - self.vals[i]) / h
            + h / 6.0 * ((1.0 - 3.0 * a * a) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1])
    }

    fn deriv2(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - t) / h;
        let b = (t - self.knots[i]) / h;
        a * self.m[i] + b * self.m[i + 1]
    }
}

/// Planar cubic spline through lane-centerline waypoints, reparameterized by
/// arc length.  Headings are unwrapped so they are continuous along the path.
pub struct ReferencePath {
    x: Spline1,
    y: Spline1,
    /// Fine lookup grid: arc length, spline parameter, unwrapped heading,
    /// and position per node.
    s_grid: Vec<f64>,
    tau_grid: Vec<f64>,
    head_grid: Vec<f64>,
    px_grid: Vec<f64>,
    py_grid: Vec<f64>,
    length: f64,
}

/// Grid spacing target (m) for the arc-length lookup table; the
/// reparameterization is accurate to well under 1e-3 m at this resolution.
const PATH_GRID_STEP: f64 = 0.005;

impl ReferencePath {
    /// Fits the path.  Requires at least four waypoints with distinct
    /// consecutive points.
    pub fn from_waypoints(points: &[(f64, f64)]) -> Result<ReferencePath, PlanError> {
        if points.len() < 4 {
            return Err(PlanError::DegeneratePath(format!(
                "need at least 4 waypoints, got {}",
                points.len()
            )));
        }
        let mut knots = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        knots.push(0.0);
        for w in points.windows(2) {
            let chord = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            if chord < 1e-9 {
                return Err(PlanError::DegeneratePath(
                    "duplicate consecutive waypoints".into(),
                ));
            }
            acc += chord;
            knots.push(acc);
        }
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let x = Spline1::fit(&knots, &xs);
        let y = Spline1::fit(&knots, &ys);

        // Fine grid over the chord parameter, then cumulative arc length by
        // the trapezoid rule on the spline speed.
        let mut tau_grid = vec![0.0];
        for w in knots.windows(2) {
            let sub = (((w[1] - w[0]) / PATH_GRID_STEP).ceil() as usize).clamp(32, 2048);
            for k in 1..=sub {
                tau_grid.push(w[0] + (w[1] - w[0]) * k as f64 / sub as f64);
            }
        }
        let speeds: Vec<f64> = tau_grid
            .iter()
            .map(|&t| x.deriv(t).hypot(y.deriv(t)))
            .collect();
        let mut s_grid = Vec::with_capacity(tau_grid.len());
        let mut head_grid = Vec::with_capacity(tau_grid.len());
        let mut px_grid = Vec::with_capacity(tau_grid.len());
        let mut py_grid = Vec::with_capacity(tau_grid.len());
        let mut s = 0.0;
        let mut prev_head = f64::NAN;
        for (k, &t) in tau_grid.iter().enumerate() {
            if k > 0 {
                let dt = t - tau_grid[k - 1];
                s += 0.5 * (speeds[k] + speeds[k - 1]) * dt;
                if speeds[k] < 1e-9 {
                    return Err(PlanError::DegeneratePath("path has a cusp".into()));
                }
            }
            s_grid.push(s);
            let raw = y.deriv(t).atan2(x.deriv(t));
            let head = if prev_head.is_nan() {
                raw
            } else {
                prev_head + crate::scenes::wrap_angle(raw - prev_head)
            };
            prev_head = head;
            head_grid.push(head);
            px_grid.push(x.eval(t));
            py_grid.push(y.eval(t));
        }
        let length = *s_grid.last().expect("grid is non-empty");
        if length < 1e-6 {
            return Err(PlanError::DegeneratePath("path has zero length".into()));
        }
        Ok(ReferencePath {
            x,
            y,
            s_grid,
            tau_grid,
            head_grid,
            px_grid,
            py_grid,
            length,
        })
    }

    /// Total arc length (m).
    pub fn length(&self) -> f64 {
        self.length
    }

    /// Grid cell and interpolated spline parameter for an arc length.
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length);
        let mut i = self.s_grid.partition_point(|&v| v <= s);
        if i == 0 {
            i = 1;
        }
        if i >= self.s_grid.len() {
            i = self.s_grid.len() - 1;
        }
        let (s0, s1) = (self.s_grid[i - 1], self.s_grid[i]);
        let w = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        let tau = self.tau_grid[i - 1] + w * (self.tau_grid[i] - self.tau_grid[i - 1]);
        (i, tau)
    }

    /// Reference position at arc length `s`.
    pub fn position(&self, s: f64) -> (f64, f64) {
        let (_, tau) = self.locate(s);
        (self.x.eval(tau), self.y.eval(tau))
    }

    /// Path heading at arc length `s`, continuous along the path.
    pub fn heading(&self, s: f64) -> f64 {
        let (i, tau) = self.locate(s);
        let raw = self.y.deriv(tau).atan2(self.x.deriv(tau));
        let base = self.head_grid[i - 1];
        base + crate::scenes::wrap_angle(raw - base)
    }

    /// Derivative of the heading with respect to arc length (signed
    /// curvature).
    pub fn heading_rate(&self, s: f64) -> f64 {
        let (_, tau) = self.locate(s);
        let dx = self.x.deriv(tau);
        let dy = self.y.deriv(tau);
        let ddx = self.x.deriv2(tau);
        let ddy = self.y.deriv2(tau);
        let speed2 = dx * dx + dy * dy;
        (dx * ddy - dy * ddx) / (speed2 * speed2.sqrt())
    }

    /// Arc length of the point on the path closest to `(px, py)`.
    pub fn project(&self, px: f64, py: f64) -> f64 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.s_grid.len() {
            let d = (self.px_grid[i] - px).hypot(self.py_grid[i] - py);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let lo = self.s_grid[best.saturating_sub(1)];
        let hi = self.s_grid[(best + 1).min(self.s_grid.len() - 1)];
        // Golden-section refinement of the squared distance on [lo, hi].
        let dist2 = |s: f64| {
            let (x, y) = self.position(s);
            (x - px) * (x - px) + (y - py) * (y - py)
        };
        let phi = 0.5 * (3.0 - 5.0_f64.sqrt());
        let (mut a, mut b) = (lo, hi);
        let mut c = a + phi * (b - a);
        let mut d = b - phi * (b - a);
        let (mut fc, mut fd) = (dist2(c), dist2(d));
        for _ in 0..60 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = a + phi * (b - a);
                fc = dist2(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = b - phi * (b - a);
                fd = dist2(d);
            }
        }
        0.5 * (a + b)
    }
}

// ---------------------------------------------------------------------------
// Contouring costs
// ---------------------------------------------------------------------------

/// Contouring (lateral) and lag (longitudinal) errors of a pose `(x, y)`
/// against the reference at path coordinate `theta`.
pub fn contouring_errors(path: &ReferencePath, x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (xr, yr) = path.position(theta);
    let phi = path.heading(theta);
    let (sin, cos) = phi.sin_cos();
    let ec = sin * (x - xr) - cos * (y - yr);
    let el = -cos * (x - xr) - sin * (y - yr);
    (ec, el)
}

/// Quadratic expansion of the tracking cost around nominal `(x, y, theta)`
/// points.  Each returned pair `(gamma, lin)` contributes
/// `v^T gamma v + lin^T v` to the objective, with `v = (x, y, theta)` in
/// absolute coordinates.  `gamma` is a sum of two scaled outer products and
/// therefore positive semidefinite.  Nominal path coordinates outside
/// `[0, L]` are clamped with a warning.
pub fn tracking_cost_terms(
    path: &ReferencePath,
    nominal: &[(f64, f64, f64)],
    contour_weight: f64,
    lag_weight: f64,
) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    nominal
        .iter()
        .map(|&(xn, yn, theta_raw)| {
            let theta = theta_raw.clamp(0.0, path.length());
            if (theta - theta_raw).abs() > 1e-9 {
                eprintln!(
                    "warning: nominal path coordinate {theta_raw:.3} outside [0, {:.3}], clamped",
                    path.length()
                );
            }
            let (ec, el) = contouring_errors(path, xn, yn, theta);
            let phi = path.heading(theta);
            let rate = path.heading_rate(theta);
            let (sin, cos) = phi.sin_cos();
            let g_c = Vector3::new(sin, -cos, -rate * el);
            let g_l = Vector3::new(-cos, -sin, rate * ec + 1.0);
            let nom = Vector3::new(xn, yn, theta);
            let a0 = ec - g_c.dot(&nom);
            let b0 = el - g_l.dot(&nom);
            let gamma = contour_weight * g_c * g_c.transpose() + lag_weight * g_l * g_l.transpose();
            let lin = 2.0 * (contour_weight * a0 * g_c + lag_weight * b0 * g_l);
            (gamma, lin)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Collision half-planes
// ---------------------------------------------------------------------------

/// Linear separation requirement between the ego and one predicted agent
/// position: `normal . p_ego - normal . p_agent >= margin`, where both
/// positions are decision variables and `normal` points from the agent's
/// nominal position toward the ego's.  `offset` records
/// `normal . agent_nominal + margin` for diagnostics.
#[derive(Debug, Clone)]
pub struct HalfPlane {
    pub agent: usize,
    /// Plan step the constraint applies to (starting at 1, the first free
    /// state).
    pub step: usize,
    pub normal: Vector2<f64>,
    pub offset: f64,
}

/// Builds separating half-planes from nominal positions.  `ego[k]` and
/// `agents[j][k]` are the positions at plan step `k + 1`.  Coincident points
/// reuse the previous step's direction; with no previous direction the
/// constraint is dropped.
pub fn collision_halfplanes(
    ego: &[Vector2<f64>],
    agents: &[Vec<Vector2<f64>>],
    margin: f64,
) -> Vec<HalfPlane> {
    let mut out = Vec::new();
    for (j, means) in agents.iter().enumerate() {
        let mut prev_normal: Option<Vector2<f64>> = None;
        for (k, (pa, pe)) in means.iter().zip(ego).enumerate() {
            let diff = pe - pa;
            let dist = diff.norm();
            let normal = if dist > 1e-9 {
                let n = diff / dist;
                prev_normal = Some(n);
                n
            } else if let Some(n) = prev_normal {
                eprintln!(
                    "warning: coincident ego/agent nominals at step {}, reusing previous direction",
                    k + 1
                );
                n
            } else {
                eprintln!(
                    "warning: coincident ego/agent nominals at step {} with no prior direction, constraint dropped",
                    k + 1
                );
                continue;
            };
            out.push(HalfPlane {
                agent: j,
                step: k + 1,
                normal,
                offset: normal.dot(pa) + margin,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Configuration and variable layout
// ---------------------------------------------------------------------------

/// Planner parameters.  Bounds are `(lower, upper)` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Number of states per mode (including the pinned initial state).
    pub horizon: usize,
    /// Step length (s).
    pub dt: f64,
    /// Number of initial control steps shared across modes.
    pub consensus_steps: usize,
    /// Number of most-probable prediction modes retained.
    pub modes_used: usize,
    /// Turn rate bounds (rad/s).
    pub omega_bounds: (f64, f64),
    /// Acceleration bounds (m/s^2).
    pub accel_bounds: (f64, f64),
    /// Ego speed bounds (m/s).
    pub speed_bounds: (f64, f64),
    /// Path-speed control bounds (m/s).
    pub path_speed_bounds: (f64, f64),
    /// Weight on the contouring (lateral) error.
    pub contour_weight: f64,
    /// Weight on the lag (longitudinal) error.
    pub lag_weight: f64,
    /// Weight on control slew between consecutive steps.
    pub slew_weight: f64,
    /// Linear reward per unit of path speed.
    pub progress_weight: f64,
    /// Collision half-plane margin (m).
    pub margin: f64,
    /// Ego-agent distance below which the closed loop reports a collision (m).
    pub collision_distance: f64,
    /// Outer linearization iterations per plan.
    pub sqp_iters: usize,
    /// Weight each mode's cost terms by its probability instead of equally.
    #[serde(default)]
    pub prob_weighted_costs: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 12,
            dt: 0.25,
            consensus_steps: 4,
            modes_used: 3,
            omega_bounds: (-0.7, 0.7),
            accel_bounds: (-5.0, 4.0),
            speed_bounds: (0.0, 12.0),
            path_speed_bounds: (0.0, 12.0),
            contour_weight: 0.5,
            lag_weight: 0.5,
            slew_weight: 0.01,
            progress_weight: 0.02,
            margin: 2.5,
            collision_distance: 1.0,
            sqp_iters: 2,
            prob_weighted_costs: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.horizon < 2 {
            return Err(PlanError::BadConfig("horizon must be at least 2".into()));
        }
        if self.consensus_steps >= self.horizon {
            return Err(PlanError::BadConfig(
                "consensus steps must be below the horizon".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PlanError::BadConfig("dt must be positive".into()));
        }
        if self.modes_used == 0 || self.sqp_iters == 0 {
            return Err(PlanError::BadConfig(
                "modes_used and sqp_iters must be at least 1".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("omega", self.omega_bounds),
            ("accel", self.accel_bounds),
            ("speed", self.speed_bounds),
            ("path_speed", self.path_speed_bounds),
        ] {
            if !(lo < hi) {
                return Err(PlanError::BadConfig(format!("{name} bounds out of order")));
            }
        }
        if self.contour_weight < 0.0
            || self.lag_weight < 0.0
            || self.slew_weight < 0.0
            || self.progress_weight < 0.0
            || self.margin < 0.0
        {
            return Err(PlanError::BadConfig("weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Maps (mode, step) pairs onto decision-variable indices.
///
/// Agents whose predicted rows never read the ego state, the ego controls,
/// or another retained agent are decision-independent: their trajectories
/// are fixed by the initial state alone, so they enter the constraints as
/// constants instead of variables.  Per mode `z` the variables are `horizon`
/// packed states (the ego's four entries, each retained agent's block, and
/// the ego path coordinate last — `state_dim()` entries per step), followed
/// by `horizon - 1` controls `(omega, accel, path_speed)`.  Total variable
/// count: `n = modes * (horizon * state_dim + (horizon - 1) * 3)`.
#[derive(Debug, Clone)]
pub struct QpIndexMap {
    pub modes: usize,
    pub horizon: usize,
    /// Dimension of the full joint state, all agents included.
    pub joint_dim: usize,
    /// Per agent: offset of its block inside the packed per-step state, or
    /// `None` when the agent is condensed into constraint constants.
    pub packed: Vec<Option<usize>>,
    /// Packed state entries per step, path coordinate included.
    pub var_state_dim: usize,
}

impl QpIndexMap {
    pub fn state_dim(&self) -> usize {
        self.var_state_dim
    }

    pub fn control_dim(&self) -> usize {
        3
    }

    fn mode_stride(&self) -> usize {
        self.horizon * self.state_dim() + (self.horizon - 1) * self.control_dim()
    }

    /// First variable of the packed state at step `t` of mode `z`.
    pub fn state(&self, z: usize, t: usize) -> usize {
        z * self.mode_stride() + t * self.state_dim()
    }

    /// Path-coordinate variable at step `t` of mode `z`.
    pub fn theta(&self, z: usize, t: usize) -> usize {
        self.state(z, t) + self.var_state_dim - 1
    }

    /// First variable of agent `i`'s block at step `t` of mode `z`, or
    /// `None` when the agent is condensed.
    pub fn agent(&self, z: usize, t: usize, i: usize) -> Option<usize> {
        self.packed[i].map(|po| self.state(z, t) + po)
    }

    /// First variable of the control at step `t` of mode `z`.
    pub fn control(&self, z: usize, t: usize) -> usize {
        z * self.mode_stride() + self.horizon * self.state_dim() + t * self.control_dim()
    }

    pub fn num_vars(&self) -> usize {
        self.modes * self.mode_stride()
    }
}

/// Linearization point for one mode: `horizon` augmented states and
/// `horizon - 1` controls.
#[derive(Debug, Clone)]
pub struct ModeNominal {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// A constructed planning QP plus its variable map and the half-planes that
/// were emitted per mode.
#[derive(Debug)]
pub struct BuiltQp {
    pub problem: QpProblem,
    pub index: QpIndexMap,
    pub halfplanes: Vec<(usize, HalfPlane)>,
    /// Per mode, per step: the exact mean rollout from the initial state.
    /// Condensed agents take their trajectories from here; empty when every
    /// agent is retained as a decision variable.
    pub condensed: Vec<Vec<DVector<f64>>>,
}

// ---------------------------------------------------------------------------
// QP construction
// ---------------------------------------------------------------------------

/// Builds the coupled QP for all modes of `system`.
///
/// Agents without any learned dependence on the ego (directly or through
/// another retained agent, in any mode) are condensed out: their exact mean
/// rollouts replace their variables in every constraint that mentions them.
/// This leaves the solution unchanged while shrinking the problem to the
/// decisions that actually interact.
///
/// Constraint rows are emitted in this order (counts in parentheses, with
/// `sd` the packed per-step state dimension `index.state_dim()`):
/// initial states (`modes * sd`), per-mode dynamics
/// (`modes * (horizon - 1) * sd`), consensus ties
/// (`(modes - 1) * min(consensus_steps, horizon - 1) * 3`), control boxes
/// (`modes * (horizon - 1) * 3`), ego speed and path-coordinate boxes
/// (`modes * (horizon - 1) * 2`), and collision half-planes (up to
/// `modes * (agents - 1) * (horizon - 1)`, minus any dropped rows, plus one
/// braking-reserve row per final-step half-plane that opposes the heading).
#[allow(clippy::too_many_arguments)]
pub fn build_qp(
    config: &PlannerConfig,
    path: &ReferencePath,
    system: &MatsSystem,
    initial: &DVector<f64>,
    theta0: f64,
    nominals: &[ModeNominal],
    prev_control: Option<&Vector3<f64>>,
    margin: f64,
) -> Result<BuiltQp, PlanError> {
    config.validate()?;
    let layout = &system.layout;
    if layout.classes[0] != AgentClass::Vehicle {
        return Err(PlanError::EgoNotVehicle);
    }
    if layout.control_dim != 2 {
        return Err(PlanError::BadConfig(
            "planner expects two ego controls in the prediction system".into(),
        ));
    }
    let t_steps = config.horizon;
    let f = layout.full_dim();
    let n_agents = layout.num_agents();
    let zq = system.modes.len();
    if zq == 0 {
        return Err(PlanError::BadConfig("system has no modes".into()));
    }
    if layout.horizon < t_steps - 1 {
        return Err(PlanError::BadConfig(format!(
            "prediction horizon {} is shorter than the plan needs ({})",
            layout.horizon,
            t_steps - 1
        )));
    }
    if initial.len() != f {
        return Err(PlanError::BadConfig(format!(
            "initial joint state has length {}, expected {f}",
            initial.len()
        )));
    }
    if nominals.len() != zq {
        return Err(PlanError::BadConfig(format!(
            "{} nominals for {} modes",
            nominals.len(),
            zq
        )));
    }
    for nom in nominals {
        if nom.states.len() != t_steps
            || nom.controls.len() != t_steps - 1
            || nom.states.iter().any(|s| s.len() != f + 1)
            || nom.controls.iter().any(|u| u.len() != 3)
        {
            return Err(PlanError::BadConfig("nominal trajectory shape".into()));
        }
    }
    let slack = 1e-6;
    let v0 = initial[3];
    if v0 < config.speed_bounds.0 - slack || v0 > config.speed_bounds.1 + slack {
        return Err(PlanError::InfeasibleBoxes(format!(
            "initial speed {v0} outside [{}, {}]",
            config.speed_bounds.0, config.speed_bounds.1
        )));
    }
    if theta0 < -slack || theta0 > path.length() + slack {
        return Err(PlanError::InfeasibleBoxes(format!(
            "initial path coordinate {theta0} outside [0, {}]",
            path.length()
        )));
    }

    // Decide which agents must stay decision variables.  `refs[i][m]` marks
    // that some mode's rows for agent `i` read agent `m`'s columns within
    // the planning horizon; a direct read of the ego controls retains the
    // agent immediately, and retention propagates along `refs` so that
    // anything influenced by a retained agent is retained too.
    let mut retained = vec![false; n_agents];
    retained[0] = true;
    let mut refs = vec![vec![false; n_agents]; n_agents];
    for i in 1..n_agents {
        let off = layout.offset(i);
        let d = layout.classes[i].state_dim();
        for mode in &system.modes {
            for t in 0..t_steps - 1 {
                for k in 0..d {
                    if mode.b_seq[t][(off + k, 0)] != 0.0 || mode.b_seq[t][(off + k, 1)] != 0.0 {
                        retained[i] = true;
                    }
                    for (m, seen) in refs[i].iter_mut().enumerate() {
                        if *seen || m == i {
                            continue;
                        }
                        let mo = layout.offset(m);
                        let md = layout.classes[m].state_dim();
                        *seen =
                            (mo..mo + md).any(|col| mode.a_seq[t][(off + k, col)] != 0.0);
                    }
                }
            }
        }
    }
    loop {
        let grown = (1..n_agents)
            .find(|&i| !retained[i] && (0..n_agents).any(|m| retained[m] && refs[i][m]));
        match grown {
            Some(i) => retained[i] = true,
            None => break,
        }
    }

    let mut packed: Vec<Option<usize>> = vec![None; n_agents];
    let mut var_off = 0usize;
    for (i, keep) in retained.iter().enumerate() {
        if *keep {
            packed[i] = Some(var_off);
            var_off += layout.classes[i].state_dim();
        }
    }
    // Full joint column -> packed column, `None` when the owner is condensed.
    let mut packed_col: Vec<Option<usize>> = vec![None; f];
    for (i, po) in packed.iter().enumerate() {
        if let Some(po) = po {
            let off = layout.offset(i);
            for k in 0..layout.classes[i].state_dim() {
                packed_col[off + k] = Some(po + k);
            }
        }
    }

    // Exact mean rollouts for the condensed agents.  Their rows read neither
    // the ego nor any retained agent, so seeding those entries with the
    // initial values cannot leak into the entries that get consulted.
    let condensed: Vec<Vec<DVector<f64>>> = if packed.iter().any(|p| p.is_none()) {
        system
            .modes
            .iter()
            .map(|mode| {
                let zero_u = DVector::zeros(2);
                let mut s = initial.clone();
                let mut traj = Vec::with_capacity(t_steps);
                traj.push(s.clone());
                for t in 0..t_steps - 1 {
                    s = mode.one_step_mean(t, &s, &zero_u);
                    traj.push(s.clone());
                }
                traj
            })
            .collect()
    } else {
        Vec::new()
    };

    let idx = QpIndexMap {
        modes: zq,
        horizon: t_steps,
        joint_dim: f,
        packed,
        var_state_dim: var_off + 1,
    };
    let n = idx.num_vars();
    let mut p_tri: Vec<(usize, usize, f64)> = Vec::new();
    let mut q = DVector::<f64>::zeros(n);

    for (z, nom) in nominals.iter().enumerate() {
        // Modes enter the objective equally unless probability weighting is
        // switched on.
        let w = if config.prob_weighted_costs {
            system.mode_probs[z]
        } else {
            1.0
        };
        // Tracking costs on the free states.
        let pts: Vec<(f64, f64, f64)> = (1..t_steps)
            .map(|t| (nom.states[t][0], nom.states[t][1], nom.states[t][f]))
            .collect();
        let terms = tracking_cost_terms(path, &pts, config.contour_weight, config.lag_weight);
        for (t, (gamma, lin)) in (1..t_steps).zip(terms) {
            let vars = [idx.state(z, t), idx.state(z, t) + 1, idx.theta(z, t)];
            for a in 0..3 {
                for b in 0..3 {
                    let v = 2.0 * w * gamma[(a, b)];
                    if v != 0.0 {
                        p_tri.push((vars[a], vars[b], v));
                    }
                }
                q[vars[a]] += w * lin[a];
            }
        }
        // Control slew.
        let qu2 = 2.0 * w * config.slew_weight;
        if qu2 > 0.0 {
            for t in 1..t_steps - 1 {
                let u0 = idx.control(z, t - 1);
                let u1 = idx.control(z, t);
                for k in 0..3 {
                    p_tri.push((u0 + k, u0 + k, qu2));
                    p_tri.push((u1 + k, u1 + k, qu2));
                    p_tri.push((u0 + k, u1 + k, -qu2));
                    p_tri.push((u1 + k, u0 + k, -qu2));
                }
            }
            if let Some(up) = prev_control {
                let u0 = idx.control(z, 0);
                for k in 0..3 {
                    p_tri.push((u0 + k, u0 + k, qu2));
                    q[u0 + k] -= qu2 * up[k];
                }
            }
        }
        // Progress reward.
        for t in 0..t_steps - 1 {
            q[idx.control(z, t) + 2] -= w * config.progress_weight;
        }
    }

    let mut a_tri: Vec<(usize, usize, f64)> = Vec::new();
    let mut lower: Vec<f64> = Vec::new();
    let mut upper: Vec<f64> = Vec::new();
    let mut row = 0usize;
    let mut halfplanes: Vec<(usize, HalfPlane)> = Vec::new();

    // Initial states (retained agents only; condensed ones are constants).
    for z in 0..zq {
        for i in 0..n_agents {
            let Some(base) = idx.agent(z, 0, i) else {
                continue;
            };
            let off = layout.offset(i);
            for k in 0..layout.classes[i].state_dim() {
                a_tri.push((row, base + k, 1.0));
                lower.push(initial[off + k]);
                upper.push(initial[off + k]);
                row += 1;
            }
        }
        a_tri.push((row, idx.theta(z, 0), 1.0));
        lower.push(theta0);
        upper.push(theta0);
        row += 1;
    }

    // Dynamics.
    for (z, nom) in nominals.iter().enumerate() {
        let mode = &system.modes[z];
        for t in 0..t_steps - 1 {
            let ego_state = nom.states[t].rows(0, 4).into_owned();
            let ego_control = DVector::from_column_slice(&[nom.controls[t][0], nom.controls[t][1]]);
            let lin = dynamics::linearize(AgentClass::Vehicle, &ego_state, &ego_control, config.dt)?;
            for k in 0..4 {
                a_tri.push((row, idx.state(z, t + 1) + k, 1.0));
                for j in 0..4 {
                    let v = lin.a_mat[(k, j)];
                    if v != 0.0 {
                        a_tri.push((row, idx.state(z, t) + j, -v));
                    }
                }
                for j in 0..2 {
                    let v = lin.b_mat[(k, j)];
                    if v != 0.0 {
                        a_tri.push((row, idx.control(z, t) + j, -v));
                    }
                }
                lower.push(lin.c_vec[k]);
                upper.push(lin.c_vec[k]);
                row += 1;
            }
            for i in 1..n_agents {
                let Some(base_next) = idx.agent(z, t + 1, i) else {
                    continue;
                };
                let off = layout.offset(i);
                let d = layout.classes[i].state_dim();
                for k in 0..d {
                    a_tri.push((row, base_next + k, 1.0));
                    // Reads of condensed agents become constants on the rhs.
                    let mut rhs = mode.c_seq[t][off + k];
                    for col in 0..f {
                        let v = mode.a_seq[t][(off + k, col)];
                        if v == 0.0 {
                            continue;
                        }
                        match packed_col[col] {
                            Some(pc) => a_tri.push((row, idx.state(z, t) + pc, -v)),
                            None => rhs += v * condensed[z][t][col],
                        }
                    }
                    for j in 0..2 {
                        let v = mode.b_seq[t][(off + k, j)];
                        if v != 0.0 {
                            a_tri.push((row, idx.control(z, t) + j, -v));
                        }
                    }
                    lower.push(rhs);
                    upper.push(rhs);
                    row += 1;
                }
            }
            // Path coordinate integrator.
            a_tri.push((row, idx.theta(z, t + 1), 1.0));
            a_tri.push((row, idx.theta(z, t), -1.0));
            a_tri.push((row, idx.control(z, t) + 2, -config.dt));
            lower.push(0.0);
            upper.push(0.0);
            row += 1;
        }
    }

    // Consensus ties against mode 0.
    let tc = config.consensus_steps.min(t_steps - 1);
    for z in 1..zq {
        for t in 0..tc {
            for k in 0..3 {
                a_tri.push((row, idx.control(z, t) + k, 1.0));
                a_tri.push((row, idx.control(0, t) + k, -1.0));
                lower.push(0.0);
                upper.push(0.0);
                row += 1;
            }
        }
    }

    // Control boxes.
    let control_bounds = [
        config.omega_bounds,
        config.accel_bounds,
        config.path_speed_bounds,
    ];
    for z in 0..zq {
        for t in 0..t_steps - 1 {
            for (k, (lo, hi)) in control_bounds.iter().enumerate() {
                a_tri.push((row, idx.control(z, t) + k, 1.0));
                lower.push(*lo);
                upper.push(*hi);
                row += 1;
            }
        }
    }

    // Ego speed and path-coordinate boxes on the free states.
    for z in 0..zq {
        for t in 1..t_steps {
            a_tri.push((row, idx.state(z, t) + 3, 1.0));
            lower.push(config.speed_bounds.0);
            upper.push(config.speed_bounds.1);
            row += 1;
            a_tri.push((row, idx.theta(z, t), 1.0));
            lower.push(0.0);
            upper.push(path.length());
            row += 1;
        }
    }

    // Collision half-planes, plus a braking reserve at the horizon end:
    // whenever the final-step normal opposes the ego's heading, the final
    // clearance must also cover the distance the ego needs to stop.  The
    // quadratic stopping distance v^2 / (2 a_max) is replaced by its secant
    // v_max / (2 a_max) * v over the speed box, which bounds it from above,
    // so plans can no longer end at the margin at speed and trap the next
    // replan.  Braking is assumed to roughly keep the nominal heading.
    let kappa = config.speed_bounds.1 / (2.0 * config.accel_bounds.0.abs());
    for (z, nom) in nominals.iter().enumerate() {
        let ego_pts: Vec<Vector2<f64>> = (1..t_steps)
            .map(|t| Vector2::new(nom.states[t][0], nom.states[t][1]))
            .collect();
        let agent_pts: Vec<Vec<Vector2<f64>>> = (1..n_agents)
            .map(|i| {
                let off = layout.offset(i);
                (1..t_steps)
                    .map(|t| Vector2::new(nom.states[t][off], nom.states[t][off + 1]))
                    .collect()
            })
            .collect();
        let final_heading = nom.states[t_steps - 1][2];
        let ahead = Vector2::new(final_heading.cos(), final_heading.sin());
        for hp in collision_halfplanes(&ego_pts, &agent_pts, margin) {
            let agent = hp.agent + 1;
            let t = hp.step;
            // Condensed agents contribute their rollout position to the
            // bound instead of variable columns.
            let mut bound = margin;
            let agent_cols = match idx.agent(z, t, agent) {
                Some(base) => Some(base),
                None => {
                    let off = layout.offset(agent);
                    bound += hp.normal.x * condensed[z][t][off]
                        + hp.normal.y * condensed[z][t][off + 1];
                    None
                }
            };
            a_tri.push((row, idx.state(z, t), hp.normal.x));
            a_tri.push((row, idx.state(z, t) + 1, hp.normal.y));
            if let Some(base) = agent_cols {
                a_tri.push((row, base, -hp.normal.x));
                a_tri.push((row, base + 1, -hp.normal.y));
            }
            lower.push(bound);
            upper.push(QP_INF);
            row += 1;
            let approach = hp.normal.dot(&ahead);
            if t == t_steps - 1 && approach < -1e-3 {
                a_tri.push((row, idx.state(z, t), hp.normal.x));
                a_tri.push((row, idx.state(z, t) + 1, hp.normal.y));
                if let Some(base) = agent_cols {
                    a_tri.push((row, base, -hp.normal.x));
                    a_tri.push((row, base + 1, -hp.normal.y));
                }
                a_tri.push((row, idx.state(z, t) + 3, kappa * approach));
                lower.push(bound);
                upper.push(QP_INF);
                row += 1;
            }
            halfplanes.push((z, hp));
        }
    }

    let p_mat = CscMatrix::from_triplets(n, n, &p_tri)?;
    let a_mat = CscMatrix::from_triplets(row, n, &a_tri)?;
    let problem = QpProblem::new(
        p_mat,
        q,
        a_mat,
        DVector::from_vec(lower),
        DVector::from_vec(upper),
    )?;
    Ok(BuiltQp {
        problem,
        index: idx,
        halfplanes,
        condensed,
    })
}

// ---------------------------------------------------------------------------
// Prediction providers
// ---------------------------------------------------------------------------

/// Source of mode-conditioned predictions for the planner.  Implementations
/// must be pure functions of `(step, history, controls)`.
pub trait PredictionProvider {
    /// Predicts the joint future given the world step index, the joint state
    /// history (last entry = current state), the ego controls between the
    /// history states, and a tentative ego control sequence `(omega, accel)`
    /// covering the prediction horizon.
    fn predict(
        &self,
        step: usize,
        history: &[DVector<f64>],
        history_controls: &[DVector<f64>],
        ego_controls: &[DVector<f64>],
    ) -> Result<MatsSystem, PlanError>;
}

/// Returns a fixed pre-assembled mixture regardless of the query (canned
/// predictions and tests).
pub struct StaticProvider(pub MatsSystem);

impl PredictionProvider for StaticProvider {
    fn predict(
        &self,
        _step: usize,
        _history: &[DVector<f64>],
        _history_controls: &[DVector<f64>],
        _ego_controls: &[DVector<f64>],
    ) -> Result<MatsSystem, PlanError> {
        Ok(self.0.clone())
    }
}

/// Builds mode systems from an intersection scenario's per-mode agent
/// scripts: each agent's scripted control is folded into the affine offset so
/// the mode means replay the scripts exactly.
pub struct ScriptedProvider {
    scenario: IntersectionScenario,
    horizon: usize,
    /// Noise scale reported for every state row.
    noise: f64,
}

impl ScriptedProvider {
    pub fn new(scenario: IntersectionScenario, horizon: usize) -> Self {
        ScriptedProvider {
            scenario,
            horizon,
            noise: 0.05,
        }
    }
}

impl PredictionProvider for ScriptedProvider {
    fn predict(
        &self,
        step: usize,
        history: &[DVector<f64>],
        _history_controls: &[DVector<f64>],
        ego_controls: &[DVector<f64>],
    ) -> Result<MatsSystem, PlanError> {
        let current = history
            .last()
            .ok_or_else(|| PlanError::Provider("empty history".into()))?;
        let layout = BlockLayout::new(self.scenario.scene.classes(), self.horizon);
        let n = layout.num_agents();
        let f = layout.full_dim();
        let dt = self.scenario.scene.dt;
        let learned: Vec<LearnedStep> = (0..self.horizon)
            .map(|_| LearnedStep {
                a_cross: vec![],
                b_rows: vec![],
                q: DVector::from_element(f, self.noise),
            })
            .collect();
        let mut modes = Vec::with_capacity(self.scenario.mode_scripts.len());
        for scripts in &self.scenario.mode_scripts {
            let mut nominal = Vec::with_capacity(self.horizon);
            let mut ego = layout.agent_state(current, 0);
            for t in 0..self.horizon {
                let ue = ego_controls
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| DVector::zeros(2));
                let mut step_noms = Vec::with_capacity(n);
                step_noms.push(AgentNominal {
                    state: ego.clone(),
                    control: ue.clone(),
                });
                for (i, script) in scripts.iter().enumerate().skip(1) {
                    let k = (step + t).min(script.states.len() - 1);
                    let control = if step + t < script.controls.len() {
                        script.controls[step + t].clone()
                    } else {
                        DVector::zeros(layout.classes[i].control_dim())
                    };
                    step_noms.push(AgentNominal {
                        state: script.states[k].clone(),
                        control,
                    });
                }
                nominal.push(step_noms);
                ego = dynamics::step(layout.classes[0], &ego, &ue, dt)?;
            }
            modes.push(assemble(&layout, &learned, &nominal, 1e-3, dt)?);
        }
        let system = MatsSystem {
            layout,
            modes,
            mode_probs: self.scenario.mode_probs.clone(),
        };
        system.validate()?;
        Ok(system)
    }
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

/// Output of one planning cycle.
#[derive(Debug, Clone)]
pub struct PlanResult {
    /// `states[z][t]`: joint state plus path coordinate (length F+1).
    pub states: Vec<Vec<DVector<f64>>>,
    /// `controls[z][t]`: `(omega, accel, path_speed)`.
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Probabilities of the retained modes (renormalized).
    pub mode_probs: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Total QP wall time for this plan (s).
    pub solve_time: f64,
    /// Wall time of each individual QP solve within this plan (s).
    pub solve_times: Vec<f64>,
    /// Total ADMM iterations across the QP solves of this plan.
    pub qp_iterations: usize,
    /// True when the collision margin had to be reduced to stay feasible.
    pub degraded: bool,
    /// Path coordinate assigned to the current state.
    pub theta0: f64,
}

impl PlanResult {
    /// The action to execute: the first control of the consensus prefix.
    pub fn executed_control(&self) -> Vector3<f64> {
        let u = &self.controls[0][0];
        Vector3::new(u[0], u[1], u[2])
    }

    /// Largest disagreement between mode control sequences over the first
    /// `steps` controls.
    pub fn consensus_gap(&self, steps: usize) -> f64 {
        let mut gap = 0.0f64;
        let t_max = steps.min(self.controls[0].len());
        for z1 in 0..self.controls.len() {
            for z2 in z1 + 1..self.controls.len() {
                for t in 0..t_max {
                    for k in 0..3 {
                        gap = gap.max((self.controls[z1][t][k] - self.controls[z2][t][k]).abs());
                    }
                }
            }
        }
        gap
    }
}

/// Solves a planning QP.  The polish step normally lands the solution on the
/// active set to near machine precision; when requested and polish was
/// rejected, the problem is re-solved warm-started at a much tighter
/// tolerance so downstream consensus and feasibility guarantees still hold.
fn solve_planning_qp(
    problem: QpProblem,
    tighten: bool,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    let spare = if tighten { Some(problem.clone()) } else { None };
    let mut settings = QpSettings::default();
    settings.max_iter = 50_000;
    let mut sol = solve_qp(problem, settings, warm)?;
    if let Some(p) = spare {
        if sol.status == QpStatus::Solved && !sol.polished {
            let mut tight = QpSettings::default();
            tight.eps_abs = 1e-7;
            tight.eps_rel = 1e-7;
            tight.max_iter = 200_000;
            let mut retry = solve_qp(p, tight, Some((&sol.x, &sol.y)))?;
            if retry.status == QpStatus::Solved {
                retry.iterations += sol.iterations;
                sol = retry;
            }
        }
    }
    Ok(sol)
}

/// Keeps the `count` most probable modes (ties broken toward lower index)
/// and renormalizes their probabilities.
fn select_top_modes(system: &MatsSystem, count: usize) -> MatsSystem {
    let keep = count.min(system.modes.len());
    let mut order: Vec<usize> = (0..system.modes.len()).collect();
    order.sort_by(|&a, &b| {
        system.mode_probs[b]
            .partial_cmp(&system.mode_probs[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    let sel = &order[..keep];
    let total: f64 = sel.iter().map(|&z| system.mode_probs[z]).sum();
    let probs: Vec<f64> = if total > 0.0 {
        sel.iter().map(|&z| system.mode_probs[z] / total).collect()
    } else {
        vec![1.0 / keep as f64; keep]
    };
    MatsSystem {
        layout: system.layout.clone(),
        modes: sel.iter().map(|&z| system.modes[z].clone()).collect(),
        mode_probs: probs,
    }
}

/// Rolls a nominal trajectory for one mode: exact unicycle for the ego,
/// mode dynamics for the agents, first-order integration for the path
/// coordinate.
fn roll_nominal(
    system: &MatsSystem,
    z: usize,
    current: &DVector<f64>,
    theta0: f64,
    controls: &[DVector<f64>],
    config: &PlannerConfig,
    path: &ReferencePath,
) -> Result<ModeNominal, PlanError> {
    let f = system.layout.full_dim();
    let mode = &system.modes[z];
    let mut states = Vec::with_capacity(config.horizon);
    let mut s = DVector::zeros(f + 1);
    s.rows_mut(0, f).copy_from(current);
    s[f] = theta0;
    states.push(s.clone());
    for (t, u) in controls.iter().enumerate() {
        let ue = DVector::from_column_slice(&[u[0], u[1]]);
        let ego_next = dynamics::step(
            AgentClass::Vehicle,
            &s.rows(0, 4).into_owned(),
            &ue,
            config.dt,
        )?;
        let prev_joint = s.rows(0, f).into_owned();
        let mean = mode.one_step_mean(t, &prev_joint, &ue);
        let mut next = DVector::zeros(f + 1);
        next.rows_mut(0, 4).copy_from(&ego_next);
        if f > 4 {
            next.rows_mut(4, f - 4).copy_from(&mean.rows(4, f - 4));
        }
        next[f] = (s[f] + config.dt * u[2]).clamp(0.0, path.length());
        states.push(next.clone());
        s = next;
    }
    Ok(ModeNominal {
        states,
        controls: controls.to_vec(),
    })
}

/// Rebuilds full joint states (plus path coordinate) from the packed QP
/// solution, filling condensed agents from their rollouts.
fn extract_plan(
    idx: &QpIndexMap,
    layout: &BlockLayout,
    condensed: &[Vec<DVector<f64>>],
    x: &DVector<f64>,
) -> (Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>) {
    let f = idx.joint_dim;
    let mut states = Vec::with_capacity(idx.modes);
    let mut controls = Vec::with_capacity(idx.modes);
    for z in 0..idx.modes {
        let mut sz = Vec::with_capacity(idx.horizon);
        for t in 0..idx.horizon {
            let mut full = DVector::zeros(f + 1);
            for i in 0..layout.num_agents() {
                let off = layout.offset(i);
                let d = layout.classes[i].state_dim();
                match idx.agent(z, t, i) {
                    Some(base) => {
                        for k in 0..d {
                            full[off + k] = x[base + k];
                        }
                    }
                    None => {
                        for k in 0..d {
                            full[off + k] = condensed[z][t][off + k];
                        }
                    }
                }
            }
            full[f] = x[idx.theta(z, t)];
            sz.push(full);
        }
        let mut uz = Vec::with_capacity(idx.horizon - 1);
        for t in 0..idx.horizon - 1 {
            let o = idx.control(z, t);
            uz.push(DVector::from_column_slice(&[x[o], x[o + 1], x[o + 2]]));
        }
        states.push(sz);
        controls.push(uz);
    }
    (states, controls)
}

/// One receding-horizon planning cycle.
///
/// Runs `sqp_iters` rounds of: query the provider with the tentative ego
/// controls, keep the most probable modes, linearize around the current
/// nominals, build and solve the coupled QP (warm-started when the shape is
/// unchanged), and adopt the solution as the next nominal.  A primal-
/// infeasible QP is retried once with the collision margin halved and the
/// result flagged as degraded.
#[allow(clippy::too_many_arguments)]
pub fn plan_step(
    config: &PlannerConfig,
    path: &ReferencePath,
    provider: &dyn PredictionProvider,
    step: usize,
    history: &[DVector<f64>],
    history_controls: &[DVector<f64>],
    prev_control: Option<&Vector3<f64>>,
    warm: Option<&PlanResult>,
) -> Result<PlanResult, PlanError> {
    config.validate()?;
    let current = history
        .last()
        .ok_or_else(|| PlanError::BadConfig("history is empty".into()))?;
    let t_steps = config.horizon;
    let ego = current.rows(0, 4).into_owned();
    let theta0 = path.project(ego[0], ego[1]);

    // Starting controls: shift the previous plan or coast along the path.
    let v0 = ego[3].clamp(config.path_speed_bounds.0, config.path_speed_bounds.1);
    let cold: Vec<DVector<f64>> = vec![DVector::from_column_slice(&[0.0, 0.0, v0]); t_steps - 1];
    let mut mode_controls: Vec<Vec<DVector<f64>>> = match warm {
        Some(prev) if prev.controls.iter().all(|u| u.len() == t_steps - 1) => prev
            .controls
            .iter()
            .map(|u| {
                let mut shifted: Vec<DVector<f64>> = u[1..].to_vec();
                // Pad with a coasting step: duplicating an aggressive final
                // control would roll the nominal past obstacles the previous
                // plan stopped short of, flipping half-plane directions.
                let last = &u[t_steps - 2];
                shifted.push(DVector::from_column_slice(&[0.0, 0.0, last[2]]));
                shifted
            })
            .collect(),
        _ => vec![cold.clone()],
    };

    let mut result: Option<PlanResult> = None;
    let mut warm_xy: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut degraded = false;
    let mut solve_times: Vec<f64> = Vec::new();
    let mut total_iters = 0usize;

    for it in 0..config.sqp_iters {
        // Tentative ego controls for the provider, padded to its horizon.
        let lead = &mode_controls[0];
        let mut tentative: Vec<DVector<f64>> = lead
            .iter()
            .map(|u| DVector::from_column_slice(&[u[0], u[1]]))
            .collect();
        while tentative.len() < t_steps {
            tentative.push(tentative.last().cloned().unwrap_or_else(|| DVector::zeros(2)));
        }
        let full = provider.predict(step, history, history_controls, &tentative)?;
        full.validate()?;
        let system = select_top_modes(&full, config.modes_used);
        let zq = system.modes.len();
        if mode_controls.len() != zq {
            let template = mode_controls[0].clone();
            mode_controls = vec![template; zq];
        }
        let nominals: Vec<ModeNominal> = (0..zq)
            .map(|z| {
                roll_nominal(
                    &system,
                    z,
                    current,
                    theta0,
                    &mode_controls[z],
                    config,
                    path,
                )
            })
            .collect::<Result<_, _>>()?;

        let final_iter = it + 1 == config.sqp_iters;
        let mut margin = config.margin;
        let built = build_qp(
            config,
            path,
            &system,
            current,
            theta0,
            &nominals,
            prev_control,
            margin,
        )?;
        let idx = built.index;
        let condensed = built.condensed;
        let warm_ref = warm_xy.as_ref().filter(|(x, y)| {
            x.len() == built.problem.num_vars() && y.len() == built.problem.num_constraints()
        });
        let start = Instant::now();
        let mut sol: QpSolution =
            solve_planning_qp(built.problem, final_iter, warm_ref.map(|(x, y)| (x, y)))?;
        solve_times.push(start.elapsed().as_secs_f64());
        if sol.status == QpStatus::PrimalInfeasible {
            margin *= 0.5;
            degraded = true;
            // The margin only moves the half-plane bounds; the variable
            // packing and rollouts are unchanged.
            let retry = build_qp(
                config,
                path,
                &system,
                current,
                theta0,
                &nominals,
                prev_control,
                margin,
            )?;
            let start = Instant::now();
            sol = solve_planning_qp(retry.problem, final_iter, None)?;
            solve_times.push(start.elapsed().as_secs_f64());
            if sol.status == QpStatus::PrimalInfeasible {
                return Err(PlanError::Infeasible);
            }
        }
        total_iters += sol.iterations;

        let (states, controls) = extract_plan(&idx, &system.layout, &condensed, &sol.x);
        mode_controls = controls.clone();
        warm_xy = Some((sol.x.clone(), sol.y.clone()));
        result = Some(PlanResult {
            states,
            controls,
            mode_probs: system.mode_probs.clone(),
            objective: sol.objective,
            status: sol.status,
            solve_time: solve_times.iter().sum(),
            solve_times: solve_times.clone(),
            qp_iterations: total_iters,
            degraded,
            theta0,
        });
    }
    Ok(result.expect("at least one outer iteration ran"))
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

/// Ground-truth world the closed loop advances after each executed action.
pub trait WorldModel {
    fn classes(&self) -> Vec<AgentClass>;
    fn joint_state(&self) -> DVector<f64>;
    /// Applies the ego control `(omega, accel)` and advances one step.
    fn advance(&mut self, ego_control: &DVector<f64>) -> Result<(), PlanError>;
}

/// World that replays the realized mode of an intersection scenario while
/// the ego follows applied controls through the vehicle dynamics.
pub struct ScriptedWorld {
    scripts: Vec<crate::scenes::AgentScript>,
    classes: Vec<AgentClass>,
    ego: DVector<f64>,
    step: usize,
    dt: f64,
}

impl ScriptedWorld {
    pub fn new(scenario: &IntersectionScenario) -> Self {
        let scripts = scenario.mode_scripts[scenario.realized_mode].clone();
        let classes = scenario.scene.classes();
        let ego = scripts[0].states[0].clone();
        ScriptedWorld {
            scripts,
            classes,
            ego,
            step: 0,
            dt: scenario.scene.dt,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }
}

impl WorldModel for ScriptedWorld {
    fn classes(&self) -> Vec<AgentClass> {
        self.classes.clone()
    }

    fn joint_state(&self) -> DVector<f64> {
        let f: usize = self.classes.iter().map(|c| c.state_dim()).sum();
        let mut joint = DVector::zeros(f);
        joint.rows_mut(0, 4).copy_from(&self.ego);
        let mut off = 4;
        for script in self.scripts.iter().skip(1) {
            let k = self.step.min(script.states.len() - 1);
            let d = script.states[k].len();
            joint.rows_mut(off, d).copy_from(&script.states[k]);
            off += d;
        }
        joint
    }

    fn advance(&mut self, ego_control: &DVector<f64>) -> Result<(), PlanError> {
        self.ego = dynamics::step(self.classes[0], &self.ego, ego_control, self.dt)?;
        self.step += 1;
        Ok(())
    }
}

/// Per-step record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    /// Ego state after applying the control.
    pub ego: DVector<f64>,
    /// Executed `(omega, accel, path_speed)`.
    pub control: Vector3<f64>,
    /// Minimum ego-agent distance after the step (infinite with no agents).
    pub min_distance: f64,
    /// Total QP wall time for the step (ms).
    pub solve_ms: f64,
    /// Wall time of each individual QP solve within the step (ms).
    pub qp_solve_ms: Vec<f64>,
    pub objective: f64,
    pub degraded: bool,
    pub consensus_gap: f64,
    pub contour_error: f64,
    pub lag_error: f64,
    pub mode_probs: Vec<f64>,
}

/// Closed-loop outcome; `collision` holds the step at which the ego got
/// closer to an agent than the configured collision distance.
#[derive(Debug, Clone)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepLog>,
    /// The full plan produced at each step, in step order.
    pub plans: Vec<PlanResult>,
    pub collision: Option<usize>,
}

fn ego_agent_min_distance(joint: &DVector<f64>, classes: &[AgentClass]) -> f64 {
    let mut best = f64::INFINITY;
    let mut off = classes[0].state_dim();
    for class in classes.iter().skip(1) {
        let d = (joint[0] - joint[off]).hypot(joint[1] - joint[off + 1]);
        best = best.min(d);
        off += class.state_dim();
    }
    best
}

/// Runs the receding-horizon loop: plan, execute the first consensus action,
/// advance the true world, repeat.  Terminates early when the ego gets
/// closer to any agent than `config.collision_distance`.
pub fn closed_loop(
    config: &PlannerConfig,
    path: &ReferencePath,
    provider: &dyn PredictionProvider,
    world: &mut dyn WorldModel,
    steps: usize,
) -> Result<ClosedLoopLog, PlanError> {
    let classes = world.classes();
    let mut history: Vec<DVector<f64>> = vec![world.joint_state()];
    let mut history_controls: Vec<DVector<f64>> = Vec::new();
    let mut prev_plan: Option<PlanResult> = None;
    let mut prev_control: Option<Vector3<f64>> = None;
    let mut log = Vec::with_capacity(steps);
    let mut plans = Vec::with_capacity(steps);
    let mut collision = None;
    let ego0 = history[0].rows(0, 4).into_owned();
    let mut theta_world = path.project(ego0[0], ego0[1]);

    for k in 0..steps {
        let plan = plan_step(
            config,
            path,
            provider,
            k,
            &history,
            &history_controls,
            prev_control.as_ref(),
            prev_plan.as_ref(),
        )?;
        let u = plan.executed_control();
        let ue = DVector::from_column_slice(&[u[0], u[1]]);
        world.advance(&ue)?;
        let joint = world.joint_state();
        let ego = joint.rows(0, 4).into_owned();
        theta_world = (theta_world + u[2] * config.dt).clamp(0.0, path.length());
        let (ec, el) = contouring_errors(path, ego[0], ego[1], theta_world);
        let min_distance = ego_agent_min_distance(&joint, &classes);
        log.push(StepLog {
            step: k,
            time: k as f64 * config.dt,
            ego,
            control: u,
            min_distance,
            solve_ms: plan.solve_time * 1e3,
            qp_solve_ms: plan.solve_times.iter().map(|t| t * 1e3).collect(),
            objective: plan.objective,
            degraded: plan.degraded,
            consensus_gap: plan.consensus_gap(config.consensus_steps),
            contour_error: ec,
            lag_error: el,
            mode_probs: plan.mode_probs.clone(),
        });
        history.push(joint);
        history_controls.push(ue);
        prev_control = Some(u);
        plans.push(plan.clone());
        prev_plan = Some(plan);
        if min_distance < config.collision_distance {
            collision = Some(k);
            break;
        }
    }
    Ok(ClosedLoopLog {
        steps: log,
        plans,
        collision,
    })
}

/// Writes the closed-loop log as CSV.  Wall-clock solve times vary between
/// runs; every other column is deterministic.
pub fn write_closed_loop_csv(log: &ClosedLoopLog, out: &mut dyn Write) -> Result<(), PlanError> {
    let k = log.steps.first().map_or(0, |s| s.mode_probs.len());
    write!(
        out,
        "step,time_s,x_m,y_m,heading_rad,speed_mps,omega_radps,accel_mps2,path_speed_mps,min_distance_m,solve_ms,objective,degraded,consensus_gap,contour_error_m,lag_error_m"
    )?;
    for z in 0..k {
        write!(out, ",pi_{z}")?;
    }
    writeln!(out)?;
    for s in &log.steps {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{:.3},{},{},{},{},{}",
            s.step,
            s.time,
            s.ego[0],
            s.ego[1],
            s.ego[2],
            s.ego[3],
            s.control[0],
            s.control[1],
            s.control[2],
            s.min_distance,
            s.solve_ms,
            s.objective,
            s.degraded,
            s.consensus_gap,
            s.contour_error,
            s.lag_error
        )?;
        for p in &s.mode_probs {
            write!(out, ",{p}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_path(len: f64) -> ReferencePath {
        let pts: Vec<(f64, f64)> = (0..=((len / 2.0) as usize))
            .map(|i| (2.0 * i as f64, 0.0))
            .collect();
        ReferencePath::from_waypoints(&pts).unwrap()
    }

    fn circle_path(radius: f64, arc: f64) -> ReferencePath {
        let step = 1.0 / radius; // ~1 m of arc between waypoints
        let count = (arc / step).ceil() as usize;
        let pts: Vec<(f64, f64)> = (0..=count)
            .map(|i| {
                let a = arc * i as f64 / count as f64;
                (radius * a.cos(), radius * a.sin())
            })
            .collect();
        ReferencePath::from_waypoints(&pts).unwrap()
    }

    /// Single-mode system over the given classes with no learned blocks;
    /// agents coast from `initial`.
    fn coasting_system(
        classes: Vec<AgentClass>,
        initial: &DVector<f64>,
        horizon: usize,
        dt: f64,
    ) -> MatsSystem {
        let layout = BlockLayout::new(classes, horizon);
        let f = layout.full_dim();
        let learned: Vec<LearnedStep> = (0..horizon)
            .map(|_| LearnedStep {
                a_cross: vec![],
                b_rows: vec![],
                q: DVector::from_element(f, 0.05),
            })
            .collect();
        let mut cur: Vec<DVector<f64>> = (0..layout.num_agents())
            .map(|i| layout.agent_state(initial, i))
            .collect();
        let mut nominal = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            nominal.push(cur.iter().cloned().map(AgentNominal::coasting).collect());
            for (i, class) in layout.classes.iter().enumerate() {
                let zero = DVector::zeros(class.control_dim());
                cur[i] = dynamics::step(*class, &cur[i], &zero, dt).unwrap();
            }
        }
        let mode = assemble(&layout, &learned, &nominal, 1e-3, dt).unwrap();
        MatsSystem {
            layout,
            modes: vec![mode],
            mode_probs: vec![1.0],
        }
    }

    #[test]
    fn straight_reference_path_is_the_x_axis() {
        let path = straight_path(40.0);
        assert_relative_eq!(path.length(), 40.0, epsilon = 1e-9);
        for s in [0.0, 3.7, 17.0, 39.99] {
            let (x, y) = path.position(s);
            assert_relative_eq!(x, s, epsilon = 1e-9);
            assert!(y.abs() < 1e-12);
            assert!(path.heading(s).abs() < 1e-12);
            assert!(path.heading_rate(s).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_reference_path_matches_the_analytic_circle() {
        let radius = 20.0;
        let arc = 2.0; // radians of arc
        let path = circle_path(radius, arc);
        assert!((path.length() - radius * arc).abs() < 0.05);
        // Independent arc-length oracle: fine chord sum over the public API.
        let mut chord = 0.0;
        let mut prev = path.position(0.0);
        let steps = 40_000;
        for i in 1..=steps {
            let s = path.length() * i as f64 / steps as f64;
            let p = path.position(s);
            chord += (p.0 - prev.0).hypot(p.1 - prev.1);
            prev = p;
        }
        assert!(
            (chord - path.length()).abs() < 1e-3,
            "chord sum {} vs length {}",
            chord,
            path.length()
        );
        // Natural end conditions flatten the curve near the path's ends, so
        // the analytic comparison probes the interior.
        for i in 0..=20 {
            let s = path.length() * (0.15 + 0.7 * i as f64 / 20.0);
            let expected_heading = std::f64::consts::FRAC_PI_2 + s / radius;
            assert!(
                (path.heading(s) - expected_heading).abs() < 1e-3,
                "heading at {s}: {} vs {expected_heading}",
                path.heading(s)
            );
            assert!(
                (path.heading_rate(s) - 1.0 / radius).abs() < 5e-4,
                "curvature at {s}: {}",
                path.heading_rate(s)
            );
            let p = path.position(s);
            assert!((p.0.hypot(p.1) - radius).abs() < 2e-4);
        }
    }

    #[test]
    fn projection_recovers_the_closest_arc_length() {
        let path = circle_path(20.0, 2.0);
        for frac in [0.25, 0.5, 0.83] {
            let s = path.length() * frac;
            let (x, y) = path.position(s);
            // Push the probe off the path along its own normal; the closest
            // point is then exactly the starting arc length.
            let phi = path.heading(s);
            let probe = (x - 1.5 * phi.sin(), y + 1.5 * phi.cos());
            assert!(
                (path.project(probe.0, probe.1) - s).abs() < 1e-4,
                "projection at {frac}: {} vs {s}",
                path.project(probe.0, probe.1)
            );
            // And on-path points project to themselves.
            assert!((path.project(x, y) - s).abs() < 1e-4);
        }
    }

    #[test]
    fn straight_path_tracking_costs_match_the_closed_forms() {
        let path = straight_path(40.0);
        // On a straight path along x the errors are exactly affine, so the
        // quadratic expansion must reproduce the true cost everywhere.
        let (qc, ql) = (0.5, 0.5);
        let nominal = (7.0, 0.4, 6.5);
        let terms = tracking_cost_terms(&path, &[nominal], qc, ql);
        let (gamma, lin) = &terms[0];
        let (ec0, el0) = contouring_errors(&path, nominal.0, nominal.1, nominal.2);
        let c0 = qc * ec0 * ec0 + ql * el0 * el0
            - (Vector3::new(nominal.0, nominal.1, nominal.2).dot(&(gamma * Vector3::new(nominal.0, nominal.1, nominal.2)))
                + lin.dot(&Vector3::new(nominal.0, nominal.1, nominal.2)));
        for probe in [(9.0, -1.0, 3.0), (4.2, 0.7, 8.1), (0.5, 2.0, 0.2)] {
            let v = Vector3::new(probe.0, probe.1, probe.2);
            let quad = v.dot(&(gamma * v)) + lin.dot(&v) + c0;
            let (ec, el) = contouring_errors(&path, probe.0, probe.1, probe.2);
            assert_relative_eq!(ec, -(probe.1), epsilon = 1e-12);
            assert_relative_eq!(el, -(probe.0 - probe.2), epsilon = 1e-9);
            let want = qc * ec * ec + ql * el * el;
            assert_relative_eq!(quad, want, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn tracking_gradients_match_finite_differences() {
        let path = circle_path(20.0, 2.0);
        let probes = [
            (18.3, 8.2, 0.21317 * 40.0),
            (12.0, 15.5, 0.40991 * 40.0),
            (5.0, 19.0, 0.63113 * 40.0),
        ];
        let h = 1e-5;
        for &(x, y, theta) in &probes {
            let phi = path.heading(theta);
            let rate = path.heading_rate(theta);
            let (ec, el) = contouring_errors(&path, x, y, theta);
            let g_c = Vector3::new(phi.sin(), -phi.cos(), -rate * el);
            let g_l = Vector3::new(-phi.cos(), -phi.sin(), rate * ec + 1.0);
            let fd = |f: &dyn Fn(f64, f64, f64) -> f64| {
                Vector3::new(
                    (f(x + h, y, theta) - f(x - h, y, theta)) / (2.0 * h),
                    (f(x, y + h, theta) - f(x, y - h, theta)) / (2.0 * h),
                    (f(x, y, theta + h) - f(x, y, theta - h)) / (2.0 * h),
                )
            };
            let fd_c = fd(&|a, b, c| contouring_errors(&path, a, b, c).0);
            let fd_l = fd(&|a, b, c| contouring_errors(&path, a, b, c).1);
            for k in 0..3 {
                assert!(
                    (g_c[k] - fd_c[k]).abs() <= 3e-5 * g_c[k].abs().max(1.0),
                    "contour gradient component {k}: {} vs {}",
                    g_c[k],
                    fd_c[k]
                );
                assert!(
                    (g_l[k] - fd_l[k]).abs() <= 3e-5 * g_l[k].abs().max(1.0),
                    "lag gradient component {k}: {} vs {}",
                    g_l[k],
                    fd_l[k]
                );
            }
        }
    }

    #[test]
    fn halfplane_for_a_lateral_agent_bounds_the_ego_coordinate() {
        let ego = vec![Vector2::new(10.0, 0.0)];
        let agents = vec![vec![Vector2::new(0.0, 0.0)]];
        let hps = collision_halfplanes(&ego, &agents, 2.0);
        assert_eq!(hps.len(), 1);
        assert_relative_eq!(hps[0].normal.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(hps[0].normal.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(hps[0].offset, 2.0, epsilon = 1e-12);
        assert_eq!(hps[0].step, 1);
    }

    #[test]
    fn coincident_nominals_reuse_the_previous_direction_or_drop() {
        let ego = vec![Vector2::new(5.0, 1.0), Vector2::new(6.0, 1.0)];
        let agents = vec![vec![Vector2::new(5.0, -1.0), Vector2::new(6.0, 1.0)]];
        let hps = collision_halfplanes(&ego, &agents, 1.0);
        assert_eq!(hps.len(), 2);
        assert_relative_eq!(hps[1].normal.x, hps[0].normal.x, epsilon = 1e-12);
        assert_relative_eq!(hps[1].normal.y, hps[0].normal.y, epsilon = 1e-12);
        // Coincident from the start: the constraint is dropped.
        let ego = vec![Vector2::new(5.0, 1.0)];
        let agents = vec![vec![Vector2::new(5.0, 1.0)]];
        assert!(collision_halfplanes(&ego, &agents, 1.0).is_empty());
    }

    #[test]
    fn variable_and_constraint_counts_match_the_documented_formulas() {
        let config = PlannerConfig::default();
        let mut classes = vec![AgentClass::Vehicle];
        classes.extend(vec![AgentClass::Particle; 9]);
        let f = 40;
        let mut initial = DVector::zeros(f);
        initial[3] = 8.0; // ego speed within bounds
        for i in 1..10 {
            initial[4 * i] = 20.0 + 3.0 * i as f64;
            initial[4 * i + 1] = (i as f64) - 5.0;
        }
        let system = coasting_system(classes, &initial, config.horizon, config.dt);
        let path = straight_path(150.0);
        let controls = vec![DVector::from_column_slice(&[0.0, 0.0, 8.0]); config.horizon - 1];
        let nominal =
            roll_nominal(&system, 0, &initial, 0.0, &controls, &config, &path).unwrap();
        // Three identical modes.
        let system3 = MatsSystem {
            layout: system.layout.clone(),
            modes: vec![
                system.modes[0].clone(),
                system.modes[0].clone(),
                system.modes[0].clone(),
            ],
            mode_probs: vec![0.5, 0.3, 0.2],
        };
        let built = build_qp(
            &config,
            &path,
            &system3,
            &initial,
            0.0,
            &[nominal.clone(), nominal.clone(), nominal.clone()],
            None,
            config.margin,
        )
        .unwrap();
        // Coasting agents have no dependence on the ego, so only the ego's
        // four entries plus the path coordinate stay decision variables.
        assert_eq!(built.index.state_dim(), 5);
        assert_eq!(built.index.num_vars(), 3 * (12 * 5 + 11 * 3));
        assert_eq!(built.problem.num_vars(), 279);
        let t = config.horizon;
        // Final-step half-planes whose normal opposes the ego heading (here
        // +x on a straight path) get a second row reserving braking distance.
        let braking_rows = built
            .halfplanes
            .iter()
            .filter(|(_, hp)| hp.step == t - 1 && hp.normal.x < -1e-3)
            .count();
        let expect_rows = 3 * t * 5                  // initial + dynamics
            + 3 * config.consensus_steps.min(t - 1) * 2 // consensus (modes 1, 2 vs 0)
            + 3 * (t - 1) * 3                        // control boxes
            + 3 * (t - 1) * 2                        // speed and path boxes
            + built.halfplanes.len()
            + braking_rows;
        assert_eq!(built.problem.num_constraints(), expect_rows);
        assert_eq!(built.halfplanes.len(), 3 * 9 * (t - 1));
        assert!(braking_rows > 0, "fixture should exercise braking rows");

        // Couple one agent to the ego controls: it must be retained, and the
        // full per-step state grows by its four entries.
        let mut coupled = system3.clone();
        for z in 0..3 {
            for t in 0..config.horizon {
                coupled.modes[z].b_seq[t][(4, 0)] = 0.01;
            }
        }
        let controls = vec![DVector::from_column_slice(&[0.0, 0.0, 8.0]); config.horizon - 1];
        let nom_c = roll_nominal(&coupled, 0, &initial, 0.0, &controls, &config, &path).unwrap();
        let built_c = build_qp(
            &config,
            &path,
            &coupled,
            &initial,
            0.0,
            &[nom_c.clone(), nom_c.clone(), nom_c],
            None,
            config.margin,
        )
        .unwrap();
        assert_eq!(built_c.index.state_dim(), 9);
        assert_eq!(built_c.index.packed[1], Some(4));
        assert!(built_c.index.packed[2..].iter().all(|p| p.is_none()));
        assert_eq!(built_c.index.num_vars(), 3 * (12 * 9 + 11 * 3));
    }

    #[test]
    fn retention_propagates_through_agent_to_agent_reads() {
        // Agent 1 reacts to the ego's controls; agent 2 reads agent 1's
        // state; agent 3 is independent.  The first two must stay decision
        // variables, the third is condensed.
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(16);
        initial[3] = 8.0;
        for i in 1..4 {
            initial[4 * i] = 25.0 + 5.0 * i as f64;
            initial[4 * i + 1] = 3.0;
        }
        let mut system = coasting_system(
            vec![
                AgentClass::Vehicle,
                AgentClass::Particle,
                AgentClass::Particle,
                AgentClass::Particle,
            ],
            &initial,
            config.horizon,
            config.dt,
        );
        for t in 0..config.horizon {
            system.modes[0].b_seq[t][(4, 1)] = 0.5;
            system.modes[0].a_seq[t][(8, 4)] = 0.1;
        }
        let controls = vec![DVector::from_column_slice(&[0.0, 0.0, 8.0]); config.horizon - 1];
        let nominal = roll_nominal(&system, 0, &initial, 0.0, &controls, &config, &path).unwrap();
        let built = build_qp(
            &config,
            &path,
            &system,
            &initial,
            0.0,
            &[nominal],
            None,
            config.margin,
        )
        .unwrap();
        assert_eq!(built.index.packed[1], Some(4));
        assert_eq!(built.index.packed[2], Some(8));
        assert_eq!(built.index.packed[3], None);
        assert_eq!(built.index.state_dim(), 13);
    }

    #[test]
    fn condensing_decision_independent_agents_leaves_the_plan_unchanged() {
        // The same scenario solved twice: once with a genuinely uncoupled
        // agent (condensed out of the QP) and once with a vanishingly small
        // control coupling that forces the agent to stay a variable.  The
        // plans must agree far beyond solver tolerance.
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(8);
        initial[3] = 8.0;
        initial[4] = 18.0; // drifts slowly across the lane ahead
        initial[5] = -2.0;
        initial[6] = 0.3;
        initial[7] = 0.35;
        let plain = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let mut pinned = plain.clone();
        for t in 0..config.horizon {
            pinned.modes[0].b_seq[t][(6, 0)] = 1e-30;
        }
        let history = vec![initial.clone()];
        let run = |system: MatsSystem| {
            plan_step(
                &config,
                &path,
                &StaticProvider(system),
                0,
                &history,
                &[],
                None,
                None,
            )
            .unwrap()
        };
        let p_cond = run(plain.clone());
        let p_full = run(pinned);
        for t in 0..config.horizon - 1 {
            for k in 0..3 {
                assert!(
                    (p_cond.controls[0][t][k] - p_full.controls[0][t][k]).abs() < 1e-6,
                    "control {k} differs at step {t}: {} vs {}",
                    p_cond.controls[0][t][k],
                    p_full.controls[0][t][k]
                );
            }
        }
        for t in 0..config.horizon {
            for k in 0..9 {
                assert!(
                    (p_cond.states[0][t][k] - p_full.states[0][t][k]).abs() < 1e-5,
                    "state entry {k} differs at step {t}"
                );
            }
        }
        // The reconstructed trajectory of the condensed agent is exactly its
        // mean rollout from the initial state.
        let mode = &plain.modes[0];
        let mut s = initial.clone();
        let zero_u = DVector::zeros(2);
        for t in 1..config.horizon {
            s = mode.one_step_mean(t - 1, &s, &zero_u);
            for k in 4..8 {
                assert_relative_eq!(p_cond.states[0][t][k], s[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ego_on_path_at_top_speed_holds_course() {
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(4);
        initial[0] = 10.0;
        initial[3] = 12.0; // at the speed cap, progress reward saturates
        let system = coasting_system(vec![AgentClass::Vehicle], &initial, config.horizon, config.dt);
        let provider = StaticProvider(system);
        let history = vec![initial.clone()];
        let plan = plan_step(&config, &path, &provider, 0, &history, &[], None, None).unwrap();
        let u = plan.executed_control();
        assert!(u[0].abs() < 1e-2, "omega {}", u[0]);
        assert!(u[1].abs() < 1e-2, "accel {}", u[1]);
        for t in 0..config.horizon {
            assert!(plan.states[0][t][1].abs() < 1e-3, "lateral at {t}");
        }
        assert_eq!(plan.status, QpStatus::Solved);
    }

    #[test]
    fn duplicated_modes_collapse_to_the_single_mode_plan() {
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(8);
        initial[0] = 0.0;
        initial[3] = 8.0;
        initial[4] = 30.0; // agent ahead, drifting across
        initial[5] = -4.0;
        initial[6] = -1.0;
        initial[7] = 1.2;
        let single = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let triple = MatsSystem {
            layout: single.layout.clone(),
            modes: vec![
                single.modes[0].clone(),
                single.modes[0].clone(),
                single.modes[0].clone(),
            ],
            mode_probs: vec![0.4, 0.35, 0.25],
        };
        let history = vec![initial.clone()];
        let single_cfg = PlannerConfig {
            modes_used: 1,
            ..config.clone()
        };
        let p1 = plan_step(
            &single_cfg,
            &path,
            &StaticProvider(single),
            0,
            &history,
            &[],
            None,
            None,
        )
        .unwrap();
        let p3 = plan_step(
            &config,
            &path,
            &StaticProvider(triple),
            0,
            &history,
            &[],
            None,
            None,
        )
        .unwrap();
        assert_eq!(p3.states.len(), 3);
        // All three modes agree with each other for every step...
        for t in 0..config.horizon - 1 {
            for z in 1..3 {
                for k in 0..3 {
                    assert!(
                        (p3.controls[z][t][k] - p3.controls[0][t][k]).abs() < 1e-6,
                        "mode {z} control {k} differs at step {t}"
                    );
                }
            }
        }
        // ...and with the single-mode plan.
        for t in 0..config.horizon - 1 {
            for k in 0..3 {
                assert!(
                    (p3.controls[0][t][k] - p1.controls[0][t][k]).abs() < 1e-6,
                    "control {k} differs from the single-mode plan at step {t}"
                );
            }
        }
        assert!(p3.consensus_gap(config.consensus_steps) < 1e-6);
    }

    #[test]
    fn solved_plans_satisfy_the_built_constraints() {
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        // Static agent just off the lane: the separation constraints become
        // active as the ego passes, and the plan must stay feasible.
        let mut initial = DVector::zeros(8);
        initial[3] = 8.0;
        initial[4] = 16.0;
        initial[5] = -1.8;
        let system = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let controls = vec![DVector::from_column_slice(&[0.0, 0.0, 8.0]); config.horizon - 1];
        let nominal = roll_nominal(&system, 0, &initial, 0.0, &controls, &config, &path).unwrap();
        let built = build_qp(
            &config,
            &path,
            &system,
            &initial,
            0.0,
            &[nominal],
            None,
            config.margin,
        )
        .unwrap();
        let problem = built.problem.clone();
        let sol = solve_planning_qp(built.problem, true, None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        let ax = problem.a_mat.mul_vec(&sol.x);
        let mut worst = 0.0f64;
        for r in 0..problem.num_constraints() {
            worst = worst.max(problem.lower[r] - ax[r]).max(ax[r] - problem.upper[r]);
        }
        assert!(worst < 1e-6, "constraint violation {worst}");
    }

    #[test]
    fn exploitable_coupling_lets_the_ego_keep_progressing() {
        // A static agent blocks the lane ahead.  With an inert prediction the
        // ego must stop short of it.  When the prediction couples the agent
        // to the ego's steering, the planner can nudge the agent aside and
        // drive past, so it reaps clearly more path progress.  The progress
        // reward is raised enough that passing is worth the maneuver.
        let config = PlannerConfig {
            margin: 2.0,
            progress_weight: 0.2,
            ..PlannerConfig::default()
        };
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(8);
        initial[3] = 6.0;
        initial[4] = 21.5; // agent ahead on the lane, standing still
        let inert = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let mut coupled = inert.clone();
        for t in 0..config.horizon {
            // The blocking agent speeds up when the ego accelerates toward
            // it, the way a lead driver pulls away when tailgated.  This
            // acts along the separation direction, so the planner can
            // exploit it.
            coupled.modes[0].b_seq[t][(6, 1)] = 5.0;
        }
        let history = vec![initial.clone()];
        let run = |system: MatsSystem| {
            plan_step(
                &config,
                &path,
                &StaticProvider(system),
                0,
                &history,
                &[],
                None,
                None,
            )
            .unwrap()
        };
        let p_inert = run(inert);
        let p_coupled = run(coupled);
        let f = 8;
        let progress = |plan: &PlanResult| plan.states[0][config.horizon - 1][f];
        assert!(!p_inert.degraded && !p_coupled.degraded);
        // Both plans respect the separation margin on their own predictions.
        let clearance = |plan: &PlanResult| {
            let mut best = f64::INFINITY;
            for t in 1..config.horizon {
                let s = &plan.states[0][t];
                best = best.min((s[0] - s[4]).hypot(s[1] - s[5]));
            }
            best
        };
        assert!(clearance(&p_inert) > config.margin - 1e-6);
        assert!(clearance(&p_coupled) > config.margin - 1e-6);
        assert!(
            progress(&p_coupled) > progress(&p_inert) + 2.0,
            "coupled progress {} vs inert {}",
            progress(&p_coupled),
            progress(&p_inert)
        );
    }

    #[test]
    fn second_linearization_round_does_not_worsen_the_objective() {
        // Re-linearizing dynamics and separation normals perturbs the
        // feasible set slightly, so exact monotonicity across rounds is not
        // guaranteed; the second round must merely not diverge.
        let config1 = PlannerConfig {
            sqp_iters: 1,
            ..PlannerConfig::default()
        };
        let config2 = PlannerConfig {
            sqp_iters: 2,
            ..PlannerConfig::default()
        };
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(8);
        initial[3] = 6.0;
        initial[4] = 20.0; // slow crosser ahead
        initial[5] = -3.0;
        initial[7] = 0.9;
        let system = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config1.horizon,
            config1.dt,
        );
        let history = vec![initial.clone()];
        let run = |config: &PlannerConfig| {
            plan_step(
                config,
                &path,
                &StaticProvider(system.clone()),
                0,
                &history,
                &[],
                None,
                None,
            )
            .unwrap()
        };
        let first = run(&config1);
        let last = run(&config2);
        let slack = 5e-3 * first.objective.abs().max(1.0);
        assert!(
            last.objective <= first.objective + slack,
            "objective rose across rounds: {} -> {}",
            first.objective,
            last.objective
        );
    }

    #[test]
    fn probability_weighted_costs_keep_the_duplicated_mode_reduction() {
        let config = PlannerConfig {
            prob_weighted_costs: true,
            ..PlannerConfig::default()
        };
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(8);
        initial[3] = 8.0;
        initial[4] = 30.0;
        initial[5] = -4.0;
        initial[6] = -1.0;
        initial[7] = 1.2;
        let single = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let triple = MatsSystem {
            layout: single.layout.clone(),
            modes: vec![
                single.modes[0].clone(),
                single.modes[0].clone(),
                single.modes[0].clone(),
            ],
            mode_probs: vec![0.5, 0.3, 0.2],
        };
        let history = vec![initial.clone()];
        let single_cfg = PlannerConfig {
            modes_used: 1,
            ..config.clone()
        };
        let p1 = plan_step(
            &single_cfg,
            &path,
            &StaticProvider(single),
            0,
            &history,
            &[],
            None,
            None,
        )
        .unwrap();
        let p3 = plan_step(
            &config,
            &path,
            &StaticProvider(triple),
            0,
            &history,
            &[],
            None,
            None,
        )
        .unwrap();
        for t in 0..config.horizon - 1 {
            for k in 0..3 {
                assert!(
                    (p3.controls[0][t][k] - p1.controls[0][t][k]).abs() < 1e-6,
                    "control {k} differs at step {t} under probability weighting"
                );
            }
        }
    }

    #[test]
    fn infeasible_initial_speed_is_rejected() {
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(4);
        initial[3] = 20.0;
        let system = coasting_system(vec![AgentClass::Vehicle], &initial, config.horizon, config.dt);
        let controls = vec![DVector::from_column_slice(&[0.0, 0.0, 8.0]); config.horizon - 1];
        let nominal = roll_nominal(&system, 0, &initial, 0.0, &controls, &config, &path).unwrap();
        let err = build_qp(
            &config,
            &path,
            &system,
            &initial,
            0.0,
            &[nominal],
            None,
            config.margin,
        )
        .unwrap_err();
        assert!(matches!(err, PlanError::InfeasibleBoxes(_)));
    }

    #[test]
    fn blocked_corridor_halves_the_margin_and_flags_degraded() {
        // Two agents flank the lane so the full margin admits no corridor;
        // the halved margin does.
        let config = PlannerConfig {
            margin: 2.5,
            ..PlannerConfig::default()
        };
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(12);
        initial[3] = 8.0;
        initial[4] = 14.0;
        initial[5] = 2.0;
        initial[8] = 14.0;
        initial[9] = -2.0;
        let system = coasting_system(
            vec![AgentClass::Vehicle, AgentClass::Particle, AgentClass::Particle],
            &initial,
            config.horizon,
            config.dt,
        );
        let history = vec![initial.clone()];
        let plan = plan_step(
            &config,
            &path,
            &StaticProvider(system),
            0,
            &history,
            &[],
            None,
            None,
        )
        .unwrap();
        assert!(plan.degraded);
        assert_eq!(plan.status, QpStatus::Solved);
    }

    #[test]
    fn closed_loop_on_an_empty_road_tracks_the_path() {
        let config = PlannerConfig::default();
        let path = straight_path(150.0);
        let mut initial = DVector::zeros(4);
        initial[3] = 8.0;
        struct EmptyWorld {
            ego: DVector<f64>,
            dt: f64,
        }
        impl WorldModel for EmptyWorld {
            fn classes(&self) -> Vec<AgentClass> {
                vec![AgentClass::Vehicle]
            }
            fn joint_state(&self) -> DVector<f64> {
                self.ego.clone()
            }
            fn advance(&mut self, u: &DVector<f64>) -> Result<(), PlanError> {
                self.ego = dynamics::step(AgentClass::Vehicle, &self.ego, u, self.dt)?;
                Ok(())
            }
        }
        let system = coasting_system(vec![AgentClass::Vehicle], &initial, config.horizon, config.dt);
        let provider = StaticProvider(system);
        let mut world = EmptyWorld {
            ego: initial,
            dt: config.dt,
        };
        let log = closed_loop(&config, &path, &provider, &mut world, 40).unwrap();
        assert!(log.collision.is_none());
        assert_eq!(log.steps.len(), 40);
        let last = log.steps.last().unwrap();
        assert!(last.lag_error.abs() < 0.5, "lag {}", last.lag_error);
        assert!(last.contour_error.abs() < 0.05, "contour {}", last.contour_error);
        for s in &log.steps {
            assert!(s.control[0] >= config.omega_bounds.0 - 1e-6);
            assert!(s.control[0] <= config.omega_bounds.1 + 1e-6);
            assert!(s.control[1] >= config.accel_bounds.0 - 1e-6);
            assert!(s.control[1] <= config.accel_bounds.1 + 1e-6);
            assert!(s.control[2] >= config.path_speed_bounds.0 - 1e-6);
            assert!(s.control[2] <= config.path_speed_bounds.1 + 1e-6);
        }
        // The ego makes real progress down the road.
        assert!(last.ego[0] > 60.0, "traveled {}", last.ego[0]);
    }
}
