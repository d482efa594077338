//! Scene data model, synthetic data generators, rotation augmentation, and
//! file IO.
//!
//! A [`Scene`] is a fixed-roster timeline of joint agent states together with
//! the ego control sequence.  Scenes are sliced into (history, future)
//! [`SceneWindow`]s for fitting and evaluation.  Two generators are provided:
//! a two-particle world where the non-ego particle avoids the ego with an
//! inverse-square repulsion, and a scripted four-way intersection with a
//! multimodal lead vehicle used by the planner.

use crate::dynamics::{self, AgentClass};
use crate::mixture::BlockLayout;
use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version tag of the scene JSON schema.
pub const SCENE_FORMAT_VERSION: u32 = 1;
/// Particles closer than this are considered coincident.
pub const DEGENERATE_DISTANCE: f64 = 1e-6;

/// Mixing constant for deriving per-scene seeds from a base seed.
const SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
/// Offset separating the test-split seed space from the train split.
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("dt must be positive, got {0}")]
    BadDt(f64),
    #[error("scene needs at least one agent")]
    NoAgents,
    #[error("step {step} has {got} agent states, roster has {expected}")]
    RosterMismatch {
        step: usize,
        expected: usize,
        got: usize,
    },
    #[error("agent {agent} at step {step} has dimension {got}, class expects {expected}")]
    StateDim {
        agent: usize,
        step: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} ego controls for {steps} states, got {got}")]
    ControlCount {
        expected: usize,
        got: usize,
        steps: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("history {history} + horizon {horizon} does not fit in {steps} states")]
    WindowBounds {
        history: usize,
        horizon: usize,
        steps: usize,
    },
    #[error("particles coincide (distance < {DEGENERATE_DISTANCE} m)")]
    DegenerateScene,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("unsupported scene format version {0}")]
    Version(u32),
    #[error("scene file {path} hash mismatch: manifest {expected}, file {got}")]
    HashMismatch {
        path: String,
        expected: String,
        got: String,
    },
    #[error("json: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        w = PI;
    }
    w
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// Fixed-roster timeline of joint states plus the ego control sequence.
///
/// `states[t][i]` is agent `i`'s state at step `t`; agent 0 is the ego.
/// `ego_controls[t]` acts on the transition from step `t` to `t + 1`.
/// `history_len` (H) and `horizon` (T) mark how the timeline is sliced into
/// prediction windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dt: f64,
    pub agents: Vec<(String, AgentClass)>,
    pub states: Vec<Vec<DVector<f64>>>,
    pub ego_controls: Vec<DVector<f64>>,
    pub history_len: usize,
    pub horizon: usize,
}

impl Scene {
    pub fn num_steps(&self) -> usize {
        self.states.len()
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn classes(&self) -> Vec<AgentClass> {
        self.agents.iter().map(|(_, c)| *c).collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SceneError::BadDt(self.dt));
        }
        if self.agents.is_empty() {
            return Err(SceneError::NoAgents);
        }
        let steps = self.states.len();
        if self.history_len == 0
            || self.horizon == 0
            || self.history_len + self.horizon + 1 > steps
        {
            return Err(SceneError::WindowBounds {
                history: self.history_len,
                horizon: self.horizon,
                steps,
            });
        }
        for (t, joint) in self.states.iter().enumerate() {
            if joint.len() != self.agents.len() {
                return Err(SceneError::RosterMismatch {
                    step: t,
                    expected: self.agents.len(),
                    got: joint.len(),
                });
            }
            for (i, s) in joint.iter().enumerate() {
                let expected = self.agents[i].1.state_dim();
                if s.len() != expected {
                    return Err(SceneError::StateDim {
                        agent: i,
                        step: t,
                        expected,
                        got: s.len(),
                    });
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(SceneError::NonFinite("agent state"));
                }
            }
        }
        if self.ego_controls.len() + 1 != steps {
            return Err(SceneError::ControlCount {
                expected: steps - 1,
                got: self.ego_controls.len(),
                steps,
            });
        }
        let cdim = self.agents[0].1.control_dim();
        for u in &self.ego_controls {
            if u.len() != cdim {
                return Err(SceneError::ControlCount {
                    expected: cdim,
                    got: u.len(),
                    steps,
                });
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(SceneError::NonFinite("ego control"));
            }
        }
        Ok(())
    }

    /// Stacked joint state at a step, in roster order.
    pub fn joint_state(&self, step: usize) -> DVector<f64> {
        let total: usize = self.agents.iter().map(|(_, c)| c.state_dim()).sum();
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for s in &self.states[step] {
            out.rows_mut(off, s.len()).copy_from(s);
            off += s.len();
        }
        out
    }

    /// All sliding prediction windows: anchors `H ..= steps − 1 − T`.
    pub fn windows(&self) -> Vec<SceneWindow> {
        let last_anchor = self.num_steps() - 1 - self.horizon;
        (self.history_len..=last_anchor)
            .map(|anchor| self.window_at(anchor))
            .collect()
    }

    /// The evaluation window: the earliest anchor with a full history.
    pub fn canonical_window(&self) -> SceneWindow {
        self.window_at(self.history_len)
    }

    /// Window anchored at step `anchor`: history covers
    /// `anchor − H ..= anchor`, the future covers `anchor + 1 ..= anchor + T`.
    pub fn window_at(&self, anchor: usize) -> SceneWindow {
        assert!(
            anchor >= self.history_len && anchor + self.horizon < self.num_steps(),
            "window anchor out of range"
        );
        let layout = BlockLayout::new(self.classes(), self.horizon);
        let history = (anchor - self.history_len..=anchor)
            .map(|t| self.joint_state(t))
            .collect();
        let future = (anchor + 1..=anchor + self.horizon)
            .map(|t| self.joint_state(t))
            .collect();
        let history_controls = (anchor - self.history_len..anchor)
            .map(|t| self.ego_controls[t].clone())
            .collect();
        let future_controls = (anchor..anchor + self.horizon)
            .map(|t| self.ego_controls[t].clone())
            .collect();
        SceneWindow {
            layout,
            dt: self.dt,
            history,
            future,
            history_controls,
            future_controls,
        }
    }

    /// Minimum distance between any two agents over the whole timeline.
    pub fn min_pair_distance(&self) -> f64 {
        let n = self.num_agents();
        let mut best = f64::INFINITY;
        for joint in &self.states {
            for i in 0..n {
                for j in i + 1..n {
                    let pi = Vector2::new(joint[i][0], joint[i][1]);
                    let pj = Vector2::new(joint[j][0], joint[j][1]);
                    best = best.min((pi - pj).norm());
                }
            }
        }
        best
    }
}

/// One (history, future) slice of a scene with states stacked jointly.
///
/// `history` holds H+1 joint states ending at the anchor step; `future` holds
/// the T joint states after it.  `future_controls[k]` drives the transition
/// from future step k−1 (or the anchor for k = 0) to future step k.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindow {
    pub layout: BlockLayout,
    pub dt: f64,
    pub history: Vec<DVector<f64>>,
    pub future: Vec<DVector<f64>>,
    pub history_controls: Vec<DVector<f64>>,
    pub future_controls: Vec<DVector<f64>>,
}

impl SceneWindow {
    /// Joint state at the anchor step (last history entry).
    pub fn anchor_state(&self) -> &DVector<f64> {
        self.history.last().expect("history is non-empty")
    }

    /// Minimum inter-agent distance over the future steps.
    pub fn min_future_distance(&self) -> f64 {
        let n = self.layout.num_agents();
        let mut best = f64::INFINITY;
        for joint in &self.future {
            for i in 0..n {
                for j in i + 1..n {
                    let oi = self.layout.offset(i);
                    let oj = self.layout.offset(j);
                    let dx = joint[oi] - joint[oj];
                    let dy = joint[oi + 1] - joint[oj + 1];
                    best = best.min(dx.hypot(dy));
                }
            }
        }
        best
    }

    /// Future step index (0-based) at which two agents come closest.
    pub fn min_distance_step(&self) -> usize {
        let n = self.layout.num_agents();
        let mut best = f64::INFINITY;
        let mut best_t = 0;
        for (t, joint) in self.future.iter().enumerate() {
            for i in 0..n {
                for j in i + 1..n {
                    let oi = self.layout.offset(i);
                    let oj = self.layout.offset(j);
                    let dx = joint[oi] - joint[oj];
                    let dy = joint[oi + 1] - joint[oj + 1];
                    let d = dx.hypot(dy);
                    if d < best {
                        best = d;
                        best_t = t;
                    }
                }
            }
        }
        best_t
    }
}

// ---------------------------------------------------------------------------
// Social-forces two-particle generator
// ---------------------------------------------------------------------------

/// Configuration for the two-particle avoidance world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocialForcesConfig {
    /// Initial speed range for both particles (m/s).
    pub v0_range: (f64, f64),
    /// Total scene length (s).
    pub scene_duration: f64,
    /// Recording step (s).
    pub dt: f64,
    /// Repulsion strength (m³/s²): accel = gain / r² directed away from ego.
    pub repulsion_gain: f64,
    pub train_count: usize,
    pub test_count: usize,
    /// History window length H in steps.
    pub history_len: usize,
    /// Prediction horizon T in steps.
    pub horizon: usize,
    pub rng_seed: u64,
}

impl Default for SocialForcesConfig {
    fn default() -> Self {
        Self {
            v0_range: (4.0, 12.0),
            scene_duration: 3.0,
            dt: 0.1,
            repulsion_gain: 10.0,
            train_count: 700,
            test_count: 100,
            history_len: 8,
            horizon: 12,
            rng_seed: 7,
        }
    }
}

impl SocialForcesConfig {
    fn validate(&self) -> Result<(), SceneError> {
        if self.v0_range.0 >= self.v0_range.1 || self.v0_range.0 < 0.0 {
            return Err(SceneError::BadConfig(format!(
                "v0_range ({}, {}) must be ordered and non-negative",
                self.v0_range.0, self.v0_range.1
            )));
        }
        if !(self.dt > 0.0) {
            return Err(SceneError::BadDt(self.dt));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(SceneError::BadConfig("scene counts must be > 0".into()));
        }
        let steps = (self.scene_duration / self.dt).round() as usize;
        if self.history_len + self.horizon + 1 > steps + 1 {
            return Err(SceneError::WindowBounds {
                history: self.history_len,
                horizon: self.horizon,
                steps: steps + 1,
            });
        }
        Ok(())
    }
}

fn derive_seed(base: u64, index: u64, retry: u64) -> u64 {
    base ^ index.wrapping_mul(SEED_MIX) ^ retry.wrapping_mul(0x517C_C1B7_2722_0A95)
}

/// Integrates the ego (scripted accelerations) and the repelled agent.
/// The force is re-evaluated on `substeps` sub-intervals per recorded step so
/// the recorded agent transitions reflect a near-continuous interaction.
fn simulate_pair(
    ego0: DVector<f64>,
    agent0: DVector<f64>,
    ego_controls: &[DVector<f64>],
    gain: f64,
    dt: f64,
    substeps: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let sub_dt = dt / substeps as f64;
    let mut ego = ego0.clone();
    let mut agent = agent0.clone();
    let mut ego_states = vec![ego0];
    let mut agent_states = vec![agent0];
    for u in ego_controls {
        for _ in 0..substeps {
            let rel = Vector2::new(agent[0] - ego[0], agent[1] - ego[1]);
            let r = rel.norm().max(DEGENERATE_DISTANCE);
            let accel = rel / r * (gain / (r * r));
            let force = DVector::from_column_slice(&[accel.x, accel.y]);
            agent = dynamics::double_integrator_step(&agent, &force, sub_dt)
                .expect("finite repulsion step");
            ego = dynamics::double_integrator_step(&ego, u, sub_dt).expect("finite ego step");
        }
        ego_states.push(ego.clone());
        agent_states.push(agent.clone());
    }
    (ego_states, agent_states)
}

/// Draws one scene; geometry aims the pair at a close encounter mid-scene.
fn draw_social_forces_scene(cfg: &SocialForcesConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (cfg.scene_duration / cfg.dt).round() as usize;
    let (v_lo, v_hi) = cfg.v0_range;
    let ego_heading = rng.gen_range(0.0..TAU);
    let ego_speed = rng.gen_range(v_lo..v_hi);
    let agent_heading = rng.gen_range(0.0..TAU);
    let agent_speed = rng.gen_range(v_lo..v_hi);
    let ego_pos = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    let ego_vel = Vector2::new(ego_heading.cos(), ego_heading.sin()) * ego_speed;
    let agent_vel = Vector2::new(agent_heading.cos(), agent_heading.sin()) * agent_speed;
    // place the agent so the closest approach happens mid-scene
    let closing = ego_vel - agent_vel;
    let closing_speed = closing.norm();
    let dir = if closing_speed > 1e-9 {
        closing / closing_speed
    } else {
        Vector2::new(1.0, 0.0)
    };
    let t_star = rng.gen_range(1.2..1.6);
    let range0 = (closing_speed * t_star).clamp(5.0, 40.0);
    let lateral = Vector2::new(-dir.y, dir.x) * rng.gen_range(-2.0..2.0);
    let agent_pos = ego_pos + dir * range0 + lateral;
    // piecewise-constant ego accelerations, resampled every 0.5 s
    let resample_every = ((0.5 / cfg.dt).round() as usize).max(1);
    let mut controls = Vec::with_capacity(steps);
    let mut current = DVector::zeros(2);
    for t in 0..steps {
        if t % resample_every == 0 {
            let beta = rng.gen_range(0.0..TAU);
            let mag = rng.gen_range(0.0..3.0);
            current = DVector::from_column_slice(&[mag * beta.cos(), mag * beta.sin()]);
        }
        controls.push(current.clone());
    }
    let ego0 = DVector::from_column_slice(&[ego_pos.x, ego_pos.y, ego_vel.x, ego_vel.y]);
    let agent0 = DVector::from_column_slice(&[agent_pos.x, agent_pos.y, agent_vel.x, agent_vel.y]);
    let (ego_states, agent_states) =
        simulate_pair(ego0, agent0, &controls, cfg.repulsion_gain, cfg.dt, 4);
    let states = ego_states
        .into_iter()
        .zip(agent_states)
        .map(|(e, a)| vec![e, a])
        .collect();
    Scene {
        dt: cfg.dt,
        agents: vec![
            ("ego".to_string(), AgentClass::Particle),
            ("agent0".to_string(), AgentClass::Particle),
        ],
        states,
        ego_controls: controls,
        history_len: cfg.history_len,
        horizon: cfg.horizon,
    }
}

/// Generates the train and test splits; deterministic given the seed.
/// Scenes whose particles coincide are rejected and redrawn.
pub fn generate_social_forces(
    cfg: &SocialForcesConfig,
) -> Result<(Vec<Scene>, Vec<Scene>), SceneError> {
    cfg.validate()?;
    let draw_split = |count: usize, offset: u64| -> Result<Vec<Scene>, SceneError> {
        (0..count)
            .map(|i| {
                for retry in 0..100 {
                    let seed = derive_seed(cfg.rng_seed, offset + i as u64, retry);
                    let scene = draw_social_forces_scene(cfg, seed);
                    if scene.min_pair_distance() >= DEGENERATE_DISTANCE {
                        scene.validate()?;
                        return Ok(scene);
                    }
                }
                Err(SceneError::DegenerateScene)
            })
            .collect()
    };
    let train = draw_split(cfg.train_count, 0)?;
    let test = draw_split(cfg.test_count, TEST_SEED_OFFSET)?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Rotation augmentation
// ---------------------------------------------------------------------------

/// Rotates every position and velocity about the origin.  Double-integrator
/// controls (planar accelerations) rotate with the frame; unicycle controls
/// (ω, a) are rotation-invariant, and vehicle headings shift by the angle.
pub fn rotate_scene(scene: &Scene, angle: f64) -> Scene {
    let (s, c) = angle.sin_cos();
    let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    let mut out = scene.clone();
    for joint in &mut out.states {
        for (i, state) in joint.iter_mut().enumerate() {
            match scene.agents[i].1 {
                AgentClass::Pedestrian | AgentClass::Particle => {
                    let (px, py) = rot(state[0], state[1]);
                    let (vx, vy) = rot(state[2], state[3]);
                    state[0] = px;
                    state[1] = py;
                    state[2] = vx;
                    state[3] = vy;
                }
                AgentClass::Vehicle => {
                    let (px, py) = rot(state[0], state[1]);
                    state[0] = px;
                    state[1] = py;
                    state[2] = wrap_angle(state[2] + angle);
                }
            }
        }
    }
    if !scene.agents[0].1.is_unicycle() {
        for u in &mut out.ego_controls {
            let (ax, ay) = rot(u[0], u[1]);
            u[0] = ax;
            u[1] = ay;
        }
    }
    out
}

/// 24 rotated copies of every scene: 0° to 345° in 15° steps.
pub fn augment(scenes: &[Scene]) -> Vec<Scene> {
    let mut out = Vec::with_capacity(scenes.len() * 24);
    for scene in scenes {
        for k in 0..24 {
            out.push(rotate_scene(scene, k as f64 * 15.0 * PI / 180.0));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Intersection scenario
// ---------------------------------------------------------------------------

/// Configuration of the scripted four-way intersection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectionConfig {
    /// World step (s); matches the planner's step.
    pub dt: f64,
    /// Scripted steps available (must cover the closed loop plus horizon).
    pub steps: usize,
    pub num_cross_vehicles: usize,
    pub num_pedestrians: usize,
    /// Initial bumper gap from ego to the lead vehicle (m).
    pub lead_gap: f64,
    pub lead_speed: f64,
    pub ego_speed: f64,
    /// Which lead-vehicle mode the world actually realizes.
    pub realized_mode: usize,
    pub rng_seed: u64,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self {
            dt: 0.25,
            steps: 90,
            num_cross_vehicles: 4,
            num_pedestrians: 5,
            lead_gap: 22.0,
            lead_speed: 8.0,
            ego_speed: 8.0,
            realized_mode: 1,
            rng_seed: 42,
        }
    }
}

/// One agent's scripted evolution: states plus the controls that realize
/// them, so each transition replays exactly through the class dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentScript {
    pub class: AgentClass,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl AgentScript {
    /// Rolls a script forward from an initial state with a control schedule.
    fn roll(
        class: AgentClass,
        initial: DVector<f64>,
        controls: Vec<DVector<f64>>,
        dt: f64,
    ) -> Self {
        let mut states = vec![initial.clone()];
        let mut s = initial;
        for u in &controls {
            s = dynamics::step(class, &s, u, dt).expect("finite script step");
            states.push(s.clone());
        }
        Self {
            class,
            states,
            controls,
        }
    }
}

/// The intersection world: ego reference path, per-mode agent scripts, and a
/// scene recording the realized evolution with a nominal ego roll.
#[derive(Debug, Clone)]
pub struct IntersectionScenario {
    pub scene: Scene,
    /// Ego lane centerline waypoints (m).
    pub waypoints: Vec<(f64, f64)>,
    /// `mode_scripts[z][i]` is agent `i`'s script under mode `z` (ego is
    /// index 0 and is always the nominal constant-speed roll).
    pub mode_scripts: Vec<Vec<AgentScript>>,
    pub mode_labels: Vec<String>,
    pub mode_probs: Vec<f64>,
    pub realized_mode: usize,
}

/// Builds the scripted intersection.  Lane centerlines sit 1.75 m from the
/// road axes; the ego travels along +x.  The lead vehicle has three modes:
/// maintain speed, brake to a stop, and accelerate away.
pub fn build_intersection(cfg: &IntersectionConfig) -> Result<IntersectionScenario, SceneError> {
    if !(cfg.dt > 0.0) {
        return Err(SceneError::BadDt(cfg.dt));
    }
    if cfg.steps < 20 {
        return Err(SceneError::BadConfig("need at least 20 scripted steps".into()));
    }
    if cfg.realized_mode >= 3 {
        return Err(SceneError::BadConfig(format!(
            "realized_mode {} out of range (3 lead modes)",
            cfg.realized_mode
        )));
    }
    if cfg.lead_speed <= 0.0 || cfg.ego_speed <= 0.0 || cfg.lead_gap <= 0.0 {
        return Err(SceneError::BadConfig(
            "speeds and lead gap must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let dt = cfg.dt;
    let steps = cfg.steps;
    let lane = 1.75;
    let ego_y = -lane;
    let ego_x0 = -45.0;
    // ego nominal: constant speed along the lane
    let ego_script = AgentScript::roll(
        AgentClass::Vehicle,
        DVector::from_column_slice(&[ego_x0, ego_y, 0.0, cfg.ego_speed]),
        vec![DVector::zeros(2); steps],
        dt,
    );
    // lead vehicle modes: same lane, ahead of the ego
    let lead0 = DVector::from_column_slice(&[ego_x0 + cfg.lead_gap, ego_y, 0.0, cfg.lead_speed]);
    let maintain = vec![DVector::zeros(2); steps];
    let mut brake = Vec::with_capacity(steps);
    let mut v = cfg.lead_speed;
    for _ in 0..steps {
        let a = if v > 0.05 { (-3.0f64).max(-v / dt) } else { 0.0 };
        brake.push(DVector::from_column_slice(&[0.0, a]));
        v = (v + a * dt).max(0.0);
    }
    let mut accel = Vec::with_capacity(steps);
    let mut v = cfg.lead_speed;
    for _ in 0..steps {
        let a = if v < 12.0 { 1.5 } else { 0.0 };
        accel.push(DVector::from_column_slice(&[0.0, a]));
        v += a * dt;
    }
    let lead_modes = [maintain, brake, accel];
    // cross traffic on the y-axis road, timed to clear the ego's arrival
    let mut shared: Vec<AgentScript> = Vec::new();
    for k in 0..cfg.num_cross_vehicles {
        let going_down = k % 2 == 0;
        let x = if going_down { lane } else { -lane };
        let speed = rng.gen_range(6.0..9.0);
        // start far enough that the box is clear before the ego arrives
        let start = rng.gen_range(35.0..60.0) + 10.0 * k as f64;
        let (y0, phi) = if going_down {
            (start, -PI / 2.0)
        } else {
            (-start, PI / 2.0)
        };
        shared.push(AgentScript::roll(
            AgentClass::Vehicle,
            DVector::from_column_slice(&[x, y0, phi, speed]),
            vec![DVector::zeros(2); steps],
            dt,
        ));
    }
    // decelerate-then-stop vehicle approaching the box from ahead on -x
    shared.push(AgentScript::roll(
        AgentClass::Vehicle,
        DVector::from_column_slice(&[55.0, lane, PI, 7.0]),
        (0..steps)
            .map(|t| {
                let a = if (t as f64) * dt < 2.0 { -3.0 } else { 0.0 };
                DVector::from_column_slice(&[0.0, a])
            })
            .collect(),
        dt,
    ));
    // sidewalk pedestrians, constant velocity
    for k in 0..cfg.num_pedestrians {
        let side = if k % 2 == 0 { 6.0 } else { -6.0 };
        let speed = rng.gen_range(1.0..1.8);
        let dir = if k % 3 == 0 { -1.0 } else { 1.0 };
        let x0 = rng.gen_range(-30.0..30.0);
        shared.push(AgentScript::roll(
            AgentClass::Pedestrian,
            DVector::from_column_slice(&[x0, side + rng.gen_range(-0.5..0.5), dir * speed, 0.0]),
            vec![DVector::zeros(2); steps],
            dt,
        ));
    }
    let mode_labels = vec![
        "lead_maintains".to_string(),
        "lead_brakes".to_string(),
        "lead_accelerates".to_string(),
    ];
    let mode_probs = vec![0.45, 0.35, 0.2];
    let mut mode_scripts = Vec::with_capacity(3);
    for controls in lead_modes.into_iter() {
        let lead = AgentScript::roll(AgentClass::Vehicle, lead0.clone(), controls, dt);
        let mut agents = Vec::with_capacity(2 + shared.len());
        agents.push(ego_script.clone());
        agents.push(lead);
        agents.extend(shared.iter().cloned());
        mode_scripts.push(agents);
    }
    // the recorded scene follows the realized mode, ego on its nominal roll
    let realized = &mode_scripts[cfg.realized_mode];
    let mut agents = vec![("ego".to_string(), AgentClass::Vehicle)];
    agents.push(("lead".to_string(), AgentClass::Vehicle));
    for k in 0..cfg.num_cross_vehicles {
        agents.push((format!("cross{k}"), AgentClass::Vehicle));
    }
    agents.push(("stopper".to_string(), AgentClass::Vehicle));
    for k in 0..cfg.num_pedestrians {
        agents.push((format!("ped{k}"), AgentClass::Pedestrian));
    }
    let states = (0..=steps)
        .map(|t| realized.iter().map(|a| a.states[t].clone()).collect())
        .collect();
    let scene = Scene {
        dt,
        agents,
        states,
        ego_controls: ego_script.controls.clone(),
        history_len: 4,
        horizon: 12,
        };
    scene.validate()?;
    let waypoints = (0..=36)
        .map(|k| (ego_x0 - 5.0 + k as f64 * 4.0, ego_y))
        .collect();
    Ok(IntersectionScenario {
        scene,
        waypoints,
        mode_scripts,
        mode_labels,
        mode_probs,
        realized_mode: cfg.realized_mode,
    })
}

// ---------------------------------------------------------------------------
// JSON files, manifest, CSV export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    version: u32,
    dt: f64,
    history_len: usize,
    horizon: usize,
    agents: Vec<(String, AgentClass)>,
    states: Vec<Vec<Vec<f64>>>,
    ego_controls: Vec<Vec<f64>>,
}

/// Serializes a scene to its canonical JSON document.
pub fn scene_to_json(scene: &Scene) -> Result<String, SceneError> {
    scene.validate()?;
    let doc = SceneDoc {
        version: SCENE_FORMAT_VERSION,
        dt: scene.dt,
        history_len: scene.history_len,
        horizon: scene.horizon,
        agents: scene.agents.clone(),
        states: scene
            .states
            .iter()
            .map(|joint| joint.iter().map(|s| s.as_slice().to_vec()).collect())
            .collect(),
        ego_controls: scene
            .ego_controls
            .iter()
            .map(|u| u.as_slice().to_vec())
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let doc: SceneDoc = serde_json::from_str(text)?;
    if doc.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Version(doc.version));
    }
    let scene = Scene {
        dt: doc.dt,
        agents: doc.agents,
        states: doc
            .states
            .into_iter()
            .map(|joint| joint.into_iter().map(DVector::from_vec).collect())
            .collect(),
        ego_controls: doc.ego_controls.into_iter().map(DVector::from_vec).collect(),
        history_len: doc.history_len,
        horizon: doc.horizon,
    };
    scene.validate()?;
    Ok(scene)
}

/// Hex SHA-256 of a scene file's exact bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Split membership and integrity hashes for a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Writes scene files plus a manifest under `dir`; returns the manifest.
pub fn write_dataset(
    dir: &Path,
    train: &[Scene],
    test: &[Scene],
    seed: u64,
) -> Result<Manifest, SceneError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write_split = |scenes: &[Scene], prefix: &str| -> Result<Vec<ManifestEntry>, SceneError> {
        scenes
            .iter()
            .enumerate()
            .map(|(i, scene)| {
                let name = format!("{prefix}_{i:05}.json");
                let path = dir.join(&name);
                let json = scene_to_json(scene)?;
                std::fs::write(&path, &json).map_err(|e| io_err(&path, e))?;
                Ok(ManifestEntry {
                    file: name,
                    sha256: sha256_hex(json.as_bytes()),
                })
            })
            .collect()
    };
    let manifest = Manifest {
        version: SCENE_FORMAT_VERSION,
        seed,
        train: write_split(train, "train")?,
        test: write_split(test, "test")?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Loads one split ("train" or "test") of a dataset, verifying hashes.
pub fn load_dataset_split(dir: &Path, split: &str) -> Result<Vec<Scene>, SceneError> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != SCENE_FORMAT_VERSION {
        return Err(SceneError::Version(manifest.version));
    }
    let entries = match split {
        "train" => &manifest.train,
        "test" => &manifest.test,
        other => {
            return Err(SceneError::BadConfig(format!(
                "unknown split {other:?}; expected \"train\" or \"test\""
            )))
        }
    };
    entries
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            let got = sha256_hex(&bytes);
            if got != entry.sha256 {
                return Err(SceneError::HashMismatch {
                    path: entry.file.clone(),
                    expected: entry.sha256.clone(),
                    got,
                });
            }
            scene_from_json(std::str::from_utf8(&bytes).map_err(|_| {
                SceneError::BadConfig(format!("{} is not UTF-8", entry.file))
            })?)
        })
        .collect()
}

/// Writes a scene as plot-ready CSV.  For double-integrator agents the last
/// two state columns are velocities (m/s); for vehicles they are heading
/// (rad) and speed (m/s).
pub fn export_scene_csv(scene: &Scene, out: &mut dyn Write) -> Result<(), SceneError> {
    writeln!(out, "step,time_s,agent_id,class,x_m,y_m,state2,state3")
        .map_err(|e| io_err(Path::new("<csv>"), e))?;
    for (t, joint) in scene.states.iter().enumerate() {
        for (i, s) in joint.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:?},{},{},{},{}",
                t,
                t as f64 * scene.dt,
                scene.agents[i].0,
                scene.agents[i].1,
                s[0],
                s[1],
                s[2],
                s[3]
            )
            .map_err(|e| io_err(Path::new("<csv>"), e))?;
        }
    }
    Ok(())
}

/// Convenience: dataset directory layout helper.
pub fn dataset_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> SocialForcesConfig {
        SocialForcesConfig {
            train_count: 3,
            test_count: 2,
            rng_seed: 11,
            ..SocialForcesConfig::default()
        }
    }

    #[test]
    fn generator_produces_valid_windowed_scenes() {
        let (train, test) = generate_social_forces(&small_config()).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        for scene in train.iter().chain(test.iter()) {
            scene.validate().unwrap();
            assert_eq!(scene.num_steps(), 31);
            assert_eq!(scene.windows().len(), 11);
            let w = scene.canonical_window();
            assert_eq!(w.history.len(), 9);
            assert_eq!(w.future.len(), 12);
            assert_eq!(w.future_controls.len(), 12);
            assert_eq!(w.history_controls.len(), 8);
        }
    }

    #[test]
    fn repulsion_off_gives_exactly_constant_velocity() {
        let ego = DVector::from_column_slice(&[0.0, 0.0, 2.0, -1.0]);
        let agent = DVector::from_column_slice(&[10.0, 5.0, -3.0, 0.5]);
        let controls = vec![DVector::zeros(2); 30];
        let (_, agent_states) = simulate_pair(ego, agent.clone(), &controls, 0.0, 0.1, 4);
        for (t, s) in agent_states.iter().enumerate() {
            assert_abs_diff_eq!(s[0], agent[0] + agent[2] * 0.1 * t as f64, epsilon = 1e-10);
            assert_abs_diff_eq!(s[1], agent[1] + agent[3] * 0.1 * t as f64, epsilon = 1e-10);
            assert_abs_diff_eq!(s[2], agent[2], epsilon = 1e-12);
            assert_abs_diff_eq!(s[3], agent[3], epsilon = 1e-12);
        }
    }

    #[test]
    fn distant_particles_stay_near_constant_velocity() {
        // separation > 100 m: inverse-square force deflects < 1e-3 m in 1.2 s
        let ego = DVector::from_column_slice(&[0.0, 0.0, 3.0, 0.0]);
        let agent = DVector::from_column_slice(&[150.0, 0.0, -2.0, 1.0]);
        let controls = vec![DVector::zeros(2); 12];
        let (_, agent_states) = simulate_pair(ego, agent.clone(), &controls, 10.0, 0.1, 4);
        let last = &agent_states[12];
        let cv_x = agent[0] + agent[2] * 1.2;
        let cv_y = agent[1] + agent[3] * 1.2;
        let dev = (last[0] - cv_x).hypot(last[1] - cv_y);
        assert!(dev < 1e-3, "deviation {dev} m");
    }

    #[test]
    fn head_on_approach_slows_the_agent() {
        // closing speed along the ego→agent axis decays as the agent yields
        let ego = DVector::from_column_slice(&[0.0, 0.0, 6.0, 0.0]);
        let agent = DVector::from_column_slice(&[18.0, 0.3, -6.0, 0.0]);
        let controls = vec![DVector::zeros(2); 30];
        let (ego_states, agent_states) = simulate_pair(ego, agent, &controls, 10.0, 0.1, 4);
        let proj = |t: usize| {
            let e = &ego_states[t];
            let a = &agent_states[t];
            let axis = Vector2::new(a[0] - e[0], a[1] - e[1]).normalize();
            Vector2::new(a[2], a[3]).dot(&axis)
        };
        // approach phase: find the closest-approach step
        let mut min_t = 0;
        let mut min_d = f64::INFINITY;
        for t in 0..=30 {
            let e = &ego_states[t];
            let a = &agent_states[t];
            let d = (a[0] - e[0]).hypot(a[1] - e[1]);
            if d < min_d {
                min_d = d;
                min_t = t;
            }
        }
        assert!(min_t > 2, "encounter happens inside the scene");
        assert!(
            proj(min_t.saturating_sub(1)) > proj(0) + 0.1,
            "repulsion must brake the approach: start {} end {}",
            proj(0),
            proj(min_t.saturating_sub(1))
        );
    }

    #[test]
    fn same_seed_reproduces_identical_json() {
        let cfg = small_config();
        let (a, _) = generate_social_forces(&cfg).unwrap();
        let (b, _) = generate_social_forces(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(scene_to_json(x).unwrap(), scene_to_json(y).unwrap());
        }
    }

    #[test]
    fn train_and_test_hashes_are_disjoint() {
        let (train, test) = generate_social_forces(&small_config()).unwrap();
        let hash = |s: &Scene| sha256_hex(scene_to_json(s).unwrap().as_bytes());
        for tr in &train {
            for te in &test {
                assert_ne!(hash(tr), hash(te));
            }
        }
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let rotated = rotate_scene(&train[0], 0.0);
        for (a, b) in train[0].states.iter().zip(&rotated.states) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn full_turn_restores_positions() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let rotated = rotate_scene(&train[0], TAU);
        for (a, b) in train[0].states.iter().zip(&rotated.states) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        for angle in [0.3, 1.1, 2.9, 4.5] {
            let rotated = rotate_scene(&train[0], angle);
            for (a, b) in train[0].states.iter().zip(&rotated.states) {
                let d0 = (a[0][0] - a[1][0]).hypot(a[0][1] - a[1][1]);
                let d1 = (b[0][0] - b[1][0]).hypot(b[0][1] - b[1][1]);
                assert_abs_diff_eq!(d0, d1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rotations_compose_additively() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let ab = rotate_scene(&rotate_scene(&train[0], 0.7), 1.3);
        let direct = rotate_scene(&train[0], 2.0);
        for (a, b) in ab.states.iter().zip(&direct.states) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_yields_24_valid_copies_per_scene() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let augmented = augment(&train);
        assert_eq!(augmented.len(), train.len() * 24);
        for scene in &augmented {
            scene.validate().unwrap();
        }
        // first copy of each block is the original
        assert_eq!(augmented[0], train[0]);
    }

    #[test]
    fn vehicle_rotation_shifts_heading_and_keeps_controls() {
        let scenario = build_intersection(&IntersectionConfig::default()).unwrap();
        let angle = 1.0;
        let rotated = rotate_scene(&scenario.scene, angle);
        let s0 = &scenario.scene.states[5][1];
        let r0 = &rotated.states[5][1];
        assert_abs_diff_eq!(r0[2], wrap_angle(s0[2] + angle), epsilon = 1e-12);
        assert_abs_diff_eq!(r0[3], s0[3], epsilon = 1e-15);
        assert_eq!(scenario.scene.ego_controls, rotated.ego_controls);
    }

    #[test]
    fn scene_json_round_trips_exactly() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let json = scene_to_json(&train[0]).unwrap();
        let back = scene_from_json(&json).unwrap();
        assert_eq!(train[0], back);
        assert_eq!(json, scene_to_json(&back).unwrap());
    }

    #[test]
    fn bad_scenes_are_rejected() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let mut missing_control = train[0].clone();
        missing_control.ego_controls.pop();
        assert!(matches!(
            missing_control.validate(),
            Err(SceneError::ControlCount { .. })
        ));
        let mut bad_dim = train[0].clone();
        bad_dim.states[3][1] = DVector::zeros(3);
        assert!(matches!(
            bad_dim.validate(),
            Err(SceneError::StateDim { .. })
        ));
        let mut bad_window = train[0].clone();
        bad_window.horizon = 40;
        assert!(matches!(
            bad_window.validate(),
            Err(SceneError::WindowBounds { .. })
        ));
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_social_forces(&small_config()).unwrap();
        let manifest = write_dataset(dir.path(), &train, &test, 11).unwrap();
        assert_eq!(manifest.train.len(), 3);
        assert_eq!(manifest.test.len(), 2);
        let train_back = load_dataset_split(dir.path(), "train").unwrap();
        let test_back = load_dataset_split(dir.path(), "test").unwrap();
        assert_eq!(train, train_back);
        assert_eq!(test, test_back);
    }

    #[test]
    fn tampered_scene_file_fails_the_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = generate_social_forces(&small_config()).unwrap();
        write_dataset(dir.path(), &train, &test, 11).unwrap();
        let victim = dir.path().join("train_00000.json");
        let mut text = std::fs::read_to_string(&victim).unwrap();
        text.push(' ');
        std::fs::write(&victim, text).unwrap();
        assert!(matches!(
            load_dataset_split(dir.path(), "train"),
            Err(SceneError::HashMismatch { .. })
        ));
    }

    #[test]
    fn intersection_scripts_replay_through_class_dynamics() {
        let scenario = build_intersection(&IntersectionConfig::default()).unwrap();
        assert!(scenario.scene.num_agents() >= 11, "ego + at least 10 agents");
        assert_eq!(scenario.mode_scripts.len(), 3);
        for scripts in &scenario.mode_scripts {
            for script in scripts {
                for t in 0..script.controls.len() {
                    let next = dynamics::step(
                        script.class,
                        &script.states[t],
                        &script.controls[t],
                        scenario.scene.dt,
                    )
                    .unwrap();
                    assert_abs_diff_eq!(&script.states[t + 1], &next, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn lead_vehicle_modes_diverge_in_speed() {
        let scenario = build_intersection(&IntersectionConfig::default()).unwrap();
        let t = 20;
        let v = |z: usize| scenario.mode_scripts[z][1].states[t][3];
        assert!(v(1) < v(0) - 1.0, "braking mode is slower");
        assert!(v(2) > v(0) + 1.0, "accelerating mode is faster");
    }

    #[test]
    fn intersection_is_deterministic() {
        let a = build_intersection(&IntersectionConfig::default()).unwrap();
        let b = build_intersection(&IntersectionConfig::default()).unwrap();
        assert_eq!(
            scene_to_json(&a.scene).unwrap(),
            scene_to_json(&b.scene).unwrap()
        );
    }

    #[test]
    fn wrap_angle_maps_into_half_open_interval() {
        assert_abs_diff_eq!(wrap_angle(0.0), 0.0);
        assert_abs_diff_eq!(wrap_angle(PI), PI);
        assert_abs_diff_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI);
        assert_abs_diff_eq!(wrap_angle(TAU + 0.25), 0.25, epsilon = 1e-12);
        for k in -7..7 {
            let w = wrap_angle(0.4 + k as f64 * TAU);
            assert_abs_diff_eq!(w, 0.4, epsilon = 1e-9);
        }
    }

    #[test]
    fn csv_export_has_header_and_all_rows() {
        let (train, _) = generate_social_forces(&small_config()).unwrap();
        let mut buf = Vec::new();
        export_scene_csv(&train[0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,time_s,agent_id,class,x_m,y_m,state2,state3");
        assert_eq!(lines.len(), 1 + 31 * 2);
    }
}
