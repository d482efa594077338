//! Expectation-maximization identification of mixture parameters from
//! recorded scene windows.
//!
//! Each training window contributes teacher-forced one-step transitions: the
//! observed next state is regressed against what the agents' own dynamics
//! explain, and the remainder is attributed to learned interaction blocks.
//! A mode is a per-timestep set of cross-agent state gains, ego-control
//! gains, and per-state noise scales; the diagonal (own-dynamics) blocks are
//! never fitted.  Features for the learned gains are other agents' states
//! relative to the target agent's current state, plus the recorded ego
//! control, so fitted blocks drop into [`assemble`] unchanged.

use crate::dynamics::{self, AgentClass, DynamicsError, LinearizedStep};
use crate::mixture::{
    assemble, log_normal, log_sum_exp, AgentNominal, BlockLayout, LearnedStep, MatsSystem,
    ModeSystem, StructureError,
};
use crate::scenes::SceneWindow;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Version tag written into serialized model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Fraction of a window's weight given to its k-means cluster at start-up;
/// the rest is spread uniformly so every mode sees a little of everything.
const SOFT_ASSIGN: f64 = 0.9;

const KMEANS_MAX_ITERS: usize = 100;

/// Relative slack allowed when checking that the training log-likelihood
/// never decreases (covers f64 accumulation noise and the tiny bias the
/// ridge term introduces into the maximization step).
const LOGLIK_SLACK: f64 = 1e-8;

/// Errors from fitting and prediction.
#[derive(Debug, Error)]
pub enum FitError {
    #[error("no training windows were provided")]
    NoWindows,
    #[error("training windows disagree on roster, step length, or horizon")]
    WindowMismatch,
    #[error("bad fit configuration: {0}")]
    BadConfig(String),
    #[error(
        "regression for mode {mode}, step {step}, agent {agent} is singular; raise the ridge weight"
    )]
    SingularRegression {
        mode: usize,
        step: usize,
        agent: usize,
    },
    #[error("history states must be non-empty joint vectors of length {want}")]
    HistoryShape { want: usize },
    #[error("expected {want} controls of dimension {dim}, got {got}")]
    ControlShape {
        want: usize,
        got: usize,
        dim: usize,
    },
    #[error("model file version {0} is not supported")]
    Version(u32),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("i/o failure")]
    Io(#[from] std::io::Error),
}

/// What the learned gains are allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Other agents' states relative to the target's anchor state.
    RelativeState,
    /// Relative states plus the recorded ego control (enables B blocks).
    RelativeStatePlusEgoControl,
}

/// Fitting hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of mixture modes.
    pub num_modes: usize,
    /// Ridge weight added to every regression Gram matrix.
    pub ridge: f64,
    /// Lower bound applied to every fitted noise scale.
    pub q_floor: f64,
    /// Maximum number of EM iterations.
    pub max_em_iters: usize,
    /// Stop once the log-likelihood improvement falls below this relative
    /// tolerance.
    pub loglik_tol: f64,
    /// Seed for the k-means++ initialization.
    pub rng_seed: u64,
    /// Feature set for the learned gains.
    pub feature_map: FeatureMap,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            num_modes: 25,
            ridge: 1e-2,
            q_floor: 1e-3,
            max_em_iters: 40,
            loglik_tol: 1e-6,
            rng_seed: 0,
            feature_map: FeatureMap::RelativeStatePlusEgoControl,
        }
    }
}

/// A fitted mixture: learned blocks per mode and timestep plus the data the
/// blocks were fitted against (roster, step length, horizon).
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub version: u32,
    pub config: FitConfig,
    pub classes: Vec<AgentClass>,
    pub control_dim: usize,
    /// Number of history transitions the training windows carried.
    pub history_len: usize,
    /// Number of prediction steps.
    pub horizon: usize,
    pub dt: f64,
    pub mode_probs: Vec<f64>,
    /// `modes[z][t]` holds the learned blocks of mode `z` at step `t`.
    pub modes: Vec<Vec<LearnedStep>>,
    /// Training log-likelihood after each EM iteration.
    pub train_loglik: Vec<f64>,
    /// Mode probabilities after each EM iteration.
    pub pi_trace: Vec<Vec<f64>>,
}

impl FittedModel {
    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.classes.clone(), self.horizon)
    }

    pub fn to_json(&self) -> Result<String, FitError> {
        let doc = ModelDoc {
            version: self.version,
            config: self.config.clone(),
            classes: self.classes.clone(),
            control_dim: self.control_dim,
            history_len: self.history_len,
            horizon: self.horizon,
            dt: self.dt,
            mode_probs: self.mode_probs.clone(),
            modes: self
                .modes
                .iter()
                .map(|steps| steps.iter().map(step_to_doc).collect())
                .collect(),
            train_loglik: self.train_loglik.clone(),
            pi_trace: self.pi_trace.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, FitError> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        doc_to_model(doc)
    }
}

// ---------------------------------------------------------------------------
// Serialized form
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CrossDoc {
    target: usize,
    source: usize,
    rows: usize,
    cols: usize,
    /// Column-major entries.
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ControlDoc {
    target: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepDoc {
    a_cross: Vec<CrossDoc>,
    b_rows: Vec<ControlDoc>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    config: FitConfig,
    classes: Vec<AgentClass>,
    control_dim: usize,
    history_len: usize,
    horizon: usize,
    dt: f64,
    mode_probs: Vec<f64>,
    modes: Vec<Vec<StepDoc>>,
    train_loglik: Vec<f64>,
    pi_trace: Vec<Vec<f64>>,
}

fn step_to_doc(step: &LearnedStep) -> StepDoc {
    StepDoc {
        a_cross: step
            .a_cross
            .iter()
            .map(|(target, source, g)| CrossDoc {
                target: *target,
                source: *source,
                rows: g.nrows(),
                cols: g.ncols(),
                values: g.as_slice().to_vec(),
            })
            .collect(),
        b_rows: step
            .b_rows
            .iter()
            .map(|(target, b)| ControlDoc {
                target: *target,
                rows: b.nrows(),
                cols: b.ncols(),
                values: b.as_slice().to_vec(),
            })
            .collect(),
        q: step.q.as_slice().to_vec(),
    }
}

fn doc_to_model(doc: ModelDoc) -> Result<FittedModel, FitError> {
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(FitError::Version(doc.version));
    }
    if doc.classes.is_empty() {
        return Err(FitError::BadConfig("model has no agents".into()));
    }
    if doc.modes.len() != doc.mode_probs.len() || doc.modes.len() != doc.config.num_modes {
        return Err(FitError::BadConfig(
            "mode count disagrees between blocks, probabilities, and config".into(),
        ));
    }
    if doc.control_dim != doc.classes[0].control_dim() {
        return Err(FitError::BadConfig("control dimension mismatch".into()));
    }
    let full_dim: usize = doc.classes.iter().map(|c| c.state_dim()).sum();
    let mut modes = Vec::with_capacity(doc.modes.len());
    for steps in &doc.modes {
        if steps.len() != doc.horizon {
            return Err(FitError::BadConfig("mode has wrong step count".into()));
        }
        let mut out = Vec::with_capacity(steps.len());
        for step in steps {
            if step.q.len() != full_dim {
                return Err(FitError::BadConfig("noise vector has wrong length".into()));
            }
            let mut a_cross = Vec::with_capacity(step.a_cross.len());
            for c in &step.a_cross {
                if c.values.len() != c.rows * c.cols {
                    return Err(FitError::BadConfig("cross block shape mismatch".into()));
                }
                a_cross.push((
                    c.target,
                    c.source,
                    DMatrix::from_column_slice(c.rows, c.cols, &c.values),
                ));
            }
            let mut b_rows = Vec::with_capacity(step.b_rows.len());
            for b in &step.b_rows {
                if b.values.len() != b.rows * b.cols {
                    return Err(FitError::BadConfig("control block shape mismatch".into()));
                }
                b_rows.push((b.target, DMatrix::from_column_slice(b.rows, b.cols, &b.values)));
            }
            out.push(LearnedStep {
                a_cross,
                b_rows,
                q: DVector::from_column_slice(&step.q),
            });
        }
        modes.push(out);
    }
    Ok(FittedModel {
        version: doc.version,
        config: doc.config,
        classes: doc.classes,
        control_dim: doc.control_dim,
        history_len: doc.history_len,
        horizon: doc.horizon,
        dt: doc.dt,
        mode_probs: doc.mode_probs,
        modes,
        train_loglik: doc.train_loglik,
        pi_trace: doc.pi_trace,
    })
}

// ---------------------------------------------------------------------------
// Precomputed training data
// ---------------------------------------------------------------------------

/// Mode parameters in regression form: one stacked gain matrix per target
/// agent whose columns cover all source-agent features (and the ego control
/// when enabled), plus the floored noise scales.
struct WorkingStep {
    theta: Vec<DMatrix<f64>>,
    q: DVector<f64>,
}

struct WorkingMode {
    steps: Vec<WorkingStep>,
}

struct WindowData {
    /// `features[t][target_idx]` is the stacked feature vector.
    features: Vec<Vec<DVector<f64>>>,
    /// `residuals[t]` is the full joint residual after subtracting what the
    /// agents' own dynamics explain.
    residuals: Vec<DVector<f64>>,
    /// Final non-ego displacement relative to the anchor, for k-means.
    displacement: DVector<f64>,
}

struct Prepared {
    layout: BlockLayout,
    dt: f64,
    history_len: usize,
    control_dim: usize,
    with_controls: bool,
    /// Non-ego agent indices, ascending.
    targets: Vec<usize>,
    /// Feature dimension per entry of `targets`.
    feature_dims: Vec<usize>,
    windows: Vec<WindowData>,
}

fn feature_dim(layout: &BlockLayout, target: usize, with_controls: bool) -> usize {
    let states: usize = layout
        .classes
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, c)| c.state_dim())
        .sum();
    states + if with_controls { layout.control_dim } else { 0 }
}

/// Column at which source `source`'s block starts inside the stacked gains
/// of `target`.
fn source_col(layout: &BlockLayout, target: usize, source: usize) -> usize {
    let mut col = 0;
    for j in 0..layout.num_agents() {
        if j == target {
            continue;
        }
        if j == source {
            return col;
        }
        col += layout.classes[j].state_dim();
    }
    unreachable!("source must differ from target");
}

/// Own-dynamics linearization of every agent at its zero-control coasting
/// trajectory started from `anchor`; `lin[t][i]` is agent `i` at step `t`.
fn coasting_linearizations(
    layout: &BlockLayout,
    anchor: &DVector<f64>,
    horizon: usize,
    dt: f64,
) -> Result<Vec<Vec<LinearizedStep>>, DynamicsError> {
    let n = layout.num_agents();
    let mut cur: Vec<DVector<f64>> = (0..n).map(|i| layout.agent_state(anchor, i)).collect();
    let mut lin = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut row = Vec::with_capacity(n);
        for (i, class) in layout.classes.iter().enumerate() {
            let zero = DVector::zeros(class.control_dim());
            row.push(dynamics::linearize(*class, &cur[i], &zero, dt)?);
        }
        for (i, class) in layout.classes.iter().enumerate() {
            let zero = DVector::zeros(class.control_dim());
            cur[i] = dynamics::step(*class, &cur[i], &zero, dt)?;
        }
        lin.push(row);
    }
    Ok(lin)
}

/// Joint residual of one observed transition after the own-dynamics rows.
/// Non-ego rows use a zero nominal control; the ego row sees `control`.
fn transition_residual(
    layout: &BlockLayout,
    lin_row: &[LinearizedStep],
    prev: &DVector<f64>,
    next: &DVector<f64>,
    control: &DVector<f64>,
) -> DVector<f64> {
    let f = layout.full_dim();
    let mut res = DVector::zeros(f);
    for i in 0..layout.num_agents() {
        let off = layout.offset(i);
        let d = layout.classes[i].state_dim();
        let prev_i = layout.agent_state(prev, i);
        let lin = &lin_row[i];
        let mut mean = &lin.a_mat * &prev_i + &lin.c_vec;
        if i == 0 {
            mean += &lin.b_mat * control;
        }
        for k in 0..d {
            res[off + k] = next[off + k] - mean[k];
        }
    }
    res
}

/// Stacked feature vectors for every target agent at one transition: each
/// source agent's state relative to the target's state at the same step.
fn target_features(
    layout: &BlockLayout,
    targets: &[usize],
    feature_dims: &[usize],
    with_controls: bool,
    prev: &DVector<f64>,
    control: &DVector<f64>,
) -> Vec<DVector<f64>> {
    let n = layout.num_agents();
    let mut feats = Vec::with_capacity(targets.len());
    for (idx, &i) in targets.iter().enumerate() {
        let off_i = layout.offset(i);
        let di = layout.classes[i].state_dim();
        let mut phi = DVector::zeros(feature_dims[idx]);
        let mut col = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let off_j = layout.offset(j);
            let dj = layout.classes[j].state_dim();
            debug_assert_eq!(dj, di);
            for k in 0..dj {
                phi[col + k] = prev[off_j + k] - prev[off_i + k];
            }
            col += dj;
        }
        if with_controls {
            for k in 0..layout.control_dim {
                phi[col + k] = control[k];
            }
        }
        feats.push(phi);
    }
    feats
}

fn prepare(windows: &[SceneWindow], feature_map: FeatureMap) -> Result<Prepared, FitError> {
    let first = windows.first().ok_or(FitError::NoWindows)?;
    let layout = first.layout.clone();
    let dt = first.dt;
    let history_len = first.history.len().saturating_sub(1);
    let horizon = layout.horizon;
    let f = layout.full_dim();
    let with_controls = matches!(feature_map, FeatureMap::RelativeStatePlusEgoControl);
    let targets: Vec<usize> = (1..layout.num_agents()).collect();
    let feature_dims: Vec<usize> = targets
        .iter()
        .map(|&i| feature_dim(&layout, i, with_controls))
        .collect();

    let mut data = Vec::with_capacity(windows.len());
    for w in windows {
        let same = w.layout.classes == layout.classes
            && w.dt == dt
            && w.layout.horizon == horizon
            && w.history.len() == history_len + 1
            && w.future.len() == horizon
            && w.future_controls.len() == horizon
            && w.history.iter().all(|s| s.len() == f)
            && w.future.iter().all(|s| s.len() == f)
            && w
                .future_controls
                .iter()
                .all(|u| u.len() == layout.control_dim);
        if !same {
            return Err(FitError::WindowMismatch);
        }
        let anchor = w.anchor_state().clone();
        let lin = coasting_linearizations(&layout, &anchor, horizon, dt)?;
        let mut residuals = Vec::with_capacity(horizon);
        let mut features = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let prev = if t == 0 { &anchor } else { &w.future[t - 1] };
            let next = &w.future[t];
            let u = &w.future_controls[t];
            residuals.push(transition_residual(&layout, &lin[t], prev, next, u));
            features.push(target_features(
                &layout,
                &targets,
                &feature_dims,
                with_controls,
                prev,
                u,
            ));
        }
        let last = w.future.last().expect("future is non-empty");
        let mut displacement = DVector::zeros(2 * targets.len());
        for (idx, &i) in targets.iter().enumerate() {
            let off = layout.offset(i);
            displacement[2 * idx] = last[off] - anchor[off];
            displacement[2 * idx + 1] = last[off + 1] - anchor[off + 1];
        }
        data.push(WindowData {
            features,
            residuals,
            displacement,
        });
    }

    Ok(Prepared {
        control_dim: layout.control_dim,
        layout,
        dt,
        history_len,
        with_controls,
        targets,
        feature_dims,
        windows: data,
    })
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// k-means++ seeding followed by Lloyd iterations; empty clusters steal the
/// point farthest from its current center.  Deterministic given the seed.
fn kmeans_assign(points: &[DVector<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if k <= 1 || n == 0 || points[0].is_empty() {
        return vec![0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - &c).norm_squared());
        }
        centers.push(c);
    }

    let dim = points[0].len();
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = (p - c).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![DVector::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sums[assign[i]] += p;
            counts[assign[i]] += 1;
        }
        for ci in 0..k {
            if counts[ci] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = (&points[a] - &centers[assign[a]]).norm_squared();
                        let db = (&points[b] - &centers[assign[b]]).norm_squared();
                        da.partial_cmp(&db).expect("distances are finite")
                    })
                    .expect("points are non-empty");
                centers[ci] = points[far].clone();
                assign[far] = ci;
                changed = true;
            } else {
                centers[ci] = &sums[ci] / counts[ci] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

fn init_responsibilities(prep: &Prepared, config: &FitConfig) -> Result<DMatrix<f64>, FitError> {
    let w = prep.windows.len();
    let k = config.num_modes;
    if k > w {
        return Err(FitError::BadConfig(format!(
            "{k} modes exceed {w} training windows"
        )));
    }
    let points: Vec<DVector<f64>> = prep
        .windows
        .iter()
        .map(|d| d.displacement.clone())
        .collect();
    let assign = kmeans_assign(&points, k, config.rng_seed);
    let base = (1.0 - SOFT_ASSIGN) / k as f64;
    let mut resp = DMatrix::from_element(w, k, base);
    for (i, &a) in assign.iter().enumerate() {
        resp[(i, a)] += SOFT_ASSIGN;
    }
    Ok(resp)
}

// ---------------------------------------------------------------------------
// EM steps
// ---------------------------------------------------------------------------

fn validate_config(config: &FitConfig) -> Result<(), FitError> {
    if config.num_modes == 0 {
        return Err(FitError::BadConfig("num_modes must be at least 1".into()));
    }
    if !(config.ridge >= 0.0 && config.ridge.is_finite()) {
        return Err(FitError::BadConfig("ridge must be finite and >= 0".into()));
    }
    if !(config.q_floor > 0.0 && config.q_floor.is_finite()) {
        return Err(FitError::BadConfig("q_floor must be finite and > 0".into()));
    }
    if config.max_em_iters == 0 {
        return Err(FitError::BadConfig("max_em_iters must be at least 1".into()));
    }
    if !(config.loglik_tol >= 0.0) {
        return Err(FitError::BadConfig("loglik_tol must be >= 0".into()));
    }
    Ok(())
}

fn m_step_inner(
    prep: &Prepared,
    resp: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<(Vec<WorkingMode>, Vec<f64>), FitError> {
    let wn = prep.windows.len();
    let k = resp.ncols();
    if resp.nrows() != wn {
        return Err(FitError::BadConfig(
            "responsibility matrix does not match the window count".into(),
        ));
    }
    let horizon = prep.layout.horizon;
    let f = prep.layout.full_dim();
    let d0 = prep.layout.classes[0].state_dim();

    let mut modes = Vec::with_capacity(k);
    for z in 0..k {
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut thetas = Vec::with_capacity(prep.targets.len());
            for (idx, &agent) in prep.targets.iter().enumerate() {
                let p = prep.feature_dims[idx];
                let d = prep.layout.classes[agent].state_dim();
                let off = prep.layout.offset(agent);
                let mut gram = DMatrix::<f64>::identity(p, p) * config.ridge;
                let mut xty = DMatrix::<f64>::zeros(p, d);
                for (wi, wd) in prep.windows.iter().enumerate() {
                    let g = resp[(wi, z)];
                    if g == 0.0 {
                        continue;
                    }
                    let phi = &wd.features[t][idx];
                    let res = wd.residuals[t].rows(off, d);
                    gram.ger(g, phi, phi, 1.0);
                    xty.ger(g, phi, &res, 1.0);
                }
                let chol = nalgebra::linalg::Cholesky::new(gram).ok_or(
                    FitError::SingularRegression {
                        mode: z,
                        step: t,
                        agent,
                    },
                )?;
                thetas.push(chol.solve(&xty).transpose());
            }
            // Noise scales: responsibility-weighted residual std per state.
            let mut sq = DVector::<f64>::zeros(f);
            let mut wsum = 0.0;
            for (wi, wd) in prep.windows.iter().enumerate() {
                let g = resp[(wi, z)];
                if g == 0.0 {
                    continue;
                }
                wsum += g;
                let res = &wd.residuals[t];
                for kk in 0..d0 {
                    sq[kk] += g * res[kk] * res[kk];
                }
                for (idx, &agent) in prep.targets.iter().enumerate() {
                    let off = prep.layout.offset(agent);
                    let d = prep.layout.classes[agent].state_dim();
                    let pred = &thetas[idx] * &wd.features[t][idx];
                    for kk in 0..d {
                        let e = res[off + kk] - pred[kk];
                        sq[off + kk] += g * e * e;
                    }
                }
            }
            let q = if wsum > 1e-12 {
                DVector::from_iterator(f, (0..f).map(|kk| (sq[kk] / wsum).sqrt().max(config.q_floor)))
            } else {
                DVector::from_element(f, config.q_floor)
            };
            steps.push(WorkingStep { theta: thetas, q });
        }
        modes.push(WorkingMode { steps });
    }

    let pi: Vec<f64> = (0..k).map(|z| resp.column(z).sum() / wn as f64).collect();
    Ok((modes, pi))
}

/// Teacher-forced log-likelihood of one window under one mode, computed
/// directly in regression form.  Matches [`crate::mixture::mixture_loglik`]
/// on the assembled system.
fn window_loglik(prep: &Prepared, wd: &WindowData, mode: &WorkingMode) -> f64 {
    let d0 = prep.layout.classes[0].state_dim();
    let mut ll = 0.0;
    for (t, step) in mode.steps.iter().enumerate() {
        let res = &wd.residuals[t];
        let q = &step.q;
        for kk in 0..d0 {
            ll += log_normal(res[kk], 0.0, q[kk]);
        }
        for (idx, &agent) in prep.targets.iter().enumerate() {
            let off = prep.layout.offset(agent);
            let d = prep.layout.classes[agent].state_dim();
            let pred = &step.theta[idx] * &wd.features[t][idx];
            for kk in 0..d {
                ll += log_normal(res[off + kk], pred[kk], q[off + kk]);
            }
        }
    }
    ll
}

fn e_step_inner(
    prep: &Prepared,
    modes: &[WorkingMode],
    pi: &[f64],
) -> (DMatrix<f64>, f64) {
    let wn = prep.windows.len();
    let k = modes.len();
    let mut resp = DMatrix::zeros(wn, k);
    let mut total = 0.0;
    let mut terms = vec![0.0; k];
    for (wi, wd) in prep.windows.iter().enumerate() {
        for (z, mode) in modes.iter().enumerate() {
            terms[z] = pi[z].max(1e-300).ln() + window_loglik(prep, wd, mode);
        }
        let lse = log_sum_exp(&terms);
        total += lse;
        for z in 0..k {
            resp[(wi, z)] = (terms[z] - lse).exp();
        }
    }
    (resp, total)
}

fn relative_slack(value: f64) -> f64 {
    LOGLIK_SLACK * value.abs().max(1.0)
}

fn build_model(
    prep: &Prepared,
    config: &FitConfig,
    modes: Vec<WorkingMode>,
    pi: Vec<f64>,
    train_loglik: Vec<f64>,
    pi_trace: Vec<Vec<f64>>,
) -> FittedModel {
    let n = prep.layout.num_agents();
    let learned: Vec<Vec<LearnedStep>> = modes
        .into_iter()
        .map(|mode| {
            mode.steps
                .into_iter()
                .map(|step| {
                    let mut a_cross = Vec::new();
                    let mut b_rows = Vec::new();
                    for (idx, &agent) in prep.targets.iter().enumerate() {
                        let theta = &step.theta[idx];
                        let mut col = 0;
                        for j in 0..n {
                            if j == agent {
                                continue;
                            }
                            let dj = prep.layout.classes[j].state_dim();
                            a_cross.push((agent, j, theta.columns(col, dj).into_owned()));
                            col += dj;
                        }
                        if prep.with_controls {
                            b_rows.push((
                                agent,
                                theta.columns(col, prep.control_dim).into_owned(),
                            ));
                        }
                    }
                    LearnedStep {
                        a_cross,
                        b_rows,
                        q: step.q,
                    }
                })
                .collect()
        })
        .collect();
    FittedModel {
        version: MODEL_FORMAT_VERSION,
        config: config.clone(),
        classes: prep.layout.classes.clone(),
        control_dim: prep.control_dim,
        history_len: prep.history_len,
        horizon: prep.layout.horizon,
        dt: prep.dt,
        mode_probs: pi,
        modes: learned,
        train_loglik,
        pi_trace,
    }
}

/// Rebuilds the stacked regression form from stored blocks.
fn stack_model(model: &FittedModel) -> Result<Vec<WorkingMode>, FitError> {
    let layout = model.layout();
    let n = layout.num_agents();
    let f = layout.full_dim();
    let with_controls = matches!(
        model.config.feature_map,
        FeatureMap::RelativeStatePlusEgoControl
    );
    let mut out = Vec::with_capacity(model.modes.len());
    for steps in &model.modes {
        if steps.len() != model.horizon {
            return Err(FitError::BadConfig("mode has wrong step count".into()));
        }
        let mut working_steps = Vec::with_capacity(steps.len());
        for step in steps {
            let mut thetas: Vec<DMatrix<f64>> = (1..n)
                .map(|i| {
                    DMatrix::zeros(
                        layout.classes[i].state_dim(),
                        feature_dim(&layout, i, with_controls),
                    )
                })
                .collect();
            for (target, source, g) in &step.a_cross {
                if *target == 0 || *target >= n || *source >= n || source == target {
                    return Err(FitError::BadConfig("cross block indices out of range".into()));
                }
                let dr = layout.classes[*target].state_dim();
                let dc = layout.classes[*source].state_dim();
                if g.nrows() != dr || g.ncols() != dc {
                    return Err(FitError::BadConfig("cross block shape mismatch".into()));
                }
                let col = source_col(&layout, *target, *source);
                thetas[*target - 1]
                    .view_mut((0, col), (dr, dc))
                    .copy_from(g);
            }
            for (target, b) in &step.b_rows {
                if !with_controls {
                    return Err(FitError::BadConfig(
                        "control blocks present but the feature map excludes controls".into(),
                    ));
                }
                if *target == 0 || *target >= n {
                    return Err(FitError::BadConfig("control block target out of range".into()));
                }
                let dr = layout.classes[*target].state_dim();
                if b.nrows() != dr || b.ncols() != layout.control_dim {
                    return Err(FitError::BadConfig("control block shape mismatch".into()));
                }
                let col = feature_dim(&layout, *target, false);
                thetas[*target - 1]
                    .view_mut((0, col), (dr, layout.control_dim))
                    .copy_from(b);
            }
            if step.q.len() != f {
                return Err(FitError::BadConfig("noise vector has wrong length".into()));
            }
            working_steps.push(WorkingStep {
                theta: thetas,
                q: step.q.map(|v| v.max(model.config.q_floor)),
            });
        }
        out.push(WorkingMode {
            steps: working_steps,
        });
    }
    Ok(out)
}

fn check_model_matches(prep: &Prepared, model: &FittedModel) -> Result<(), FitError> {
    if model.classes != prep.layout.classes
        || model.dt != prep.dt
        || model.horizon != prep.layout.horizon
        || model.control_dim != prep.control_dim
    {
        return Err(FitError::WindowMismatch);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Posterior mode responsibilities and total log-likelihood of the windows
/// under the model.  Row `w` of the matrix sums to one.
pub fn e_step(
    model: &FittedModel,
    windows: &[SceneWindow],
) -> Result<(DMatrix<f64>, f64), FitError> {
    let prep = prepare(windows, model.config.feature_map)?;
    check_model_matches(&prep, model)?;
    let working = stack_model(model)?;
    Ok(e_step_inner(&prep, &working, &model.mode_probs))
}

/// One maximization step: responsibility-weighted ridge regressions of the
/// one-step residuals, refitted noise scales, and refreshed mode weights.
pub fn m_step(
    windows: &[SceneWindow],
    responsibilities: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<FittedModel, FitError> {
    validate_config(config)?;
    let prep = prepare(windows, config.feature_map)?;
    if responsibilities.nrows() != prep.windows.len()
        || responsibilities.ncols() != config.num_modes
    {
        return Err(FitError::BadConfig(
            "responsibility matrix shape does not match windows and modes".into(),
        ));
    }
    let (modes, pi) = m_step_inner(&prep, responsibilities, config)?;
    Ok(build_model(&prep, config, modes, pi, Vec::new(), Vec::new()))
}

/// Fits a mixture by expectation-maximization.
///
/// Initial responsibilities come from k-means++ clusters over final non-ego
/// displacement vectors.  Each iteration runs a maximization step followed by
/// an expectation step; the training log-likelihood is recorded after every
/// iteration and is asserted to be non-decreasing (up to a small relative
/// slack covering floating-point accumulation and the ridge bias).
pub fn fit(windows: &[SceneWindow], config: &FitConfig) -> Result<FittedModel, FitError> {
    validate_config(config)?;
    let prep = prepare(windows, config.feature_map)?;
    let mut resp = init_responsibilities(&prep, config)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut pi_trace: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<(Vec<WorkingMode>, Vec<f64>)> = None;
    for _ in 0..config.max_em_iters {
        let (modes, pi) = m_step_inner(&prep, &resp, config)?;
        let (new_resp, loglik) = e_step_inner(&prep, &modes, &pi);
        let done = match trace.last() {
            Some(&prev) => {
                assert!(
                    loglik >= prev - relative_slack(prev),
                    "training log-likelihood decreased: {prev} -> {loglik}"
                );
                loglik - prev <= config.loglik_tol * prev.abs().max(1.0)
            }
            None => false,
        };
        trace.push(loglik);
        pi_trace.push(pi.clone());
        current = Some((modes, pi));
        resp = new_resp;
        if done {
            break;
        }
    }
    let (modes, pi) = current.expect("at least one EM iteration ran");
    Ok(build_model(&prep, config, modes, pi, trace, pi_trace))
}

/// Per-mode systems anchored at `anchor`, with coasting nominal trajectories
/// for the own-dynamics rows.
fn emit_mode_systems(
    model: &FittedModel,
    anchor: &DVector<f64>,
) -> Result<Vec<ModeSystem>, FitError> {
    let layout = model.layout();
    let n = layout.num_agents();
    let mut cur: Vec<DVector<f64>> = (0..n).map(|i| layout.agent_state(anchor, i)).collect();
    let mut nominal: Vec<Vec<AgentNominal>> = Vec::with_capacity(model.horizon);
    for _ in 0..model.horizon {
        nominal.push(cur.iter().cloned().map(AgentNominal::coasting).collect());
        for (i, class) in layout.classes.iter().enumerate() {
            let zero = DVector::zeros(class.control_dim());
            cur[i] = dynamics::step(*class, &cur[i], &zero, model.dt)?;
        }
    }
    model
        .modes
        .iter()
        .map(|steps| {
            assemble(&layout, steps, &nominal, model.config.q_floor, model.dt)
                .map_err(FitError::from)
        })
        .collect()
}

/// Builds the predictive mixture for one situation.
///
/// `history` holds joint states ending at the prediction anchor;
/// `history_controls` the ego controls between them; `future_controls` the
/// tentative ego plan over the model horizon.  Mode probabilities are the
/// fitted weights reweighted by how well each mode's first-step parameters
/// explain the observed history transitions.  The returned system always
/// passes structural validation.
pub fn predict(
    model: &FittedModel,
    history: &[DVector<f64>],
    history_controls: &[DVector<f64>],
    future_controls: &[DVector<f64>],
) -> Result<MatsSystem, FitError> {
    let layout = model.layout();
    let f = layout.full_dim();
    if history.is_empty() || history.iter().any(|s| s.len() != f) {
        return Err(FitError::HistoryShape { want: f });
    }
    if history_controls.len() + 1 != history.len()
        || history_controls.iter().any(|u| u.len() != model.control_dim)
    {
        return Err(FitError::ControlShape {
            want: history.len() - 1,
            got: history_controls.len(),
            dim: model.control_dim,
        });
    }
    if future_controls.len() != model.horizon
        || future_controls.iter().any(|u| u.len() != model.control_dim)
    {
        return Err(FitError::ControlShape {
            want: model.horizon,
            got: future_controls.len(),
            dim: model.control_dim,
        });
    }

    let anchor = history.last().expect("history is non-empty");
    let working = stack_model(model)?;
    let modes = emit_mode_systems(model, anchor)?;

    // Reweight the fitted mode probabilities by the history evidence, scored
    // with each mode's first-step parameters.
    let with_controls = matches!(
        model.config.feature_map,
        FeatureMap::RelativeStatePlusEgoControl
    );
    let targets: Vec<usize> = (1..layout.num_agents()).collect();
    let feature_dims: Vec<usize> = targets
        .iter()
        .map(|&i| feature_dim(&layout, i, with_controls))
        .collect();
    let d0 = layout.classes[0].state_dim();
    let lin0: Vec<LinearizedStep> = layout
        .classes
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let zero = DVector::zeros(class.control_dim());
            dynamics::linearize(*class, &layout.agent_state(anchor, i), &zero, model.dt)
        })
        .collect::<Result<_, _>>()?;
    let mut log_post: Vec<f64> = model
        .mode_probs
        .iter()
        .map(|p| p.max(1e-300).ln())
        .collect();
    for h in 0..history_controls.len() {
        let prev = &history[h];
        let next = &history[h + 1];
        let u = &history_controls[h];
        let res = transition_residual(&layout, &lin0, prev, next, u);
        let feats = target_features(&layout, &targets, &feature_dims, with_controls, prev, u);
        for (z, wm) in working.iter().enumerate() {
            let step = &wm.steps[0];
            let mut ll = 0.0;
            for kk in 0..d0 {
                ll += log_normal(res[kk], 0.0, step.q[kk]);
            }
            for (idx, &agent) in targets.iter().enumerate() {
                let off = layout.offset(agent);
                let d = layout.classes[agent].state_dim();
                let pred = &step.theta[idx] * &feats[idx];
                for kk in 0..d {
                    ll += log_normal(res[off + kk], pred[kk], step.q[off + kk]);
                }
            }
            log_post[z] += ll;
        }
    }
    let lse = log_sum_exp(&log_post);
    let mut probs: Vec<f64> = log_post.iter().map(|lp| (lp - lse).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }

    let system = MatsSystem {
        layout,
        modes,
        mode_probs: probs,
    };
    system.validate()?;
    Ok(system)
}

/// [`predict`] applied to a recorded window (anchor, history, and the
/// recorded ego future controls).
pub fn predict_window(model: &FittedModel, window: &SceneWindow) -> Result<MatsSystem, FitError> {
    predict(
        model,
        &window.history,
        &window.history_controls,
        &window.future_controls,
    )
}

/// Writes the per-iteration training log as CSV.
pub fn write_training_log(model: &FittedModel, out: &mut dyn Write) -> Result<(), FitError> {
    let k = model.mode_probs.len();
    write!(out, "iteration,loglik_nats")?;
    for z in 0..k {
        write!(out, ",pi_{z}")?;
    }
    writeln!(out)?;
    for (i, ll) in model.train_loglik.iter().enumerate() {
        write!(out, "{i},{ll}")?;
        for v in &model.pi_trace[i] {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
