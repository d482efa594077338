//! Mixture-of-affine-time-varying-systems representation.
//!
//! A joint scene state stacks every agent's state into one vector of
//! dimension `F` (ego first).  A *mode* is a sequence of affine-Gaussian
//! one-step maps over a horizon of `T` steps:
//!
//! ```text
//! s(t+1) = A(t) s(t) + B(t) u(t) + c(t) + diag(q(t)) w(t),   w ~ N(0, I)
//! ```
//!
//! where `u` is the ego control.  A [`MatsSystem`] is a probability-weighted
//! set of modes over one shared block layout.  The block structure is fixed:
//!
//! * the ego row of `A` has zero off-diagonal blocks (other agents never
//!   influence the ego's own prediction — the planner owns the ego);
//! * every diagonal block of `A`, the ego's `B` block, and the offsets `c`
//!   come from [`crate::dynamics`] linearizations, never from learning;
//! * learned quantities are the non-ego off-diagonal `A` blocks, the non-ego
//!   `B` blocks, and the noise scales `q`.
//!
//! [`assemble`] enforces that mask.  A learned cross block `G` acts on the
//! source agent's state *relative to the target agent's current state*:
//! its contribution to the target's next state is `G (s_src(t) - s_tgt(t))`,
//! realized as `+G` on the off-diagonal block and `-G` folded onto the
//! target's diagonal block, so rollouts stay strictly linear in the joint
//! state.

use crate::dynamics::{self, AgentClass};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serialization format version for [`MatsSystem`] JSON documents.
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance for the mode-probability simplex check.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Agent stacking order and horizon shared by every mode of a system.
///
/// Agent 0 is always the ego.  `full_dim` is the sum of per-agent state
/// dimensions; `control_dim` is the ego's control dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Per-agent class, ego first.
    pub classes: Vec<AgentClass>,
    /// Ego control dimension.
    pub control_dim: usize,
    /// Number of one-step maps per mode.
    pub horizon: usize,
}

impl BlockLayout {
    /// Layout for the given classes with the ego's natural control dimension.
    pub fn new(classes: Vec<AgentClass>, horizon: usize) -> Self {
        let control_dim = classes[0].control_dim();
        BlockLayout {
            classes,
            control_dim,
            horizon,
        }
    }

    /// Number of agents (including the ego).
    pub fn num_agents(&self) -> usize {
        self.classes.len()
    }

    /// Per-agent state dimensions.
    pub fn agent_dims(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.state_dim()).collect()
    }

    /// Offset of agent `i`'s block inside the joint state vector.
    pub fn offset(&self, agent: usize) -> usize {
        self.classes[..agent].iter().map(|c| c.state_dim()).sum()
    }

    /// Total joint state dimension `F`.
    pub fn full_dim(&self) -> usize {
        self.classes.iter().map(|c| c.state_dim()).sum()
    }

    /// Borrowed view of agent `i`'s segment of a joint vector.
    pub fn agent_slice<'a>(&self, joint: &'a DVector<f64>, agent: usize) -> &'a [f64] {
        let off = self.offset(agent);
        &joint.as_slice()[off..off + self.classes[agent].state_dim()]
    }

    /// Agent `i`'s segment of a joint vector as an owned vector.
    pub fn agent_state(&self, joint: &DVector<f64>, agent: usize) -> DVector<f64> {
        DVector::from_column_slice(self.agent_slice(joint, agent))
    }
}

/// One affine-Gaussian mode: per-step system matrices over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSystem {
    /// State transition matrices, `F x F`, one per step.
    pub a_seq: Vec<DMatrix<f64>>,
    /// Ego-control input matrices, `F x C`, one per step.
    pub b_seq: Vec<DMatrix<f64>>,
    /// Affine offsets, length `F`, one per step.
    pub c_seq: Vec<DVector<f64>>,
    /// Per-state noise standard deviations, length `F`, one per step.
    pub q_seq: Vec<DVector<f64>>,
}

impl ModeSystem {
    /// Number of one-step maps.
    pub fn horizon(&self) -> usize {
        self.a_seq.len()
    }

    /// Joint state dimension.
    pub fn full_dim(&self) -> usize {
        self.a_seq[0].nrows()
    }

    /// Mean of the one-step map at step `t` applied to `state`.
    pub fn one_step_mean(
        &self,
        t: usize,
        state: &DVector<f64>,
        control: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a_seq[t] * state + &self.b_seq[t] * control + &self.c_seq[t]
    }
}

/// A probability-weighted mixture of modes over one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MatsSystem {
    pub layout: BlockLayout,
    pub modes: Vec<ModeSystem>,
    pub mode_probs: Vec<f64>,
}

/// Deterministic affine rollout of one mode: per-step means and covariances.
#[derive(Debug, Clone)]
pub struct GaussianRollout {
    /// Predicted joint means, one per step (the initial state is not included).
    pub means: Vec<DVector<f64>>,
    /// Predicted joint covariances, one per step.
    pub covs: Vec<DMatrix<f64>>,
}

/// Structural errors raised while building or validating systems.
#[derive(Debug, Error)]
pub enum StructureError {
    #[error("learned block targets the ego row (target {target}, source {from})")]
    EgoRowBlock { target: usize, from: usize },
    #[error("learned block on the diagonal of agent {0} (dynamics-owned)")]
    DiagonalBlock(usize),
    #[error("learned ego control block (dynamics-owned)")]
    EgoControlBlock,
    #[error("learned block for agent {agent} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    BlockShape {
        agent: usize,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("agent index {0} out of range")]
    AgentIndex(usize),
    #[error("noise vector has length {got}, expected {want}")]
    NoiseLength { got: usize, want: usize },
    #[error("expected {want} timesteps of {what}, got {got}")]
    HorizonMismatch {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("mode probabilities sum to {0}, expected 1")]
    ProbSum(f64),
    #[error("negative mode probability {0}")]
    NegativeProb(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("system has no modes")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dynamics error: {0}")]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Nominal operating point for one agent at one timestep.
///
/// For vehicles the linearization is taken here; for double integrators the
/// state is irrelevant but a nonzero nominal control is folded into the
/// affine offset (scripted autonomous agents).  The ego's nominal control is
/// the tentative ego control sequence.
#[derive(Debug, Clone)]
pub struct AgentNominal {
    pub state: DVector<f64>,
    pub control: DVector<f64>,
}

impl AgentNominal {
    pub fn coasting(state: DVector<f64>) -> Self {
        AgentNominal {
            state,
            control: DVector::zeros(2),
        }
    }
}

/// Learned quantities for one timestep, to be placed into the block mask.
#[derive(Debug, Clone, Default)]
pub struct LearnedStep {
    /// Cross blocks `(target, source, gain)` with `target != 0`,
    /// `source != target`; `gain` maps the source agent's state (relative to
    /// the target's current state) into the target's next-state residual.
    pub a_cross: Vec<(usize, usize, DMatrix<f64>)>,
    /// Ego-control blocks `(target, gain)` with `target != 0`.
    pub b_rows: Vec<(usize, DMatrix<f64>)>,
    /// Per-state noise standard deviations, length `F`.
    pub q: DVector<f64>,
}

/// Builds one mode from dynamics linearizations plus learned blocks.
///
/// `nominal[t][i]` is agent `i`'s operating point at step `t`.  Each learned
/// cross block `G` contributes `G * (s_source - s_target)` to the target's
/// next state: `+G` is placed on the off-diagonal block and `-G` is added to
/// the target's diagonal block on top of its dynamics linearization.
/// Learned noise scales are floored at `q_floor`; `dt` is the step length the
/// dynamics linearizations are taken over.
///
/// Returns a [`StructureError`] if a learned entry lands on a dynamics-owned
/// block (ego row, any diagonal block, ego control) or has the wrong shape.
pub fn assemble(
    layout: &BlockLayout,
    learned: &[LearnedStep],
    nominal: &[Vec<AgentNominal>],
    q_floor: f64,
    dt: f64,
) -> Result<ModeSystem, StructureError> {
    let t_steps = layout.horizon;
    let n = layout.num_agents();
    let f = layout.full_dim();
    if learned.len() != t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "learned blocks",
            want: t_steps,
            got: learned.len(),
        });
    }
    if nominal.len() != t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "nominal points",
            want: t_steps,
            got: nominal.len(),
        });
    }
    let mut a_seq = Vec::with_capacity(t_steps);
    let mut b_seq = Vec::with_capacity(t_steps);
    let mut c_seq = Vec::with_capacity(t_steps);
    let mut q_seq = Vec::with_capacity(t_steps);

    for t in 0..t_steps {
        if nominal[t].len() != n {
            return Err(StructureError::Dimension(format!(
                "step {t} has {} nominal points, expected {n}",
                nominal[t].len()
            )));
        }
        let mut a = DMatrix::zeros(f, f);
        let mut b = DMatrix::zeros(f, layout.control_dim);
        let mut c = DVector::zeros(f);

        // Dynamics-owned blocks: diagonal of A, ego B, and the offsets.
        for (i, class) in layout.classes.iter().enumerate() {
            let off = layout.offset(i);
            let d = class.state_dim();
            let nom = &nominal[t][i];
            let lin = dynamics::linearize(*class, &nom.state, &nom.control, dt)?;
            a.view_mut((off, off), (d, d)).copy_from(&lin.a_mat);
            if i == 0 {
                b.view_mut((off, 0), (d, layout.control_dim))
                    .copy_from(&lin.b_mat);
                c.rows_mut(off, d).copy_from(&lin.c_vec);
            } else {
                // Autonomous agents: the scripted nominal control is folded
                // into the offset, keeping the row exact along the nominal.
                let folded = &lin.c_vec + &lin.b_mat * &nom.control;
                c.rows_mut(off, d).copy_from(&folded);
            }
        }

        // Learned blocks, checked against the mask.
        let step = &learned[t];
        for (target, source, gain) in &step.a_cross {
            if *target >= n {
                return Err(StructureError::AgentIndex(*target));
            }
            if *source >= n {
                return Err(StructureError::AgentIndex(*source));
            }
            if *target == 0 {
                return Err(StructureError::EgoRowBlock {
                    target: *target,
                    from: *source,
                });
            }
            if target == source {
                return Err(StructureError::DiagonalBlock(*target));
            }
            let (dr, dc) = (
                layout.classes[*target].state_dim(),
                layout.classes[*source].state_dim(),
            );
            if gain.nrows() != dr || gain.ncols() != dc {
                return Err(StructureError::BlockShape {
                    agent: *target,
                    rows: gain.nrows(),
                    cols: gain.ncols(),
                    want_rows: dr,
                    want_cols: dc,
                });
            }
            if !gain.iter().all(|v| v.is_finite()) {
                return Err(StructureError::NonFinite("learned cross block"));
            }
            if dr != dc {
                return Err(StructureError::Dimension(format!(
                    "cross block {} <- {} relates states of different \
                     dimension ({dr} vs {dc})",
                    *target, *source
                )));
            }
            let (ro, co) = (layout.offset(*target), layout.offset(*source));
            let mut cross = a.view_mut((ro, co), (dr, dc));
            cross += gain;
            // The source state enters relative to the target's own state, so
            // the same gain is subtracted from the target's diagonal block.
            let mut diag = a.view_mut((ro, ro), (dr, dr));
            diag -= gain;
        }
        for (target, gain) in &step.b_rows {
            if *target >= n {
                return Err(StructureError::AgentIndex(*target));
            }
            if *target == 0 {
                return Err(StructureError::EgoControlBlock);
            }
            let d = layout.classes[*target].state_dim();
            if gain.nrows() != d || gain.ncols() != layout.control_dim {
                return Err(StructureError::BlockShape {
                    agent: *target,
                    rows: gain.nrows(),
                    cols: gain.ncols(),
                    want_rows: d,
                    want_cols: layout.control_dim,
                });
            }
            if !gain.iter().all(|v| v.is_finite()) {
                return Err(StructureError::NonFinite("learned control block"));
            }
            let off = layout.offset(*target);
            b.view_mut((off, 0), (d, layout.control_dim)).copy_from(gain);
        }

        if step.q.len() != f {
            return Err(StructureError::NoiseLength {
                got: step.q.len(),
                want: f,
            });
        }
        if !step.q.iter().all(|v| v.is_finite()) {
            return Err(StructureError::NonFinite("noise scales"));
        }
        let q = step.q.map(|v| v.max(q_floor));

        a_seq.push(a);
        b_seq.push(b);
        c_seq.push(c);
        q_seq.push(q);
    }

    Ok(ModeSystem {
        a_seq,
        b_seq,
        c_seq,
        q_seq,
    })
}

impl MatsSystem {
    /// Checks every structural invariant; cheap enough to call in hot paths.
    pub fn validate(&self) -> Result<(), StructureError> {
        if self.modes.is_empty() {
            return Err(StructureError::Empty);
        }
        if self.mode_probs.len() != self.modes.len() {
            return Err(StructureError::Dimension(format!(
                "{} probabilities for {} modes",
                self.mode_probs.len(),
                self.modes.len()
            )));
        }
        for p in &self.mode_probs {
            if *p < 0.0 {
                return Err(StructureError::NegativeProb(*p));
            }
            if !p.is_finite() {
                return Err(StructureError::NonFinite("mode probability"));
            }
        }
        let sum: f64 = self.mode_probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(StructureError::ProbSum(sum));
        }
        let f = self.layout.full_dim();
        let t_steps = self.layout.horizon;
        for mode in &self.modes {
            if mode.a_seq.len() != t_steps
                || mode.b_seq.len() != t_steps
                || mode.c_seq.len() != t_steps
                || mode.q_seq.len() != t_steps
            {
                return Err(StructureError::HorizonMismatch {
                    what: "mode sequences",
                    want: t_steps,
                    got: mode.a_seq.len(),
                });
            }
            for t in 0..t_steps {
                let a = &mode.a_seq[t];
                if a.nrows() != f || a.ncols() != f {
                    return Err(StructureError::Dimension(format!(
                        "A at step {t} is {}x{}, expected {f}x{f}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
                if mode.b_seq[t].nrows() != f
                    || mode.b_seq[t].ncols() != self.layout.control_dim
                {
                    return Err(StructureError::Dimension(format!(
                        "B at step {t} has wrong shape"
                    )));
                }
                if mode.c_seq[t].len() != f || mode.q_seq[t].len() != f {
                    return Err(StructureError::Dimension(format!(
                        "c/q at step {t} has wrong length"
                    )));
                }
                if !a.iter().all(|v| v.is_finite())
                    || !mode.b_seq[t].iter().all(|v| v.is_finite())
                    || !mode.c_seq[t].iter().all(|v| v.is_finite())
                {
                    return Err(StructureError::NonFinite("mode matrices"));
                }
                if mode.q_seq[t].iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(StructureError::NonFinite("noise scales"));
                }
                // Ego row off-diagonal blocks must be exactly zero.
                let ego_dim = self.layout.classes[0].state_dim();
                for r in 0..ego_dim {
                    for c in ego_dim..f {
                        if a[(r, c)] != 0.0 {
                            return Err(StructureError::EgoRowBlock {
                                target: 0,
                                from: 1,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Index of the most probable mode; ties resolve to the lowest index.
    pub fn most_likely_mode(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.mode_probs.iter().enumerate() {
            if *p > self.mode_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Affine-Gaussian rollout of one mode from an initial joint state.
///
/// `controls` supplies the ego control for each step; `initial_cov` is the
/// joint covariance at the start (zero when `None`).  Means follow
/// `m' = A m + B u + c`; covariances follow `P' = A P A' + diag(q)^2` and are
/// re-symmetrized each step to keep floating-point drift out of the output.
pub fn rollout_mode(
    mode: &ModeSystem,
    initial_state: &DVector<f64>,
    controls: &[DVector<f64>],
    initial_cov: Option<&DMatrix<f64>>,
) -> Result<GaussianRollout, StructureError> {
    let f = mode.full_dim();
    let t_steps = mode.horizon();
    if initial_state.len() != f {
        return Err(StructureError::Dimension(format!(
            "initial state has length {}, expected {f}",
            initial_state.len()
        )));
    }
    if controls.len() < t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "controls",
            want: t_steps,
            got: controls.len(),
        });
    }
    let mut mean = initial_state.clone();
    let mut cov = match initial_cov {
        Some(c) => {
            if c.nrows() != f || c.ncols() != f {
                return Err(StructureError::Dimension(
                    "initial covariance shape".to_string(),
                ));
            }
            c.clone()
        }
        None => DMatrix::zeros(f, f),
    };
    let mut means = Vec::with_capacity(t_steps);
    let mut covs = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        mean = mode.one_step_mean(t, &mean, &controls[t]);
        let a = &mode.a_seq[t];
        let mut next = a * &cov * a.transpose();
        for k in 0..f {
            next[(k, k)] += mode.q_seq[t][k] * mode.q_seq[t][k];
        }
        // Symmetrize to suppress round-off skew before it compounds.
        for r in 0..f {
            for c in (r + 1)..f {
                let v = 0.5 * (next[(r, c)] + next[(c, r)]);
                next[(r, c)] = v;
                next[(c, r)] = v;
            }
        }
        cov = next;
        means.push(mean.clone());
        covs.push(cov.clone());
    }
    Ok(GaussianRollout { means, covs })
}

/// Draws one joint trajectory from a mode with seeded, reproducible noise.
pub fn sample_mode(
    mode: &ModeSystem,
    initial_state: &DVector<f64>,
    controls: &[DVector<f64>],
    seed: u64,
) -> Result<Vec<DVector<f64>>, StructureError> {
    let f = mode.full_dim();
    let t_steps = mode.horizon();
    if initial_state.len() != f {
        return Err(StructureError::Dimension(format!(
            "initial state has length {}, expected {f}",
            initial_state.len()
        )));
    }
    if controls.len() < t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "controls",
            want: t_steps,
            got: controls.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_state.clone();
    let mut out = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let mut next = mode.one_step_mean(t, &state, &controls[t]);
        for k in 0..f {
            let w: f64 = StandardNormal.sample(&mut rng);
            next[k] += mode.q_seq[t][k] * w;
        }
        state = next;
        out.push(state.clone());
    }
    Ok(out)
}

/// Natural log of the scalar normal density `N(x; mean, std^2)`.
pub fn log_normal(x: f64, mean: f64, std: f64) -> f64 {
    let std = std.max(1e-12); // numeric guard; assembled systems floor q anyway
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Teacher-forced log-likelihood of an observed trajectory under the mixture.
///
/// Each mode scores the observation with one-step predictive densities: step
/// `t` predicts from the *observed* state at `t-1` (the initial state for
/// `t = 0`), and per-state Gaussians with scales `q(t)` are multiplied over
/// steps and dimensions.  Modes combine through a log-sum-exp weighted by the
/// mode probabilities.
pub fn mixture_loglik(
    system: &MatsSystem,
    observed: &[DVector<f64>],
    initial_state: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<f64, StructureError> {
    system.validate()?;
    let t_steps = system.layout.horizon;
    if observed.len() != t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "observed states",
            want: t_steps,
            got: observed.len(),
        });
    }
    if controls.len() < t_steps {
        return Err(StructureError::HorizonMismatch {
            what: "controls",
            want: t_steps,
            got: controls.len(),
        });
    }
    let f = system.layout.full_dim();
    let mut terms = Vec::with_capacity(system.modes.len());
    for (z, mode) in system.modes.iter().enumerate() {
        let mut ll = 0.0;
        for t in 0..t_steps {
            let prev = if t == 0 { initial_state } else { &observed[t - 1] };
            let mean = mode.one_step_mean(t, prev, &controls[t]);
            for k in 0..f {
                ll += log_normal(observed[t][k], mean[k], mode.q_seq[t][k]);
            }
        }
        let pi = self_prob(system, z);
        terms.push(pi.ln() + ll);
    }
    Ok(log_sum_exp(&terms))
}

fn self_prob(system: &MatsSystem, z: usize) -> f64 {
    system.mode_probs[z].max(1e-300)
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Serialization: versioned JSON with row-major matrix flattening.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Entries in row-major order.
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>, StructureError> {
        if self.data.len() != self.rows * self.cols {
            return Err(StructureError::Serde(format!(
                "matrix doc has {} entries for {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ModeDoc {
    a: Vec<MatrixDoc>,
    b: Vec<MatrixDoc>,
    c: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
}

/// On-disk document for a [`MatsSystem`].
#[derive(Serialize, Deserialize)]
struct SystemDoc {
    version: u32,
    classes: Vec<AgentClass>,
    control_dim: usize,
    horizon: usize,
    mode_probs: Vec<f64>,
    modes: Vec<ModeDoc>,
}

impl MatsSystem {
    /// Serializes to the versioned JSON document (bit-exact round trip).
    pub fn to_json(&self) -> Result<String, StructureError> {
        self.validate()?;
        let doc = SystemDoc {
            version: FORMAT_VERSION,
            classes: self.layout.classes.clone(),
            control_dim: self.layout.control_dim,
            horizon: self.layout.horizon,
            mode_probs: self.mode_probs.clone(),
            modes: self
                .modes
                .iter()
                .map(|m| ModeDoc {
                    a: m.a_seq.iter().map(MatrixDoc::from_matrix).collect(),
                    b: m.b_seq.iter().map(MatrixDoc::from_matrix).collect(),
                    c: m.c_seq.iter().map(|v| v.as_slice().to_vec()).collect(),
                    q: m.q_seq.iter().map(|v| v.as_slice().to_vec()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| StructureError::Serde(e.to_string()))
    }

    /// Parses the versioned JSON document and re-validates every invariant.
    pub fn from_json(text: &str) -> Result<Self, StructureError> {
        let doc: SystemDoc =
            serde_json::from_str(text).map_err(|e| StructureError::Serde(e.to_string()))?;
        if doc.version != FORMAT_VERSION {
            return Err(StructureError::Version(doc.version));
        }
        let layout = BlockLayout {
            classes: doc.classes,
            control_dim: doc.control_dim,
            horizon: doc.horizon,
        };
        let mut modes = Vec::with_capacity(doc.modes.len());
        for m in &doc.modes {
            let a_seq = m.a.iter().map(|d| d.to_matrix()).collect::<Result<_, _>>()?;
            let b_seq = m.b.iter().map(|d| d.to_matrix()).collect::<Result<_, _>>()?;
            let c_seq = m.c.iter().map(|v| DVector::from_vec(v.clone())).collect();
            let q_seq = m.q.iter().map(|v| DVector::from_vec(v.clone())).collect();
            modes.push(ModeSystem {
                a_seq,
                b_seq,
                c_seq,
                q_seq,
            });
        }
        let system = MatsSystem {
            layout,
            modes,
            mode_probs: doc.mode_probs,
        };
        system.validate()?;
        Ok(system)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn di_layout(n: usize, horizon: usize) -> BlockLayout {
        BlockLayout::new(vec![AgentClass::Particle; n], horizon)
    }

    fn coasting_nominals(layout: &BlockLayout, t_steps: usize) -> Vec<Vec<AgentNominal>> {
        (0..t_steps)
            .map(|_| {
                (0..layout.num_agents())
                    .map(|_| AgentNominal::coasting(DVector::zeros(4)))
                    .collect()
            })
            .collect()
    }

    fn zero_learned(f: usize, t_steps: usize) -> Vec<LearnedStep> {
        (0..t_steps)
            .map(|_| LearnedStep {
                a_cross: vec![],
                b_rows: vec![],
                q: DVector::zeros(f),
            })
            .collect()
    }

    #[test]
    fn zero_learned_blocks_give_block_diagonal_integrators() {
        let layout = di_layout(2, 3);
        let mode = assemble(
            &layout,
            &zero_learned(8, 3),
            &coasting_nominals(&layout, 3),
            0.0,
            0.1,
        )
        .unwrap();
        for t in 0..3 {
            let a = &mode.a_seq[t];
            // Exact integrator blocks on the diagonal.
            assert_eq!(a[(0, 2)], 0.1);
            assert_eq!(a[(4, 6)], 0.1);
            // All cross blocks zero.
            assert_eq!(a.view((0, 4), (4, 4)).amax(), 0.0);
            assert_eq!(a.view((4, 0), (4, 4)).amax(), 0.0);
            assert_eq!(mode.c_seq[t].amax(), 0.0);
            // Ego B present, agent B zero.
            assert_eq!(mode.b_seq[t][(2, 0)], 0.1);
            assert_eq!(mode.b_seq[t].view((4, 0), (4, 2)).amax(), 0.0);
        }
    }

    #[test]
    fn learned_ego_row_block_is_rejected() {
        let layout = di_layout(2, 1);
        let mut learned = zero_learned(8, 1);
        learned[0]
            .a_cross
            .push((0, 1, DMatrix::from_element(4, 4, 0.1)));
        let err = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 1),
            0.0,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, StructureError::EgoRowBlock { .. }));
    }

    #[test]
    fn learned_diagonal_block_is_rejected() {
        let layout = di_layout(2, 1);
        let mut learned = zero_learned(8, 1);
        learned[0]
            .a_cross
            .push((1, 1, DMatrix::from_element(4, 4, 0.1)));
        let err = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 1),
            0.0,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, StructureError::DiagonalBlock(1)));
    }

    #[test]
    fn learned_ego_control_block_is_rejected() {
        let layout = di_layout(2, 1);
        let mut learned = zero_learned(8, 1);
        learned[0].b_rows.push((0, DMatrix::zeros(4, 2)));
        let err = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 1),
            0.0,
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, StructureError::EgoControlBlock));
    }

    #[test]
    fn vehicle_diagonal_matches_its_linearization() {
        let layout = BlockLayout::new(vec![AgentClass::Vehicle, AgentClass::Vehicle], 1);
        let mut nominal = coasting_nominals(&layout, 1);
        nominal[0][1] = AgentNominal {
            state: DVector::from_vec(vec![5.0, 1.0, 0.4, 7.0]),
            control: DVector::from_vec(vec![0.1, -0.5]),
        };
        let mode = assemble(&layout, &zero_learned(8, 1), &nominal, 0.0, 0.25)
            .unwrap();
        let lin = dynamics::linearize(
            AgentClass::Vehicle,
            &nominal[0][1].state,
            &nominal[0][1].control,
            0.25,
        )
        .unwrap();
        assert_relative_eq!(
            mode.a_seq[0].view((4, 4), (4, 4)).clone_owned(),
            lin.a_mat,
            epsilon = 1e-14
        );
        // Offset folds B * nominal_control for autonomous agents.
        let expected_c = &lin.c_vec + &lin.b_mat * &nominal[0][1].control;
        assert_relative_eq!(
            mode.c_seq[0].rows(4, 4).clone_owned(),
            expected_c,
            epsilon = 1e-14
        );
    }

    #[test]
    fn cross_block_acts_on_source_relative_to_target() {
        let layout = di_layout(2, 1);
        let gain = DMatrix::from_fn(4, 4, |r, c| 0.01 * (r as f64 + 1.0) * (c as f64 + 1.0));
        let mut learned = zero_learned(8, 1);
        learned[0].a_cross.push((1, 0, gain.clone()));
        let mode = assemble(&layout, &learned, &coasting_nominals(&layout, 1), 0.0, 0.1)
            .unwrap();
        let plain = assemble(
            &layout,
            &zero_learned(8, 1),
            &coasting_nominals(&layout, 1),
            0.0,
            0.1,
        )
        .unwrap();
        // Off-diagonal carries +G, the target diagonal carries -G on top of
        // its dynamics block.
        assert_relative_eq!(
            mode.a_seq[0].view((4, 0), (4, 4)).clone_owned(),
            gain,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            mode.a_seq[0].view((4, 4), (4, 4)).clone_owned(),
            plain.a_seq[0].view((4, 4), (4, 4)).clone_owned() - &gain,
            epsilon = 1e-14
        );

        // When the ego state coincides with the target's the contribution
        // vanishes, so the step agrees with the block-free system.
        let same = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let with_block = mode.one_step_mean(0, &same, &DVector::zeros(2));
        let without = plain.one_step_mean(0, &same, &DVector::zeros(2));
        assert_relative_eq!(with_block, without, epsilon = 1e-13);

        // At a general point the difference is exactly G (s_ego - s_agent).
        let joint = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let rel = joint.rows(0, 4) - joint.rows(4, 4);
        let diff = mode.one_step_mean(0, &joint, &DVector::zeros(2))
            - plain.one_step_mean(0, &joint, &DVector::zeros(2));
        assert_relative_eq!(diff.rows(0, 4).clone_owned(), DVector::zeros(4), epsilon = 1e-14);
        assert_relative_eq!(diff.rows(4, 4).clone_owned(), &gain * rel, epsilon = 1e-13);
    }

    #[test]
    fn q_is_floored_at_assembly() {
        let layout = di_layout(1, 1);
        let mut learned = zero_learned(4, 1);
        learned[0].q = DVector::from_vec(vec![0.0, 1e-9, 0.5, 2.0]);
        let mode = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 1),
            1e-3,
            0.1,
        )
        .unwrap();
        assert_eq!(mode.q_seq[0][0], 1e-3);
        assert_eq!(mode.q_seq[0][1], 1e-3);
        assert_eq!(mode.q_seq[0][2], 0.5);
        assert_eq!(mode.q_seq[0][3], 2.0);
    }

    fn identity_mode(f: usize, t_steps: usize, sigma: f64) -> ModeSystem {
        ModeSystem {
            a_seq: vec![DMatrix::identity(f, f); t_steps],
            b_seq: vec![DMatrix::zeros(f, 2); t_steps],
            c_seq: vec![DVector::zeros(f); t_steps],
            q_seq: vec![DVector::from_element(f, sigma); t_steps],
        }
    }

    #[test]
    fn identity_rollout_accumulates_variance_linearly() {
        let mode = identity_mode(4, 5, 0.3);
        let init = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let controls = vec![DVector::zeros(2); 5];
        let roll = rollout_mode(&mode, &init, &controls, None).unwrap();
        for t in 0..5 {
            assert_relative_eq!(roll.means[t], init, epsilon = 1e-15);
            let expected = DMatrix::identity(4, 4) * (0.09 * (t as f64 + 1.0));
            assert_relative_eq!(roll.covs[t], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn rollout_mean_is_affine_in_controls() {
        // mean(u + du) - mean(u) must equal mean(u0 + du) - mean(u0).
        let layout = di_layout(2, 4);
        let mut learned = zero_learned(8, 4);
        for t in 0..4 {
            learned[t]
                .b_rows
                .push((1, DMatrix::from_fn(4, 2, |r, c| 0.05 * (r + 2 * c + t) as f64)));
            learned[t]
                .a_cross
                .push((1, 0, DMatrix::from_fn(4, 4, |r, c| 0.01 * (r + c) as f64)));
        }
        let mode = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 4),
            0.0,
            0.1,
        )
        .unwrap();
        let init = DVector::from_fn(8, |i, _| i as f64 * 0.1);
        let u_zero = vec![DVector::zeros(2); 4];
        let u_base: Vec<_> = (0..4)
            .map(|t| DVector::from_vec(vec![0.3 + t as f64 * 0.1, -0.2]))
            .collect();
        let du: Vec<_> = (0..4)
            .map(|t| DVector::from_vec(vec![0.05, 0.02 * t as f64]))
            .collect();
        let add = |a: &[DVector<f64>], b: &[DVector<f64>]| -> Vec<DVector<f64>> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        let m0 = rollout_mode(&mode, &init, &u_zero, None).unwrap();
        let m0d = rollout_mode(&mode, &init, &add(&u_zero, &du), None).unwrap();
        let m1 = rollout_mode(&mode, &init, &u_base, None).unwrap();
        let m1d = rollout_mode(&mode, &init, &add(&u_base, &du), None).unwrap();
        for t in 0..4 {
            let lhs = &m1d.means[t] - &m1.means[t];
            let rhs = &m0d.means[t] - &m0.means[t];
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn sampling_with_zero_noise_reproduces_the_mean() {
        let mode = identity_mode(4, 3, 0.0);
        let init = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0]);
        let controls = vec![DVector::zeros(2); 3];
        let samples = sample_mode(&mode, &init, &controls, 7).unwrap();
        let roll = rollout_mode(&mode, &init, &controls, None).unwrap();
        for t in 0..3 {
            assert_relative_eq!(samples[t], roll.means[t], epsilon = 1e-15);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mode = identity_mode(4, 3, 0.2);
        let init = DVector::zeros(4);
        let controls = vec![DVector::zeros(2); 3];
        let a = sample_mode(&mode, &init, &controls, 42).unwrap();
        let b = sample_mode(&mode, &init, &controls, 42).unwrap();
        let c = sample_mode(&mode, &init, &controls, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_observation_hits_the_closed_form_loglik() {
        let f = 4;
        let t_steps = 3;
        let sigma = 0.7;
        let mode = identity_mode(f, t_steps, sigma);
        let layout = di_layout(1, t_steps);
        let system = MatsSystem {
            layout,
            modes: vec![mode.clone()],
            mode_probs: vec![1.0],
        };
        let init = DVector::from_vec(vec![0.5, 0.5, 0.0, 0.0]);
        let controls = vec![DVector::zeros(2); t_steps];
        let observed = rollout_mode(&mode, &init, &controls, None).unwrap().means;
        let ll = mixture_loglik(&system, &observed, &init, &controls).unwrap();
        let expected = -(t_steps as f64)
            * (f as f64)
            * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(ll, expected, epsilon = 1e-10);
    }

    #[test]
    fn most_likely_mode_breaks_ties_toward_lowest_index() {
        let mode = identity_mode(4, 1, 0.1);
        let system = MatsSystem {
            layout: di_layout(1, 1),
            modes: vec![mode.clone(), mode.clone(), mode],
            mode_probs: vec![0.4, 0.4, 0.2],
        };
        assert_eq!(system.most_likely_mode(), 0);
    }

    #[test]
    fn probability_sum_is_validated() {
        let mode = identity_mode(4, 1, 0.1);
        let system = MatsSystem {
            layout: di_layout(1, 1),
            modes: vec![mode],
            mode_probs: vec![0.5],
        };
        assert!(matches!(
            system.validate(),
            Err(StructureError::ProbSum(_))
        ));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let layout = di_layout(2, 2);
        let mut learned = zero_learned(8, 2);
        for t in 0..2 {
            learned[t].a_cross.push((
                1,
                0,
                DMatrix::from_fn(4, 4, |r, c| (0.1 + r as f64 * 0.3 + c as f64 * 0.7) / 3.0),
            ));
            learned[t].q = DVector::from_fn(8, |i, _| 0.001 + i as f64 / 7.0);
        }
        let mode = assemble(
            &layout,
            &learned,
            &coasting_nominals(&layout, 2),
            1e-3,
            0.1,
        )
        .unwrap();
        let system = MatsSystem {
            layout,
            modes: vec![mode],
            mode_probs: vec![1.0],
        };
        let text = system.to_json().unwrap();
        let back = MatsSystem::from_json(&text).unwrap();
        assert_eq!(system, back); // PartialEq on f64: bit-exact round trip
        let text2 = back.to_json().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn unknown_format_version_is_rejected() {
        let layout = di_layout(1, 1);
        let system = MatsSystem {
            layout,
            modes: vec![identity_mode(4, 1, 0.1)],
            mode_probs: vec![1.0],
        };
        let text = system.to_json().unwrap().replace(
            &format!("\"version\": {FORMAT_VERSION}"),
            "\"version\": 999",
        );
        assert!(matches!(
            MatsSystem::from_json(&text),
            Err(StructureError::Version(999))
        ));
    }
}
