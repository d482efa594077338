//! Prediction-quality metrics and interaction-strength diagnostics.

use crate::fitter::{predict_window, FitError, FittedModel};
use crate::mixture::MatsSystem;
use crate::scenes::SceneWindow;

/// Per-step displacement of the most likely mode: for each future step, the
/// mean over non-ego agents of the distance between predicted and true
/// positions.
pub fn displacement_profile(system: &MatsSystem, window: &SceneWindow) -> Vec<f64> {
    let layout = &system.layout;
    let mode = system.most_likely_mode();
    let n = layout.num_agents();
    let mut state = window.anchor_state().clone();
    let mut profile = Vec::with_capacity(window.future.len());
    for (t, control) in window.future_controls.iter().enumerate() {
        state = system.modes[mode].one_step_mean(t, &state, control);
        let truth = &window.future[t];
        let mut total = 0.0;
        for i in 1..n {
            let off = layout.offset(i);
            total += (state[off] - truth[off]).hypot(state[off + 1] - truth[off + 1]);
        }
        profile.push(total / (n - 1) as f64);
    }
    profile
}

/// Final displacement error: mean over non-ego agents of the distance
/// between the most likely mode's predicted position and the true position
/// at the last future step.
pub fn final_displacement_error(system: &MatsSystem, window: &SceneWindow) -> f64 {
    *displacement_profile(system, window)
        .last()
        .expect("future is non-empty")
}

/// Per-step displacements of the constant-velocity baseline, which
/// extrapolates each non-ego agent linearly from its state at the anchor.
pub fn constant_velocity_profile(window: &SceneWindow) -> Vec<f64> {
    let layout = &window.layout;
    let anchor = window.anchor_state();
    let n = layout.num_agents();
    (0..window.future.len())
        .map(|t| {
            let elapsed = (t + 1) as f64 * window.dt;
            let truth = &window.future[t];
            let mut total = 0.0;
            for i in 1..n {
                let off = layout.offset(i);
                let (vx, vy) = if layout.classes[i].is_unicycle() {
                    let heading = anchor[off + 2];
                    let speed = anchor[off + 3];
                    (speed * heading.cos(), speed * heading.sin())
                } else {
                    (anchor[off + 2], anchor[off + 3])
                };
                let px = anchor[off] + vx * elapsed;
                let py = anchor[off + 1] + vy * elapsed;
                total += (px - truth[off]).hypot(py - truth[off + 1]);
            }
            total / (n - 1) as f64
        })
        .collect()
}

/// Constant-velocity baseline error at the last future step.
pub fn constant_velocity_fde(window: &SceneWindow) -> f64 {
    *constant_velocity_profile(window)
        .last()
        .expect("future is non-empty")
}

/// One window's scores.
#[derive(Debug, Clone)]
pub struct FdeSample {
    pub model: f64,
    pub baseline: f64,
    /// Smallest inter-agent distance over the true future.
    pub min_future_distance: f64,
}

/// Aggregate scores over an evaluation set.
#[derive(Debug, Clone)]
pub struct FdeStats {
    pub samples: Vec<FdeSample>,
}

impl FdeStats {
    pub fn model_mean(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.model))
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.baseline))
    }

    /// `(model mean, baseline mean, count)` over the windows whose closest
    /// approach is below `max_distance` — the interacting subset.
    pub fn close_subset(&self, max_distance: f64) -> (f64, f64, usize) {
        let close: Vec<&FdeSample> = self
            .samples
            .iter()
            .filter(|s| s.min_future_distance < max_distance)
            .collect();
        (
            mean(close.iter().map(|s| s.model)),
            mean(close.iter().map(|s| s.baseline)),
            close.len(),
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for v in values {
        total += v;
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// Scores a fitted model against held-out windows.
pub fn evaluate_windows(
    model: &FittedModel,
    windows: &[SceneWindow],
) -> Result<FdeStats, FitError> {
    let mut samples = Vec::with_capacity(windows.len());
    for window in windows {
        let system = predict_window(model, window)?;
        samples.push(FdeSample {
            model: final_displacement_error(&system, window),
            baseline: constant_velocity_fde(window),
            min_future_distance: window.min_future_distance(),
        });
    }
    Ok(FdeStats { samples })
}

/// Frobenius norm of the transition-matrix block that couples `source`'s
/// state into `target`'s next state, per prediction step of one mode.
pub fn coupling_norms(
    system: &MatsSystem,
    mode: usize,
    target: usize,
    source: usize,
) -> Vec<f64> {
    let layout = &system.layout;
    let (to, td) = (layout.offset(target), layout.classes[target].state_dim());
    let (so, sd) = (layout.offset(source), layout.classes[source].state_dim());
    system.modes[mode]
        .a_seq
        .iter()
        .map(|a| {
            let mut sq = 0.0;
            for r in 0..td {
                for c in 0..sd {
                    let v = a[(to + r, so + c)];
                    sq += v * v;
                }
            }
            sq.sqrt()
        })
        .collect()
}

/// Frobenius norm of `target`'s learned control-input block per prediction
/// step of one mode.  For non-ego agents these rows are entirely learned.
pub fn control_coupling_norms(system: &MatsSystem, mode: usize, target: usize) -> Vec<f64> {
    let layout = &system.layout;
    let (to, td) = (layout.offset(target), layout.classes[target].state_dim());
    system.modes[mode]
        .b_seq
        .iter()
        .map(|b| {
            let mut sq = 0.0;
            for r in 0..td {
                for c in 0..layout.control_dim {
                    let v = b[(to + r, c)];
                    sq += v * v;
                }
            }
            sq.sqrt()
        })
        .collect()
}

/// Shape summary of a coupling-strength profile, normalized to a unit peak.
#[derive(Debug, Clone)]
pub struct InteractionProfile {
    /// Per-step norms scaled so the peak is 1 (all zeros stay zero).
    pub norms: Vec<f64>,
    pub peak_step: usize,
    /// Raw (unnormalized) peak value.
    pub peak: f64,
    /// First-step norm as a fraction of the peak.
    pub start_ratio: f64,
    /// Last-step norm as a fraction of the peak.
    pub end_ratio: f64,
}

/// Summarizes a per-step norm profile.  Ties pick the earliest peak.
pub fn interaction_profile(norms: &[f64]) -> InteractionProfile {
    assert!(!norms.is_empty(), "profile needs at least one step");
    let mut peak = 0.0f64;
    let mut peak_step = 0usize;
    for (t, &v) in norms.iter().enumerate() {
        if v > peak {
            peak = v;
            peak_step = t;
        }
    }
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    InteractionProfile {
        norms: norms.iter().map(|v| v * scale).collect(),
        peak_step,
        peak,
        start_ratio: norms.first().copied().unwrap_or(0.0) * scale,
        end_ratio: norms.last().copied().unwrap_or(0.0) * scale,
    }
}

/// Alignment between the predicted coupling peak and the true closest
/// approach for one window.
#[derive(Debug, Clone)]
pub struct PeakAlignment {
    /// Peak step minus the step of the true minimum distance.
    pub offset: isize,
    pub profile: InteractionProfile,
    pub min_future_distance: f64,
}

/// Computes the ego-onto-agent coupling profile of the most likely mode and
/// compares its peak against the step at which the window's agents truly
/// come closest.
pub fn peak_alignment(
    model: &FittedModel,
    window: &SceneWindow,
    agent: usize,
) -> Result<PeakAlignment, FitError> {
    let system = predict_window(model, window)?;
    let mode = system.most_likely_mode();
    let norms = coupling_norms(&system, mode, agent, 0);
    let profile = interaction_profile(&norms);
    let offset = profile.peak_step as isize - window.min_distance_step() as isize;
    Ok(PeakAlignment {
        offset,
        profile,
        min_future_distance: window.min_future_distance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{self, AgentClass};
    use crate::mixture::{assemble, AgentNominal, BlockLayout, LearnedStep};
    use crate::scenes::{generate_social_forces, SocialForcesConfig};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    /// Window in which both particles coast; every exact predictor scores 0.
    fn coasting_window(horizon: usize) -> SceneWindow {
        let layout = BlockLayout::new(vec![AgentClass::Particle, AgentClass::Particle], horizon);
        let dt = 0.1;
        let mut joint = DVector::zeros(8);
        joint[0] = 1.0;
        joint[2] = 3.0; // ego vx
        joint[4] = 10.0;
        joint[6] = -2.0; // agent vx
        joint[7] = 1.0; // agent vy
        let mut history = vec![joint.clone()];
        let mut future = Vec::new();
        let mut state = joint;
        for t in 0..horizon + 2 {
            let mut next = state.clone();
            for i in 0..2 {
                let off = 4 * i;
                next[off] += dt * state[off + 2];
                next[off + 1] += dt * state[off + 3];
            }
            if t < 2 {
                history.push(next.clone());
            } else {
                future.push(next.clone());
            }
            state = next;
        }
        SceneWindow {
            layout,
            dt,
            history,
            future,
            history_controls: vec![DVector::zeros(2); 2],
            future_controls: vec![DVector::zeros(2); horizon],
        }
    }

    fn coasting_mode_system(window: &SceneWindow) -> MatsSystem {
        let horizon = window.future.len();
        let layout = window.layout.clone();
        let f = layout.full_dim();
        let learned: Vec<LearnedStep> = (0..horizon)
            .map(|_| LearnedStep {
                a_cross: vec![],
                b_rows: vec![],
                q: DVector::from_element(f, 1e-3),
            })
            .collect();
        let mut cur: Vec<DVector<f64>> = (0..2)
            .map(|i| layout.agent_state(window.anchor_state(), i))
            .collect();
        let mut nominal = Vec::new();
        for _ in 0..horizon {
            nominal.push(cur.iter().cloned().map(AgentNominal::coasting).collect());
            for state in cur.iter_mut() {
                *state = dynamics::step(AgentClass::Particle, state, &DVector::zeros(2), window.dt)
                    .unwrap();
            }
        }
        let mode = assemble(&layout, &learned, &nominal, 1e-3, window.dt).unwrap();
        MatsSystem {
            layout,
            modes: vec![mode],
            mode_probs: vec![1.0],
        }
    }

    #[test]
    fn coasting_agents_are_predicted_exactly_by_both_scorers() {
        let window = coasting_window(12);
        assert_relative_eq!(constant_velocity_fde(&window), 0.0, epsilon = 1e-9);
        let system = coasting_mode_system(&window);
        assert_relative_eq!(
            final_displacement_error(&system, &window),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn curved_agents_defeat_the_constant_velocity_baseline() {
        let config = SocialForcesConfig {
            train_count: 4,
            test_count: 1,
            ..SocialForcesConfig::default()
        };
        let (scenes, _) = generate_social_forces(&config).unwrap();
        let mut saw_interaction = false;
        for scene in &scenes {
            let window = scene.canonical_window();
            let fde = constant_velocity_fde(&window);
            assert!(fde.is_finite());
            if fde > 0.01 {
                saw_interaction = true;
            }
        }
        assert!(saw_interaction, "no scene bent any trajectory");
    }

    #[test]
    fn coupling_norms_read_the_correct_block() {
        let window = coasting_window(3);
        let mut system = coasting_mode_system(&window);
        // Plant a known gain from the ego block into the agent block.
        let mut g = DMatrix::zeros(4, 4);
        g[(0, 0)] = 3.0;
        g[(1, 2)] = 4.0;
        for (t, a) in system.modes[0].a_seq.iter_mut().enumerate() {
            let scale = (t + 1) as f64;
            a.view_mut((4, 0), (4, 4)).copy_from(&(&g * scale));
        }
        let norms = coupling_norms(&system, 0, 1, 0);
        for (t, norm) in norms.iter().enumerate() {
            assert_relative_eq!(*norm, 5.0 * (t + 1) as f64, epsilon = 1e-12);
        }
        // The reverse block is untouched.
        for norm in coupling_norms(&system, 0, 0, 1) {
            assert_relative_eq!(norm, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn interaction_profile_finds_peak_and_endpoint_ratios() {
        let norms = [0.5, 2.0, 4.0, 2.0, 1.0];
        let profile = interaction_profile(&norms);
        assert_eq!(profile.peak_step, 2);
        assert_relative_eq!(profile.peak, 4.0, epsilon = 1e-12);
        assert_relative_eq!(profile.start_ratio, 0.125, epsilon = 1e-12);
        assert_relative_eq!(profile.end_ratio, 0.25, epsilon = 1e-12);
        assert_relative_eq!(profile.norms[2], 1.0, epsilon = 1e-12);
        // All-zero profiles stay zero instead of dividing by zero.
        let flat = interaction_profile(&[0.0, 0.0]);
        assert_eq!(flat.peak_step, 0);
        assert_relative_eq!(flat.norms[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn close_subset_filters_on_minimum_distance() {
        let stats = FdeStats {
            samples: vec![
                FdeSample {
                    model: 1.0,
                    baseline: 2.0,
                    min_future_distance: 3.0,
                },
                FdeSample {
                    model: 3.0,
                    baseline: 6.0,
                    min_future_distance: 10.0,
                },
            ],
        };
        assert_relative_eq!(stats.model_mean(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(stats.baseline_mean(), 4.0, epsilon = 1e-12);
        let (m, b, k) = stats.close_subset(5.0);
        assert_eq!(k, 1);
        assert_relative_eq!(m, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b, 2.0, epsilon = 1e-12);
    }
}
