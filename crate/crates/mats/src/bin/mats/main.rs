//! Command-line pipeline: dataset generation, model fitting, prediction,
//! evaluation, and closed-loop planning.
//!
//! Every subcommand resolves its parameters as flags > config file >
//! defaults, writes the resolved configuration next to its outputs, and is
//! deterministic for a given configuration and seed (wall-clock timing
//! columns excepted).
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver or collision
//! failure, 4 I/O failure.

use clap::{Args, Parser, Subcommand};
use mats::fitter::{self, FeatureMap, FitConfig, FitError, FittedModel};
use mats::metrics;
use mats::planner::{
    closed_loop, write_closed_loop_csv, PlanError, PlannerConfig, ReferencePath,
    ScriptedProvider, ScriptedWorld,
};
use mats::scenes::{
    augment, build_intersection, generate_social_forces, load_dataset_split, sha256_hex,
    write_dataset, IntersectionConfig, IntersectionScenario, Scene, SceneError, SceneWindow,
    SocialForcesConfig,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mats", version, about = "Multimodal trajectory prediction and consensus planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene dataset (social-forces particles or the scripted
    /// intersection).
    Generate(GenerateArgs),
    /// Fit a mixture of affine time-varying systems to a dataset.
    Fit(FitArgs),
    /// Emit per-mode predicted trajectories for one scene window.
    Predict(PredictArgs),
    /// Score a fitted model on a split and emit plot-ready CSVs.
    Eval(EvalArgs),
    /// Run the consensus-horizon planner closed loop on the intersection.
    Plan(PlanArgs),
}

// ---------------------------------------------------------------------------
// Error handling and exit codes
// ---------------------------------------------------------------------------

enum CliError {
    /// Bad or inconsistent configuration (exit 2).
    Config(String),
    /// Solver breakdown or a collision in closed loop (exit 3).
    Solver(String),
    /// Filesystem or serialization failure (exit 4).
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Solver(m) | CliError::Io(m) => m,
        }
    }
}

fn io_ctx(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {err}", path.display()))
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io { .. } | SceneError::Serde(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Io(_) | FitError::Serde(_) => CliError::Io(e.to_string()),
            FitError::SingularRegression { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<mats::mixture::StructureError> for CliError {
    fn from(e: mats::mixture::StructureError) -> Self {
        // Reached only when serializing an assembled system to disk.
        CliError::Io(e.to_string())
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Io(_) => CliError::Io(e.to_string()),
            PlanError::Infeasible | PlanError::Qp(_) | PlanError::Provider(_) => {
                CliError::Solver(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn read_config_file<T: for<'de> Deserialize<'de> + Default>(
    path: &Option<PathBuf>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_ctx(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_resolved<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_ctx(dir, e))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing {name}: {e}")))?;
    fs::write(&path, text).map_err(|e| io_ctx(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_ctx(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_ctx(path, e))
}

fn canonical_windows(scenes: &[Scene]) -> Vec<SceneWindow> {
    scenes.iter().map(|s| s.canonical_window()).collect()
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for scenes and manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with the same fields as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `social` (particle pairs) or `intersection` (scripted scenario).
    #[arg(long)]
    scenario: Option<String>,
    /// Number of training scenes.
    #[arg(long)]
    train: Option<usize>,
    /// Number of held-out scenes.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Expand the training split by 24 rotations per scene.
    #[arg(long)]
    augment: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenerateFile {
    scenario: Option<String>,
    train: Option<usize>,
    test: Option<usize>,
    seed: Option<u64>,
    augment: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct GenerateResolved {
    scenario: String,
    train: usize,
    test: usize,
    seed: u64,
    augment: bool,
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let file: GenerateFile = read_config_file(&args.config)?;
    let resolved = GenerateResolved {
        scenario: args
            .scenario
            .or(file.scenario)
            .unwrap_or_else(|| "social".into()),
        train: args.train.or(file.train).unwrap_or(700),
        test: args.test.or(file.test).unwrap_or(100),
        seed: args.seed.or(file.seed).unwrap_or(7),
        augment: args.augment || file.augment.unwrap_or(false),
    };
    match resolved.scenario.as_str() {
        "social" => {
            let cfg = SocialForcesConfig {
                train_count: resolved.train,
                test_count: resolved.test,
                rng_seed: resolved.seed,
                ..SocialForcesConfig::default()
            };
            let (mut train, test) = generate_social_forces(&cfg)?;
            if resolved.augment {
                train = augment(&train);
            }
            let manifest = write_dataset(&args.out, &train, &test, resolved.seed)?;
            write_resolved(&args.out, "generate_config.json", &resolved)?;
            let manifest_path = args.out.join("manifest.json");
            let bytes = fs::read(&manifest_path).map_err(|e| io_ctx(&manifest_path, e))?;
            println!(
                "wrote {} train + {} test scenes to {}",
                manifest.train.len(),
                manifest.test.len(),
                args.out.display()
            );
            println!("manifest sha256 {}", sha256_hex(&bytes));
        }
        "intersection" => {
            let cfg = IntersectionConfig {
                rng_seed: resolved.seed,
                ..IntersectionConfig::default()
            };
            // The scenario is rebuilt deterministically from this config by
            // `mats plan`, so the config file *is* the scenario artifact.
            let scenario = build_intersection(&cfg)?;
            write_resolved(&args.out, "generate_config.json", &resolved)?;
            write_resolved(&args.out, "intersection_config.json", &cfg)?;
            let mut csv = Vec::new();
            mats::scenes::export_scene_csv(&scenario.scene, &mut csv)?;
            let csv_path = args.out.join("intersection_realized.csv");
            fs::write(&csv_path, &csv).map_err(|e| io_ctx(&csv_path, e))?;
            println!(
                "wrote intersection scenario config ({} modes, realized '{}') to {}",
                scenario.mode_labels.len(),
                scenario.mode_labels[scenario.realized_mode],
                args.out.display()
            );
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown scenario '{other}' (expected 'social' or 'intersection')"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FitArgs {
    /// Dataset directory produced by `mats generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV (defaults to `training_log.csv` beside the model).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of mixture modes.
    #[arg(long)]
    modes: Option<usize>,
    /// Ridge regularization strength.
    #[arg(long)]
    ridge: Option<f64>,
    /// Noise-scale floor.
    #[arg(long)]
    q_floor: Option<f64>,
    #[arg(long)]
    em_iters: Option<usize>,
    /// Relative log-likelihood improvement below which EM stops.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `all` sliding windows per scene, or one `canonical` window each.
    #[arg(long)]
    windows: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FitFile {
    modes: Option<usize>,
    ridge: Option<f64>,
    q_floor: Option<f64>,
    em_iters: Option<usize>,
    tol: Option<f64>,
    seed: Option<u64>,
    windows: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct FitResolved {
    windows: String,
    #[serde(flatten)]
    fit: FitConfig,
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let file: FitFile = read_config_file(&args.config)?;
    let defaults = FitConfig::default();
    let fit_config = FitConfig {
        num_modes: args.modes.or(file.modes).unwrap_or(25),
        ridge: args.ridge.or(file.ridge).unwrap_or(defaults.ridge),
        q_floor: args.q_floor.or(file.q_floor).unwrap_or(defaults.q_floor),
        max_em_iters: args
            .em_iters
            .or(file.em_iters)
            .unwrap_or(defaults.max_em_iters),
        loglik_tol: args.tol.or(file.tol).unwrap_or(defaults.loglik_tol),
        rng_seed: args.seed.or(file.seed).unwrap_or(defaults.rng_seed),
        feature_map: FeatureMap::RelativeStatePlusEgoControl,
    };
    let window_mode = args
        .windows
        .or(file.windows)
        .unwrap_or_else(|| "all".into());
    let scenes = load_dataset_split(&args.data, "train")?;
    let windows: Vec<SceneWindow> = match window_mode.as_str() {
        "all" => scenes.iter().flat_map(|s| s.windows()).collect(),
        "canonical" => canonical_windows(&scenes),
        other => {
            return Err(CliError::Config(format!(
                "unknown window mode '{other}' (expected 'all' or 'canonical')"
            )));
        }
    };
    println!(
        "fitting {} modes on {} windows from {} scenes",
        fit_config.num_modes,
        windows.len(),
        scenes.len()
    );
    let model = fitter::fit(&windows, &fit_config)?;
    write_text(&args.out, &model.to_json()?)?;
    let log_path = args.log.unwrap_or_else(|| {
        args.out
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("training_log.csv")
    });
    let mut log = Vec::new();
    fitter::write_training_log(&model, &mut log)?;
    fs::write(&log_path, &log).map_err(|e| io_ctx(&log_path, e))?;
    if let Some(dir) = args.out.parent() {
        let resolved = FitResolved {
            windows: window_mode,
            fit: fit_config,
        };
        write_resolved(dir, "fit_config.json", &resolved)?;
    }
    println!(
        "final log-likelihood {:.3} nats after {} EM iterations",
        model.train_loglik.last().copied().unwrap_or(f64::NAN),
        model.train_loglik.len()
    );
    println!("model written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Dataset split to read the scene from.
    #[arg(long, default_value = "test")]
    split: String,
    /// Scene index within the split.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: &Path) -> Result<FittedModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
    Ok(FittedModel::from_json(&text)?)
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let scenes = load_dataset_split(&args.data, &args.split)?;
    let scene = scenes.get(args.scene).ok_or_else(|| {
        CliError::Config(format!(
            "scene index {} out of range ({} scenes in '{}')",
            args.scene,
            scenes.len(),
            args.split
        ))
    })?;
    let window = scene.canonical_window();
    let system = fitter::predict_window(&model, &window)?;
    fs::create_dir_all(&args.out).map_err(|e| io_ctx(&args.out, e))?;
    let sys_path = args.out.join("system.json");
    write_text(&sys_path, &system.to_json()?)?;

    // Noise-free per-mode rollouts driven by the recorded ego controls.
    let mut csv = String::new();
    csv.push_str("mode,pi,step,time_s,agent_id,x_m,y_m,state2,state3\n");
    let layout = &system.layout;
    for (z, prob) in system.mode_probs.iter().enumerate() {
        let mut state = window.anchor_state().clone();
        for (t, control) in window.future_controls.iter().enumerate() {
            state = system.modes[z].one_step_mean(t, &state, control);
            for i in 0..layout.num_agents() {
                let off = layout.offset(i);
                csv.push_str(&format!(
                    "{z},{prob},{t},{},{i},{},{},{},{}\n",
                    (t + 1) as f64 * window.dt,
                    state[off],
                    state[off + 1],
                    state[off + 2],
                    state[off + 3]
                ));
            }
        }
    }
    let csv_path = args.out.join("prediction.csv");
    write_text(&csv_path, &csv)?;
    println!(
        "scene {} ('{}'): most likely mode {} (pi = {:.3})",
        args.scene,
        args.split,
        system.most_likely_mode(),
        system.mode_probs[system.most_likely_mode()]
    );
    println!("wrote {}", csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Closest-approach threshold (m) defining the interacting subset.
    #[arg(long, default_value_t = 5.0)]
    subset_distance: f64,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    scenes: usize,
    final_model_mean_m: f64,
    final_baseline_mean_m: f64,
    close_scenes: usize,
    close_model_mean_m: f64,
    close_baseline_mean_m: f64,
    subset_distance_m: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let scenes = load_dataset_split(&args.data, &args.split)?;
    if scenes.is_empty() {
        return Err(CliError::Config(format!("split '{}' is empty", args.split)));
    }
    let windows = canonical_windows(&scenes);
    fs::create_dir_all(&args.out).map_err(|e| io_ctx(&args.out, e))?;

    let mut fde_csv = String::from("scene,step,time_s,model_error_m,baseline_error_m\n");
    let mut blocks_csv = String::from(
        "scene,step,agent_id,a_norm,b_norm,a_norm_scaled,b_norm_scaled\n",
    );
    let mut modes_csv = String::from("scene");
    for z in 0..model.mode_probs.len() {
        modes_csv.push_str(&format!(",pi_{z}"));
    }
    modes_csv.push('\n');

    let horizon = model.horizon;
    let mut model_sums = vec![0.0; horizon];
    let mut base_sums = vec![0.0; horizon];
    let mut samples = Vec::with_capacity(windows.len());
    for (idx, window) in windows.iter().enumerate() {
        let system = fitter::predict_window(&model, window)?;
        let profile = metrics::displacement_profile(&system, window);
        let baseline = metrics::constant_velocity_profile(window);
        for (t, (m, b)) in profile.iter().zip(&baseline).enumerate() {
            fde_csv.push_str(&format!(
                "{idx},{t},{},{m},{b}\n",
                (t + 1) as f64 * window.dt
            ));
            model_sums[t] += m;
            base_sums[t] += b;
        }
        samples.push(metrics::FdeSample {
            model: *profile.last().expect("non-empty horizon"),
            baseline: *baseline.last().expect("non-empty horizon"),
            min_future_distance: window.min_future_distance(),
        });

        let mode = system.most_likely_mode();
        for agent in 1..system.layout.num_agents() {
            let a_norms = metrics::coupling_norms(&system, mode, agent, 0);
            let b_norms = metrics::control_coupling_norms(&system, mode, agent);
            let a_prof = metrics::interaction_profile(&a_norms);
            let b_prof = metrics::interaction_profile(&b_norms);
            for t in 0..a_norms.len() {
                blocks_csv.push_str(&format!(
                    "{idx},{t},{agent},{},{},{},{}\n",
                    a_norms[t], b_norms[t], a_prof.norms[t], b_prof.norms[t]
                ));
            }
        }

        modes_csv.push_str(&format!("{idx}"));
        for p in &system.mode_probs {
            modes_csv.push_str(&format!(",{p}"));
        }
        modes_csv.push('\n');
    }

    let mut summary_csv = String::from("step,time_s,model_mean_m,baseline_mean_m\n");
    let dt = windows[0].dt;
    for t in 0..horizon {
        summary_csv.push_str(&format!(
            "{t},{},{},{}\n",
            (t + 1) as f64 * dt,
            model_sums[t] / windows.len() as f64,
            base_sums[t] / windows.len() as f64
        ));
    }

    let stats = metrics::FdeStats { samples };
    let (close_model, close_base, close_count) = stats.close_subset(args.subset_distance);
    let summary = EvalSummary {
        scenes: windows.len(),
        final_model_mean_m: stats.model_mean(),
        final_baseline_mean_m: stats.baseline_mean(),
        close_scenes: close_count,
        close_model_mean_m: close_model,
        close_baseline_mean_m: close_base,
        subset_distance_m: args.subset_distance,
    };

    write_text(&args.out.join("fde.csv"), &fde_csv)?;
    write_text(&args.out.join("fde_summary.csv"), &summary_csv)?;
    write_text(&args.out.join("blocks.csv"), &blocks_csv)?;
    write_text(&args.out.join("modes.csv"), &modes_csv)?;
    write_resolved(&args.out, "eval_summary.json", &summary)?;
    println!(
        "final-step error over {} scenes: model {:.4} m vs constant-velocity {:.4} m",
        summary.scenes, summary.final_model_mean_m, summary.final_baseline_mean_m
    );
    println!(
        "interacting subset (<{} m, {} scenes): model {:.4} m vs baseline {:.4} m",
        args.subset_distance, close_count, close_model, close_base
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    out: PathBuf,
    /// Intersection scenario config JSON (defaults are used when omitted).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Closed-loop steps to run.
    #[arg(long)]
    steps: Option<usize>,
    /// Prediction modes the planner keeps.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    consensus: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the scenario's modes with three copies of the realized one.
    #[arg(long)]
    duplicate_modes: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PlanFile {
    steps: Option<usize>,
    modes: Option<usize>,
    consensus: Option<usize>,
    margin: Option<f64>,
    seed: Option<u64>,
    duplicate_modes: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct PlanResolved {
    steps: usize,
    duplicate_modes: bool,
    scenario: IntersectionConfig,
    planner: PlannerConfig,
}

fn duplicate_realized(scenario: &mut IntersectionScenario) {
    let script = scenario.mode_scripts[scenario.realized_mode].clone();
    let label = scenario.mode_labels[scenario.realized_mode].clone();
    scenario.mode_scripts = vec![script.clone(), script.clone(), script];
    scenario.mode_labels = vec![label.clone(), label.clone(), label];
    scenario.mode_probs = vec![1.0 / 3.0; 3];
    scenario.realized_mode = 0;
}

#[derive(Serialize)]
struct DumpState {
    x_m: f64,
    y_m: f64,
    heading_rad: f64,
    speed_mps: f64,
    theta_m: f64,
}

#[derive(Serialize)]
struct DumpControl {
    omega_radps: f64,
    accel_mps2: f64,
    path_speed_mps: f64,
}

#[derive(Serialize)]
struct DumpPoint {
    x_m: f64,
    y_m: f64,
}

/// One mode of one plan: ego trajectory, controls, and the mode-conditional
/// predicted agent positions, in agent order.
#[derive(Serialize)]
struct DumpMode {
    pi: f64,
    states: Vec<DumpState>,
    controls: Vec<DumpControl>,
    agents: Vec<Vec<DumpPoint>>,
}

#[derive(Serialize)]
struct DumpStep {
    step: usize,
    time_s: f64,
    theta0_m: f64,
    degraded: bool,
    modes: Vec<DumpMode>,
}

fn cmd_plan(args: PlanArgs) -> Result<(), CliError> {
    let file: PlanFile = read_config_file(&args.config)?;
    let mut scenario_cfg: IntersectionConfig = match &args.scenario {
        None => IntersectionConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_ctx(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(seed) = args.seed.or(file.seed) {
        scenario_cfg.rng_seed = seed;
    }
    let steps = args.steps.or(file.steps).unwrap_or(60);
    let duplicate = args.duplicate_modes || file.duplicate_modes.unwrap_or(false);
    let mut planner_cfg = PlannerConfig {
        dt: scenario_cfg.dt,
        ..PlannerConfig::default()
    };
    if let Some(m) = args.modes.or(file.modes) {
        planner_cfg.modes_used = m;
    }
    if let Some(c) = args.consensus.or(file.consensus) {
        planner_cfg.consensus_steps = c;
    }
    if let Some(m) = args.margin.or(file.margin) {
        planner_cfg.margin = m;
    }
    planner_cfg.validate().map_err(CliError::from)?;

    let mut scenario = build_intersection(&scenario_cfg)?;
    if duplicate {
        duplicate_realized(&mut scenario);
    }
    let path = ReferencePath::from_waypoints(&scenario.waypoints)?;
    let resolved = PlanResolved {
        steps,
        duplicate_modes: duplicate,
        scenario: scenario_cfg.clone(),
        planner: planner_cfg.clone(),
    };
    write_resolved(&args.out, "plan_config.json", &resolved)?;

    let provider = ScriptedProvider::new(scenario.clone(), planner_cfg.horizon);
    let mut world = ScriptedWorld::new(&scenario);
    let log = closed_loop(&planner_cfg, &path, &provider, &mut world, steps)?;
    let mut csv = Vec::new();
    write_closed_loop_csv(&log, &mut csv)?;
    let log_path = args.out.join("plan_log.csv");
    fs::write(&log_path, &csv).map_err(|e| io_ctx(&log_path, e))?;

    // Full multi-mode plan of every step, for plotting candidate
    // trajectories and mode-conditional agent predictions.
    let classes = scenario.scene.classes();
    let mut agent_offsets = Vec::new();
    let mut off = classes[0].state_dim();
    for class in classes.iter().skip(1) {
        agent_offsets.push(off);
        off += class.state_dim();
    }
    let joint_dim = off;
    let dumps: Vec<DumpStep> = log
        .plans
        .iter()
        .enumerate()
        .map(|(k, plan)| DumpStep {
            step: k,
            time_s: k as f64 * planner_cfg.dt,
            theta0_m: plan.theta0,
            degraded: plan.degraded,
            modes: plan
                .mode_probs
                .iter()
                .enumerate()
                .map(|(z, &pi)| DumpMode {
                    pi,
                    states: plan.states[z]
                        .iter()
                        .map(|s| DumpState {
                            x_m: s[0],
                            y_m: s[1],
                            heading_rad: s[2],
                            speed_mps: s[3],
                            theta_m: s[joint_dim],
                        })
                        .collect(),
                    controls: plan.controls[z]
                        .iter()
                        .map(|u| DumpControl {
                            omega_radps: u[0],
                            accel_mps2: u[1],
                            path_speed_mps: u[2],
                        })
                        .collect(),
                    agents: agent_offsets
                        .iter()
                        .map(|&ao| {
                            plan.states[z]
                                .iter()
                                .map(|s| DumpPoint {
                                    x_m: s[ao],
                                    y_m: s[ao + 1],
                                })
                                .collect()
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let dump_path = args.out.join("plan_dumps.json");
    let dump_text =
        serde_json::to_string(&dumps).map_err(|e| CliError::Io(format!("plan dumps: {e}")))?;
    fs::write(&dump_path, dump_text).map_err(|e| io_ctx(&dump_path, e))?;

    let mut solve_ms: Vec<f64> = log.steps.iter().map(|s| s.solve_ms).collect();
    solve_ms.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let median = solve_ms
        .get(solve_ms.len() / 2)
        .copied()
        .unwrap_or(f64::NAN);
    let max_gap = log
        .steps
        .iter()
        .map(|s| s.consensus_gap)
        .fold(0.0f64, f64::max);
    let min_dist = log
        .steps
        .iter()
        .map(|s| s.min_distance)
        .fold(f64::INFINITY, f64::min);
    println!(
        "ran {} steps: min distance {:.2} m, median solve {:.1} ms, max consensus gap {:.2e}",
        log.steps.len(),
        min_dist,
        median,
        max_gap
    );
    println!("log written to {}", log_path.display());
    if let Some(step) = log.collision {
        return Err(CliError::Solver(format!(
            "collision at closed-loop step {step} (see {})",
            log_path.display()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plan(args) => cmd_plan(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
