use mats::dynamics::AgentClass;
use mats::mixture::MatsSystem;
use mats::planner::*;
use mats::qp::{solve_qp, QpProblem, QpSettings};
use mats::scenes::{build_intersection, IntersectionConfig};
use nalgebra::DVector;
use std::time::Instant;

fn build_first_qp() -> QpProblem {
    let scenario = build_intersection(&IntersectionConfig::default()).unwrap();
    let path = ReferencePath::from_waypoints(&scenario.waypoints).unwrap();
    let config = PlannerConfig {
        dt: 0.25,
        ..PlannerConfig::default()
    };
    let provider = ScriptedProvider::new(scenario.clone(), config.horizon);
    let world = ScriptedWorld::new(&scenario);
    let current = world.joint_state();
    let theta0 = path.project(current[0], current[1]);
    let v0 = current[3];
    let controls = vec![DVector::from_column_slice(&[0.0, 0.0, v0]); config.horizon - 1];
    let tentative = vec![DVector::zeros(2); config.horizon];
    let system: MatsSystem = provider.predict(0, &[current.clone()], &[], &tentative).unwrap();
    let f = system.layout.full_dim();
    let nominals: Vec<ModeNominal> = (0..system.modes.len())
        .map(|z| {
            let mode = &system.modes[z];
            let mut states = Vec::new();
            let mut s = DVector::zeros(f + 1);
            s.rows_mut(0, f).copy_from(&current);
            s[f] = theta0;
            states.push(s.clone());
            for (t, u) in controls.iter().enumerate() {
                let ue = DVector::from_column_slice(&[u[0], u[1]]);
                let ego_next = mats::dynamics::step(
                    AgentClass::Vehicle,
                    &s.rows(0, 4).into_owned(),
                    &ue,
                    config.dt,
                )
                .unwrap();
                let prev_joint = s.rows(0, f).into_owned();
                let mean = mode.one_step_mean(t, &prev_joint, &ue);
                let mut next = DVector::zeros(f + 1);
                next.rows_mut(0, 4).copy_from(&ego_next);
                next.rows_mut(4, f - 4).copy_from(&mean.rows(4, f - 4));
                next[f] = (s[f] + config.dt * u[2]).clamp(0.0, path.length());
                states.push(next.clone());
                s = next;
            }
            ModeNominal {
                states,
                controls: controls.clone(),
            }
        })
        .collect();
    build_qp(
        &config, &path, &system, &current, theta0, &nominals, None, config.margin,
    )
    .unwrap()
    .problem
}

fn bench(name: &str, prob: &QpProblem, set: QpSettings) {
    let t0 = Instant::now();
    let sol = solve_qp(prob.clone(), set, None).unwrap();
    println!(
        "{name:28} {:7.1} ms iters={:6} status={:?} polished={} prim={:.1e} dual={:.1e}",
        t0.elapsed().as_secs_f64() * 1e3,
        sol.iterations,
        sol.status,
        sol.polished,
        sol.primal_res,
        sol.dual_res
    );
}

fn main() {
    let prob = build_first_qp();
    println!(
        "n={} m={}",
        prob.num_vars(),
        prob.num_constraints()
    );
    let mut base = QpSettings::default();
    base.max_iter = 50_000;
    bench("default", &prob, base.clone());

    let mut no_adapt = base.clone();
    no_adapt.adaptive_rho = false;
    bench("no adaptive rho", &prob, no_adapt);

    let mut wide = base.clone();
    wide.check_interval = 100;
    bench("check every 100", &prob, wide);

    let mut rho_hi = base.clone();
    rho_hi.rho = 1.0;
    bench("rho=1 default adapt", &prob, rho_hi);

    let mut rho_hi_na = base.clone();
    rho_hi_na.rho = 1.0;
    rho_hi_na.adaptive_rho = false;
    bench("rho=1 no adapt", &prob, rho_hi_na);

    // setup cost: single iteration, no polish possible
    let mut one = base.clone();
    one.max_iter = 1;
    bench("max_iter=1 (setup only)", &prob, one);

    let mut ten = base.clone();
    ten.max_iter = 10;
    ten.adaptive_rho = false;
    bench("10 iters no adapt", &prob, ten);

    let mut no_scale = base.clone();
    no_scale.scaling_iters = 0;
    bench("no ruiz scaling", &prob, no_scale);

    let mut polish_off = base.clone();
    polish_off.polish = false;
    bench("no polish", &prob, polish_off);

    // repeat timing stability
    bench("default again", &prob, base);
}
