use mats::planner::*;
use mats::scenes::{build_intersection, IntersectionConfig};
use nalgebra::{DVector, Vector3};
use std::time::Instant;

fn main() {
    let scenario = build_intersection(&IntersectionConfig::default()).unwrap();
    let path = ReferencePath::from_waypoints(&scenario.waypoints).unwrap();
    let config = PlannerConfig {
        dt: 0.25,
        ..PlannerConfig::default()
    };
    let provider = ScriptedProvider::new(scenario.clone(), config.horizon);
    let mut world = ScriptedWorld::new(&scenario);
    let mut history: Vec<DVector<f64>> = vec![world.joint_state()];
    let mut history_controls: Vec<DVector<f64>> = Vec::new();
    let mut prev_plan: Option<PlanResult> = None;
    let mut prev_control: Option<Vector3<f64>> = None;

    let mut times = Vec::new();
    for k in 0..60 {
        let wall = Instant::now();
        let plan = plan_step(
            &config,
            &path,
            &provider,
            k,
            &history,
            &history_controls,
            prev_control.as_ref(),
            prev_plan.as_ref(),
        )
        .unwrap();
        let wall_ms = wall.elapsed().as_secs_f64() * 1e3;
        times.push(plan.solve_time * 1e3);
        if k < 12 || k % 10 == 0 {
            println!(
                "k={k:2} solve={:7.1} ms wall={:7.1} ms qp_iters={:6} status={:?}",
                plan.solve_time * 1e3,
                wall_ms,
                plan.qp_iterations,
                plan.status
            );
        }
        let u = plan.executed_control();
        let ue = DVector::from_column_slice(&[u[0], u[1]]);
        world.advance(&ue).unwrap();
        history.push(world.joint_state());
        history_controls.push(ue);
        prev_control = Some(u);
        prev_plan = Some(plan);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "median {:.1} ms  p90 {:.1} ms  max {:.1} ms",
        times[times.len() / 2],
        times[times.len() * 9 / 10],
        times[times.len() - 1]
    );
}
