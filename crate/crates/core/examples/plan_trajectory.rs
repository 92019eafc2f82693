//! Plans around a post standing in the arm's sweep, times the path and
//! audits it. Pass a file name to get the 1 kHz samples as CSV.
//!
//! ```text
//! cargo run --example plan_trajectory -- /tmp/swing.csv
//! ```

use crane::collision::{Capsule, CollisionWorld, RobotShape};
use crane::kinematics::{JointConfig, RobotModel, Vec3};
use crane::planning::{
    audit_path, audit_trajectory, plan_path, time_parameterize, JointPath, MotionLimits, PlannerConfig, PlanningContext,
};

fn main() -> std::io::Result<()> {
    let post = Capsule::new(Vec3::new(0.0, 0.2, 0.05), Vec3::new(0.0, 0.2, 0.5), 0.03);
    let ctx = PlanningContext::new(
        RobotModel::default(),
        CollisionWorld {
            bore: None,
            obstacles: vec![post],
        },
        RobotShape::default(),
    );
    let from = JointConfig([0.0, 0.0, 0.0, 0.0, 0.0, 1.2, 0.0, 0.0]);
    let to = JointConfig([0.0, 0.0, 0.0, 3.0, 0.0, 1.2, 0.0, 0.0]);

    let straight = JointPath { waypoints: vec![from, to] };
    let rep = audit_path(&ctx, &straight, 0.001, 0.0001);
    println!("straight swing: {} of {} checked configurations collide", rep.violations.len(), rep.checked);

    let limits = MotionLimits::default();
    for seed in [1, 2, 3] {
        let cfg = PlannerConfig { seed, ..Default::default() };
        let path = plan_path(&ctx, &from, &to, &cfg, None).expect("a detour exists");
        let traj = time_parameterize(&path, &limits).unwrap();
        let dense = audit_path(&ctx, &path, 0.001, 0.0001);
        let timing = audit_trajectory(&traj, &limits);
        let min_clear = traj
            .samples()
            .iter()
            .map(|(_, q)| ctx.clearance(q).unwrap())
            .fold(f64::INFINITY, f64::min);
        println!(
            "seed {seed}: {} waypoints, joint length {:.3}, {:.3} s, min clearance {:.1} mm, audit {}",
            path.waypoints.len(),
            path.joint_length(),
            traj.duration(),
            min_clear * 1e3,
            if dense.passed() && timing.passed() { "pass" } else { "FAIL" }
        );
        if seed == 1 {
            if let Some(file) = std::env::args().nth(1) {
                traj.write_csv(std::fs::File::create(&file)?)?;
                println!("wrote {file}");
            }
        }
    }
    Ok(())
}
