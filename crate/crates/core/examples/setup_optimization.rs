//! Registers the bundled phantom, then searches the redundant arm's
//! self-motion for the best setup configuration at the planned entry.
//!
//! ```text
//! cargo run --example setup_optimization
//! ```

use crane::collision::{CollisionWorld, RobotShape, Scene};
use crane::kinematics::{JointConfig, NeedlePose, RobotModel};
use crane::planning::{optimize_setup_config, solve_pose_ik, IkOptions, PlanningContext, SetupObjectiveWeights, SetupOptions};
use crane::registration::{register, FiducialSet};

fn main() {
    let scene: Scene = serde_json::from_str(include_str!("../scenarios/phantom_scene.json")).unwrap();
    let robot: Vec<[f64; 3]> = serde_json::from_str(include_str!("../scenarios/phantom_robot_fiducials.json")).unwrap();
    let cal = register(&FiducialSet {
        robot,
        scanner: scene.fiducials.clone(),
    })
    .unwrap();
    println!("registration FRE {:.3} mm", cal.fre * 1e3);

    let to_robot = cal.transform.inverse();
    let target = to_robot.apply(&scene.target);
    let entry = to_robot.apply(&scene.entry_hint.unwrap());
    let axis = (target - entry).normalize();
    // needle tip waits 20 mm outside the entry point
    let setup_pose = NeedlePose::new(entry - axis * 0.02, axis);

    let ctx = PlanningContext::new(
        RobotModel::default(),
        CollisionWorld::from_scene(&scene, &cal.transform),
        RobotShape::default(),
    );

    let plain = solve_pose_ik(&ctx.model, &setup_pose, &JointConfig::HOME, &IkOptions::default().with_locked_insertion()).unwrap();
    println!(
        "plain IK from HOME:  w={:.3e} clearance={:.1} mm  q={:.3?}",
        ctx.model.manipulability(&plain.config).unwrap(),
        ctx.clearance(&plain.config).unwrap() * 1e3,
        plain.config.0
    );

    for (name, w) in [
        ("default weights", SetupObjectiveWeights::default()),
        (
            "manipulability only",
            SetupObjectiveWeights {
                clearance: 0.0,
                joint_limits: 0.0,
                ..Default::default()
            },
        ),
        (
            "clearance heavy",
            SetupObjectiveWeights {
                clearance: 100.0,
                ..Default::default()
            },
        ),
    ] {
        let r = optimize_setup_config(&ctx, &setup_pose, &JointConfig::HOME, &w, &SetupOptions::default()).unwrap();
        let p = ctx.model.forward_kinematics(&r.config).unwrap();
        println!(
            "{name:<20} U={:+.3} w={:.3e} clearance={:.1} mm margin={:.2} starts={} pose err {:.1e} m",
            r.objective,
            r.manipulability,
            r.clearance * 1e3,
            r.joint_limit_margin,
            r.feasible_starts,
            (p.tip - setup_pose.tip).norm()
        );
    }
}
