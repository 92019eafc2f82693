//! Forward kinematics, Jacobian and manipulability at a few poses.
//!
//! ```text
//! cargo run --example forward_kinematics
//! ```

use crane::kinematics::{JointConfig, RobotModel};
use std::f64::consts::FRAC_PI_2;

fn main() {
    let m = RobotModel::default();
    let poses = [
        ("home", JointConfig::HOME),
        ("elbow out", JointConfig([0.0, 0.0, 0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0])),
        ("tilted, 30 mm in", JointConfig([0.02, -0.01, 0.05, 0.4, -0.3, 0.5, 0.2, 0.03])),
        ("wrist singular", JointConfig([0.0, 0.0, 0.0, 0.0, FRAC_PI_2, 0.0, FRAC_PI_2, 0.0])),
    ];
    for (name, q) in poses {
        let pose = m.forward_kinematics(&q).expect("within limits");
        let w = m.manipulability(&q).expect("within limits");
        println!(
            "{name:>18}: tip ({:+.4}, {:+.4}, {:+.4}) axis ({:+.3}, {:+.3}, {:+.3}) w={w:.3e}",
            pose.tip.x, pose.tip.y, pose.tip.z, pose.axis.x, pose.axis.y, pose.axis.z
        );
    }

    let q = poses[2].1;
    let j = m.geometric_jacobian(&q).unwrap();
    println!("\ngeometric Jacobian at \"{}\" (rows vx vy vz wx wy wz):", poses[2].0);
    for r in 0..6 {
        let row: Vec<String> = (0..8).map(|c| format!("{:+.3}", j[(r, c)])).collect();
        println!("  {}", row.join(" "));
    }

    let limit = m.forward_kinematics(&JointConfig([0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    println!("\nq1 = 0.3 m: {}", limit.unwrap_err());
}
