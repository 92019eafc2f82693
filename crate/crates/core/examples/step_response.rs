//! Closed-loop step response of every motor joint with the shipped gains,
//! and a streamed move tracked through the simulated link.
//!
//! ```text
//! cargo run --example step_response
//! ```

use crane::control_sim::{
    run_scheduler, step_response, Controller, ControllerConfig, LinkFaults, ScriptedMaster, MOTOR_JOINTS, TICK_NS,
};
use crane::kinematics::{JointConfig, JointKind, JOINT_KINDS};
use crane::planning::{time_parameterize, JointPath, MotionLimits};

fn main() {
    let cfg = ControllerConfig::default();
    println!("joint  kind       step      band      settle    overshoot");
    for j in 0..MOTOR_JOINTS {
        let (step, band) = match JOINT_KINDS[j] {
            JointKind::Revolute => (0.1, 0.001),
            JointKind::Prismatic => (0.01, 0.0001),
        };
        let r = step_response(&cfg, j, step, band, 2.0);
        println!(
            "q{}     {:<10} {step:<9} {band:<9} {:<9} {:.1}%",
            j + 1,
            format!("{:?}", JOINT_KINDS[j]).to_lowercase(),
            r.settling_time.map_or("never".into(), |t| format!("{t:.3} s")),
            r.overshoot * 100.0
        );
    }

    let goal = JointConfig([0.05, -0.03, 0.02, 0.6, -0.4, 0.3, 0.5, 0.0]);
    let traj = time_parameterize(&JointPath { waypoints: vec![JointConfig::HOME, goal] }, &MotionLimits::default()).unwrap();
    let start = 10 * TICK_NS;
    let sps: Vec<_> = traj.samples().into_iter().map(|(t, q)| (start + t, q.0)).collect();
    let end = sps.last().unwrap().0;
    let faults = LinkFaults {
        latency_ns: TICK_NS,
        jitter_ns: 2 * TICK_NS,
        ..Default::default()
    };
    let mut c = Controller::new(cfg);
    let log = run_scheduler(&mut c, &mut ScriptedMaster::new(sps), end + 300 * TICK_NS, &faults, 9);
    let worst = log
        .ticks
        .iter()
        .filter(|r| r.t_ns > start)
        .flat_map(|r| {
            let want = traj.position((r.t_ns - TICK_NS - start) as f64 * 1e-9);
            (0..MOTOR_JOINTS).map(move |j| (r.q[j] - want[j]).abs())
        })
        .fold(0.0, f64::max);
    println!(
        "\nstreamed {:.2} s move over a 1-3 ms link: {} ticks, worst tracking error {worst:.4}",
        traj.duration(),
        log.ticks.len()
    );
}
