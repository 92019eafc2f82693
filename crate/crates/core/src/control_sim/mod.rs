//! Simulated low-level controller: per-joint PID at 1 kHz over a
//! second-order plant with encoder quantization, the interlock automaton
//! and the clutch driver, advanced in virtual time.

mod controller;
mod encoder;
mod pid;
mod plant;
mod scheduler;

pub use controller::{
    default_gains, Controller, ControllerConfig, ControllerCounters, TickLog, TickOutput, MOTOR_JOINTS, TICK_NS,
};
pub use encoder::EncoderModel;
pub use pid::{pid_step, PidGains, PidState};
pub use plant::{plant_step, PlantParams, PlantState};
pub use scheduler::{
    run_scheduler, write_session_csv_header, write_session_csv_row, write_tick_csv_header, write_tick_csv_row, Downlink, LinkFaults, Master, Outage, SchedulerLog,
    ScriptedMaster,
};

/// Step-response figures of a closed-loop joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResponse {
    /// Time after which the joint stays within the band (s).
    pub settling_time: Option<f64>,
    /// Peak excursion past the target as a fraction of the step.
    pub overshoot: f64,
}

/// Commands a `step` on `joint` (0-based motor joint) from the home pose
/// after enabling, runs `duration_s`, and measures settling to `band`.
pub fn step_response(cfg: &ControllerConfig, joint: usize, step: f64, band: f64, duration_s: f64) -> StepResponse {
    let start_ns = 10 * TICK_NS;
    let mut target = cfg.initial.0;
    target[joint] += step;
    let mut c = Controller::new(cfg.clone());
    let mut m = ScriptedMaster::new(vec![(start_ns, target)]);
    let log = run_scheduler(
        &mut c,
        &mut m,
        start_ns + (duration_s * 1e9) as u64,
        &LinkFaults::default(),
        0,
    );
    let x0 = cfg.initial[joint];
    let mut peak: f64 = 0.0;
    let mut last_outside = None;
    for r in log.ticks.iter().filter(|r| r.t_ns > start_ns) {
        let x = r.q[joint] - x0;
        peak = peak.max((x - step) * step.signum());
        if (x - step).abs() > band {
            last_outside = Some(r.t_ns);
        }
    }
    let end = log.ticks.last().map_or(0, |r| r.t_ns);
    StepResponse {
        settling_time: match last_outside {
            Some(t) if t >= end => None,
            Some(t) => Some((t - start_ns) as f64 * 1e-9),
            None => Some(0.0),
        },
        overshoot: peak / step.abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{JointConfig, DOF};
    use crate::planning::{time_parameterize, JointPath, MotionLimits};
    use crate::protocol::Message;
    use crate::safety::{FaultReason, SafetyMode};

    #[test]
    fn revolute_step_settles() {
        let cfg = ControllerConfig::default();
        for j in 3..MOTOR_JOINTS {
            let r = step_response(&cfg, j, 0.1, 0.001, 2.0);
            assert!(r.settling_time.is_some_and(|t| t <= 1.0), "joint {j}: {r:?}");
            assert!(r.overshoot < 0.2, "joint {j}: {r:?}");
        }
    }

    #[test]
    fn one_second_is_one_thousand_ticks() {
        let mut c = Controller::new(ControllerConfig::default());
        let log = run_scheduler(&mut c, &mut ScriptedMaster::new(vec![]), 1_000_000_000, &LinkFaults::default(), 0);
        assert_eq!(log.ticks.len(), 1000);
        assert_eq!(c.ticks(), 1000);
        let log = run_scheduler(&mut c, &mut ScriptedMaster::new(vec![]), 0, &LinkFaults::default(), 0);
        assert!(log.ticks.is_empty());
    }

    #[test]
    fn holds_without_setpoints() {
        let cfg = ControllerConfig::default();
        let mut c = Controller::new(cfg.clone());
        let log = run_scheduler(&mut c, &mut ScriptedMaster::new(vec![]), 10_000_000_000, &LinkFaults::default(), 0);
        assert_eq!(log.ticks.last().unwrap().safety, SafetyMode::Enabled);
        for r in &log.ticks {
            for j in 0..MOTOR_JOINTS {
                assert!((r.q[j] - cfg.initial[j]).abs() < cfg.encoders[j].resolution());
            }
        }
    }

    #[test]
    fn streamed_trajectory_is_tracked() {
        let mut b = JointConfig::HOME;
        b[0] = 0.05;
        b[3] = 0.6;
        b[4] = -0.4;
        b[6] = 0.5;
        let traj = time_parameterize(&JointPath { waypoints: vec![JointConfig::HOME, b] }, &MotionLimits::default()).unwrap();
        let start = 10 * TICK_NS;
        let sps: Vec<(u64, [f64; DOF])> = traj.samples().into_iter().map(|(t, q)| (start + t, q.0)).collect();
        let end = sps.last().unwrap().0;
        let mut c = Controller::new(ControllerConfig::default());
        let log = run_scheduler(&mut c, &mut ScriptedMaster::new(sps.clone()), end + 500 * TICK_NS, &LinkFaults::default(), 0);
        let mut worst: f64 = 0.0;
        for r in log.ticks.iter().filter(|r| r.t_ns > start) {
            // setpoint in force during the tick just run
            let t = r.t_ns - TICK_NS - start;
            let want = traj.position(t as f64 * 1e-9);
            for j in 0..MOTOR_JOINTS {
                worst = worst.max((r.q[j] - want[j]).abs());
            }
        }
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn faulted_ticks_apply_no_effort() {
        let mut c = Controller::new(ControllerConfig::default());
        let mut m = ScriptedMaster::new(vec![(20 * TICK_NS, [0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0])]);
        m.heartbeat_until_ns = 30 * TICK_NS;
        let log = run_scheduler(&mut c, &mut m, 300 * TICK_NS, &LinkFaults::default(), 0);
        let fault = log.ticks.iter().find(|r| r.safety == SafetyMode::FaultLatched).unwrap();
        assert_eq!(fault.reason, FaultReason::HbTimeout);
        // last heartbeat at 20 ms
        assert!(fault.t_ns - TICK_NS > 70 * TICK_NS && fault.t_ns - TICK_NS <= 71 * TICK_NS, "{}", fault.t_ns);
        for r in &log.ticks {
            if r.safety != SafetyMode::Enabled {
                assert_eq!(r.effort, [0.0; MOTOR_JOINTS]);
            }
        }
    }

    #[test]
    fn stale_and_duplicate_setpoints_are_ignored() {
        use crate::protocol::{encode_frame, Frame};
        let mut c = Controller::new(ControllerConfig::default());
        let hb = encode_frame(&Frame::new(1, 0, Message::Heartbeat));
        c.tick_bytes(&[hb], false);
        let en = encode_frame(&Frame::new(2, 0, Message::Enable));
        c.tick_bytes(&[en], false);
        let sp = |seq, v| encode_frame(&Frame::new(seq, 0, Message::Setpoint([0.0, 0.0, 0.0, v, 0.0, 0.0, 0.0, 0.0])));
        let out = c.tick_bytes(&[sp(5, 0.1)], false);
        assert_eq!(out.log.applied_seq, Some(5));
        let out = c.tick_bytes(&[sp(5, 0.2), sp(4, 0.3)], false);
        assert_eq!(out.log.applied_seq, None);
        assert_eq!(out.log.setpoint[3], 0.1);
        assert_eq!(c.counters.stale, 2);
        let out = c.tick_bytes(&[b"garbage".to_vec()], false);
        assert_eq!(c.counters.malformed, 1);
        assert_eq!(out.frames.last().unwrap().flags & crate::protocol::FLAG_MALFORMED_SEEN, 1);
    }

    #[test]
    fn insertion_through_setpoint_depth() {
        let mut c = Controller::new(ControllerConfig::default());
        let mut q = [0.0; DOF];
        q[DOF - 1] = 0.03;
        let mut m = ScriptedMaster::new(vec![(10 * TICK_NS, q)]);
        let log = run_scheduler(&mut c, &mut m, 12_000 * TICK_NS, &LinkFaults::default(), 0);
        assert_eq!(c.clutch.depth_nm, 30_000_000);
        assert!(!c.clutch.is_busy());
        assert_eq!(log.ticks.last().unwrap().q[DOF - 1], 0.03);
    }

    #[test]
    fn same_seed_same_log() {
        let faults = LinkFaults {
            latency_ns: 2 * TICK_NS,
            jitter_ns: 3 * TICK_NS,
            drop_probability: 0.05,
            ..Default::default()
        };
        let run = || {
            let mut c = Controller::new(ControllerConfig::default());
            let mut m = ScriptedMaster::new(vec![(10 * TICK_NS, [0.0, 0.0, 0.0, 0.2, 0.1, 0.0, 0.0, 0.0])]);
            let log = run_scheduler(&mut c, &mut m, 500 * TICK_NS, &faults, 42);
            let mut buf = vec![];
            log.write_jsonl(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }
}
