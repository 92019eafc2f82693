//! The master process: clinical workflow, session orchestration, the
//! confirmation-scan simulator and the operator bridge.

pub mod bridge;
mod messages;
mod plan;
mod scan;
mod script;
mod session;
mod workflow;

pub use messages::{
    parse_inbound, ClutchView, OperatorCommand, Outbound, PlanPreview, SafetyView, Telemetry, SCHEMA_VERSION,
};
pub use plan::{compute_plan, is_infeasible, PlanOutcome, PlanRequest};
pub use scan::{confirmation_scan, evaluate_scan, ScanNoise, ScanResult};
pub use script::{read_log, replay_log, run_script, run_until, ReplayReport, ScriptRun, ScriptStep, WaitFor};
pub use session::{
    LogRecord, MonitorTrip, PlanMode, RobotConfig, Session, SessionConfig, SessionIo, SessionOptions, SessionStats,
};
pub use workflow::{
    advance_workflow, Command, JogAxis, Transition, WorkflowError, WorkflowEvent, WorkflowState, WorkflowStep,
};

use crate::kinematics::JointConfig;
use crate::protocol::{Frame, Message};
use crate::safety::SafetyMode;

/// Frames a master emits while streaming `samples`, one per 1 ms tick from
/// `t0_ns`: a HEARTBEAT every `heartbeat_period_ns` followed by the tick's
/// SETPOINT, with contiguous sequence numbers from `first_seq`.
/// `safety_before(k)` is the safety state in the latest FEEDBACK before tick
/// `k`; streaming stops for good at the first tick where it is not ENABLED
/// (heartbeats continue).
pub fn stream_trajectory(
    samples: &[JointConfig],
    t0_ns: u64,
    first_seq: u32,
    heartbeat_period_ns: u64,
    mut safety_before: impl FnMut(usize) -> SafetyMode,
) -> Vec<Frame> {
    let mut out = vec![];
    let mut seq = first_seq;
    let mut stopped = false;
    for (k, q) in samples.iter().enumerate() {
        let t = t0_ns + k as u64 * crate::control_sim::TICK_NS;
        let mut push = |msg| {
            out.push(Frame::new(seq, t, msg));
            seq = seq.wrapping_add(1);
        };
        if t % heartbeat_period_ns == 0 {
            push(Message::Heartbeat);
        }
        stopped |= safety_before(k) != SafetyMode::Enabled;
        if !stopped {
            push(Message::Setpoint(q.0));
        }
    }
    out
}
