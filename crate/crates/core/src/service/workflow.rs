//! Clinical workflow state machine. Pure: the session executes the returned
//! commands and feeds their outcomes back as events.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowStep {
    Calibrate,
    PlanSetup,
    Review,
    MoveToSetup,
    TeleopIterate,
    TargetReached,
}

impl WorkflowStep {
    pub fn name(self) -> &'static str {
        match self {
            WorkflowStep::Calibrate => "CALIBRATE",
            WorkflowStep::PlanSetup => "PLAN_SETUP",
            WorkflowStep::Review => "REVIEW",
            WorkflowStep::MoveToSetup => "MOVE_TO_SETUP",
            WorkflowStep::TeleopIterate => "TELEOP_ITERATE",
            WorkflowStep::TargetReached => "TARGET_REACHED",
        }
    }

    /// States in which SETPOINT frames may be sent.
    pub fn allows_motion(self) -> bool {
        matches!(self, WorkflowStep::MoveToSetup | WorkflowStep::TeleopIterate)
    }
}

impl fmt::Display for WorkflowStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub step: WorkflowStep,
    /// Set by an e-stop or a controller fault; cleared by `ClearFault`.
    pub halted: bool,
    pub registered: bool,
    pub planning: bool,
    pub scans: u32,
}

impl Default for WorkflowState {
    fn default() -> Self {
        Self {
            step: WorkflowStep::Calibrate,
            halted: false,
            registered: false,
            planning: false,
            scans: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JogAxis {
    X,
    Y,
    Z,
    /// Tilt about the first direction perpendicular to the needle.
    A,
    /// Tilt about the second.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorkflowEvent {
    FiducialsLoaded,
    Registered,
    RegistrationFailed { reason: String },
    SetTarget,
    PlanReady,
    PlanFailed { reason: String },
    Confirm,
    TrajectoryDone,
    Jog { axis: JogAxis, dir: i8 },
    Insert { delta_m: f64 },
    RequestScan,
    ScanResult { within: bool },
    Estop,
    ControllerFault,
    ClearFault,
    Enable,
}

impl WorkflowEvent {
    pub fn name(&self) -> &'static str {
        match self {
            WorkflowEvent::FiducialsLoaded => "fiducials_loaded",
            WorkflowEvent::Registered => "registered",
            WorkflowEvent::RegistrationFailed { .. } => "registration_failed",
            WorkflowEvent::SetTarget => "set_target",
            WorkflowEvent::PlanReady => "plan_ready",
            WorkflowEvent::PlanFailed { .. } => "plan_failed",
            WorkflowEvent::Confirm => "confirm_setup",
            WorkflowEvent::TrajectoryDone => "trajectory_done",
            WorkflowEvent::Jog { .. } => "jog",
            WorkflowEvent::Insert { .. } => "insert",
            WorkflowEvent::RequestScan => "request_scan",
            WorkflowEvent::ScanResult { .. } => "scan_result",
            WorkflowEvent::Estop => "estop",
            WorkflowEvent::ControllerFault => "controller_fault",
            WorkflowEvent::ClearFault => "clear_fault",
            WorkflowEvent::Enable => "enable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    Register,
    StartPlanning,
    CancelPlanning,
    StreamTrajectory,
    StopMotion,
    Jog { axis: JogAxis, dir: i8 },
    Insert { delta_m: f64 },
    Scan,
    SendEstop,
    SendClearFault,
    SendEnable,
    /// Planner or registration diagnostic for the operator.
    Report { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkflowError {
    #[error("{event} not allowed in {state}")]
    WrongState { event: &'static str, state: WorkflowStep },
    #[error("{event} not allowed while halted; clear the fault first")]
    Halted { event: &'static str },
    #[error("no fault to clear")]
    NotHalted,
    #[error("a plan is already being computed")]
    Busy,
}

pub type Transition = (WorkflowState, Vec<Command>);

/// One step of the workflow.
pub fn advance_workflow(state: &WorkflowState, event: &WorkflowEvent) -> Result<Transition, WorkflowError> {
    use WorkflowEvent as E;
    use WorkflowStep as S;
    let mut s = *state;
    let wrong = || WorkflowError::WrongState {
        event: event.name(),
        state: state.step,
    };

    match event {
        E::Estop => {
            s.halted = true;
            s.planning = false;
            return Ok((s, vec![Command::SendEstop, Command::StopMotion, Command::CancelPlanning]));
        }
        E::ControllerFault => {
            if s.halted {
                return Ok((s, vec![]));
            }
            s.halted = true;
            s.planning = false;
            return Ok((s, vec![Command::StopMotion, Command::CancelPlanning]));
        }
        E::ClearFault => {
            if !s.halted {
                return Err(WorkflowError::NotHalted);
            }
            s.halted = false;
            let mut cmds = vec![Command::SendClearFault];
            if s.step == S::MoveToSetup {
                // the move was interrupted: plan again from wherever the robot stopped
                s.step = S::PlanSetup;
                s.planning = true;
                cmds.push(Command::StartPlanning);
            }
            return Ok((s, cmds));
        }
        // completions of work started before a halt still land
        E::PlanFailed { reason } => {
            if !s.planning {
                return Ok((s, vec![]));
            }
            s.planning = false;
            return Ok((
                s,
                vec![Command::Report {
                    message: format!("planning failed: {reason}"),
                }],
            ));
        }
        E::RegistrationFailed { reason } => {
            return Ok((
                s,
                vec![Command::Report {
                    message: format!("registration failed: {reason}"),
                }],
            ));
        }
        _ => {}
    }

    if s.halted {
        return Err(WorkflowError::Halted { event: event.name() });
    }

    let cmds = match (state.step, event) {
        (_, E::Enable) => vec![Command::SendEnable],
        (S::Calibrate, E::FiducialsLoaded) => vec![Command::Register],
        (S::Calibrate, E::Registered) => {
            s.registered = true;
            s.step = S::PlanSetup;
            vec![]
        }
        (S::PlanSetup | S::Review, E::SetTarget) => {
            if s.planning {
                return Err(WorkflowError::Busy);
            }
            s.step = S::PlanSetup;
            s.planning = true;
            vec![Command::StartPlanning]
        }
        (S::PlanSetup, E::PlanReady) if s.planning => {
            s.planning = false;
            s.step = S::Review;
            vec![]
        }
        (_, E::PlanReady) => vec![],
        (S::Review, E::Confirm) => {
            s.step = S::MoveToSetup;
            vec![Command::StreamTrajectory]
        }
        (S::MoveToSetup, E::TrajectoryDone) => {
            s.step = S::TeleopIterate;
            vec![]
        }
        (S::TeleopIterate, E::Jog { axis, dir }) => vec![Command::Jog { axis: *axis, dir: *dir }],
        (S::TeleopIterate, E::Insert { delta_m }) => vec![Command::Insert { delta_m: *delta_m }],
        (S::TeleopIterate, E::RequestScan) => {
            s.scans += 1;
            vec![Command::Scan]
        }
        (S::TeleopIterate, E::ScanResult { within }) => {
            if *within {
                s.step = S::TargetReached;
            }
            vec![]
        }
        _ => return Err(wrong()),
    };
    Ok((s, cmds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(events: &[WorkflowEvent]) -> WorkflowState {
        let mut s = WorkflowState::default();
        for e in events {
            s = advance_workflow(&s, e).unwrap_or_else(|err| panic!("{e:?}: {err}")).0;
        }
        s
    }

    fn happy() -> Vec<WorkflowEvent> {
        vec![
            WorkflowEvent::FiducialsLoaded,
            WorkflowEvent::Registered,
            WorkflowEvent::SetTarget,
            WorkflowEvent::PlanReady,
            WorkflowEvent::Confirm,
            WorkflowEvent::TrajectoryDone,
        ]
    }

    #[test]
    fn follows_the_procedure_order() {
        let mut ev = happy();
        ev.push(WorkflowEvent::RequestScan);
        ev.push(WorkflowEvent::ScanResult { within: false });
        ev.push(WorkflowEvent::RequestScan);
        ev.push(WorkflowEvent::ScanResult { within: true });
        let s = run(&ev);
        assert_eq!(s.step, WorkflowStep::TargetReached);
        assert_eq!(s.scans, 2);
    }

    #[test]
    fn confirm_in_calibrate_is_rejected_with_state_name() {
        let err = advance_workflow(&WorkflowState::default(), &WorkflowEvent::Confirm).unwrap_err();
        assert_eq!(err.to_string(), "confirm_setup not allowed in CALIBRATE");
    }

    #[test]
    fn plan_failure_stays_in_plan_setup() {
        let s = run(&happy()[..3]);
        let (s, cmds) = advance_workflow(&s, &WorkflowEvent::PlanFailed { reason: "x".into() }).unwrap();
        assert_eq!(s.step, WorkflowStep::PlanSetup);
        assert!(!s.planning);
        assert!(matches!(cmds[0], Command::Report { .. }));
    }

    #[test]
    fn estop_during_move_needs_clear_and_review() {
        let s = run(&happy()[..5]);
        assert_eq!(s.step, WorkflowStep::MoveToSetup);
        let (s, cmds) = advance_workflow(&s, &WorkflowEvent::Estop).unwrap();
        assert!(s.halted && cmds.contains(&Command::SendEstop) && cmds.contains(&Command::StopMotion));
        assert!(advance_workflow(&s, &WorkflowEvent::TrajectoryDone).is_err());
        let (s, cmds) = advance_workflow(&s, &WorkflowEvent::ClearFault).unwrap();
        assert_eq!(s.step, WorkflowStep::PlanSetup);
        assert_eq!(cmds, vec![Command::SendClearFault, Command::StartPlanning]);
        let (s, _) = advance_workflow(&s, &WorkflowEvent::PlanReady).unwrap();
        assert_eq!(s.step, WorkflowStep::Review);
        assert!(advance_workflow(&s, &WorkflowEvent::TrajectoryDone).is_err());
    }

    #[test]
    fn teleop_commands_only_in_teleop() {
        let jog = WorkflowEvent::Jog { axis: JogAxis::X, dir: 1 };
        let s = run(&happy()[..4]);
        assert!(advance_workflow(&s, &jog).is_err());
        let s = run(&happy());
        let (_, cmds) = advance_workflow(&s, &jog).unwrap();
        assert_eq!(cmds, vec![Command::Jog { axis: JogAxis::X, dir: 1 }]);
    }

    #[test]
    fn stale_plan_completion_is_ignored() {
        let s = run(&happy()[..3]);
        let (s, _) = advance_workflow(&s, &WorkflowEvent::Estop).unwrap();
        let (s2, cmds) = advance_workflow(&s, &WorkflowEvent::PlanReady).unwrap_or((s, vec![]));
        assert_eq!(s2.step, WorkflowStep::PlanSetup);
        assert!(cmds.is_empty());
    }

    #[test]
    fn clear_without_fault_is_rejected() {
        assert_eq!(
            advance_workflow(&WorkflowState::default(), &WorkflowEvent::ClearFault),
            Err(WorkflowError::NotHalted)
        );
    }
}
