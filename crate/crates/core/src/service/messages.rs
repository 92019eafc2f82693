//! JSON bridge schema, version 1.
//!
//! Every message is an object with `"v": 1` and a `"type"` tag. Inbound
//! messages come from the operator console; outbound ones are telemetry,
//! acknowledgements and errors.

use super::scan::ScanResult;
use super::workflow::{JogAxis, WorkflowStep};
use crate::clutch::ClutchPhase;
use crate::kinematics::{JointConfig, NeedlePose, DOF};
use crate::safety::{FaultReason, SafetyMode};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u8 = 1;

/// Operator command. Coordinates are in the scanner frame, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    /// Missing fields fall back to the scene's target and entry hint and the
    /// configured standoff.
    SetTarget {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<[f64; 3]>,
        /// A point outside the patient on the desired needle line.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        entry: Option<[f64; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        standoff_mm: Option<f64>,
    },
    ConfirmSetup,
    Jog {
        axis: JogAxis,
        dir: i8,
    },
    Insert {
        mm: f64,
    },
    Retract {
        mm: f64,
    },
    RequestScan,
    Estop,
    ClearFault,
    Enable,
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorCommand::SetTarget { .. } => "set_target",
            OperatorCommand::ConfirmSetup => "confirm_setup",
            OperatorCommand::Jog { .. } => "jog",
            OperatorCommand::Insert { .. } => "insert",
            OperatorCommand::Retract { .. } => "retract",
            OperatorCommand::RequestScan => "request_scan",
            OperatorCommand::Estop => "estop",
            OperatorCommand::ClearFault => "clear_fault",
            OperatorCommand::Enable => "enable",
        }
    }
}

/// Parses a bridge message: a JSON object with `"v": 1` plus the command.
pub fn parse_inbound(text: &str) -> Result<OperatorCommand, String> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    let obj = v.as_object_mut().ok_or("message must be a JSON object")?;
    match obj.remove("v") {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
        Some(other) => return Err(format!("unsupported schema version {other}")),
        None => return Err("missing schema version \"v\"".into()),
    }
    serde_json::from_value(v).map_err(|e| format!("invalid command: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyView {
    pub mode: SafetyMode,
    pub reason: FaultReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutchView {
    /// HOLD then DRIVE, degrees C.
    pub temps: [f64; 2],
    pub hold: ClutchPhase,
    pub drive: ClutchPhase,
    pub busy: bool,
    pub fault: bool,
    pub loaded: bool,
}

impl ClutchView {
    pub fn from_feedback(temps: [f64; 2], bits: u8) -> Self {
        Self {
            temps,
            hold: ClutchPhase::from_code(bits),
            drive: ClutchPhase::from_code(bits >> 2),
            busy: bits & 1 << 4 != 0,
            fault: bits & 1 << 5 != 0,
            loaded: bits & 1 << 6 != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPreview {
    pub waypoints: Vec<JointConfig>,
    /// Needle pose at the end of the planned move, scanner frame.
    pub setup_needle: NeedlePose,
    pub duration_s: f64,
    pub manipulability: f64,
    pub clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub v: u8,
    pub t_ns: u64,
    pub workflow: WorkflowStep,
    pub halted: bool,
    pub planning: bool,
    pub moving: bool,
    /// Measured joint positions from the latest FEEDBACK.
    pub q: [f64; DOF],
    pub setpoint: [f64; DOF],
    /// Scanner frame; absent until the robot is registered.
    pub needle: Option<NeedlePose>,
    pub depth: f64,
    pub safety: SafetyView,
    pub clutch: ClutchView,
    pub target: Option<[f64; 3]>,
    pub plan: Option<PlanPreview>,
    pub scan: Option<ScanResult>,
    pub scans: u32,
    /// Latest diagnostic for the operator.
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    Telemetry(Telemetry),
    Ack {
        v: u8,
        command: String,
    },
    Error {
        v: u8,
        message: String,
        state: WorkflowStep,
    },
}

impl Outbound {
    pub fn ack(command: &str) -> Self {
        Outbound::Ack {
            v: SCHEMA_VERSION,
            command: command.into(),
        }
    }

    pub fn error(message: impl Into<String>, state: WorkflowStep) -> Self {
        Outbound::Error {
            v: SCHEMA_VERSION,
            message: message.into(),
            state,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("outbound messages serialize")
    }
}
