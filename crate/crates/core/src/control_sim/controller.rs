use super::{pid_step, plant_step, EncoderModel, PidGains, PidState, PlantParams, PlantState};
use crate::clutch::{from_nm, plan_insertion, to_nm, ClutchConfig, ClutchDriver};
use crate::kinematics::{JointConfig, JointKind, DOF, JOINT_KINDS};
use crate::protocol::{decode_all, encode_frame, Feedback, Frame, Message, FLAG_MALFORMED_SEEN};
use crate::safety::{FaultReason, SafetyAction, SafetyConfig, SafetyEvent, SafetyMode, SafetyState};
use serde::{Deserialize, Serialize};

/// Joints driven by motors; the last joint is the clutched insertion.
pub const MOTOR_JOINTS: usize = DOF - 1;
pub const TICK_NS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub gains: [PidGains; MOTOR_JOINTS],
    pub plants: [PlantParams; MOTOR_JOINTS],
    pub encoders: [EncoderModel; MOTOR_JOINTS],
    pub substeps: u32,
    pub safety: SafetyConfig,
    pub clutch: ClutchConfig,
    pub initial: JointConfig,
}

pub fn default_gains(kind: JointKind) -> PidGains {
    match kind {
        JointKind::Revolute => PidGains {
            kp: 400.0,
            ki: 2000.0,
            kd: 4.0,
            integral_clamp: 1.0,
            output_clamp: 5.0,
            derivative_filter: 0.001,
        },
        JointKind::Prismatic => PidGains {
            kp: 50_000.0,
            ki: 100_000.0,
            kd: 1000.0,
            integral_clamp: 40.0,
            output_clamp: 200.0,
            derivative_filter: 0.001,
        },
    }
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gains: std::array::from_fn(|j| default_gains(JOINT_KINDS[j])),
            plants: std::array::from_fn(|j| PlantParams::default_for(JOINT_KINDS[j])),
            encoders: std::array::from_fn(|j| EncoderModel::default_for(JOINT_KINDS[j])),
            substeps: 10,
            safety: SafetyConfig::default(),
            clutch: ClutchConfig::default(),
            initial: JointConfig::HOME,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), String> {
        for j in 0..MOTOR_JOINTS {
            self.gains[j].validate().map_err(|e| format!("gains[{j}]: {e}"))?;
            self.plants[j].validate().map_err(|e| format!("plants[{j}]: {e}"))?;
            if !(self.encoders[j].counts > 0.0) {
                return Err(format!("encoders[{j}]: counts must be positive"));
            }
        }
        if self.substeps == 0 {
            return Err("substeps must be positive".into());
        }
        self.safety.validate()?;
        self.clutch.thermal.validate()?;
        if self.initial[DOF - 1] != 0.0 {
            return Err("initial insertion depth must be 0".into());
        }
        Ok(())
    }
}

/// One row of the controller log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub tick: u64,
    pub t_ns: u64,
    /// True joint positions after the tick.
    pub q: [f64; DOF],
    pub setpoint: [f64; DOF],
    /// Applied (clamped) effort per motor joint.
    pub effort: [f64; MOTOR_JOINTS],
    pub safety: SafetyMode,
    pub reason: FaultReason,
    /// Seq of a SETPOINT applied during this tick.
    pub applied_seq: Option<u32>,
    pub clutch_temps: [f64; 2],
    pub clutch_bits: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerCounters {
    pub malformed: u64,
    pub stale: u64,
    pub setpoints_applied: u64,
    pub setpoints_rejected: u64,
}

#[derive(Debug, Clone)]
pub struct TickOutput {
    pub frames: Vec<Frame>,
    pub log: TickLog,
}

/// The low-level controller: owns the plants, the interlock and the clutch
/// driver and advances them one control period per [`Controller::tick_bytes`].
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    pub safety: SafetyState,
    plants: [PlantState; MOTOR_JOINTS],
    pid: [PidState; MOTOR_JOINTS],
    pub clutch: ClutchDriver,
    setpoint: [f64; DOF],
    depth_target_nm: i64,
    prev_measured: [f64; MOTOR_JOINTS],
    prev_depth_nm: i64,
    last_rx_seq: Option<u32>,
    tx_seq: u32,
    tick: u64,
    malformed_since_feedback: bool,
    pub counters: ControllerCounters,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Self {
        let plants = std::array::from_fn(|j| PlantState {
            position: cfg.initial[j],
            velocity: 0.0,
        });
        let mut c = Self {
            clutch: ClutchDriver::new(cfg.clutch),
            safety: SafetyState::default(),
            plants,
            pid: Default::default(),
            setpoint: cfg.initial.0,
            depth_target_nm: 0,
            prev_measured: [0.0; MOTOR_JOINTS],
            prev_depth_nm: 0,
            last_rx_seq: None,
            tx_seq: 0,
            tick: 0,
            malformed_since_feedback: false,
            counters: ControllerCounters::default(),
            cfg,
        };
        c.prev_measured = c.measured();
        c
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn now_ns(&self) -> u64 {
        self.tick * TICK_NS
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    /// True joint positions (motor joints from the plants, depth from the clutch driver).
    pub fn true_positions(&self) -> [f64; DOF] {
        let mut q = [0.0; DOF];
        for j in 0..MOTOR_JOINTS {
            q[j] = self.plants[j].position;
        }
        q[DOF - 1] = self.clutch.depth();
        q
    }

    fn measured(&self) -> [f64; MOTOR_JOINTS] {
        std::array::from_fn(|j| self.cfg.encoders[j].quantize(self.plants[j].position))
    }

    fn next_tx(&mut self) -> u32 {
        self.tx_seq = self.tx_seq.wrapping_add(1);
        self.tx_seq
    }

    fn safety_event(&mut self, ev: SafetyEvent) -> SafetyAction {
        let was = self.safety.mode;
        let (s, a) = self.safety.on_event(&self.cfg.safety, self.now_ns(), ev);
        self.safety = s;
        if s.mode == SafetyMode::Enabled && was != SafetyMode::Enabled {
            // start holding wherever the joints are
            let m = self.measured();
            self.setpoint[..MOTOR_JOINTS].copy_from_slice(&m);
            self.setpoint[DOF - 1] = from_nm(self.depth_target_nm);
            for p in &mut self.pid {
                p.reset();
            }
        }
        a
    }

    /// Records input that could not be decoded.
    pub fn note_malformed(&mut self) {
        self.counters.malformed += 1;
        self.malformed_since_feedback = true;
    }

    /// Runs one control period on the raw bytes delivered since the last
    /// tick. `overrun` marks a tick that missed its deadline.
    pub fn tick_bytes(&mut self, inbox: &[Vec<u8>], overrun: bool) -> TickOutput {
        let mut frames = vec![];
        for bytes in inbox {
            for r in decode_all(bytes) {
                match r {
                    Ok(f) => frames.push(f),
                    Err(e) => {
                        log::debug!("controller dropped malformed frame: {e}");
                        self.note_malformed();
                    }
                }
            }
        }
        self.tick_frames(&frames, overrun)
    }

    pub fn tick_frames(&mut self, inbox: &[Frame], overrun: bool) -> TickOutput {
        let now = self.now_ns();
        let mut out = vec![];
        let mut pending_setpoint: Option<(u32, [f64; DOF])> = None;

        for f in inbox {
            if self.last_rx_seq.is_some_and(|l| f.seq <= l) {
                self.counters.stale += 1;
                continue;
            }
            self.last_rx_seq = Some(f.seq);
            let action = match f.msg {
                Message::Heartbeat => {
                    self.safety_event(SafetyEvent::Heartbeat);
                    continue;
                }
                Message::Setpoint(q) => {
                    pending_setpoint = Some((f.seq, q));
                    continue;
                }
                Message::Enable => self.safety_event(SafetyEvent::EnableReq),
                Message::Disable => {
                    if self.safety.mode == SafetyMode::FaultLatched {
                        self.safety_event(SafetyEvent::ClearFault)
                    } else {
                        self.safety_event(SafetyEvent::DisableReq)
                    }
                }
                Message::Estop { pressed } => {
                    let a = self.safety_event(if pressed {
                        SafetyEvent::EstopPress
                    } else {
                        SafetyEvent::EstopRelease
                    });
                    if a == SafetyAction::None || a == SafetyAction::ZeroEffortLatch {
                        SafetyAction::Accepted
                    } else {
                        a
                    }
                }
                Message::Feedback(_) | Message::Ack { .. } => continue,
            };
            if let Some(status) = action.ack_status() {
                let seq = self.next_tx();
                out.push(Frame::new(
                    seq,
                    now,
                    Message::Ack {
                        status,
                        acked_seq: f.seq,
                    },
                ));
            }
        }

        self.safety_event(if overrun { SafetyEvent::TickOverrun } else { SafetyEvent::Tick });

        let enabled = self.safety.is_motion_permitted();
        let mut applied_seq = None;
        if let Some((seq, q)) = pending_setpoint {
            if enabled && q.iter().all(|v| v.is_finite()) {
                self.setpoint = q;
                applied_seq = Some(seq);
                self.counters.setpoints_applied += 1;
            } else {
                self.counters.setpoints_rejected += 1;
            }
        }

        if enabled && self.clutch.fault.is_none() && !self.clutch.is_busy() {
            let want = to_nm(self.setpoint[DOF - 1].max(0.0));
            if want != self.depth_target_nm {
                let plan = plan_insertion(from_nm(want - self.clutch.depth_nm), self.cfg.clutch.stroke);
                self.clutch.start_plan(&plan);
                self.depth_target_nm = want;
            }
        }

        let measured = self.measured();
        let dt = TICK_NS as f64 * 1e-9;
        let mut effort = [0.0; MOTOR_JOINTS];
        for j in 0..MOTOR_JOINTS {
            effort[j] = if enabled {
                pid_step(&self.cfg.gains[j], &mut self.pid[j], self.setpoint[j], measured[j], dt)
            } else {
                self.pid[j].reset();
                0.0
            };
        }
        let sub = dt / self.cfg.substeps as f64;
        let mut applied = [0.0; MOTOR_JOINTS];
        for _ in 0..self.cfg.substeps {
            for j in 0..MOTOR_JOINTS {
                applied[j] = plant_step(&self.cfg.plants[j], &mut self.plants[j], effort[j], sub);
            }
        }

        if self.clutch.tick(dt, enabled).is_some() {
            self.safety_event(SafetyEvent::ClutchFault);
        }

        self.tick += 1;
        let t_after = self.now_ns();
        let measured_after = self.measured();
        let mut position = [0.0; DOF];
        let mut velocity = [0.0; DOF];
        for j in 0..MOTOR_JOINTS {
            position[j] = measured_after[j];
            velocity[j] = (measured_after[j] - self.prev_measured[j]) / dt;
        }
        position[DOF - 1] = self.clutch.depth();
        velocity[DOF - 1] = from_nm(self.clutch.depth_nm - self.prev_depth_nm) / dt;
        self.prev_measured = measured_after;
        self.prev_depth_nm = self.clutch.depth_nm;

        let fb = Feedback {
            position,
            velocity,
            clutch_temps: [self.clutch.hold.temp, self.clutch.drive.temp],
            safety: self.safety.mode.code(),
            clutch_bits: self.clutch.bitfield(),
            fault: self.safety.reason.code(),
        };
        let seq = self.next_tx();
        let mut ff = Frame::new(seq, t_after, Message::Feedback(fb));
        if std::mem::take(&mut self.malformed_since_feedback) {
            ff.flags |= FLAG_MALFORMED_SEEN;
        }
        out.push(ff);

        TickOutput {
            frames: out,
            log: TickLog {
                tick: self.tick,
                t_ns: t_after,
                q: self.true_positions(),
                setpoint: self.setpoint,
                effort: applied,
                safety: self.safety.mode,
                reason: self.safety.reason,
                applied_seq,
                clutch_temps: fb.clutch_temps,
                clutch_bits: fb.clutch_bits,
            },
        }
    }

    /// Encodes the output frames of a tick.
    pub fn encode_output(out: &TickOutput) -> Vec<u8> {
        out.frames.iter().flat_map(encode_frame).collect()
    }
}
