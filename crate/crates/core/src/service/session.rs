//! The session actor: owns the workflow, the controller link, planning jobs
//! and the event log, and advances them one control period at a time.

use super::messages::{ClutchView, OperatorCommand, Outbound, PlanPreview, SafetyView, Telemetry, SCHEMA_VERSION};
use super::plan::{compute_plan, is_infeasible, PlanOutcome, PlanRequest};
use super::scan::{confirmation_scan, evaluate_scan, ScanNoise, ScanResult};
use super::workflow::{advance_workflow, Command, JogAxis, WorkflowError, WorkflowEvent, WorkflowState, WorkflowStep};
use crate::collision::{CollisionWorld, RobotShape, Scene};
use crate::control_sim::{ControllerConfig, Downlink, LinkFaults, TICK_NS};
use crate::kinematics::{perp_basis, ChainParams, JointConfig, JointLimits, NeedlePose, RobotModel, Vec3, DOF};
use crate::link::ControllerLink;
use crate::planning::{
    resolved_rate_step, MotionLimits, PlannerConfig, PlanningContext, PlanningError, SetupObjectiveWeights,
    SetupOptions, TeleopOptions,
};
use crate::protocol::{Feedback, Frame, Message, FLAG_MALFORMED_SEEN};
use crate::registration::{register, FiducialSet, Registration};
use crate::safety::{FaultReason, SafetyMode};
use nalgebra::SVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{self, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotConfig {
    pub chain: ChainParams,
    pub limits: JointLimits,
    pub shape: RobotShape,
}

impl RobotConfig {
    pub fn model(&self) -> RobotModel {
        RobotModel::new(self.chain, self.limits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionOptions {
    pub heartbeat_period_ms: u64,
    pub telemetry_period_ms: u64,
    pub scan_noise: ScanNoise,
    /// Largest measured tip-to-target distance that counts as reached (m).
    pub scan_threshold: f64,
    /// Default distance between the setup tip and the target (m).
    pub standoff: f64,
    /// Translation per jog message (m).
    pub jog_step: f64,
    /// Rotation per jog message (rad).
    pub jog_angle: f64,
    /// A streamed move is done once every joint is this close to its goal.
    pub settle_tolerance: f64,
    pub settle_timeout_ms: u64,
    /// Send ENABLE as soon as the controller reports IDLE after boot.
    pub auto_enable: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            heartbeat_period_ms: 10,
            telemetry_period_ms: 50,
            scan_noise: ScanNoise::default(),
            scan_threshold: 2.0e-3,
            standoff: 0.03,
            jog_step: 1.0e-3,
            jog_angle: 1.0_f64.to_radians(),
            settle_tolerance: 5.0e-4,
            settle_timeout_ms: 3000,
            auto_enable: true,
        }
    }
}

/// Fully resolved session configuration; the event-log header stores it so
/// a log can be replayed on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub robot: RobotConfig,
    pub scene: Scene,
    /// The scene's fiducials measured in the robot frame, same order.
    pub robot_fiducials: Vec<[f64; 3]>,
    pub weights: SetupObjectiveWeights,
    pub setup: SetupOptions,
    pub planner: PlannerConfig,
    pub motion_limits: MotionLimits,
    pub teleop: TeleopOptions,
    pub controller: ControllerConfig,
    pub faults: LinkFaults,
    pub seed: u64,
    pub session: SessionOptions,
}

impl SessionConfig {
    pub fn new(scene: Scene, robot_fiducials: Vec<[f64; 3]>) -> Self {
        Self {
            robot: RobotConfig::default(),
            scene,
            robot_fiducials,
            weights: SetupObjectiveWeights::default(),
            setup: SetupOptions::default(),
            planner: PlannerConfig::default(),
            motion_limits: MotionLimits::default(),
            teleop: TeleopOptions::default(),
            controller: ControllerConfig::default(),
            faults: LinkFaults::default(),
            seed: 0,
            session: SessionOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.robot.chain.validate().map_err(|e| format!("robot.chain: {e}"))?;
        self.scene.validate().map_err(|e| format!("scene: {e}"))?;
        self.weights.validate().map_err(|e| format!("weights: {e}"))?;
        self.motion_limits.validate().map_err(|e| format!("motion_limits: {e}"))?;
        self.controller.validate().map_err(|e| format!("controller: {e}"))?;
        self.faults.validate().map_err(|e| format!("faults: {e}"))?;
        self.session.scan_noise.validate().map_err(|e| format!("session.scan_noise: {e}"))?;
        let s = &self.session;
        if s.heartbeat_period_ms == 0 || s.telemetry_period_ms == 0 {
            return Err("session: periods must be positive".into());
        }
        if !(s.scan_threshold > 0.0 && s.standoff >= 0.0 && s.jog_step > 0.0 && s.jog_angle > 0.0) {
            return Err("session: scan_threshold, jog_step and jog_angle must be positive".into());
        }
        if self.robot_fiducials.len() != self.scene.fiducials.len() {
            return Err(format!(
                "robot_fiducials: {} points but the scene has {}",
                self.robot_fiducials.len(),
                self.scene.fiducials.len()
            ));
        }
        if !self.robot.limits.is_valid(&self.controller.initial) {
            return Err("controller.initial: outside joint limits".into());
        }
        Ok(())
    }
}

/// How planning jobs run.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanMode {
    /// On the session thread; the result lands in the same tick.
    Inline,
    /// On a worker thread; the result lands at the first tick after it finishes.
    Background,
    /// Inline, but each result is held until the given tick (from a log).
    Replay(VecDeque<u64>),
}

/// One line of the JSONL event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        v: u8,
        config: Box<SessionConfig>,
    },
    Operator {
        tick: u64,
        command: OperatorCommand,
    },
    Transition {
        tick: u64,
        event: String,
        from: WorkflowStep,
        to: WorkflowStep,
        halted: bool,
    },
    Rejected {
        tick: u64,
        event: String,
        reason: String,
    },
    PlanDone {
        tick: u64,
        ok: bool,
        message: String,
    },
    Safety {
        tick: u64,
        mode: SafetyMode,
        reason: FaultReason,
    },
    ControllerRejected {
        tick: u64,
        acked_seq: u32,
        status: u8,
    },
    Scan {
        tick: u64,
        result: ScanResult,
    },
    Notice {
        tick: u64,
        message: String,
    },
    Monitor {
        tick: u64,
        message: String,
    },
    Telemetry {
        tick: u64,
        telemetry: Box<Telemetry>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorTrip {
    pub tick: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub monitor: Vec<MonitorTrip>,
    /// Reasons of every controller fault observed, in order.
    pub faults: Vec<FaultReason>,
    pub plan_failures: Vec<String>,
    pub infeasible: bool,
    pub heartbeats_sent: u64,
    pub setpoints_sent: u64,
    pub controller_rejections: u64,
    pub malformed_reported: u64,
    /// Largest |measured - commanded| over motor joints while streaming a
    /// planned move with the controller enabled.
    pub max_tracking_error: f64,
}

/// Where the session writes its logs.
#[derive(Default)]
pub struct SessionIo {
    pub event_log: Option<Box<dyn Write + Send>>,
    pub joint_log: Option<Box<dyn Write + Send>>,
    /// Keep every log record in memory as well.
    pub keep_records: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TargetSpec {
    target: Vec3,
    axis: Vec3,
    standoff: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Motion {
    Stream(VecDeque<JointConfig>),
    Jog { axis: JogAxis, dir: i8 },
    Insert { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Active {
    Stream(VecDeque<JointConfig>),
    Jog { v: SVector<f64, 5>, ticks_left: u64 },
    Insert { goal: f64 },
    Settle { goal: JointConfig, deadline: u64, finishes_move: bool },
}

struct PlanJob {
    cancel: Arc<AtomicBool>,
    rx: mpsc::Receiver<Result<PlanOutcome, PlanningError>>,
}

const RESEND_TICKS: u64 = 20;

pub struct Session {
    cfg: SessionConfig,
    link: Box<dyn ControllerLink>,
    downlink: Downlink,
    ctx: PlanningContext,
    calibration: Option<Registration>,
    wf: WorkflowState,
    tick: u64,
    tx_seq: u32,
    control_out: Vec<Message>,
    fb: Option<Feedback>,
    last_fb_seq: Option<u32>,
    safety: SafetyMode,
    fault_reason: FaultReason,
    auto_enabled: bool,
    commanded: JointConfig,
    last_sent_tick: Option<u64>,
    resend: bool,
    queue: VecDeque<Motion>,
    active: Option<Active>,
    depth_goal: f64,
    target: Option<TargetSpec>,
    plan: Option<PlanOutcome>,
    plan_mode: PlanMode,
    job: Option<PlanJob>,
    held: Option<(u64, Result<PlanOutcome, PlanningError>)>,
    rng: ChaCha8Rng,
    last_scan: Option<ScanResult>,
    notice: Option<String>,
    telemetry: Option<Telemetry>,
    io: SessionIo,
    records: Vec<LogRecord>,
    pub stats: SessionStats,
}

impl Session {
    pub fn new(cfg: SessionConfig, link: Box<dyn ControllerLink>, plan_mode: PlanMode, io: SessionIo) -> io::Result<Self> {
        cfg.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let ctx = PlanningContext::new(cfg.robot.model(), CollisionWorld::empty(), cfg.robot.shape);
        let mut s = Self {
            downlink: Downlink::new(cfg.faults.clone(), cfg.seed.wrapping_add(1)),
            ctx,
            calibration: None,
            wf: WorkflowState::default(),
            tick: 0,
            tx_seq: 0,
            control_out: vec![],
            fb: None,
            last_fb_seq: None,
            safety: SafetyMode::Boot,
            fault_reason: FaultReason::None,
            auto_enabled: false,
            commanded: cfg.controller.initial,
            last_sent_tick: None,
            resend: false,
            queue: VecDeque::new(),
            active: None,
            depth_goal: cfg.controller.initial[DOF - 1],
            target: None,
            plan: None,
            plan_mode,
            job: None,
            held: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_scan: None,
            notice: None,
            telemetry: None,
            io,
            records: vec![],
            stats: SessionStats::default(),
            link,
            cfg,
        };
        if let Some(w) = s.io.joint_log.as_mut() {
            crate::control_sim::write_session_csv_header(w)?;
        }
        s.log(LogRecord::Header {
            v: SCHEMA_VERSION,
            config: Box::new(s.cfg.clone()),
        });
        s.apply_event(WorkflowEvent::FiducialsLoaded).ok();
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn workflow(&self) -> WorkflowState {
        self.wf
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn now_ns(&self) -> u64 {
        self.tick * TICK_NS
    }

    pub fn safety(&self) -> SafetyMode {
        self.safety
    }

    pub fn last_feedback(&self) -> Option<&Feedback> {
        self.fb.as_ref()
    }

    pub fn calibration(&self) -> Option<&Registration> {
        self.calibration.as_ref()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn last_scan(&self) -> Option<&ScanResult> {
        self.last_scan.as_ref()
    }

    pub fn plan(&self) -> Option<&PlanOutcome> {
        self.plan.as_ref()
    }

    /// Nothing planned, moving or waiting.
    pub fn is_idle(&self) -> bool {
        !self.wf.planning && self.job.is_none() && self.held.is_none() && self.active.is_none() && self.queue.is_empty()
    }

    /// Needle pose in the scanner frame from the latest feedback.
    pub fn needle_pose(&self) -> Option<NeedlePose> {
        let (fb, cal) = (self.fb.as_ref()?, self.calibration.as_ref()?);
        let pose = self.ctx.model.frames_unchecked(&JointConfig(fb.position)).pose();
        Some(cal.transform.apply_pose(&pose))
    }

    /// The telemetry snapshot produced by the last step, if one was due.
    pub fn take_telemetry(&mut self) -> Option<Telemetry> {
        self.telemetry.take()
    }

    fn log(&mut self, rec: LogRecord) {
        if let Some(w) = self.io.event_log.as_mut() {
            let line = serde_json::to_string(&rec).expect("log records serialize");
            if let Err(e) = writeln!(w, "{line}") {
                log::warn!("event log write failed: {e}");
            }
        }
        if self.io.keep_records {
            self.records.push(rec);
        }
    }

    fn trip(&mut self, message: String) {
        log::error!("invariant monitor: {message}");
        self.log(LogRecord::Monitor {
            tick: self.tick,
            message: message.clone(),
        });
        self.stats.monitor.push(MonitorTrip {
            tick: self.tick,
            message,
        });
    }

    fn note(&mut self, message: String) {
        log::info!("{message}");
        self.log(LogRecord::Notice {
            tick: self.tick,
            message: message.clone(),
        });
        self.notice = Some(message);
    }

    /// Handles an operator command and returns the reply for the operator.
    pub fn handle_command(&mut self, cmd: OperatorCommand) -> Outbound {
        self.log(LogRecord::Operator {
            tick: self.tick,
            command: cmd.clone(),
        });
        let name = cmd.name();
        match self.command_event(cmd).and_then(|ev| self.apply_event(ev).map_err(|e| e.to_string())) {
            Ok(()) => Outbound::ack(name),
            Err(reason) => {
                self.log(LogRecord::Rejected {
                    tick: self.tick,
                    event: name.into(),
                    reason: reason.clone(),
                });
                Outbound::error(reason, self.wf.step)
            }
        }
    }

    fn command_event(&mut self, cmd: OperatorCommand) -> Result<WorkflowEvent, String> {
        Ok(match cmd {
            OperatorCommand::SetTarget {
                target,
                entry,
                standoff_mm,
            } => {
                let target = target.map(Vec3::from).unwrap_or(self.cfg.scene.target);
                let entry = entry
                    .map(Vec3::from)
                    .or(self.cfg.scene.entry_hint)
                    .ok_or("no entry point given and the scene has no entry_hint")?;
                let standoff = standoff_mm.map(|mm| mm * 1e-3).unwrap_or(self.cfg.session.standoff);
                let axis = target - entry;
                if !(axis.norm() > 1e-9 && standoff.is_finite() && standoff >= 0.0) {
                    return Err("target must differ from entry and standoff must be non-negative".into());
                }
                if self.wf.halted || !matches!(self.wf.step, WorkflowStep::PlanSetup | WorkflowStep::Review) {
                    // let the workflow produce the rejection
                    return Ok(WorkflowEvent::SetTarget);
                }
                self.target = Some(TargetSpec {
                    target,
                    axis: axis.normalize(),
                    standoff,
                });
                WorkflowEvent::SetTarget
            }
            OperatorCommand::ConfirmSetup => WorkflowEvent::Confirm,
            OperatorCommand::Jog { axis, dir } => {
                if dir != 1 && dir != -1 {
                    return Err("jog dir must be 1 or -1".into());
                }
                WorkflowEvent::Jog { axis, dir }
            }
            OperatorCommand::Insert { mm } | OperatorCommand::Retract { mm } if !(mm.is_finite() && mm > 0.0) => {
                return Err("distance must be positive".into())
            }
            OperatorCommand::Insert { mm } => WorkflowEvent::Insert { delta_m: mm * 1e-3 },
            OperatorCommand::Retract { mm } => {
                if self.depth_goal - mm * 1e-3 < -1e-12 {
                    return Err(format!(
                        "cannot retract {mm} mm from a depth of {:.3} mm",
                        self.depth_goal * 1e3
                    ));
                }
                WorkflowEvent::Insert { delta_m: -mm * 1e-3 }
            }
            OperatorCommand::RequestScan => WorkflowEvent::RequestScan,
            OperatorCommand::Estop => WorkflowEvent::Estop,
            OperatorCommand::ClearFault => WorkflowEvent::ClearFault,
            OperatorCommand::Enable => WorkflowEvent::Enable,
        })
    }

    fn apply_event(&mut self, ev: WorkflowEvent) -> Result<(), WorkflowError> {
        let from = self.wf;
        let (to, cmds) = advance_workflow(&self.wf, &ev)?;
        self.wf = to;
        if from.step != to.step || from.halted != to.halted {
            log::info!("workflow {} -> {} on {}", from.step, to.step, ev.name());
            self.log(LogRecord::Transition {
                tick: self.tick,
                event: ev.name().into(),
                from: from.step,
                to: to.step,
                halted: to.halted,
            });
        }
        for c in cmds {
            self.execute(c);
        }
        Ok(())
    }

    fn execute(&mut self, c: Command) {
        match c {
            Command::Register => self.register(),
            Command::StartPlanning => self.start_planning(),
            Command::CancelPlanning => {
                if let Some(job) = self.job.take() {
                    job.cancel.store(true, Ordering::Relaxed);
                }
                self.held = None;
            }
            Command::StreamTrajectory => {
                let plan = self.plan.as_ref().expect("REVIEW implies a plan");
                let mut samples: VecDeque<JointConfig> =
                    plan.trajectory.samples().into_iter().map(|(_, q)| q).collect();
                samples.pop_front();
                self.queue.push_back(Motion::Stream(samples));
            }
            Command::StopMotion => {
                self.queue.clear();
                self.active = None;
            }
            Command::Jog { axis, dir } => self.queue.push_back(Motion::Jog { axis, dir }),
            Command::Insert { delta_m } => {
                self.depth_goal += delta_m;
                self.queue.push_back(Motion::Insert { delta: delta_m });
            }
            Command::Scan => self.scan(),
            Command::SendEstop => self.control_out.push(Message::Estop { pressed: true }),
            Command::SendClearFault => {
                self.control_out.push(Message::Estop { pressed: false });
                self.control_out.push(Message::Disable);
            }
            Command::SendEnable => self.control_out.push(Message::Enable),
            Command::Report { message } => {
                self.stats.plan_failures.push(message.clone());
                self.note(message);
            }
        }
    }

    fn register(&mut self) {
        let fid = FiducialSet {
            robot: self.cfg.robot_fiducials.clone(),
            scanner: self.cfg.scene.fiducials.clone(),
        };
        match register(&fid) {
            Ok(reg) => {
                self.ctx.world = CollisionWorld::from_scene(&self.cfg.scene, &reg.transform);
                self.note(format!("registered robot to scanner, FRE {:.3} mm", reg.fre * 1e3));
                self.calibration = Some(reg);
                self.apply_event(WorkflowEvent::Registered).ok();
            }
            Err(e) => {
                self.apply_event(WorkflowEvent::RegistrationFailed { reason: e.to_string() }).ok();
            }
        }
    }

    fn plan_request(&self) -> Option<PlanRequest> {
        let spec = self.target?;
        let cal = self.calibration.as_ref()?;
        let setup_scanner = NeedlePose::new(spec.target - spec.axis * spec.standoff, spec.axis);
        let setup_pose = cal.transform.inverse().apply_pose(&setup_scanner);
        let start = match &self.fb {
            Some(fb) => self.ctx.model.limits.clamp(&JointConfig(fb.position)),
            None => self.commanded,
        };
        let mut ctx = self.ctx.clone();
        ctx.collision.needle_exempt_length = start[DOF - 1];
        Some(PlanRequest {
            ctx,
            setup_pose,
            start,
            weights: self.cfg.weights,
            setup: self.cfg.setup,
            planner: self.cfg.planner,
            limits: self.cfg.motion_limits,
        })
    }

    fn start_planning(&mut self) {
        let Some(req) = self.plan_request() else {
            self.apply_event(WorkflowEvent::PlanFailed {
                reason: "no target set".into(),
            })
            .ok();
            return;
        };
        match &mut self.plan_mode {
            PlanMode::Inline => {
                let r = compute_plan(&req, None);
                self.deliver_plan(r);
            }
            PlanMode::Replay(ticks) => {
                let r = compute_plan(&req, None);
                match ticks.pop_front() {
                    Some(at) if at > self.tick => self.held = Some((at, r)),
                    _ => self.deliver_plan(r),
                }
            }
            PlanMode::Background => {
                let cancel = Arc::new(AtomicBool::new(false));
                let (tx, rx) = mpsc::channel();
                let flag = cancel.clone();
                std::thread::spawn(move || {
                    tx.send(compute_plan(&req, Some(&flag))).ok();
                });
                self.job = Some(PlanJob { cancel, rx });
            }
        }
    }

    fn poll_plan(&mut self) {
        if let Some(job) = &self.job {
            match job.rx.try_recv() {
                Ok(r) => {
                    self.job = None;
                    self.deliver_plan(r);
                }
                Err(mpsc::TryRecvError::Empty) => {}
                Err(mpsc::TryRecvError::Disconnected) => {
                    self.job = None;
                    self.deliver_plan(Err(PlanningError::Cancelled));
                }
            }
        }
        if self.held.as_ref().is_some_and(|(at, _)| *at <= self.tick) {
            let (_, r) = self.held.take().expect("checked");
            self.deliver_plan(r);
        }
    }

    fn deliver_plan(&mut self, r: Result<PlanOutcome, PlanningError>) {
        self.log(LogRecord::PlanDone {
            tick: self.tick,
            ok: r.is_ok(),
            message: match &r {
                Ok(p) => format!(
                    "setup U={:.6} w={:.3e} clearance={:.4} m, {} waypoints, {:.3} s",
                    p.setup.objective,
                    p.setup.manipulability,
                    p.setup.clearance,
                    p.path.waypoints.len(),
                    p.trajectory.duration()
                ),
                Err(e) => e.to_string(),
            },
        });
        match r {
            Ok(p) => {
                let was = self.wf;
                self.apply_event(WorkflowEvent::PlanReady).ok();
                if was.planning && self.wf.step == WorkflowStep::Review {
                    self.plan = Some(p);
                }
            }
            Err(e) => {
                if is_infeasible(&e) {
                    self.stats.infeasible = true;
                }
                self.apply_event(WorkflowEvent::PlanFailed { reason: e.to_string() }).ok();
            }
        }
    }

    fn scan(&mut self) {
        let (Some(truth), Some(spec)) = (self.needle_pose(), self.target) else {
            self.note("scan unavailable: no feedback or target yet".into());
            return;
        };
        let measured = confirmation_scan(&truth, &self.cfg.session.scan_noise, &mut self.rng);
        let result = evaluate_scan(measured, &spec.target, self.cfg.session.scan_threshold);
        self.log(LogRecord::Scan {
            tick: self.tick,
            result,
        });
        self.note(format!(
            "scan {}: tip {:.3} mm from target",
            self.wf.scans,
            result.tip_error * 1e3
        ));
        self.last_scan = Some(result);
        self.apply_event(WorkflowEvent::ScanResult { within: result.within }).ok();
    }

    fn motion_permitted(&self) -> bool {
        self.wf.step.allows_motion() && !self.wf.halted && self.safety == SafetyMode::Enabled
    }

    fn jog_twist(&self, axis: JogAxis, dir: i8) -> (SVector<f64, 5>, u64) {
        let dt = TICK_NS as f64 * 1e-9;
        let to_robot = self
            .calibration
            .as_ref()
            .map(|c| c.transform.inverse())
            .unwrap_or_default();
        let sign = dir as f64;
        let unit = |i: usize| {
            let mut e = Vec3::zeros();
            e[i] = sign;
            to_robot.apply_vector(&e)
        };
        let mut v = SVector::<f64, 5>::zeros();
        let ticks;
        match axis {
            JogAxis::X | JogAxis::Y | JogAxis::Z => {
                let i = axis as usize;
                let amount = self.cfg.session.jog_step;
                ticks = (amount / (self.cfg.teleop.max_linear_speed * dt)).ceil().max(1.0) as u64;
                let speed = amount / (ticks as f64 * dt);
                v.fixed_rows_mut::<3>(0).copy_from(&(unit(i) * speed));
            }
            JogAxis::A | JogAxis::B => {
                let w = unit(if axis == JogAxis::A { 0 } else { 1 });
                let u = self.ctx.model.frames_unchecked(&self.commanded).axis;
                let (b1, b2) = perp_basis(&u);
                let amount = self.cfg.session.jog_angle;
                ticks = (amount / (self.cfg.teleop.max_angular_speed * dt)).ceil().max(1.0) as u64;
                let speed = amount / (ticks as f64 * dt);
                v[3] = w.dot(&b1) * speed;
                v[4] = w.dot(&b2) * speed;
            }
        }
        (v, ticks)
    }

    /// The SETPOINT for this tick, if any.
    fn next_setpoint(&mut self) -> Option<[f64; DOF]> {
        if !self.motion_permitted() {
            return None;
        }
        if self.active.is_none() {
            let m = self.queue.pop_front()?;
            self.active = Some(match m {
                Motion::Stream(s) => Active::Stream(s),
                Motion::Jog { axis, dir } => {
                    let (v, ticks_left) = self.jog_twist(axis, dir);
                    Active::Jog { v, ticks_left }
                }
                Motion::Insert { delta } => {
                    self.commanded[DOF - 1] = (self.commanded[DOF - 1] + delta).max(0.0);
                    self.resend = true;
                    Active::Insert {
                        goal: self.commanded[DOF - 1],
                    }
                }
            });
        }
        let settle_deadline = self.tick + self.cfg.session.settle_timeout_ms;
        match self.active.as_mut().expect("set above") {
            Active::Stream(samples) => {
                let q = samples.pop_front();
                if let Some(q) = q {
                    self.commanded = q;
                }
                if samples.is_empty() {
                    self.active = Some(Active::Settle {
                        goal: self.commanded,
                        deadline: settle_deadline,
                        finishes_move: true,
                    });
                }
                Some(self.commanded.0)
            }
            Active::Jog { v, ticks_left } => {
                let v = *v;
                *ticks_left -= 1;
                let done = *ticks_left == 0;
                let dt = TICK_NS as f64 * 1e-9;
                match resolved_rate_step(&self.ctx, &self.cfg.weights, &self.commanded, &v, dt, &self.cfg.teleop) {
                    Ok(q) => self.commanded = q,
                    Err(e) => {
                        self.note(format!("jog stopped: {e}"));
                        self.active = None;
                        return None;
                    }
                }
                if done {
                    self.active = Some(Active::Settle {
                        goal: self.commanded,
                        deadline: settle_deadline,
                        finishes_move: false,
                    });
                }
                Some(self.commanded.0)
            }
            Active::Insert { .. } | Active::Settle { .. } => {
                let stale = self.last_sent_tick.is_none_or(|t| self.tick >= t + RESEND_TICKS);
                if std::mem::take(&mut self.resend) || stale {
                    Some(self.commanded.0)
                } else {
                    None
                }
            }
        }
    }

    /// Completion checks that depend on fresh feedback.
    fn check_motion_done(&mut self) {
        let Some(fb) = self.fb else { return };
        match self.active {
            Some(Active::Settle {
                goal,
                deadline,
                finishes_move,
            }) => {
                let err = (0..DOF - 1)
                    .map(|j| (fb.position[j] - goal[j]).abs())
                    .fold(0.0, f64::max);
                let timed_out = self.tick >= deadline;
                if err <= self.cfg.session.settle_tolerance || timed_out {
                    if timed_out {
                        self.note(format!("settle timed out with {err:.4} residual"));
                    }
                    self.active = None;
                    if finishes_move {
                        self.apply_event(WorkflowEvent::TrajectoryDone).ok();
                    }
                }
            }
            Some(Active::Insert { goal }) => {
                let busy = fb.clutch_bits & 1 << 4 != 0;
                if !busy && (fb.position[DOF - 1] - goal).abs() < 1e-9 {
                    self.active = None;
                }
            }
            _ => {}
        }
    }

    fn send(&mut self, t_ns: u64, msg: Message) {
        if let Message::Setpoint(_) = msg {
            if !self.motion_permitted() {
                let m = format!(
                    "SETPOINT while {} (halted={}, safety={:?})",
                    self.wf.step, self.wf.halted, self.safety
                );
                self.trip(m);
            }
            self.stats.setpoints_sent += 1;
            self.last_sent_tick = Some(self.tick);
        }
        if msg == Message::Heartbeat {
            self.stats.heartbeats_sent += 1;
        }
        let seq = self.tx_seq.wrapping_add(1);
        if seq <= self.tx_seq {
            self.trip(format!("outgoing seq wrapped at {}", self.tx_seq));
        }
        self.tx_seq = seq;
        self.downlink.send(t_ns, &Frame::new(seq, t_ns, msg));
    }

    fn on_frame(&mut self, f: Frame) {
        match f.msg {
            Message::Feedback(fb) => {
                if self.last_fb_seq.is_some_and(|s| f.seq <= s) {
                    self.trip(format!("feedback seq {} after {:?}", f.seq, self.last_fb_seq));
                }
                self.last_fb_seq = Some(f.seq);
                if f.flags & FLAG_MALFORMED_SEEN != 0 {
                    self.stats.malformed_reported += 1;
                }
                self.on_feedback(fb);
            }
            Message::Ack { status, acked_seq } if status != 0 => {
                self.stats.controller_rejections += 1;
                self.log(LogRecord::ControllerRejected {
                    tick: self.tick,
                    acked_seq,
                    status,
                });
            }
            _ => {}
        }
    }

    fn on_feedback(&mut self, fb: Feedback) {
        let mode = SafetyMode::from_code(fb.safety).unwrap_or(SafetyMode::FaultLatched);
        let reason = FaultReason::from_code(fb.fault).unwrap_or(FaultReason::None);
        let prev = self.safety;
        if prev == SafetyMode::FaultLatched && mode == SafetyMode::Enabled {
            self.trip("controller went from FAULT_LATCHED to ENABLED without IDLE".into());
        }
        if matches!(self.active, Some(Active::Stream(_))) && mode == SafetyMode::Enabled {
            let err = (0..DOF - 1)
                .map(|j| (fb.position[j] - self.commanded[j]).abs())
                .fold(0.0, f64::max);
            self.stats.max_tracking_error = self.stats.max_tracking_error.max(err);
        }
        self.fb = Some(fb);
        self.safety = mode;
        self.fault_reason = reason;
        if mode != prev {
            self.log(LogRecord::Safety {
                tick: self.tick,
                mode,
                reason,
            });
            match mode {
                SafetyMode::FaultLatched => {
                    self.stats.faults.push(reason);
                    self.note(format!("controller fault: {reason:?}"));
                    self.queue.clear();
                    self.active = None;
                    self.apply_event(WorkflowEvent::ControllerFault).ok();
                }
                SafetyMode::Enabled => {
                    // the controller holds where it is; continue from there
                    self.commanded.0[..DOF - 1].copy_from_slice(&fb.position[..DOF - 1]);
                }
                SafetyMode::Idle if !self.auto_enabled && self.cfg.session.auto_enable => {
                    self.auto_enabled = true;
                    self.control_out.push(Message::Enable);
                }
                _ => {}
            }
        }
        if mode != SafetyMode::Enabled && self.active.is_some() {
            self.queue.clear();
            self.active = None;
        }
    }

    fn build_telemetry(&self) -> Telemetry {
        let fb = self.fb.unwrap_or(Feedback {
            position: self.commanded.0,
            velocity: [0.0; DOF],
            clutch_temps: [0.0; 2],
            safety: SafetyMode::Boot.code(),
            clutch_bits: 0,
            fault: 0,
        });
        let cal = self.calibration.as_ref().map(|c| c.transform);
        Telemetry {
            v: SCHEMA_VERSION,
            t_ns: self.now_ns(),
            workflow: self.wf.step,
            halted: self.wf.halted,
            planning: self.wf.planning,
            moving: self.active.is_some() || !self.queue.is_empty(),
            q: fb.position,
            setpoint: self.commanded.0,
            needle: self.needle_pose(),
            depth: fb.position[DOF - 1],
            safety: SafetyView {
                mode: self.safety,
                reason: self.fault_reason,
            },
            clutch: ClutchView::from_feedback(fb.clutch_temps, fb.clutch_bits),
            target: self.target.map(|t| t.target.into()),
            plan: self.plan.as_ref().zip(cal).map(|(p, c)| PlanPreview {
                waypoints: p.path.waypoints.clone(),
                setup_needle: c.apply_pose(&p.setup_pose),
                duration_s: p.trajectory.duration(),
                manipulability: p.setup.manipulability,
                clearance: p.setup.clearance,
            }),
            scan: self.last_scan,
            scans: self.wf.scans,
            notice: self.notice.clone(),
        }
    }

    /// Advances one control period.
    pub fn step(&mut self) -> io::Result<()> {
        let t = self.now_ns();
        self.poll_plan();
        let mut out = vec![];
        if t % (self.cfg.session.heartbeat_period_ms * TICK_NS) == 0 {
            out.push(Message::Heartbeat);
        }
        out.append(&mut self.control_out);
        if let Some(q) = self.next_setpoint() {
            out.push(Message::Setpoint(q));
        }
        for m in out {
            self.send(t, m);
        }
        let due = self.downlink.due(t);
        let overrun = self.downlink.overruns(self.tick);
        let frames = self.link.exchange(due, overrun)?;
        self.tick += 1;
        for f in frames {
            self.on_frame(f);
        }
        self.check_motion_done();
        if let (Some(w), Some(fb)) = (self.io.joint_log.as_mut(), self.fb.as_ref()) {
            crate::control_sim::write_session_csv_row(w, self.tick * TICK_NS, fb, &self.commanded.0)?;
        }
        if self.tick % self.cfg.session.telemetry_period_ms == 0 {
            let tel = self.build_telemetry();
            self.log(LogRecord::Telemetry {
                tick: self.tick,
                telemetry: Box::new(tel.clone()),
            });
            self.telemetry = Some(tel);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if let Some(w) = self.io.event_log.as_mut() {
            w.flush()?;
        }
        if let Some(w) = self.io.joint_log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}
