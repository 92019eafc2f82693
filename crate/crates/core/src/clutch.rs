//! Two-clutch inchworm needle driver with a first-order SMA thermal model.
//!
//! HOLD grounds the needle to the frame, DRIVE grips it to the insertion
//! stage. Positions are integer nanometers so plans execute exactly.

use serde::{Deserialize, Serialize};
use std::collections::{HashSet, VecDeque};

pub const NM_PER_M: f64 = 1e9;

pub fn to_nm(m: f64) -> i64 {
    (m * NM_PER_M).round() as i64
}

pub fn from_nm(nm: i64) -> f64 {
    nm as f64 / NM_PER_M
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermalParams {
    /// Heat capacity (J/K).
    pub c_th: f64,
    /// Thermal resistance to ambient (K/W).
    pub r_th: f64,
    pub t_amb: f64,
    pub p_max: f64,
    pub t_engage: f64,
    pub t_release: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            c_th: 0.05,
            r_th: 20.0,
            t_amb: 22.0,
            p_max: 5.0,
            t_engage: 70.0,
            t_release: 45.0,
        }
    }
}

impl ThermalParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.c_th > 0.0 && self.r_th > 0.0 && self.p_max > 0.0) {
            return Err("c_th, r_th and p_max must be positive".into());
        }
        if !(self.t_engage > self.t_release && self.t_release > self.t_amb) {
            return Err("need t_engage > t_release > t_amb".into());
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.r_th * self.c_th
    }

    pub fn t_max(&self) -> f64 {
        self.t_amb + self.p_max * self.r_th
    }
}

/// Explicit Euler step of `C dT/dt = P - (T - T_amb)/R`.
pub fn thermal_step(p: &ThermalParams, temp: f64, power: f64, dt: f64) -> f64 {
    let power = power.clamp(0.0, p.p_max);
    temp + dt * (power - (temp - p.t_amb) / p.r_th) / p.c_th
}

/// Bang-bang controller with a hysteresis band around `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BangBang {
    pub target: f64,
    pub band: f64,
    pub on: bool,
}

impl BangBang {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            band: 2.0,
            on: false,
        }
    }

    pub fn step(&mut self, temp: f64, p_max: f64) -> f64 {
        if temp < self.target - self.band {
            self.on = true;
        } else if temp > self.target + self.band {
            self.on = false;
        }
        if self.on {
            p_max
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClutchPhase {
    Released,
    Heating,
    Engaged,
    Cooling,
}

impl ClutchPhase {
    pub fn code(self) -> u8 {
        match self {
            ClutchPhase::Released => 0,
            ClutchPhase::Heating => 1,
            ClutchPhase::Engaged => 2,
            ClutchPhase::Cooling => 3,
        }
    }

    pub fn from_code(c: u8) -> Self {
        match c & 3 {
            0 => ClutchPhase::Released,
            1 => ClutchPhase::Heating,
            2 => ClutchPhase::Engaged,
            _ => ClutchPhase::Cooling,
        }
    }
}

/// Phase update given the command and which temperature thresholds are met.
pub fn next_phase(phase: ClutchPhase, engage: bool, hot: bool, cold: bool) -> ClutchPhase {
    use ClutchPhase::*;
    match (engage, phase) {
        (true, Released | Cooling | Heating) => {
            if hot {
                Engaged
            } else {
                Heating
            }
        }
        (true, Engaged) => Engaged,
        (false, Engaged | Heating | Cooling) => {
            if cold {
                Released
            } else {
                Cooling
            }
        }
        (false, Released) => Released,
    }
}

/// Engaged clutches are held this far above the engage threshold.
pub const HOLD_MARGIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clutch {
    pub phase: ClutchPhase,
    pub temp: f64,
    pub engage: bool,
    pub control: BangBang,
}

impl Clutch {
    pub fn released(p: &ThermalParams) -> Self {
        Self {
            phase: ClutchPhase::Released,
            temp: p.t_amb,
            engage: false,
            control: BangBang::new(p.t_engage + HOLD_MARGIN),
        }
    }

    pub fn engaged(p: &ThermalParams) -> Self {
        Self {
            phase: ClutchPhase::Engaged,
            temp: p.t_engage + HOLD_MARGIN,
            engage: true,
            control: BangBang::new(p.t_engage + HOLD_MARGIN),
        }
    }

    fn tick(&mut self, p: &ThermalParams, dt: f64) {
        let power = if self.engage {
            self.control.step(self.temp, p.p_max)
        } else {
            self.control.on = false;
            0.0
        };
        self.temp = thermal_step(p, self.temp, power, dt);
        self.phase = next_phase(self.phase, self.engage, self.temp >= p.t_engage, self.temp <= p.t_release);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStep {
    EngageDrive,
    ReleaseDrive,
    EngageHold,
    ReleaseHold,
    /// Stage displacement in nm; `carrying` means DRIVE moves the needle.
    Stage { delta_nm: i64, carrying: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub delta_nm: i64,
    pub stroke_nm: i64,
    pub cycles: Vec<i64>,
    pub steps: Vec<CycleStep>,
}

impl InsertionPlan {
    pub fn net_motion_nm(&self) -> i64 {
        self.steps
            .iter()
            .map(|s| match s {
                CycleStep::Stage { delta_nm, carrying: true } => *delta_nm,
                _ => 0,
            })
            .sum()
    }
}

/// Splits `delta` (m, signed) into strokes of at most `stroke` and lays out
/// the clutch sequence. Insertion carries the needle on the outward stroke;
/// retraction goes out empty and carries it back.
pub fn plan_insertion(delta: f64, stroke: f64) -> InsertionPlan {
    assert!(stroke > 0.0, "stroke must be positive");
    let delta_nm = to_nm(delta);
    let stroke_nm = to_nm(stroke).max(1);
    let mut cycles = vec![];
    let mut left = delta_nm.abs();
    while left > 0 {
        let m = left.min(stroke_nm);
        cycles.push(m * delta_nm.signum());
        left -= m;
    }
    let mut steps = vec![];
    for &m in &cycles {
        if m > 0 {
            steps.extend([
                CycleStep::EngageDrive,
                CycleStep::ReleaseHold,
                CycleStep::Stage { delta_nm: m, carrying: true },
                CycleStep::EngageHold,
                CycleStep::ReleaseDrive,
                CycleStep::Stage { delta_nm: -m, carrying: false },
            ]);
        } else {
            steps.extend([
                CycleStep::Stage { delta_nm: -m, carrying: false },
                CycleStep::EngageDrive,
                CycleStep::ReleaseHold,
                CycleStep::Stage { delta_nm: m, carrying: true },
                CycleStep::EngageHold,
                CycleStep::ReleaseDrive,
            ]);
        }
    }
    InsertionPlan {
        delta_nm,
        stroke_nm,
        cycles,
        steps,
    }
}

/// What a step asks of the clutches and whether it may finish or move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    pub hold_engage: bool,
    pub drive_engage: bool,
    pub done: bool,
    /// Stage motion allowed this tick (stage steps only).
    pub may_move: bool,
    /// The step's precondition is violated.
    pub fault: bool,
}

/// Shared by the concrete driver and the abstract reachability search.
pub fn step_gate(step: CycleStep, hold: ClutchPhase, drive: ClutchPhase, hold_cmd: bool, drive_cmd: bool) -> Gate {
    use ClutchPhase::*;
    let g = |h, d, done| Gate {
        hold_engage: h,
        drive_engage: d,
        done,
        may_move: false,
        fault: false,
    };
    match step {
        CycleStep::EngageDrive => g(hold_cmd, true, drive == Engaged),
        CycleStep::ReleaseDrive => {
            // never let go of the needle with nothing else holding it
            if hold != Engaged {
                Gate { fault: true, ..g(hold_cmd, true, false) }
            } else {
                g(hold_cmd, false, drive == Released)
            }
        }
        CycleStep::EngageHold => g(true, drive_cmd, hold == Engaged),
        CycleStep::ReleaseHold => {
            if drive != Engaged {
                Gate { fault: true, ..g(true, drive_cmd, false) }
            } else {
                g(false, drive_cmd, hold == Released)
            }
        }
        CycleStep::Stage { carrying, .. } => {
            let ok = if carrying {
                drive == Engaged && hold == Released
            } else {
                hold == Engaged && drive == Released
            };
            Gate {
                may_move: ok,
                fault: !ok,
                ..g(hold_cmd, drive_cmd, false)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClutchConfig {
    pub thermal: ThermalParams,
    pub stroke: f64,
    /// Stage speed (m/s).
    pub stage_speed: f64,
    /// A thermal wait longer than this is a clutch fault (s).
    pub thermal_timeout: f64,
}

impl Default for ClutchConfig {
    fn default() -> Self {
        Self {
            thermal: ThermalParams::default(),
            stroke: 0.05,
            stage_speed: 0.02,
            thermal_timeout: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClutchFault {
    ThermalTimeout,
    Ungripped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutchDriver {
    pub cfg: ClutchConfig,
    pub hold: Clutch,
    pub drive: Clutch,
    pub stage_nm: i64,
    pub depth_nm: i64,
    /// Stage velocity over the last tick (nm per tick).
    pub stage_step_nm: i64,
    stage_carrying: bool,
    pub loaded: bool,
    pub fault: Option<ClutchFault>,
    queue: VecDeque<CycleStep>,
    /// Remaining displacement of the active stage step.
    stage_left_nm: i64,
    active: Option<CycleStep>,
    wait_s: f64,
}

impl ClutchDriver {
    /// Boot state: needle loaded and grounded by HOLD, stage at its origin.
    pub fn new(cfg: ClutchConfig) -> Self {
        Self {
            hold: Clutch::engaged(&cfg.thermal),
            drive: Clutch::released(&cfg.thermal),
            cfg,
            stage_nm: 0,
            depth_nm: 0,
            stage_step_nm: 0,
            stage_carrying: false,
            loaded: true,
            fault: None,
            queue: VecDeque::new(),
            stage_left_nm: 0,
            active: None,
            wait_s: 0.0,
        }
    }

    pub fn depth(&self) -> f64 {
        from_nm(self.depth_nm)
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some() || !self.queue.is_empty()
    }

    pub fn enqueue(&mut self, steps: impl IntoIterator<Item = CycleStep>) {
        self.queue.extend(steps);
    }

    pub fn start_plan(&mut self, plan: &InsertionPlan) {
        self.enqueue(plan.steps.iter().copied());
    }

    /// Bitfield for feedback frames: HOLD phase in bits 0-1, DRIVE phase in
    /// bits 2-3, bit 4 busy, bit 5 faulted, bit 6 needle loaded.
    pub fn bitfield(&self) -> u8 {
        self.hold.phase.code()
            | self.drive.phase.code() << 2
            | (self.is_busy() as u8) << 4
            | (self.fault.is_some() as u8) << 5
            | (self.loaded as u8) << 6
    }

    /// Advances one control period. Stage motion only happens when
    /// `motion_permitted`; thermal control always runs. Returns a fault
    /// raised during this tick.
    pub fn tick(&mut self, dt: f64, motion_permitted: bool) -> Option<ClutchFault> {
        self.stage_step_nm = 0;
        if self.fault.is_some() {
            // hold whatever grip exists
            self.hold.tick(&self.cfg.thermal, dt);
            self.drive.tick(&self.cfg.thermal, dt);
            return None;
        }
        if self.active.is_none() {
            self.active = self.queue.pop_front();
            self.wait_s = 0.0;
            if let Some(CycleStep::Stage { delta_nm, .. }) = self.active {
                self.stage_left_nm = delta_nm;
            }
        }
        let mut raised = None;
        if let Some(step) = self.active {
            let gate = step_gate(step, self.hold.phase, self.drive.phase, self.hold.engage, self.drive.engage);
            self.hold.engage = gate.hold_engage;
            self.drive.engage = gate.drive_engage;
            if gate.fault && self.loaded {
                raised = Some(ClutchFault::Ungripped);
            } else if let CycleStep::Stage { carrying, .. } = step {
                if motion_permitted {
                    let per_tick = to_nm(self.cfg.stage_speed * dt).max(1);
                    let mv = self.stage_left_nm.clamp(-per_tick, per_tick);
                    self.stage_nm += mv;
                    self.stage_left_nm -= mv;
                    self.stage_step_nm = mv;
                    self.stage_carrying = carrying;
                    if carrying {
                        self.depth_nm += mv;
                    }
                }
                if self.stage_left_nm == 0 {
                    self.active = None;
                }
            } else if gate.done {
                self.active = None;
            } else {
                self.wait_s += dt;
                if self.wait_s > self.cfg.thermal_timeout {
                    raised = Some(ClutchFault::ThermalTimeout);
                }
            }
        }
        self.hold.tick(&self.cfg.thermal, dt);
        self.drive.tick(&self.cfg.thermal, dt);
        if let Some(f) = raised {
            self.fault = Some(f);
            self.queue.clear();
            self.active = None;
        }
        raised
    }

    /// Grip invariant for the state after a tick.
    pub fn grip_ok(&self) -> bool {
        use ClutchPhase::Engaged;
        let h = self.hold.phase == Engaged;
        let d = self.drive.phase == Engaged;
        let moving_ok = match self.stage_step_nm {
            0 => true,
            _ => h != d && d == self.stage_carrying,
        };
        moving_ok && (h || d || !self.loaded)
    }
}

/// Abstract state of the cycle automaton: step index, both phases and both
/// engage commands. Thermal thresholds are chosen nondeterministically.
type AbstractState = (usize, ClutchPhase, ClutchPhase, bool, bool);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReachabilityReport {
    pub states: usize,
    pub ungripped: Vec<String>,
    pub guard_faults: usize,
    pub completed: bool,
}

/// Breadth-first search over every interleaving of thermal threshold
/// crossings while executing `steps` from the boot grip. Reports any
/// reachable state in which the loaded needle is held by neither clutch.
pub fn explore_cycle_automaton(steps: &[CycleStep]) -> ReachabilityReport {
    use ClutchPhase::*;
    let start: AbstractState = (0, Engaged, Released, true, false);
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([start]);
    let mut rep = ReachabilityReport::default();
    seen.insert(start);
    while let Some((i, h, d, hc, dc)) = queue.pop_front() {
        if h != Engaged && d != Engaged {
            rep.ungripped.push(format!("step {i}: hold {h:?}, drive {d:?}"));
        }
        if i == steps.len() {
            rep.completed = true;
            continue;
        }
        let gate = step_gate(steps[i], h, d, hc, dc);
        if gate.fault {
            rep.guard_faults += 1;
            continue;
        }
        let next_i = if gate.done || gate.may_move { i + 1 } else { i };
        for (hh, hcold) in [(false, false), (true, false), (false, true)] {
            for (dh, dcold) in [(false, false), (true, false), (false, true)] {
                let nh = next_phase(h, gate.hold_engage, hh, hcold);
                let nd = next_phase(d, gate.drive_engage, dh, dcold);
                let s = (next_i, nh, nd, gate.hold_engage, gate.drive_engage);
                if seen.insert(s) {
                    queue.push_back(s);
                }
            }
        }
    }
    rep.states = seen.len();
    rep
}
