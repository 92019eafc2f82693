//! Controller-side interlock automaton.

use serde::{Deserialize, Serialize};

pub const MS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SafetyMode {
    Boot,
    Idle,
    Enabled,
    FaultLatched,
}

impl SafetyMode {
    pub fn code(self) -> u8 {
        match self {
            SafetyMode::Boot => 0,
            SafetyMode::Idle => 1,
            SafetyMode::Enabled => 2,
            SafetyMode::FaultLatched => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => SafetyMode::Boot,
            1 => SafetyMode::Idle,
            2 => SafetyMode::Enabled,
            3 => SafetyMode::FaultLatched,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultReason {
    None,
    HbTimeout,
    Estop,
    Watchdog,
    ClutchFault,
}

impl FaultReason {
    pub fn code(self) -> u8 {
        match self {
            FaultReason::None => 0,
            FaultReason::HbTimeout => 1,
            FaultReason::Estop => 2,
            FaultReason::Watchdog => 3,
            FaultReason::ClutchFault => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => FaultReason::None,
            1 => FaultReason::HbTimeout,
            2 => FaultReason::Estop,
            3 => FaultReason::Watchdog,
            4 => FaultReason::ClutchFault,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    pub heartbeat_period_ns: u64,
    pub heartbeat_timeout_ns: u64,
    /// Consecutive overrunning ticks that trip the watchdog.
    pub overrun_threshold: u32,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            heartbeat_period_ns: 10 * MS,
            heartbeat_timeout_ns: 50 * MS,
            overrun_threshold: 2,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.heartbeat_period_ns == 0 || self.heartbeat_timeout_ns <= self.heartbeat_period_ns {
            return Err("heartbeat timeout must exceed a positive heartbeat period".into());
        }
        if self.overrun_threshold == 0 {
            return Err("overrun_threshold must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyEvent {
    Heartbeat,
    EnableReq,
    DisableReq,
    EstopPress,
    EstopRelease,
    ClearFault,
    /// Control tick finished on time.
    Tick,
    /// Control tick missed its deadline.
    TickOverrun,
    ClutchFault,
}

/// Why a request was refused; carried in ACK frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NotReady,
    StaleHeartbeat,
    EstopPressed,
    FaultLatched,
    NotFaulted,
}

impl Rejection {
    pub fn code(self) -> u8 {
        match self {
            Rejection::NotReady => 1,
            Rejection::StaleHeartbeat => 2,
            Rejection::EstopPressed => 3,
            Rejection::FaultLatched => 4,
            Rejection::NotFaulted => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyAction {
    None,
    ZeroEffortLatch,
    Accepted,
    Rejected(Rejection),
}

impl SafetyAction {
    /// Status byte for an ACK frame: 0 accepted, otherwise the rejection code.
    pub fn ack_status(self) -> Option<u8> {
        match self {
            SafetyAction::Accepted => Some(0),
            SafetyAction::Rejected(r) => Some(r.code()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SafetyState {
    pub mode: SafetyMode,
    pub reason: FaultReason,
    pub last_heartbeat_ns: Option<u64>,
    pub overruns: u32,
    pub estop: bool,
}

impl Default for SafetyState {
    fn default() -> Self {
        Self {
            mode: SafetyMode::Boot,
            reason: FaultReason::None,
            last_heartbeat_ns: None,
            overruns: 0,
            estop: false,
        }
    }
}

impl SafetyState {
    pub fn is_motion_permitted(&self) -> bool {
        self.mode == SafetyMode::Enabled
    }

    pub fn heartbeat_age(&self, now_ns: u64) -> Option<u64> {
        self.last_heartbeat_ns.map(|t| now_ns.saturating_sub(t))
    }

    fn heartbeat_fresh(&self, cfg: &SafetyConfig, now_ns: u64) -> bool {
        self.heartbeat_age(now_ns).is_some_and(|a| a <= cfg.heartbeat_timeout_ns)
    }

    fn latch(mut self, reason: FaultReason) -> (Self, SafetyAction) {
        self.mode = SafetyMode::FaultLatched;
        self.reason = reason;
        self.overruns = 0;
        (self, SafetyAction::ZeroEffortLatch)
    }

    /// Applies one event observed at `now_ns`. Pure.
    pub fn on_event(&self, cfg: &SafetyConfig, now_ns: u64, ev: SafetyEvent) -> (Self, SafetyAction) {
        use SafetyEvent as E;
        use SafetyMode as M;
        let mut s = *self;
        match (s.mode, ev) {
            (_, E::Heartbeat) => {
                s.last_heartbeat_ns = Some(now_ns);
                (s, SafetyAction::None)
            }
            (M::Enabled, E::EstopPress) => {
                s.estop = true;
                s.latch(FaultReason::Estop)
            }
            (_, E::EstopPress) => {
                s.estop = true;
                (s, SafetyAction::None)
            }
            (_, E::EstopRelease) => {
                s.estop = false;
                (s, SafetyAction::None)
            }
            (M::Boot, E::Tick | E::TickOverrun) => {
                s.mode = M::Idle;
                (s, SafetyAction::None)
            }
            (M::Boot, E::EnableReq) => (s, SafetyAction::Rejected(Rejection::NotReady)),
            (M::Idle, E::EnableReq) => {
                if s.estop {
                    (s, SafetyAction::Rejected(Rejection::EstopPressed))
                } else if !s.heartbeat_fresh(cfg, now_ns) {
                    (s, SafetyAction::Rejected(Rejection::StaleHeartbeat))
                } else {
                    s.mode = M::Enabled;
                    s.overruns = 0;
                    (s, SafetyAction::Accepted)
                }
            }
            (M::Enabled, E::EnableReq) => (s, SafetyAction::Accepted),
            (M::FaultLatched, E::EnableReq) => (s, SafetyAction::Rejected(Rejection::FaultLatched)),
            (M::Enabled, E::DisableReq) => {
                s.mode = M::Idle;
                (s, SafetyAction::Accepted)
            }
            (_, E::DisableReq) => (s, SafetyAction::Accepted),
            (M::FaultLatched, E::ClearFault) => {
                if s.estop {
                    (s, SafetyAction::Rejected(Rejection::EstopPressed))
                } else {
                    s.mode = M::Idle;
                    s.reason = FaultReason::None;
                    (s, SafetyAction::Accepted)
                }
            }
            (_, E::ClearFault) => (s, SafetyAction::Rejected(Rejection::NotFaulted)),
            (M::Enabled, E::Tick | E::TickOverrun) => {
                if !s.heartbeat_fresh(cfg, now_ns) {
                    return s.latch(FaultReason::HbTimeout);
                }
                s.overruns = if ev == E::TickOverrun { s.overruns + 1 } else { 0 };
                if s.overruns >= cfg.overrun_threshold {
                    return s.latch(FaultReason::Watchdog);
                }
                (s, SafetyAction::None)
            }
            (M::Idle | M::FaultLatched, E::Tick | E::TickOverrun) => (s, SafetyAction::None),
            (M::FaultLatched, E::ClutchFault) => (s, SafetyAction::None),
            (_, E::ClutchFault) => s.latch(FaultReason::ClutchFault),
        }
    }
}

/// Letters of the exhaustive-check alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Letter {
    Event(SafetyEvent),
    /// Time advances by this many ns, then an on-time tick.
    Advance(u64),
}

/// Standard alphabet: every event plus 1 ms and 60 ms ticks.
pub fn enumeration_alphabet() -> Vec<Letter> {
    use SafetyEvent as E;
    vec![
        Letter::Event(E::Heartbeat),
        Letter::Event(E::EnableReq),
        Letter::Event(E::DisableReq),
        Letter::Event(E::EstopPress),
        Letter::Event(E::EstopRelease),
        Letter::Event(E::ClearFault),
        Letter::Advance(MS),
        Letter::Advance(60 * MS),
        Letter::Event(E::TickOverrun),
    ]
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct EnumerationReport {
    pub paths: u64,
    pub transitions: u64,
    pub violations: Vec<String>,
}

/// Walks every event string up to `depth` letters from `start` (at time
/// `t0_ns`) and checks the interlock properties on every transition:
/// no re-enable after a fault without passing IDLE, a zero-effort latch on
/// every entry into FAULT_LATCHED, FAULT_LATCHED left only by a clear with
/// the e-stop released, and motion permitted exactly in ENABLED.
pub fn enumerate_paths(cfg: &SafetyConfig, start: SafetyState, t0_ns: u64, depth: usize) -> EnumerationReport {
    let alphabet = enumeration_alphabet();
    let mut rep = EnumerationReport::default();
    let faulted = start.mode == SafetyMode::FaultLatched;
    let mut trail = Vec::with_capacity(depth);
    walk(cfg, &alphabet, start, t0_ns, faulted, depth, &mut trail, &mut rep);
    rep
}

#[allow(clippy::too_many_arguments)]
fn walk(
    cfg: &SafetyConfig,
    alphabet: &[Letter],
    s: SafetyState,
    t: u64,
    faulted: bool,
    remaining: usize,
    trail: &mut Vec<Letter>,
    rep: &mut EnumerationReport,
) {
    if remaining == 0 {
        rep.paths += 1;
        return;
    }
    for &l in alphabet {
        let (t2, ev) = match l {
            Letter::Event(e) => (t, e),
            Letter::Advance(dt) => (t + dt, SafetyEvent::Tick),
        };
        let (n, action) = s.on_event(cfg, t2, ev);
        rep.transitions += 1;
        trail.push(l);
        let mut bad = |msg: &str| {
            if rep.violations.len() < 20 {
                rep.violations.push(format!("{msg} after {trail:?} from {s:?}"));
            }
        };
        if n.mode == SafetyMode::FaultLatched && s.mode != SafetyMode::FaultLatched && action != SafetyAction::ZeroEffortLatch {
            bad("fault entered without zero-effort latch");
        }
        if s.mode == SafetyMode::FaultLatched && n.mode != SafetyMode::FaultLatched && !(ev == SafetyEvent::ClearFault && !s.estop) {
            bad("fault left without a clear");
        }
        if s.mode == SafetyMode::FaultLatched && n.mode == SafetyMode::Enabled {
            bad("fault went straight to enabled");
        }
        if n.is_motion_permitted() != (n.mode == SafetyMode::Enabled) {
            bad("motion permission mismatch");
        }
        let now_faulted = match n.mode {
            SafetyMode::FaultLatched => true,
            SafetyMode::Idle => false,
            _ => faulted,
        };
        if faulted && n.mode == SafetyMode::Enabled {
            bad("re-enabled after fault without passing IDLE");
        }
        walk(cfg, alphabet, n, t2, now_faulted, remaining - 1, trail, rep);
        trail.pop();
    }
}
