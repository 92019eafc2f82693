use super::{Controller, TickLog, TICK_NS};
use crate::kinematics::DOF;
use crate::protocol::{encode_frame, Feedback, Frame, Message};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;

/// A window during which master-to-controller frames are lost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    pub start_ns: u64,
    pub end_ns: u64,
    /// Only heartbeats are lost; other frames still arrive.
    #[serde(default)]
    pub heartbeats_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkFaults {
    pub latency_ns: u64,
    /// Extra delay drawn uniformly from [0, jitter_ns].
    pub jitter_ns: u64,
    pub drop_probability: f64,
    pub outages: Vec<Outage>,
    /// Controller ticks (0-based) that overrun their deadline.
    pub overrun_ticks: Vec<u64>,
}

impl LinkFaults {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err("drop_probability must lie in [0, 1]".into());
        }
        if self.outages.iter().any(|o| o.end_ns < o.start_ns) {
            return Err("outage ends before it starts".into());
        }
        Ok(())
    }
}

/// Master-to-controller delivery with injected latency, jitter, loss and
/// outages. Delivery order matches send order, as on a stream transport.
#[derive(Debug, Clone)]
pub struct Downlink {
    faults: LinkFaults,
    rng: ChaCha8Rng,
    queue: VecDeque<(u64, Vec<u8>)>,
    last_delivery: u64,
    pub dropped: u64,
    pub sent: u64,
}

impl Downlink {
    pub fn new(faults: LinkFaults, seed: u64) -> Self {
        Self {
            faults,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            last_delivery: 0,
            dropped: 0,
            sent: 0,
        }
    }

    pub fn send(&mut self, t_ns: u64, frame: &Frame) {
        self.send_bytes(t_ns, encode_frame(frame), matches!(frame.msg, Message::Heartbeat));
    }

    pub fn send_bytes(&mut self, t_ns: u64, bytes: Vec<u8>, heartbeat: bool) {
        self.sent += 1;
        let in_outage = self
            .faults
            .outages
            .iter()
            .any(|o| t_ns >= o.start_ns && t_ns < o.end_ns && (heartbeat || !o.heartbeats_only));
        let dropped = self.faults.drop_probability > 0.0 && self.rng.random_bool(self.faults.drop_probability);
        let jitter = if self.faults.jitter_ns > 0 {
            self.rng.random_range(0..=self.faults.jitter_ns)
        } else {
            0
        };
        if in_outage || dropped {
            self.dropped += 1;
            return;
        }
        let at = (t_ns + self.faults.latency_ns + jitter).max(self.last_delivery);
        self.last_delivery = at;
        self.queue.push_back((at, bytes));
    }

    /// Everything deliverable by `t_ns`.
    pub fn due(&mut self, t_ns: u64) -> Vec<Vec<u8>> {
        let mut out = vec![];
        while self.queue.front().is_some_and(|(at, _)| *at <= t_ns) {
            out.push(self.queue.pop_front().expect("checked").1);
        }
        out
    }

    pub fn overruns(&self, tick: u64) -> bool {
        self.faults.overrun_ticks.contains(&tick)
    }
}

/// The master side of a scheduler run.
pub trait Master {
    /// Called once per tick at `t_ns` with the controller's output from the
    /// previous tick; returns frames to send now.
    fn step(&mut self, t_ns: u64, from_controller: &[Frame]) -> Vec<Frame>;
}

#[derive(Debug, Clone, Default)]
pub struct SchedulerLog {
    pub ticks: Vec<TickLog>,
    pub feedback: Vec<Frame>,
    pub sent: u64,
    pub dropped: u64,
}

impl SchedulerLog {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        write_tick_csv_header(&mut out)?;
        for r in &self.ticks {
            write_tick_csv_row(&mut out, r)?;
        }
        Ok(())
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.ticks {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn write_tick_csv_header(out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "t_ns")?;
    for j in 1..=DOF {
        write!(out, ",q{j}")?;
    }
    for j in 1..=DOF {
        write!(out, ",sp{j}")?;
    }
    for j in 1..DOF {
        write!(out, ",effort{j}")?;
    }
    writeln!(out, ",safety")
}

pub fn write_tick_csv_row(out: &mut impl Write, r: &TickLog) -> std::io::Result<()> {
    write!(out, "{}", r.t_ns)?;
    for v in r.q.iter().chain(&r.setpoint).chain(&r.effort) {
        write!(out, ",{v:.9}")?;
    }
    writeln!(out, ",{}", r.safety.code())
}

/// Master-side joint log: measured positions from FEEDBACK next to the
/// commanded setpoint.
pub fn write_session_csv_header(out: &mut impl Write) -> std::io::Result<()> {
    write!(out, "t_ns")?;
    for j in 1..=DOF {
        write!(out, ",q{j}")?;
    }
    for j in 1..=DOF {
        write!(out, ",sp{j}")?;
    }
    writeln!(out, ",safety,fault")
}

pub fn write_session_csv_row(
    out: &mut impl Write,
    t_ns: u64,
    fb: &Feedback,
    setpoint: &[f64; DOF],
) -> std::io::Result<()> {
    write!(out, "{t_ns}")?;
    for v in fb.position.iter().chain(setpoint) {
        write!(out, ",{v:.9}")?;
    }
    writeln!(out, ",{},{}", fb.safety, fb.fault)
}

/// Runs `duration_ns / 1 ms` controller ticks in virtual time. Master
/// frames pass through a [`Downlink`] built from `faults`; controller
/// output reaches the master at the next tick.
pub fn run_scheduler(
    controller: &mut Controller,
    master: &mut dyn Master,
    duration_ns: u64,
    faults: &LinkFaults,
    seed: u64,
) -> SchedulerLog {
    let mut link = Downlink::new(faults.clone(), seed);
    let mut log = SchedulerLog::default();
    let mut last: Vec<Frame> = vec![];
    for _ in 0..duration_ns / TICK_NS {
        let t = controller.now_ns();
        for f in master.step(t, &last) {
            link.send(t, &f);
        }
        let inbox = link.due(t);
        let out = controller.tick_bytes(&inbox, link.overruns(controller.ticks()));
        log.ticks.push(out.log);
        log.feedback
            .extend(out.frames.iter().filter(|f| matches!(f.msg, Message::Feedback(_))));
        last = out.frames;
    }
    log.sent = link.sent;
    log.dropped = link.dropped;
    log
}

/// Heartbeats every period, an ENABLE once the controller has booted, and a
/// fixed setpoint schedule. Heartbeats stop at `heartbeat_until_ns`.
#[derive(Debug, Clone)]
pub struct ScriptedMaster {
    pub heartbeat_period_ns: u64,
    pub heartbeat_until_ns: u64,
    pub enable_at_ns: Option<u64>,
    /// (time, setpoint) pairs in time order.
    pub setpoints: Vec<(u64, [f64; DOF])>,
    next_setpoint: usize,
    seq: u32,
}

impl ScriptedMaster {
    pub fn new(setpoints: Vec<(u64, [f64; DOF])>) -> Self {
        Self {
            heartbeat_period_ns: 10 * TICK_NS,
            heartbeat_until_ns: u64::MAX,
            enable_at_ns: Some(TICK_NS),
            setpoints,
            next_setpoint: 0,
            seq: 0,
        }
    }

    fn frame(&mut self, t: u64, msg: Message) -> Frame {
        self.seq += 1;
        Frame::new(self.seq, t, msg)
    }
}

impl Master for ScriptedMaster {
    fn step(&mut self, t: u64, _: &[Frame]) -> Vec<Frame> {
        let mut out = vec![];
        if t % self.heartbeat_period_ns == 0 && t < self.heartbeat_until_ns {
            out.push(self.frame(t, Message::Heartbeat));
        }
        if self.enable_at_ns == Some(t) {
            out.push(self.frame(t, Message::Enable));
        }
        while self.next_setpoint < self.setpoints.len() && self.setpoints[self.next_setpoint].0 <= t {
            let q = self.setpoints[self.next_setpoint].1;
            self.next_setpoint += 1;
            out.push(self.frame(t, Message::Setpoint(q)));
        }
        out
    }
}
