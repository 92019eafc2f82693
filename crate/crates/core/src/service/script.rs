//! Scripted operator sessions and log replay, both in virtual time.

use super::messages::{OperatorCommand, Outbound, Telemetry};
use super::session::{LogRecord, PlanMode, Session, SessionConfig, SessionIo};
use super::workflow::WorkflowStep;
use crate::link::DirectLink;
use crate::safety::SafetyMode;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io;

/// Condition a script step waits for before its delay starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitFor {
    State(WorkflowStep),
    Safety(SafetyMode),
    /// No planning, motion or insertion in progress.
    Idle,
}

impl WaitFor {
    pub fn holds(&self, s: &Session) -> bool {
        match self {
            WaitFor::State(st) => s.workflow().step == *st,
            WaitFor::Safety(m) => s.safety() == *m,
            WaitFor::Idle => s.is_idle(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_for: Option<WaitFor>,
    #[serde(default)]
    pub delay_ms: u64,
    pub send: OperatorCommand,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptRun {
    pub replies: Vec<Outbound>,
    pub completed: usize,
    pub timed_out: bool,
}

/// Steps the session until `cond` holds or `max_ticks` is reached.
pub fn run_until(s: &mut Session, max_ticks: u64, cond: impl Fn(&Session) -> bool) -> io::Result<bool> {
    while !cond(s) {
        if s.tick() >= max_ticks {
            return Ok(false);
        }
        s.step()?;
    }
    Ok(true)
}

/// Plays `steps` against the session, then lets it run until idle and one
/// more telemetry period has been logged.
pub fn run_script(s: &mut Session, steps: &[ScriptStep], max_ticks: u64) -> io::Result<ScriptRun> {
    let mut run = ScriptRun::default();
    for st in steps {
        if let Some(w) = st.wait_for {
            if !run_until(s, max_ticks, |s| w.holds(s))? {
                log::warn!("script timed out waiting for {w:?}");
                run.timed_out = true;
                return Ok(run);
            }
        }
        let until = s.tick() + st.delay_ms;
        if !run_until(s, max_ticks, |s| s.tick() >= until)? {
            run.timed_out = true;
            return Ok(run);
        }
        let reply = s.handle_command(st.send.clone());
        if let Outbound::Error { message, .. } = &reply {
            log::warn!("script step {} rejected: {message}", run.completed);
        }
        run.replies.push(reply);
        run.completed += 1;
    }
    if !run_until(s, max_ticks, Session::is_idle)? {
        run.timed_out = true;
    }
    let period = s.config().session.telemetry_period_ms;
    let until = (s.tick() / period + 1) * period;
    run_until(s, max_ticks.max(until), |s| s.tick() >= until)?;
    Ok(run)
}

/// Parses a JSONL event log.
pub fn read_log(text: &str) -> Result<Vec<LogRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub compared: usize,
    pub divergences: Vec<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.divergences.is_empty()
    }
}

fn compare(tick: u64, a: &Telemetry, b: &Telemetry, tol: f64, out: &mut Vec<String>) {
    let mut diff = |what: &str| out.push(format!("tick {tick}: {what} differs"));
    if a.workflow != b.workflow || a.halted != b.halted || a.planning != b.planning {
        diff("workflow state");
    }
    if a.safety != b.safety {
        diff("safety state");
    }
    if a.scans != b.scans || a.scan.map(|s| s.within) != b.scan.map(|s| s.within) {
        diff("scan result");
    }
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() <= tol);
    if !close(&a.q, &b.q) {
        diff("joint position");
    }
    if !close(&a.setpoint, &b.setpoint) {
        diff("setpoint");
    }
    match (&a.needle, &b.needle) {
        (Some(p), Some(q)) if close(p.tip.as_slice(), q.tip.as_slice()) && close(p.axis.as_slice(), q.axis.as_slice()) => {}
        (None, None) => {}
        _ => diff("needle pose"),
    }
    if !close(&a.clutch.temps, &b.clutch.temps) || a.clutch.hold != b.clutch.hold || a.clutch.drive != b.clutch.drive {
        diff("clutch state");
    }
}

/// Re-runs the operator events of `records` against a fresh in-process
/// simulation and compares every telemetry snapshot.
pub fn replay_log(records: &[LogRecord], tol: f64) -> io::Result<ReplayReport> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let Some(LogRecord::Header { config, .. }) = records.first() else {
        return Err(bad("log does not start with a header"));
    };
    let cfg: SessionConfig = (**config).clone();
    let mut ops: VecDeque<(u64, OperatorCommand)> = VecDeque::new();
    let mut plan_ticks = VecDeque::new();
    let mut logged: Vec<(u64, &Telemetry)> = vec![];
    let mut last = 0;
    for r in records {
        match r {
            LogRecord::Operator { tick, command } => ops.push_back((*tick, command.clone())),
            LogRecord::PlanDone { tick, .. } => plan_ticks.push_back(*tick),
            LogRecord::Telemetry { tick, telemetry } => logged.push((*tick, telemetry)),
            _ => {}
        }
        if let Some(t) = record_tick(r) {
            last = last.max(t);
        }
    }
    let link = Box::new(DirectLink::new(cfg.controller.clone()));
    let io = SessionIo {
        keep_records: true,
        ..Default::default()
    };
    let mut s = Session::new(cfg, link, PlanMode::Replay(plan_ticks), io)?;
    while s.tick() <= last {
        while ops.front().is_some_and(|(t, _)| *t <= s.tick()) {
            let (_, c) = ops.pop_front().expect("checked");
            s.handle_command(c);
        }
        if s.tick() == last {
            break;
        }
        s.step()?;
    }
    let fresh: Vec<(u64, &Telemetry)> = s
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Telemetry { tick, telemetry } => Some((*tick, &**telemetry)),
            _ => None,
        })
        .collect();
    let mut rep = ReplayReport::default();
    if fresh.len() != logged.len() {
        rep.divergences
            .push(format!("{} telemetry records logged, {} replayed", logged.len(), fresh.len()));
    }
    for ((ta, a), (tb, b)) in logged.iter().zip(&fresh) {
        if ta != tb {
            rep.divergences.push(format!("telemetry at tick {ta} replayed at {tb}"));
            break;
        }
        compare(*ta, a, b, tol, &mut rep.divergences);
        rep.compared += 1;
    }
    Ok(rep)
}

fn record_tick(r: &LogRecord) -> Option<u64> {
    match r {
        LogRecord::Header { .. } => None,
        LogRecord::Operator { tick, .. }
        | LogRecord::Transition { tick, .. }
        | LogRecord::Rejected { tick, .. }
        | LogRecord::PlanDone { tick, .. }
        | LogRecord::Safety { tick, .. }
        | LogRecord::ControllerRejected { tick, .. }
        | LogRecord::Scan { tick, .. }
        | LogRecord::Notice { tick, .. }
        | LogRecord::Monitor { tick, .. }
        | LogRecord::Telemetry { tick, .. } => Some(*tick),
    }
}
