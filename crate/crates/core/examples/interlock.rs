//! Walks the controller interlock: enable, heartbeat loss, latched fault,
//! clear and re-enable. Then checks every event string up to length 6.
//!
//! ```text
//! cargo run --example interlock
//! ```

use crane::safety::{enumerate_paths, SafetyConfig, SafetyEvent as E, SafetyState, MS};

fn main() {
    let cfg = SafetyConfig::default();
    let mut s = SafetyState::default();
    let script = [
        (0, E::Tick),
        (0, E::EnableReq),
        (5 * MS, E::Heartbeat),
        (6 * MS, E::EnableReq),
        (30 * MS, E::Tick),
        (55 * MS, E::Tick),
        (56 * MS, E::Tick),
        (57 * MS, E::EnableReq),
        (60 * MS, E::Heartbeat),
        (61 * MS, E::ClearFault),
        (62 * MS, E::EnableReq),
        (63 * MS, E::EstopPress),
        (64 * MS, E::ClearFault),
        (65 * MS, E::EstopRelease),
        (66 * MS, E::ClearFault),
    ];
    for (t, ev) in script {
        let (next, action) = s.on_event(&cfg, t, ev);
        println!(
            "{:>5.1} ms  {:<13} {:?} -> {:?} ({:?})  {:?}",
            t as f64 / 1e6,
            format!("{ev:?}"),
            s.mode,
            next.mode,
            next.reason,
            action
        );
        s = next;
    }

    for depth in 1..=6 {
        let rep = enumerate_paths(&cfg, SafetyState::default(), 0, depth);
        println!(
            "depth {depth}: {} strings, {} transitions, {} violations",
            rep.paths,
            rep.transitions,
            rep.violations.len()
        );
    }
}
