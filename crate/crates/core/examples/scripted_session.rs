//! Runs a bundled scenario in-process and prints the workflow transitions.
//!
//! ```text
//! cargo run --example scripted_session -- scenarios/estop_during_move.json
//! ```

use crane::config::Scenario;
use crane::link::DirectLink;
use crane::service::{run_script, LogRecord, PlanMode, Session, SessionIo};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/happy_path.json"));
    let sc = Scenario::load(&path)?;
    let link = Box::new(DirectLink::new(sc.session.controller.clone()));
    let io = SessionIo {
        keep_records: true,
        ..Default::default()
    };
    let mut s = Session::new(sc.session.clone(), link, PlanMode::Inline, io)?;
    let run = run_script(&mut s, &sc.config.script, sc.max_ticks())?;

    for r in s.records() {
        match r {
            LogRecord::Operator { tick, command } => println!("{tick:>6}  operator {}", command.name()),
            LogRecord::Transition { tick, event, from, to, .. } => println!("{tick:>6}  {from} -> {to} on {event}"),
            LogRecord::Safety { tick, mode, reason } => println!("{tick:>6}  safety {mode:?} ({reason:?})"),
            LogRecord::Scan { tick, result } => println!("{tick:>6}  scan: tip {:.3} mm off", result.tip_error * 1e3),
            _ => {}
        }
    }
    println!(
        "\n{}/{} script steps, final {}, faults {:?}",
        run.completed,
        sc.config.script.len(),
        s.workflow().step,
        s.stats.faults
    );
    Ok(())
}
