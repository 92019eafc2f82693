//! Inserts 120 mm with a 50 mm stage stroke using the two thermal clutches,
//! printing each phase change and the temperatures that gate it.
//!
//! ```text
//! cargo run --example clutch_insertion
//! ```

use crane::clutch::{explore_cycle_automaton, from_nm, plan_insertion, ClutchConfig, ClutchDriver};

fn main() {
    let plan = plan_insertion(0.12, 0.05);
    println!("cycles (nm): {:?}", plan.cycles);
    for s in &plan.steps {
        println!("  {s:?}");
    }
    let rep = explore_cycle_automaton(&plan.steps);
    println!(
        "automaton: {} abstract states, {} ungripped, completed={}",
        rep.states,
        rep.ungripped.len(),
        rep.completed
    );

    let mut d = ClutchDriver::new(ClutchConfig::default());
    d.start_plan(&plan);
    let mut last = (d.hold.phase, d.drive.phase);
    let mut tick = 0u64;
    while d.is_busy() {
        if let Some(f) = d.tick(1e-3, true) {
            println!("fault: {f:?}");
            break;
        }
        tick += 1;
        let now = (d.hold.phase, d.drive.phase);
        if now != last {
            println!(
                "{:>7.3} s  hold {:<9} {:>5.1} C  drive {:<9} {:>5.1} C  stage {:>6.1} mm  depth {:>6.1} mm",
                tick as f64 * 1e-3,
                format!("{:?}", now.0),
                d.hold.temp,
                format!("{:?}", now.1),
                d.drive.temp,
                from_nm(d.stage_nm) * 1e3,
                d.depth() * 1e3
            );
            last = now;
        }
        assert!(d.grip_ok());
    }
    println!("done after {:.1} s at depth {} nm", tick as f64 * 1e-3, d.depth_nm);
}
