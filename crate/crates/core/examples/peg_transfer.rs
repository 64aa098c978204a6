//! Teleoperated peg transfer: a scripted operator drives one branch, the
//! gripper closes on the block and carries it rigidly.
use std::path::Path;

use railkit::sim::Simulation;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenarios/peg_transfer.yaml");
    let mut sim = Simulation::from_file(&path).expect("scenario");
    let start = sim.grasp().expect("grasp task").block.translation();

    let mut was = false;
    let summary = sim.run(|info| {
        let latched = info.record.latched;
        if latched != was {
            println!("t = {:.3} s: block {}", info.record.t, if latched { "latched" } else { "released" });
            was = latched;
        }
    });
    let end = sim.grasp().unwrap().block.translation();
    println!("block moved {:.4?} -> {:.4?}", start.as_slice(), end.as_slice());
    let drift = summary.max_latch_drift.unwrap_or(0.0);
    println!("{} latch episode(s), max relative drift {drift:.2e}", summary.latch_episodes);
}
