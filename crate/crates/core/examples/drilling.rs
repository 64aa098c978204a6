//! Drill into a spherical shell and trace an oval groove, reporting marker
//! tiers, breakthrough and lateral tracking error.
use std::path::Path;

use railkit::sim::Simulation;

fn run(name: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("data/scenarios/{name}.yaml"));
    let mut sim = Simulation::from_file(&path).expect("scenario");
    let mut first_deep = None;
    let summary = sim.run(|info| match &info.new_marker {
        Some(m) if m.tier == 2 && first_deep.is_none() => first_deep = Some(*m),
        _ => {}
    });
    if let Some(m) = first_deep {
        println!("  first tier-2 marker at tick {} ({:.4?})", m.tick, m.position.as_slice());
    }
    let tiers = sim.markers().iter().fold([0usize; 2], |mut c, m| {
        c[(m.tier as usize).clamp(1, 2) - 1] += 1;
        c
    });
    println!("{name}: {} tier-1 and {} tier-2 markers", tiers[0], tiers[1]);
    match summary.breakthrough_tick {
        Some(k) => println!("  breakthrough at tick {k} (t = {:.3} s)", k as f64 * sim.dt()),
        None => println!("  no breakthrough"),
    }
    if let Some(dev) = summary.max_lateral_deviation {
        println!("  max lateral deviation from the oval: {dev:.2e} m");
    }
}

fn main() {
    run("drill");
    run("oval");
}
