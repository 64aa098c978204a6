//! Drive two branches toward pose targets with one centralized QP while the
//! pairwise and environment VFIs stay enforced.
use std::path::Path;

use railkit::controller::ControlTask;
use railkit::pose::DualQuaternion;
use railkit::sim::Simulation;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenarios/two_branch_approach.yaml");
    let sim = Simulation::from_file(&path).expect("scenario");
    let controller = &sim.controller;
    let mut q = sim.q().to_vec();

    // Ask both tips to meet at the same point; the VFIs keep them apart.
    let start = controller.system.tool_poses(&q).unwrap();
    let meet = (start[0].translation() + start[1].translation()) / 2.0;
    let tasks: Vec<ControlTask> = start
        .iter()
        .enumerate()
        .map(|(i, x)| ControlTask::new(i, DualQuaternion::from_rt(x.rotation(), &meet).unwrap()))
        .collect();

    for k in 0..=500 {
        let (next, out) = controller.advance(&q, &tasks).expect("control step");
        if k % 100 == 0 {
            let tips = controller.system.tool_poses(&q).unwrap();
            println!(
                "tick {k:>3}: errors {:.4?}, tip gap {:.4} m, min margin {:.4?}, {}",
                out.task_errors,
                (tips[0].translation() - tips[1].translation()).norm(),
                out.min_margin,
                out.status.as_str()
            );
        }
        q = next;
    }
}
