//! Parse a VFI file, then assemble the stacked constraint rows for a robot.
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use railkit::pose::{DualQuaternion, Quaternion};
use railkit::system::RobotSystem;
use railkit::vfi::{assemble, parse_vfi_config_for, ConstraintGains};

fn main() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let mount = |yaw: f64| DualQuaternion::from_rt(Quaternion::rot_z(yaw), &Vector3::zeros()).unwrap();
    let system = RobotSystem::from_files(&[
        (data.join("chains/branch_6axis.yaml"), mount(PI / 4.0)),
        (data.join("chains/branch_6axis.yaml"), mount(3.0 * PI / 4.0)),
        (data.join("chains/branch_7axis.yaml"), mount(-3.0 * PI / 4.0)),
        (data.join("chains/branch_7axis.yaml"), mount(-PI / 4.0)),
    ])
    .expect("chains");

    let text = std::fs::read_to_string(data.join("vfi/platform.yaml")).unwrap();
    let specs = parse_vfi_config_for(&text, &system.dofs()).expect("valid config");
    println!("{} VFI entries for dofs {:?}", specs.len(), system.dofs());

    let mut q = Vec::new();
    q.extend([0.0, 0.1, 0.0, 0.1, -1.5, 0.0, -1.0, 0.0].repeat(2));
    q.extend([0.0, 0.1, 0.0, 0.3, 0.0, -1.8, 0.0, 0.3, 0.0].repeat(2));
    let set = assemble(&specs, &system, &q, ConstraintGains::default()).expect("constraints");
    let (a, _) = set.stacked();
    println!("W_s {}x{}, W_p {}x{}, stacked {} rows", set.ws.nrows(), set.ws.ncols(), set.wp.nrows(), set.wp.ncols(), a.nrows());
    for r in set.readings.iter().take(6) {
        let s = &specs[r.spec];
        let name = |n: &Option<String>| n.clone().unwrap_or_else(|| "?".into());
        println!(
            "  {:<10} {} {}: d = {:.4}, d_safe = {}",
            name(&s.first_name), r.direction, name(&s.second_name), r.distance, r.safe_distance
        );
    }
    println!("min keepout margin: {:.4?} m", set.min_keepout_margin());
}
