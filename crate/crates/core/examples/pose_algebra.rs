//! Compose rigid transforms as unit dual quaternions and inspect them.
use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use railkit::pose::{DualQuaternion, Quaternion};

fn main() {
    let lift = DualQuaternion::from_translation(&Vector3::new(0.0, 0.0, 0.3));
    let turn = DualQuaternion::from_rotation(Quaternion::rot_z(FRAC_PI_2));
    let reach = DualQuaternion::from_translation(&Vector3::new(0.2, 0.0, 0.0));

    let tool = lift * turn * reach;
    let (r, t) = tool.decompose().expect("unit pose");
    println!("tool translation: {:.4?}", t.as_slice());
    println!("tool rotation (w,x,y,z): {:.4?}", r.to_array());
    println!("vec8: {:.4?}", tool.vec8().as_slice());

    let p = Vector3::new(0.05, 0.0, 0.0);
    println!("point {:?} maps to {:.4?}", p.as_slice(), tool.transform_point(&p).as_slice());

    let back = tool * tool.conj();
    println!("x * conj(x) = {:.3?}", back.vec8().as_slice());

    // Hamilton operators turn products into matrix-vector products.
    let lhs = (turn * reach).vec8().to_vector();
    let rhs = turn.hplus8() * reach.vec8().to_vector();
    println!("|H+(a) vec8(b) - vec8(ab)| = {:.2e}", (lhs - rhs).norm());
}
