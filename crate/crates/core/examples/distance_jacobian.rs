//! Signed distance between a robot-attached primitive and the environment,
//! with the distance Jacobian row used by the constraints.
use std::path::Path;

use nalgebra::Vector3;
use railkit::chain::CompositeChain;
use railkit::geometry::{distance_jacobian_env, Attachment, Primitive, Shape};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/chains/branch_6axis.yaml");
    let chain = CompositeChain::from_file(&path).expect("chain file");
    let q = vec![0.0, 0.1, 0.0, 0.1, -1.5, 0.0, -1.0, 0.0];

    let tip = Primitive {
        shape: Shape::point(Vector3::new(0.0, 0.0, 0.12)),
        attachment: Attachment::Robot { branch: 0, joint: 7 },
    };
    let table = Primitive {
        shape: Shape::plane(Vector3::new(0.0, 0.0, 0.05), Vector3::z()).unwrap(),
        attachment: Attachment::Environment,
    };
    let (res, row) = distance_jacobian_env(&chain, &q, &tip, &table).expect("distance");
    println!("tip-to-table distance: {:.5} m", res.distance);
    println!("witness on tip: {:.4?}", res.witness_a.as_slice());
    println!("J_d: {:.4?}", row.as_slice());

    let qdot = vec![0.0, 0.0, 0.0, 0.05, 0.1, 0.0, 0.0, 0.0];
    let rate: f64 = row.iter().zip(&qdot).map(|(a, b)| a * b).sum();
    println!("predicted distance rate for {qdot:?}: {rate:.5} m/s");
}
