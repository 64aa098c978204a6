//! Load a rail branch, evaluate its tool pose and compare the analytic pose
//! Jacobian with central differences.
use std::path::Path;

use railkit::chain::{CompositeChain, Kinematics};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/chains/branch_7axis.yaml");
    let chain = CompositeChain::from_file(&path).expect("chain file");
    let q = [0.2, 0.1, 0.0, 0.3, 0.1, -1.8, 0.2, 0.3, 0.0];
    println!("{} joints in {} segments", chain.dof(), chain.segments().len());
    for s in chain.segments() {
        println!("  segment {:<8} {} joints", s.name, s.joints.len());
    }

    let x = chain.fk(&q).expect("fk");
    println!("tool position: {:.4?}", x.translation().as_slice());

    let j = chain.pose_jacobian(&q).expect("jacobian");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..q.len() {
        let (mut qp, mut qm) = (q, q);
        qp[i] += h;
        qm[i] -= h;
        let (xp, xm) = (chain.fk(&qp).unwrap().vec8(), chain.fk(&qm).unwrap().vec8());
        for r in 0..8 {
            worst = worst.max(((xp.0[r] - xm.0[r]) / (2.0 * h) - j[(r, i)]).abs());
        }
    }
    println!("max |J - J_fd| = {worst:.2e}");
}
