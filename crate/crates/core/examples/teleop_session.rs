//! Encode master packets, decode them on the follower side and map them to
//! scaled follower targets with clutching.
use nalgebra::Vector3;
use railkit::pose::DualQuaternion;
use railkit::teleop::{decode, encode, OperatorPacket, SessionState};

fn master_at(x: f64) -> DualQuaternion {
    DualQuaternion::from_translation(&Vector3::new(x, 0.0, 0.0))
}

fn main() {
    let follower = DualQuaternion::from_translation(&Vector3::new(0.1, 0.1, 0.3));
    let mut session = SessionState::anchored(3.0, follower);

    let moves = [(0.000, false), (0.003, false), (0.006, true), (0.030, true), (0.030, false), (0.033, false)];
    for (seq, (x, clutch)) in moves.into_iter().enumerate() {
        let mut p = OperatorPacket::new(seq as u32, seq as u64 * 10_000, master_at(x));
        p.clutch = clutch;
        let wire = encode(&p).expect("valid packet");
        let rx = decode(&wire).expect("round trip");
        let target = session.ingest(&rx).expect("fresh packet").expect("anchored");
        println!(
            "seq {seq}: master x {:.3}, clutch {:<5} -> follower x {:.4}",
            x,
            clutch,
            target.translation().x
        );
    }

    let mut stale = OperatorPacket::new(2, 0, master_at(1.0));
    stale.clutch = false;
    println!("stale packet accepted: {}", session.ingest(&stale).is_some());

    let mut corrupt = encode(&OperatorPacket::new(9, 0, follower)).unwrap();
    corrupt[0] = b'X';
    println!("corrupt packet: {}", decode(&corrupt).unwrap_err());
}
