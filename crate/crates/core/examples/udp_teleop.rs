//! Stream a scripted operator over UDP into an in-process follower receiver.
use std::path::Path;
use std::time::Duration;

use railkit::teleop::{emulate_operator, Mailbox, OperatorScript, UdpReceiver};

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenarios/peg_transfer_operator.yaml");
    let script = OperatorScript::from_file(&path).expect("script");
    println!("script: {:.2} s at {} Hz", script.duration(), script.rate_hz);

    let mailbox = Mailbox::new();
    let receiver = UdpReceiver::spawn("127.0.0.1:0", mailbox.clone()).expect("bind");
    let addr = receiver.local_addr;
    let sent = emulate_operator(addr, &script, 20.0, Duration::from_secs(1)).expect("send");
    std::thread::sleep(Duration::from_millis(50));

    let latest = mailbox.latest().expect("received packets");
    println!("sent {sent} packets; latest seq {} at {:.4?}", latest.seq, latest.pose.translation().as_slice());
    let stats = receiver.stop();
    println!("receiver: {} accepted, {} stale, {} rejected", stats.accepted, stats.stale, stats.rejected);
}
