//! Start the websocket gateway on a scenario, connect as an operator console,
//! jog one branch and watch the snapshots.
use std::path::Path;

use railkit::gateway::{Gateway, GatewayConfig, ServerMessage};
use railkit::sim::Simulation;
use tungstenite::Message;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenarios/platform.yaml");
    let sim = Simulation::from_file(&path).expect("scenario");
    let config = GatewayConfig { addr: "127.0.0.1:0".parse().unwrap(), ..GatewayConfig::default() };
    let gateway = Gateway::start(sim, config).expect("listen");
    let url = format!("ws://{}", gateway.local_addr);
    let (mut ws, _) = tungstenite::connect(&url).expect("connect");

    let mut jogged = false;
    let mut snapshots = 0;
    while snapshots < 20 {
        let Message::Text(text) = ws.read().expect("read") else { continue };
        match serde_json::from_str::<ServerMessage>(&text).expect("server json") {
            ServerMessage::Hello { branches, dofs, .. } => println!("hello: {branches} branches, dofs {dofs:?}"),
            ServerMessage::Snapshot(s) => {
                snapshots += 1;
                if snapshots % 5 == 0 {
                    let b = &s.branches[0];
                    println!("tick {:>4}: branch 0 error {:.4}, status {}", s.tick, b.error, s.status);
                }
                if !jogged {
                    let jog = r#"{"type":"jog","branch":0,"frame":"base","delta_translation":[0,0,0.005],"delta_rotation_rpy":[0,0,0]}"#;
                    ws.send(Message::text(jog)).unwrap();
                    jogged = true;
                }
            }
            ServerMessage::Ack { command } => println!("ack: {command}"),
            ServerMessage::Error { code, message } => println!("error {code}: {message}"),
        }
    }
    let _ = ws.close(None);
    gateway.stop();
}
