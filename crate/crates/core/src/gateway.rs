//! JSON-over-websocket bridge between a running simulation and operator
//! consoles.
//!
//! On connect the server sends a `hello` message, then `snapshot` messages at
//! the configured rate. Clients send `jog`, `clutch`, `scale`, `grip` (and an
//! optional `hello` carrying their schema version); every command gets an
//! `ack` or a typed `error` reply. Branch indices are zero-based.
//!
//! ```json
//! {"type": "jog", "branch": 0, "frame": "tool", "delta_translation": [0.003, 0, 0], "delta_rotation_rpy": [0, 0, 0]}
//! {"type": "clutch", "engaged": true}
//! {"type": "scale", "ratio": 3.0}
//! {"type": "grip", "branch": 0, "closed": true}
//! ```

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::pose::{DualQuaternion, Quaternion};
use crate::sim::{Simulation, TickInfo};

pub const DEFAULT_PORT: u16 = 9870;
pub const DEFAULT_SNAPSHOT_HZ: f64 = 30.0;
pub const SCHEMA: &str = "railkit.gateway";
pub const SCHEMA_VERSION: u32 = 1;
/// Per-message jog bounds, applied before scaling.
pub const MAX_JOG_TRANSLATION: f64 = 0.01;
pub const MAX_JOG_ROTATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JogFrame {
    Tool,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
    },
    Jog {
        branch: usize,
        frame: JogFrame,
        delta_translation: [f64; 3],
        delta_rotation_rpy: [f64; 3],
    },
    Clutch {
        engaged: bool,
    },
    Scale {
        ratio: f64,
    },
    Grip {
        branch: usize,
        closed: bool,
    },
}

impl ClientMessage {
    fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Hello { .. } => "hello",
            ClientMessage::Jog { .. } => "jog",
            ClientMessage::Clutch { .. } => "clutch",
            ClientMessage::Scale { .. } => "scale",
            ClientMessage::Grip { .. } => "grip",
        }
    }
}

const CLIENT_TYPES: &[&str] = &["hello", "jog", "clutch", "scale", "grip"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSnapshot {
    pub index: usize,
    pub joints: Vec<f64>,
    pub tool_pose: [f64; 8],
    pub target_pose: [f64; 8],
    pub error: f64,
    pub gripper_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfiSnapshot {
    pub index: usize,
    pub name: String,
    pub distance: f64,
    pub safe_distance: f64,
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSnapshot {
    pub position: [f64; 3],
    pub tier: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMessage {
    pub version: u32,
    pub tick: u64,
    pub time: f64,
    pub status: String,
    pub branches: Vec<BranchSnapshot>,
    pub vfi: Vec<VfiSnapshot>,
    pub markers: Vec<MarkerSnapshot>,
    pub latched: bool,
    pub block_pose: Option<[f64; 8]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        schema: String,
        version: u32,
        session: u64,
        branches: usize,
        dofs: Vec<usize>,
        dt: f64,
        rate_hz: f64,
        max_jog_translation: f64,
        max_jog_rotation: f64,
    },
    Snapshot(SnapshotMessage),
    Ack {
        command: String,
    },
    Error {
        code: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("unsupported schema version {got}, server speaks {SCHEMA_VERSION}")]
    VersionMismatch { got: u32 },
    #[error("branch {branch} does not exist ({count} branches)")]
    UnknownBranch { branch: usize, count: usize },
    #[error("jog delta out of bounds: |dt| = {translation} m (max {MAX_JOG_TRANSLATION}), |dr| = {rotation} rad (max {MAX_JOG_ROTATION})")]
    DeltaOutOfBounds { translation: f64, rotation: f64 },
    #[error("scale ratio must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("branch {branch} is controlled by session {owner}")]
    BranchLocked { branch: usize, owner: u64 },
    #[error("simulation is not running")]
    Stopped,
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Malformed(_) => "Malformed",
            GatewayError::UnknownType(_) => "UnknownType",
            GatewayError::VersionMismatch { .. } => "VersionMismatch",
            GatewayError::UnknownBranch { .. } => "UnknownBranch",
            GatewayError::DeltaOutOfBounds { .. } => "DeltaOutOfBounds",
            GatewayError::InvalidScale(_) => "InvalidScale",
            GatewayError::BranchLocked { .. } => "BranchLocked",
            GatewayError::Stopped => "Stopped",
        }
    }

    pub fn to_message(&self) -> ServerMessage {
        ServerMessage::Error { code: self.code().into(), message: self.to_string() }
    }
}

/// Parses a client message, classifying failures.
pub fn parse_client_message(text: &str) -> Result<ClientMessage, GatewayError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| GatewayError::Malformed("missing string field `type`".into()))?;
    if !CLIENT_TYPES.contains(&kind) {
        return Err(GatewayError::UnknownType(kind.to_string()));
    }
    let msg: ClientMessage = serde_json::from_value(value).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    match &msg {
        ClientMessage::Jog { delta_translation, delta_rotation_rpy, .. }
            if delta_translation.iter().chain(delta_rotation_rpy).any(|v| !v.is_finite()) =>
        {
            Err(GatewayError::Malformed("jog deltas must be finite".into()))
        }
        _ => Ok(msg),
    }
}

/// Per-connection operator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsoleSession {
    pub id: u64,
    pub clutched: bool,
    pub scale: f64,
}

impl ConsoleSession {
    pub fn new(id: u64) -> Self {
        ConsoleSession { id, clutched: false, scale: 1.0 }
    }
}

/// New target after a jog. Tool-frame jogs right-compose the delta,
/// base-frame jogs left-compose it; translations are divided by the scale.
pub fn apply_jog(
    session: &ConsoleSession,
    target: &DualQuaternion,
    frame: JogFrame,
    delta_translation: [f64; 3],
    delta_rotation_rpy: [f64; 3],
) -> Result<DualQuaternion, GatewayError> {
    let t = Vector3::from(delta_translation);
    let r = Vector3::from(delta_rotation_rpy);
    if !(t.norm() <= MAX_JOG_TRANSLATION && r.norm() <= MAX_JOG_ROTATION) {
        return Err(GatewayError::DeltaOutOfBounds { translation: t.norm(), rotation: r.norm() });
    }
    if session.clutched {
        return Ok(*target);
    }
    let rot = Quaternion::from_rpy(r.x, r.y, r.z);
    let delta = DualQuaternion::from_rt(rot, &(t / session.scale)).expect("rpy rotations are unit");
    Ok(match frame {
        JogFrame::Tool => *target * delta,
        JogFrame::Base => delta * *target,
    })
}

fn vec8(x: &DualQuaternion) -> [f64; 8] {
    x.vec8().0
}

/// Snapshot of the simulation after the tick described by `info`.
pub fn snapshot_state(sim: &Simulation, info: &TickInfo) -> SnapshotMessage {
    let system = sim.system();
    let specs = &sim.controller.specs;
    SnapshotMessage {
        version: SCHEMA_VERSION,
        tick: info.record.tick,
        time: info.record.t,
        status: info.record.status.clone(),
        branches: (0..system.branch_count())
            .map(|b| BranchSnapshot {
                index: b,
                joints: system.slice(&info.record.q, b).to_vec(),
                tool_pose: vec8(&info.tool_poses[b]),
                target_pose: vec8(&info.targets[b]),
                error: info.record.errors[b],
                gripper_closed: sim.gripper(b),
            })
            .collect(),
        vfi: specs
            .iter()
            .enumerate()
            .map(|(i, s)| VfiSnapshot {
                index: i,
                name: sim.vfi_names[i].clone(),
                distance: info.record.vfi[i],
                safe_distance: s.safe_distance,
                direction: s.direction.to_string(),
            })
            .collect(),
        markers: sim
            .markers()
            .iter()
            .map(|m| MarkerSnapshot { position: [m.position.x, m.position.y, m.position.z], tier: m.tier })
            .collect(),
        latched: info.record.latched,
        block_pose: sim.grasp().map(|g| vec8(&g.block)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatewayConfig {
    pub addr: SocketAddr,
    pub rate_hz: f64,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            rate_hz: DEFAULT_SNAPSHOT_HZ,
            speed: 1.0,
        }
    }
}

enum Request {
    Command { session: u64, msg: ClientMessage, reply: Sender<Result<(), GatewayError>> },
    Disconnect { session: u64 },
}

struct Shared {
    latest: Mutex<Option<Arc<SnapshotMessage>>>,
    stop: AtomicBool,
    next_session: AtomicU64,
}

/// Handle to a running gateway; dropping it stops the service.
pub struct Gateway {
    pub local_addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Gateway {
    pub fn start(sim: Simulation, config: GatewayConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(config.addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            latest: Mutex::new(None),
            stop: AtomicBool::new(false),
            next_session: AtomicU64::new(1),
        });
        let (tx, rx) = mpsc::channel();
        let hello = Hello {
            branches: sim.system().branch_count(),
            dofs: sim.system().dofs(),
            dt: sim.dt(),
        };

        let sim_shared = shared.clone();
        let sim_thread = std::thread::spawn(move || sim_loop(sim, rx, sim_shared, config.speed));
        let acc_shared = shared.clone();
        let accept_thread = std::thread::spawn(move || {
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !acc_shared.stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let (shared, tx, hello) = (acc_shared.clone(), tx.clone(), hello.clone());
                        conns.push(std::thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, shared, tx, hello, config.rate_hz) {
                                log::debug!("connection {peer} closed: {e}");
                            }
                        }));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            for h in conns {
                let _ = h.join();
            }
        });
        Ok(Gateway { local_addr, shared, threads: vec![sim_thread, accept_thread] })
    }

    pub fn latest_snapshot(&self) -> Option<Arc<SnapshotMessage>> {
        self.shared.latest.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Blocks until the service is stopped from another thread or fails.
    pub fn wait(mut self) {
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone)]
struct Hello {
    branches: usize,
    dofs: Vec<usize>,
    dt: f64,
}

struct Control {
    sessions: HashMap<u64, ConsoleSession>,
    owners: HashMap<usize, u64>,
}

impl Control {
    fn session(&mut self, id: u64) -> &mut ConsoleSession {
        self.sessions.entry(id).or_insert_with(|| ConsoleSession::new(id))
    }

    fn claim(&mut self, id: u64, branch: usize, count: usize) -> Result<(), GatewayError> {
        if branch >= count {
            return Err(GatewayError::UnknownBranch { branch, count });
        }
        match self.owners.get(&branch) {
            Some(&owner) if owner != id => Err(GatewayError::BranchLocked { branch, owner }),
            _ => {
                self.owners.insert(branch, id);
                Ok(())
            }
        }
    }

    fn apply(&mut self, sim: &mut Simulation, id: u64, msg: ClientMessage) -> Result<(), GatewayError> {
        let count = sim.system().branch_count();
        match msg {
            ClientMessage::Hello { version } if version != SCHEMA_VERSION => Err(GatewayError::VersionMismatch { got: version }),
            ClientMessage::Hello { .. } => Ok(()),
            ClientMessage::Clutch { engaged } => {
                self.session(id).clutched = engaged;
                Ok(())
            }
            ClientMessage::Scale { ratio } => {
                if !(ratio > 0.0 && ratio.is_finite()) {
                    return Err(GatewayError::InvalidScale(ratio));
                }
                self.session(id).scale = ratio;
                Ok(())
            }
            ClientMessage::Jog { branch, frame, delta_translation, delta_rotation_rpy } => {
                if branch >= count {
                    return Err(GatewayError::UnknownBranch { branch, count });
                }
                let session = *self.session(id);
                let target = apply_jog(&session, &sim.targets()[branch], frame, delta_translation, delta_rotation_rpy)?;
                self.claim(id, branch, count)?;
                if !session.clutched {
                    sim.set_target(branch, target);
                }
                Ok(())
            }
            ClientMessage::Grip { branch, closed } => {
                self.claim(id, branch, count)?;
                sim.set_gripper(branch, closed);
                Ok(())
            }
        }
    }
}

fn sim_loop(mut sim: Simulation, rx: Receiver<Request>, shared: Arc<Shared>, speed: f64) {
    let mut control = Control { sessions: HashMap::new(), owners: HashMap::new() };
    let period = Duration::from_secs_f64(sim.dt() / speed.max(1e-6));
    let mut next = Instant::now();
    while !shared.stop.load(Ordering::Relaxed) {
        while let Ok(req) = rx.try_recv() {
            match req {
                Request::Command { session, msg, reply } => {
                    let _ = reply.send(control.apply(&mut sim, session, msg));
                }
                Request::Disconnect { session } => {
                    control.sessions.remove(&session);
                    control.owners.retain(|_, owner| *owner != session);
                }
            }
        }
        let info = sim.step();
        let snap = Arc::new(snapshot_state(&sim, &info));
        *shared.latest.lock().unwrap_or_else(|e| e.into_inner()) = Some(snap);
        next += period;
        match next.checked_duration_since(Instant::now()) {
            Some(wait) => std::thread::sleep(wait),
            None => next = Instant::now(),
        }
    }
}

#[allow(clippy::result_large_err)]
fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> tungstenite::Result<()> {
    let text = serde_json::to_string(msg).expect("server messages serialize");
    ws.send(Message::text(text))
}

#[allow(clippy::result_large_err)]
fn serve_connection(
    stream: TcpStream,
    shared: Arc<Shared>,
    tx: Sender<Request>,
    hello: Hello,
    rate_hz: f64,
) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let session = shared.next_session.fetch_add(1, Ordering::Relaxed);
    let result = connection_loop(&mut ws, &shared, &tx, &hello, rate_hz, session);
    let _ = tx.send(Request::Disconnect { session });
    result
}

#[allow(clippy::result_large_err)]
fn connection_loop(
    ws: &mut WebSocket<TcpStream>,
    shared: &Shared,
    tx: &Sender<Request>,
    hello: &Hello,
    rate_hz: f64,
    session: u64,
) -> tungstenite::Result<()> {
    send(
        ws,
        &ServerMessage::Hello {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            session,
            branches: hello.branches,
            dofs: hello.dofs.clone(),
            dt: hello.dt,
            rate_hz,
            max_jog_translation: MAX_JOG_TRANSLATION,
            max_jog_rotation: MAX_JOG_ROTATION,
        },
    )?;
    let interval = Duration::from_secs_f64(1.0 / rate_hz.max(1e-3));
    let mut next_snapshot = Instant::now();
    let mut last_tick = None;
    while !shared.stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match parse_client_message(&text) {
                    Ok(msg) => {
                        let kind = msg.kind();
                        let (rtx, rrx) = mpsc::channel();
                        let sent = tx.send(Request::Command { session, msg, reply: rtx });
                        match sent.ok().and_then(|_| rrx.recv().ok()) {
                            Some(Ok(())) => ServerMessage::Ack { command: kind.into() },
                            Some(Err(e)) => e.to_message(),
                            None => GatewayError::Stopped.to_message(),
                        }
                    }
                    Err(e) => e.to_message(),
                };
                send(ws, &reply)?;
            }
            Ok(Message::Binary(_)) => send(ws, &GatewayError::Malformed("binary frames are not supported".into()).to_message())?,
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
        if Instant::now() >= next_snapshot {
            let snap = shared.latest.lock().unwrap_or_else(|e| e.into_inner()).clone();
            if let Some(s) = snap.filter(|s| Some(s.tick) != last_tick) {
                last_tick = Some(s.tick);
                send(ws, &ServerMessage::Snapshot((*s).clone()))?;
                next_snapshot += interval;
                if next_snapshot < Instant::now() {
                    next_snapshot = Instant::now() + interval;
                }
            }
        }
    }
    ws.close(None).ok();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_classification() {
        assert!(matches!(parse_client_message("{"), Err(GatewayError::Malformed(_))));
        assert!(matches!(parse_client_message("{\"type\": 3}"), Err(GatewayError::Malformed(_))));
        assert!(matches!(parse_client_message("{\"type\": \"warp\"}"), Err(GatewayError::UnknownType(_))));
        assert!(matches!(
            parse_client_message("{\"type\": \"clutch\", \"engaged\": true, \"extra\": 1}"),
            Err(GatewayError::Malformed(_))
        ));
        assert_eq!(
            parse_client_message("{\"type\": \"grip\", \"branch\": 1, \"closed\": true}").unwrap(),
            ClientMessage::Grip { branch: 1, closed: true }
        );
    }

    #[test]
    fn jog_semantics() {
        let s = ConsoleSession { id: 1, clutched: false, scale: 3.0 };
        let x = DualQuaternion::from_rt(Quaternion::rot_z(std::f64::consts::FRAC_PI_2), &Vector3::new(0.1, 0.2, 0.3)).unwrap();
        let y = apply_jog(&s, &x, JogFrame::Tool, [0.003, 0.0, 0.0], [0.0; 3]).unwrap();
        assert!((y.translation() - Vector3::new(0.1, 0.201, 0.3)).norm() < 1e-15);
        let z = apply_jog(&s, &x, JogFrame::Base, [0.003, 0.0, 0.0], [0.0; 3]).unwrap();
        assert!((z.translation() - Vector3::new(0.101, 0.2, 0.3)).norm() < 1e-15);
        assert_eq!(apply_jog(&s, &x, JogFrame::Tool, [0.0; 3], [0.0; 3]).unwrap(), x);
        assert!(matches!(
            apply_jog(&s, &x, JogFrame::Tool, [0.011, 0.0, 0.0], [0.0; 3]),
            Err(GatewayError::DeltaOutOfBounds { .. })
        ));
        let clutched = ConsoleSession { clutched: true, ..s };
        assert_eq!(apply_jog(&clutched, &x, JogFrame::Tool, [0.003, 0.0, 0.0], [0.0; 3]).unwrap(), x);
    }
}
