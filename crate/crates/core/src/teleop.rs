//! Operator-side pose streaming: the 90-byte datagram, master-to-follower
//! mapping with clutch and motion scaling, and a UDP receiver/emulator pair.
//!
//! Packet layout, little-endian, in field order:
//!
//! | offset | size | field                                     |
//! |-------:|-----:|-------------------------------------------|
//! | 0      | 4    | magic `AISP` (`41 49 53 50`)              |
//! | 4      | 1    | version, currently 1                      |
//! | 5      | 1    | flags: bit0 clutch, bit1 gripper closed    |
//! | 6      | 4    | sequence number (u32)                     |
//! | 10     | 8    | timestamp in microseconds (u64)           |
//! | 18     | 64   | pose, 8 × f64 in vec8 order               |
//! | 82     | 8    | gripper aperture (f64 in [0, 1])          |

use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::Deserialize;

use crate::pose::{DualQuaternion, Quaternion, Vec8};

pub const PACKET_LEN: usize = 90;
pub const MAGIC: [u8; 4] = *b"AISP";
pub const VERSION: u8 = 1;
pub const FLAG_CLUTCH: u8 = 0b01;
pub const FLAG_GRIPPER: u8 = 0b10;
/// Pose unit-norm tolerance applied on both encode and decode.
pub const PACKET_UNIT_TOL: f64 = 1e-6;
pub const DEFAULT_SCALE: f64 = 3.0;
pub const BASE_PORT: u16 = 9871;

/// UDP port a follower listens on for the zero-based branch `branch`.
pub fn follower_port(branch: usize) -> u16 {
    BASE_PORT + branch as u16
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("expected {PACKET_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
    #[error("pose is not a unit dual quaternion")]
    NonUnitPose,
    #[error("gripper aperture {0} outside [0, 1]")]
    ApertureOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorPacket {
    pub clutch: bool,
    pub gripper_closed: bool,
    pub seq: u32,
    pub timestamp_us: u64,
    pub pose: DualQuaternion,
    pub aperture: f64,
}

impl OperatorPacket {
    pub fn new(seq: u32, timestamp_us: u64, pose: DualQuaternion) -> Self {
        OperatorPacket { clutch: false, gripper_closed: false, seq, timestamp_us, pose, aperture: 1.0 }
    }

    fn flags(&self) -> u8 {
        (self.clutch as u8 * FLAG_CLUTCH) | (self.gripper_closed as u8 * FLAG_GRIPPER)
    }
}

fn check_pose(pose: &DualQuaternion) -> Result<(), CodecError> {
    let v = pose.vec8().0;
    if v.iter().any(|x| !x.is_finite()) || !pose.is_unit(PACKET_UNIT_TOL) {
        return Err(CodecError::NonUnitPose);
    }
    Ok(())
}

fn check_aperture(a: f64) -> Result<(), CodecError> {
    if !(0.0..=1.0).contains(&a) {
        return Err(CodecError::ApertureOutOfRange(a));
    }
    Ok(())
}

pub fn encode(p: &OperatorPacket) -> Result<[u8; PACKET_LEN], CodecError> {
    check_pose(&p.pose)?;
    check_aperture(p.aperture)?;
    let mut out = [0u8; PACKET_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4] = VERSION;
    out[5] = p.flags();
    out[6..10].copy_from_slice(&p.seq.to_le_bytes());
    out[10..18].copy_from_slice(&p.timestamp_us.to_le_bytes());
    for (i, c) in p.pose.vec8().0.iter().enumerate() {
        out[18 + 8 * i..26 + 8 * i].copy_from_slice(&c.to_le_bytes());
    }
    out[82..90].copy_from_slice(&p.aperture.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<OperatorPacket, CodecError> {
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8-byte slice"));
    if bytes.len() != PACKET_LEN {
        return Err(CodecError::BadLength(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(CodecError::BadVersion(bytes[4]));
    }
    let flags = bytes[5];
    if flags & !(FLAG_CLUTCH | FLAG_GRIPPER) != 0 {
        return Err(CodecError::ReservedFlags(flags));
    }
    let mut v = [0.0; 8];
    for (i, c) in v.iter_mut().enumerate() {
        *c = f64_at(18 + 8 * i);
    }
    let pose = DualQuaternion::from_vec8(&Vec8(v));
    check_pose(&pose)?;
    let aperture = f64_at(82);
    check_aperture(aperture)?;
    Ok(OperatorPacket {
        clutch: flags & FLAG_CLUTCH != 0,
        gripper_closed: flags & FLAG_GRIPPER != 0,
        seq: u32::from_le_bytes(bytes[6..10].try_into().expect("4-byte slice")),
        timestamp_us: u64::from_le_bytes(bytes[10..18].try_into().expect("8-byte slice")),
        pose,
        aperture,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("teleoperation session has no follower anchor")]
pub struct NoAnchor;

/// Follower-side state of one master/follower pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub clutch: bool,
    /// Master:follower ratio for translations.
    pub scale: f64,
    pub master_anchor: Option<DualQuaternion>,
    pub follower_anchor: Option<DualQuaternion>,
    pub last_seq: Option<u32>,
    pub gripper_closed: bool,
    target: Option<DualQuaternion>,
}

impl SessionState {
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
        SessionState {
            clutch: false,
            scale,
            master_anchor: None,
            follower_anchor: None,
            last_seq: None,
            gripper_closed: false,
            target: None,
        }
    }

    /// Session anchored at the follower's current pose; the first master
    /// pose seen becomes the master anchor.
    pub fn anchored(scale: f64, follower: DualQuaternion) -> Self {
        let mut s = Self::new(scale);
        s.follower_anchor = Some(follower);
        s.target = Some(follower);
        s
    }

    pub fn target(&self) -> Option<DualQuaternion> {
        self.target
    }

    /// Engages or releases the clutch. Anchors are re-captured on both edges
    /// so the target is continuous across the transition.
    pub fn set_clutch(&mut self, engaged: bool, master: &DualQuaternion) {
        if engaged != self.clutch {
            self.follower_anchor = self.target.or(self.follower_anchor);
            self.master_anchor = Some(*master);
        }
        self.clutch = engaged;
    }

    /// Follower target for a master pose.
    pub fn map_master_to_target(&mut self, master: &DualQuaternion) -> Result<DualQuaternion, NoAnchor> {
        let follower = self.follower_anchor.ok_or(NoAnchor)?;
        if self.clutch || self.master_anchor.is_none() {
            self.master_anchor = Some(*master);
            let held = self.target.unwrap_or(follower);
            self.target = Some(held);
            return Ok(held);
        }
        let anchor = self.master_anchor.expect("checked above");
        let dt = (master.translation() - anchor.translation()) / self.scale;
        let dr = master.rotation() * anchor.rotation().conj();
        let r = (dr * follower.rotation()).normalized();
        let t = follower.translation() + dt;
        let x = DualQuaternion::from_rt(r, &t).expect("normalized rotation");
        self.target = Some(x);
        Ok(x)
    }

    /// Applies one received packet. Returns `None` for stale packets.
    pub fn ingest(&mut self, p: &OperatorPacket) -> Option<Result<DualQuaternion, NoAnchor>> {
        if self.last_seq.is_some_and(|s| p.seq <= s) {
            return None;
        }
        self.last_seq = Some(p.seq);
        self.gripper_closed = p.gripper_closed;
        self.set_clutch(p.clutch, &p.pose);
        Some(self.map_master_to_target(&p.pose))
    }
}

/// Single-slot latest-value mailbox. Writers never block on readers; a
/// packet with a sequence number not above the stored one is discarded.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    slot: Arc<Mutex<Option<OperatorPacket>>>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the packet was stored.
    pub fn offer(&self, p: OperatorPacket) -> bool {
        let mut slot = self.slot.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_some_and(|old| p.seq <= old.seq) {
            return false;
        }
        *slot = Some(p);
        true
    }

    pub fn latest(&self) -> Option<OperatorPacket> {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Background thread decoding datagrams into a mailbox.
pub struct UdpReceiver {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<ReceiverStats>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReceiverStats {
    pub accepted: u64,
    pub stale: u64,
    pub rejected: u64,
}

impl UdpReceiver {
    pub fn spawn<A: ToSocketAddrs>(addr: A, mailbox: Mailbox) -> std::io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let local_addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            let mut stats = ReceiverStats::default();
            let mut buf = [0u8; 512];
            while !flag.load(Ordering::Relaxed) {
                let Ok(n) = socket.recv(&mut buf) else { continue };
                match decode(&buf[..n]) {
                    Ok(p) if mailbox.offer(p) => stats.accepted += 1,
                    Ok(_) => stats.stale += 1,
                    Err(e) => {
                        log::debug!("dropping datagram: {e}");
                        stats.rejected += 1;
                    }
                }
            }
            stats
        });
        Ok(UdpReceiver { local_addr, stop, handle: Some(handle) })
    }

    pub fn stop(mut self) -> ReceiverStats {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default()
    }
}

impl Drop for UdpReceiver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Timed master-pose script used by the operator emulator and as a
/// simulation command log.
///
/// ```yaml
/// rate_hz: 100
/// interpolate: false
/// waypoints:
///   - {t: 0.0, translation: [0.0, 0.0, 0.0]}
///   - {t: 0.5, translation: [0.003, 0.0, 0.0], clutch: false, gripper: true}
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorScript {
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default)]
    pub interpolate: bool,
    pub waypoints: Vec<Waypoint>,
}

fn default_rate() -> f64 {
    100.0
}

fn default_aperture() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
    #[serde(default)]
    pub clutch: bool,
    #[serde(default)]
    pub gripper: bool,
    #[serde(default = "default_aperture")]
    pub aperture: f64,
}

impl Waypoint {
    pub fn pose(&self) -> DualQuaternion {
        let [r, p, y] = self.rpy;
        DualQuaternion::from_rt(Quaternion::from_rpy(r, p, y), &Vector3::from(self.translation))
            .expect("rpy rotations are unit")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("script: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("script: {0}")]
    Invalid(String),
}

impl OperatorScript {
    pub fn from_yaml_str(text: &str) -> Result<Self, ScriptError> {
        let s: OperatorScript = serde_yaml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Self::from_yaml_str(&text)
    }

    fn validate(&self) -> Result<(), ScriptError> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(ScriptError::Invalid(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if self.waypoints.is_empty() {
            return Err(ScriptError::Invalid("at least one waypoint is required".into()));
        }
        let mut last = f64::NEG_INFINITY;
        for w in &self.waypoints {
            if !(w.t >= 0.0 && w.t > last) {
                return Err(ScriptError::Invalid(format!("waypoint times must be increasing and non-negative (t = {})", w.t)));
            }
            check_aperture(w.aperture).map_err(|e| ScriptError::Invalid(e.to_string()))?;
            last = w.t;
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.t)
    }

    /// Master state at time `t`: sample-and-hold, or linear interpolation
    /// between waypoints when `interpolate` is set. Flags always hold.
    pub fn sample(&self, t: f64) -> (DualQuaternion, &Waypoint) {
        let i = self.waypoints.iter().rposition(|w| w.t <= t).unwrap_or(0);
        let w = &self.waypoints[i];
        if !self.interpolate || i + 1 >= self.waypoints.len() || t < w.t {
            return (w.pose(), w);
        }
        let n = &self.waypoints[i + 1];
        let s = (t - w.t) / (n.t - w.t);
        let (a, b) = (w.pose(), n.pose());
        let ta = a.translation();
        let tr = ta + (b.translation() - ta) * s;
        let (ra, mut rb) = (a.rotation(), b.rotation());
        if ra.dot(&rb) < 0.0 {
            rb = -rb;
        }
        let r = (ra.scale(1.0 - s) + rb.scale(s)).normalized();
        (DualQuaternion::from_rt(r, &tr).expect("normalized rotation"), w)
    }

    /// Packets at `rate_hz` from t = 0 through the last waypoint.
    pub fn packets(&self) -> Vec<(f64, OperatorPacket)> {
        let period = 1.0 / self.rate_hz;
        let count = (self.duration() * self.rate_hz + 1e-9).floor() as u64 + 1;
        (0..count)
            .map(|k| {
                let t = k as f64 * period;
                let (pose, w) = self.sample(t);
                let p = OperatorPacket {
                    clutch: w.clutch,
                    gripper_closed: w.gripper,
                    seq: k as u32,
                    timestamp_us: (t * 1e6).round() as u64,
                    pose,
                    aperture: w.aperture,
                };
                (t, p)
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmulateError {
    #[error("cannot reach {addr}: {source}")]
    Unreachable { addr: String, source: std::io::Error },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("socket: {0}")]
    Io(#[from] std::io::Error),
}

/// Streams a script to `target` in real time (scaled by `speed`). Send
/// failures are ignored unless they persist for `timeout`.
pub fn emulate_operator<A: ToSocketAddrs>(
    target: A,
    script: &OperatorScript,
    speed: f64,
    timeout: Duration,
) -> Result<usize, EmulateError> {
    let addr = target
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address"))?;
    let bind: SocketAddr = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal address");
    let socket = UdpSocket::bind(bind)?;
    socket.connect(addr)?;
    let start = Instant::now();
    let mut failing_since: Option<Instant> = None;
    let mut last_ok = true;
    let mut sent = 0;
    for (t, p) in script.packets() {
        let due = start + Duration::from_secs_f64(t / speed);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        match socket.send(&encode(&p)?) {
            Ok(_) => {
                // A refusal surfaces on the send after the one it answers,
                // so only two clean sends in a row end a failure streak.
                if last_ok {
                    failing_since = None;
                }
                last_ok = true;
                sent += 1;
            }
            Err(e) => {
                last_ok = false;
                let since = *failing_since.get_or_insert_with(Instant::now);
                if since.elapsed() >= timeout {
                    return Err(EmulateError::Unreachable { addr: addr.to_string(), source: e });
                }
            }
        }
    }
    Ok(sent)
}
