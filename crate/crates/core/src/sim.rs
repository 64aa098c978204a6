//! Deterministic kinematic simulation: scenarios, task objects (grasp latch,
//! drill marking, oval tracing), trace recording and replay.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::chain::{ChainError, Kinematics, PoseSpec};
use crate::controller::{ControlError, ControlOutput, ControlTask, Controller, ControllerConfig};
use crate::pose::{DualQuaternion, Quaternion};
use crate::system::RobotSystem;
use crate::teleop::{OperatorPacket, OperatorScript, ScriptError, SessionState, DEFAULT_SCALE};
use crate::vfi::{parse_vfi_config_for, ConstraintGains, VfiError};

pub const TRACE_SCHEMA: &str = "# railkit trace v1";
pub const DEFAULT_GRASP_THRESHOLD: f64 = 0.005;
pub const DEFAULT_MARK_DEPTH: f64 = 1e-4;
pub const DEFAULT_BREAK_DEPTH: f64 = 5e-4;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Chain { path: String, source: ChainError },
    #[error("{path}: {source}")]
    Vfi { path: String, source: VfiError },
    #[error("{path}: {source}")]
    Script { path: String, source: ScriptError },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("trace schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("corrupt trace row at line {line}: {message}")]
    CorruptRow { line: usize, message: String },
}

fn read_text(path: &Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.display().to_string(), source })
}

// ---------------------------------------------------------------------------
// Scenario files

/// Scenario description. Relative paths resolve against the scenario file.
///
/// ```yaml
/// dt: 0.004
/// duration: 2.0
/// seed: 7
/// vfi: ../vfi/platform.yaml
/// branches:
///   - chain: ../chains/branch_6axis.yaml
///     mount: {rpy: [0.0, 0.0, 0.785]}
///     q0: [0.0, 0.1, 0.0, 0.1, -1.5, 0.0, -1.0, 0.0]
///     task: {kind: hold}
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub vfi: Option<String>,
    pub branches: Vec<BranchFile>,
    #[serde(default)]
    pub objects: ObjectsFile,
    #[serde(default)]
    pub grasp: Option<GraspFile>,
    #[serde(default)]
    pub drill: Option<DrillFile>,
    #[serde(default)]
    pub controller: ControllerFile,
}

fn default_dt() -> f64 {
    crate::controller::DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchFile {
    pub chain: String,
    #[serde(default)]
    pub mount: PoseSpec,
    pub q0: Vec<f64>,
    /// Uniform random perturbation of `q0`, drawn from the scenario seed.
    #[serde(default)]
    pub q0_jitter: f64,
    #[serde(default)]
    pub task: TaskFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    #[default]
    World,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskFile {
    /// Keep the initial tool pose.
    #[default]
    Hold,
    /// Fixed world-frame target.
    Pose {
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        rpy: [f64; 3],
    },
    /// Initial tool pose moved by a translation over `duration` seconds, then held.
    Line {
        translation: [f64; 3],
        #[serde(default)]
        frame: Frame,
        #[serde(default)]
        start: f64,
        duration: f64,
    },
    /// Ellipse in the tool x-y plane. Without `center`, the ellipse starts at
    /// the initial tool pose.
    Oval {
        a: f64,
        b: f64,
        period: f64,
        #[serde(default)]
        depth: f64,
        #[serde(default)]
        center: Option<PoseSpec>,
        #[serde(default)]
        start: f64,
        #[serde(default = "one")]
        laps: f64,
    },
    /// Master poses from an operator script through a clutch/scale session.
    Teleop {
        script: String,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Random goal positions inside a ball, redrawn every `interval` seconds.
    RandomGoals {
        center: [f64; 3],
        radius: f64,
        interval: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectsFile {
    #[serde(default)]
    pub block: Option<BlockFile>,
    #[serde(default)]
    pub pegs: Vec<PegFile>,
    #[serde(default)]
    pub containers: Vec<[f64; 3]>,
    #[serde(default)]
    pub shell: Option<ShellFile>,
}

/// Block pose. With `frame: tool` it is expressed in the initial tool frame
/// of the grasping branch.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockFile {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
    #[serde(default)]
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PegFile {
    pub position: [f64; 3],
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellFile {
    pub center: [f64; 3],
    pub radius: f64,
    /// `tool` places the center in the drilling branch's initial tool frame.
    #[serde(default)]
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspFile {
    /// One-based branch holding the forceps.
    pub branch: usize,
    #[serde(default = "default_grasp_threshold")]
    pub threshold: f64,
    /// Gripper state changes; overrides the teleoperation gripper flag.
    #[serde(default)]
    pub schedule: Vec<GripEvent>,
}

fn default_grasp_threshold() -> f64 {
    DEFAULT_GRASP_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripEvent {
    pub t: f64,
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrillFile {
    /// One-based branch holding the drill.
    pub branch: usize,
    #[serde(default = "default_mark")]
    pub mark_depth: f64,
    #[serde(default = "default_break")]
    pub break_depth: f64,
}

fn default_mark() -> f64 {
    DEFAULT_MARK_DEPTH
}

fn default_break() -> f64 {
    DEFAULT_BREAK_DEPTH
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerFile {
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_vfi_gain")]
    pub vfi_gain: f64,
    #[serde(default = "default_joint_gain")]
    pub joint_limit_gain: f64,
}

impl Default for ControllerFile {
    fn default() -> Self {
        ControllerFile {
            gain: default_gain(),
            damping: default_damping(),
            vfi_gain: default_vfi_gain(),
            joint_limit_gain: default_joint_gain(),
        }
    }
}

fn default_gain() -> f64 {
    crate::controller::DEFAULT_TASK_GAIN
}
fn default_damping() -> f64 {
    crate::controller::DEFAULT_DAMPING
}
fn default_vfi_gain() -> f64 {
    crate::vfi::DEFAULT_VFI_GAIN
}
fn default_joint_gain() -> f64 {
    crate::vfi::DEFAULT_JOINT_LIMIT_GAIN
}

/// A scenario with its base directory for resolving relative paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_yaml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, SimError> {
        let file: ScenarioFile = serde_yaml::from_str(text)?;
        let s = Scenario { file, base_dir: base_dir.into() };
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = read_text(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_yaml_str(&text, dir)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Number of recorded ticks after the initial one.
    pub fn steps(&self) -> u64 {
        (self.file.duration / self.file.dt + 1e-9).floor() as u64
    }

    fn validate(&self) -> Result<(), SimError> {
        let f = &self.file;
        let bad = |m: String| Err(SimError::Invalid(m));
        if !(f.dt > 0.0 && f.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", f.dt));
        }
        if !(f.duration >= 0.0 && f.duration.is_finite()) {
            return bad(format!("duration must be non-negative, got {}", f.duration));
        }
        if f.branches.is_empty() {
            return bad("at least one branch is required".into());
        }
        let n = f.branches.len();
        let c = &f.controller;
        if [c.gain, c.damping, c.vfi_gain, c.joint_limit_gain].iter().any(|g| !(*g > 0.0)) {
            return bad("controller gains must be positive".into());
        }
        for (i, b) in f.branches.iter().enumerate() {
            let ok = match &b.task {
                TaskFile::Line { duration, .. } => *duration >= 0.0,
                TaskFile::Oval { a, b, period, laps, .. } => *a >= 0.0 && *b >= 0.0 && *period > 0.0 && *laps >= 0.0,
                TaskFile::Teleop { scale, .. } => *scale > 0.0,
                TaskFile::RandomGoals { radius, interval, .. } => *radius >= 0.0 && *interval > 0.0,
                _ => true,
            };
            if !ok {
                return bad(format!("branch {}: invalid task parameters", i + 1));
            }
            if b.q0_jitter < 0.0 {
                return bad(format!("branch {}: q0_jitter must be non-negative", i + 1));
            }
        }
        if let Some(g) = &f.grasp {
            if g.branch == 0 || g.branch > n {
                return bad(format!("grasp.branch {} out of range 1..={n}", g.branch));
            }
            if f.objects.block.is_none() {
                return bad("grasp requires objects.block".into());
            }
            if !(g.threshold > 0.0) {
                return bad("grasp.threshold must be positive".into());
            }
        }
        if let Some(d) = &f.drill {
            if d.branch == 0 || d.branch > n {
                return bad(format!("drill.branch {} out of range 1..={n}", d.branch));
            }
            if f.objects.shell.is_none() {
                return bad("drill requires objects.shell".into());
            }
            if !(0.0 < d.mark_depth && d.mark_depth < d.break_depth) {
                return bad("drill depths must satisfy 0 < mark_depth < break_depth".into());
            }
        }
        if let Some(s) = &f.objects.shell {
            if !(s.radius > 0.0) {
                return bad("shell radius must be positive".into());
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task behaviors

/// Ellipse target in the x-y plane of `center`, offset by `depth` along its z.
pub fn oval_trajectory(t: f64, center: &DualQuaternion, a: f64, b: f64, period: f64, depth: f64) -> DualQuaternion {
    let th = 2.0 * std::f64::consts::PI * t / period;
    let local = Vector3::new(a * th.cos(), b * th.sin(), depth);
    *center * DualQuaternion::from_translation(&local)
}

/// Distance from `(x, y)` to the ellipse `(a cos θ, b sin θ)`.
pub fn ellipse_distance(a: f64, b: f64, x: f64, y: f64) -> f64 {
    let d = |th: f64| ((a * th.cos() - x).powi(2) + (b * th.sin() - y).powi(2)).sqrt();
    let n = 720;
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let best = (0..n).map(|i| i as f64 * step).min_by(|p, q| d(*p).total_cmp(&d(*q))).unwrap_or(0.0);
    // Golden-section refinement around the best sample.
    let (mut lo, mut hi) = (best - step, best + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if d(m1) < d(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    d(0.5 * (lo + hi)).min(d(best))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub position: Vector3<f64>,
    /// 1 = surface mark, 2 = breakthrough.
    pub tier: u8,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shell {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub mark_depth: f64,
    pub break_depth: f64,
}

impl Shell {
    pub fn penetration(&self, tip: &Vector3<f64>) -> f64 {
        (self.radius - (tip - self.center).norm()).max(0.0)
    }

    /// Marker produced by a tool tip, if any.
    pub fn drill_update(&self, tip: &Vector3<f64>, tick: u64) -> Option<Marker> {
        let depth = self.penetration(tip);
        if depth <= self.mark_depth {
            return None;
        }
        let dir = tip - self.center;
        let n = dir.norm();
        let dir = if n > 0.0 { dir / n } else { Vector3::z() };
        let tier = if depth > self.break_depth { 2 } else { 1 };
        Some(Marker { position: self.center + dir * self.radius, tier, tick })
    }
}

/// Rigid attachment of the block to the forceps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp {
    pub threshold: f64,
    pub block: DualQuaternion,
    /// `conj(tool) ⊗ block` captured when the latch closed.
    pub relative: Option<DualQuaternion>,
    pub episodes: usize,
}

impl Grasp {
    pub fn new(block: DualQuaternion, threshold: f64) -> Self {
        Grasp { threshold, block, relative: None, episodes: 0 }
    }

    pub fn latched(&self) -> bool {
        self.relative.is_some()
    }

    pub fn grasp_update(&mut self, tool: &DualQuaternion, closed: bool) {
        match (closed, self.relative) {
            (false, Some(_)) => self.relative = None,
            (true, None) => {
                if (tool.translation() - self.block.translation()).norm() < self.threshold {
                    self.relative = Some(tool.conj() * self.block);
                    self.episodes += 1;
                }
            }
            (true, Some(rel)) => self.block = *tool * rel,
            (false, None) => {}
        }
    }

    /// `‖vec8(conj(tool) ⊗ block − relative)‖∞` while latched.
    pub fn drift(&self, tool: &DualQuaternion) -> Option<f64> {
        let rel = self.relative?;
        let now = (tool.conj() * self.block).vec8().0;
        Some(now.iter().zip(rel.vec8().0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

// ---------------------------------------------------------------------------
// Simulation

#[derive(Debug, Clone)]
enum TargetSource {
    Fixed(DualQuaternion),
    Line { from: DualQuaternion, to: DualQuaternion, start: f64, duration: f64 },
    Oval { center: DualQuaternion, a: f64, b: f64, period: f64, depth: f64, start: f64, laps: f64 },
    Teleop { session: SessionState, packets: Vec<(f64, OperatorPacket)>, next: usize },
    RandomGoals { center: Vector3<f64>, radius: f64, interval: f64, rotation: Quaternion, current: DualQuaternion, next_draw: u64 },
}

/// Parameters of an oval task, exposed for deviation analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OvalTask {
    pub branch: usize,
    pub center: DualQuaternion,
    pub a: f64,
    pub b: f64,
    pub period: f64,
    pub depth: f64,
    pub start: f64,
    pub laps: f64,
}

impl OvalTask {
    pub fn target(&self, t: f64) -> DualQuaternion {
        let tt = (t - self.start).clamp(0.0, self.laps * self.period);
        oval_trajectory(tt, &self.center, self.a, self.b, self.period, self.depth)
    }

    /// In-plane distance from a world point to the ellipse.
    pub fn lateral_deviation(&self, p: &Vector3<f64>) -> f64 {
        let local = self.center.conj().transform_point(p);
        ellipse_distance(self.a, self.b, local.x, local.y)
    }
}

/// One row of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub tick: u64,
    pub t: f64,
    pub q: Vec<f64>,
    pub vfi: Vec<f64>,
    pub status: String,
    pub errors: Vec<f64>,
    pub markers: usize,
    pub breakthrough: bool,
    pub latched: bool,
}

/// Extra per-tick information not written to the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TickInfo {
    pub record: TraceRecord,
    pub output: Option<ControlOutput>,
    pub min_margin: Option<f64>,
    pub latch_drift: Option<f64>,
    pub tool_poses: Vec<DualQuaternion>,
    pub targets: Vec<DualQuaternion>,
    pub new_marker: Option<Marker>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: Scenario,
    pub controller: Controller,
    pub vfi_names: Vec<String>,
    q: Vec<f64>,
    tick: u64,
    sources: Vec<TargetSource>,
    targets: Vec<DualQuaternion>,
    gripper_override: Vec<Option<bool>>,
    grasp: Option<(usize, Grasp, Vec<GripEvent>)>,
    shell: Option<(usize, Shell)>,
    markers: Vec<Marker>,
    breakthrough_tick: Option<u64>,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        Self::new(Scenario::from_file(path)?)
    }

    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let f = &scenario.file;
        let mut rng = ChaCha8Rng::seed_from_u64(f.seed);
        let mut mounts = Vec::new();
        for b in &f.branches {
            let path = scenario.resolve(&b.chain);
            mounts.push((path, b.mount.to_pose()));
        }
        let system = RobotSystem::from_files(&mounts).map_err(|source| SimError::Chain {
            path: mounts.iter().map(|m| m.0.display().to_string()).collect::<Vec<_>>().join(", "),
            source,
        })?;
        let mut q = Vec::with_capacity(system.total_dof());
        for (i, b) in f.branches.iter().enumerate() {
            let dof = system.branches()[i].dof();
            if b.q0.len() != dof {
                return Err(SimError::Invalid(format!(
                    "branch {}: q0 has {} values, chain has {dof} joints",
                    i + 1,
                    b.q0.len()
                )));
            }
            for &v in &b.q0 {
                let jitter = if b.q0_jitter > 0.0 { rng.gen_range(-b.q0_jitter..=b.q0_jitter) } else { 0.0 };
                q.push(v + jitter);
            }
        }
        let q = system.clamp_joints(&q);

        let (specs, vfi_names) = match &f.vfi {
            Some(p) => {
                let path = scenario.resolve(p);
                let text = read_text(&path)?;
                let specs = parse_vfi_config_for(&text, &system.dofs())
                    .map_err(|source| SimError::Vfi { path: path.display().to_string(), source })?;
                let names = specs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| match (&s.first_name, &s.second_name) {
                        (Some(a), Some(b)) => format!("{a}/{b}"),
                        (Some(a), None) | (None, Some(a)) => a.clone(),
                        (None, None) => format!("vfi_{i}"),
                    })
                    .collect();
                (specs, names)
            }
            None => (Vec::new(), Vec::new()),
        };

        let c = &f.controller;
        let config = ControllerConfig {
            dt: f.dt,
            task_gain: c.gain,
            damping: c.damping,
            constraint_gains: ConstraintGains { vfi: c.vfi_gain, joint_limit: c.joint_limit_gain },
            ..ControllerConfig::default()
        };
        let controller = Controller::new(system, specs, config);
        let poses = controller.system.tool_poses(&q).map_err(ControlError::from)?;

        let mut sources = Vec::new();
        for (i, b) in f.branches.iter().enumerate() {
            let x0 = poses[i];
            let src = match &b.task {
                TaskFile::Hold => TargetSource::Fixed(x0),
                TaskFile::Pose { translation, rpy } => {
                    TargetSource::Fixed(PoseSpec { translation: *translation, rpy: *rpy }.to_pose())
                }
                TaskFile::Line { translation, frame, start, duration } => {
                    let d = DualQuaternion::from_translation(&Vector3::from(*translation));
                    let to = match frame {
                        Frame::World => d * x0,
                        Frame::Tool => x0 * d,
                    };
                    TargetSource::Line { from: x0, to, start: *start, duration: *duration }
                }
                TaskFile::Oval { a, b, period, depth, center, start, laps } => {
                    let center = match center {
                        Some(c) => c.to_pose(),
                        None => x0 * DualQuaternion::from_translation(&Vector3::new(-a, 0.0, 0.0)),
                    };
                    TargetSource::Oval { center, a: *a, b: *b, period: *period, depth: *depth, start: *start, laps: *laps }
                }
                TaskFile::Teleop { script, scale } => {
                    let path = scenario.resolve(script);
                    let s = OperatorScript::from_file(&path)
                        .map_err(|source| SimError::Script { path: path.display().to_string(), source })?;
                    TargetSource::Teleop { session: SessionState::anchored(*scale, x0), packets: s.packets(), next: 0 }
                }
                TaskFile::RandomGoals { center, radius, interval } => TargetSource::RandomGoals {
                    center: Vector3::from(*center),
                    radius: *radius,
                    interval: *interval,
                    rotation: x0.rotation(),
                    current: x0,
                    next_draw: 0,
                },
            };
            sources.push(src);
        }

        let grasp = f.grasp.as_ref().map(|g| {
            let b = f.objects.block.expect("validated");
            let local = PoseSpec { translation: b.translation, rpy: b.rpy }.to_pose();
            let block = match b.frame {
                Frame::World => local,
                Frame::Tool => poses[g.branch - 1] * local,
            };
            (g.branch - 1, Grasp::new(block, g.threshold), g.schedule.clone())
        });
        let shell = f.drill.as_ref().map(|d| {
            let s = f.objects.shell.expect("validated");
            let c = Vector3::from(s.center);
            let center = match s.frame {
                Frame::World => c,
                Frame::Tool => poses[d.branch - 1].transform_point(&c),
            };
            (
                d.branch - 1,
                Shell {
                    center,
                    radius: s.radius,
                    mark_depth: d.mark_depth,
                    break_depth: d.break_depth,
                },
            )
        });
        let n = f.branches.len();
        Ok(Simulation {
            controller,
            vfi_names,
            q,
            tick: 0,
            targets: poses,
            sources,
            gripper_override: vec![None; n],
            grasp,
            shell,
            markers: Vec::new(),
            breakthrough_tick: None,
            rng,
            scenario,
        })
    }

    pub fn system(&self) -> &RobotSystem {
        &self.controller.system
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn dt(&self) -> f64 {
        self.scenario.file.dt
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt()
    }

    pub fn targets(&self) -> &[DualQuaternion] {
        &self.targets
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn breakthrough_tick(&self) -> Option<u64> {
        self.breakthrough_tick
    }

    pub fn grasp(&self) -> Option<&Grasp> {
        self.grasp.as_ref().map(|g| &g.1)
    }

    pub fn shell(&self) -> Option<&Shell> {
        self.shell.as_ref().map(|s| &s.1)
    }

    pub fn oval_task(&self) -> Option<OvalTask> {
        self.sources.iter().enumerate().find_map(|(branch, s)| match *s {
            TargetSource::Oval { center, a, b, period, depth, start, laps } => {
                Some(OvalTask { branch, center, a, b, period, depth, start, laps })
            }
            _ => None,
        })
    }

    /// Replaces a branch's target source with a fixed pose.
    pub fn set_target(&mut self, branch: usize, target: DualQuaternion) {
        self.sources[branch] = TargetSource::Fixed(target);
        self.targets[branch] = target;
    }

    pub fn set_gripper(&mut self, branch: usize, closed: bool) {
        self.gripper_override[branch] = Some(closed);
    }

    pub fn gripper(&self, branch: usize) -> bool {
        if let Some(c) = self.gripper_override[branch] {
            return c;
        }
        if let Some((gb, _, schedule)) = &self.grasp {
            if *gb == branch && !schedule.is_empty() {
                let t = self.time() + 1e-12;
                return schedule.iter().rev().find(|e| e.t <= t).is_some_and(|e| e.closed);
            }
        }
        match &self.sources[branch] {
            TargetSource::Teleop { session, .. } => session.gripper_closed,
            _ => false,
        }
    }

    fn update_targets(&mut self) {
        let t = self.time();
        let tick = self.tick;
        for (i, src) in self.sources.iter_mut().enumerate() {
            let x = match src {
                TargetSource::Fixed(x) => *x,
                TargetSource::Line { from, to, start, duration } => {
                    let s = if *duration > 0.0 { ((t - *start) / *duration).clamp(0.0, 1.0) } else if t >= *start { 1.0 } else { 0.0 };
                    let p = from.translation() + (to.translation() - from.translation()) * s;
                    DualQuaternion::from_rt(to.rotation(), &p).expect("unit rotation")
                }
                TargetSource::Oval { center, a, b, period, depth, start, laps } => {
                    let tt = (t - *start).clamp(0.0, *laps * *period);
                    oval_trajectory(tt, center, *a, *b, *period, *depth)
                }
                TargetSource::Teleop { session, packets, next } => {
                    while *next < packets.len() && packets[*next].0 <= t + 1e-12 {
                        if let Some(Err(e)) = session.ingest(&packets[*next].1) {
                            log::warn!("branch {}: {e}", i + 1);
                        }
                        *next += 1;
                    }
                    session.target().unwrap_or(self.targets[i])
                }
                TargetSource::RandomGoals { center, radius, interval, rotation, current, next_draw } => {
                    if tick >= *next_draw {
                        let dir = loop {
                            let v = Vector3::new(
                                self.rng.gen_range(-1.0..=1.0),
                                self.rng.gen_range(-1.0..=1.0),
                                self.rng.gen_range(-1.0..=1.0),
                            );
                            if v.norm_squared() <= 1.0 {
                                break v;
                            }
                        };
                        *current = DualQuaternion::from_rt(*rotation, &(*center + dir * *radius)).expect("unit rotation");
                        let every = (*interval / self.scenario.file.dt).round().max(1.0) as u64;
                        *next_draw = tick + every;
                    }
                    *current
                }
            };
            self.targets[i] = x;
        }
    }

    /// Runs one tick: targets, control step, task objects, record, integration.
    pub fn step(&mut self) -> TickInfo {
        self.update_targets();
        let tasks: Vec<ControlTask> = self
            .targets
            .iter()
            .enumerate()
            .map(|(b, x)| ControlTask {
                branch: b,
                target: *x,
                gain: self.controller.config.task_gain,
                damping: self.controller.config.damping,
            })
            .collect();
        let k = self.vfi_names.len();
        let (output, vfi, status, min_margin) = match self.controller.constraints(&self.q) {
            Ok(cs) => {
                let vfi: Vec<f64> = cs.readings.iter().map(|r| r.distance).collect();
                let margin = cs.min_keepout_margin();
                match crate::controller::control_step(&self.controller.system, &self.q, &tasks, &cs, &self.controller.config) {
                    Ok(out) => {
                        let st = out.status.as_str().to_string();
                        (Some(out), vfi, st, margin)
                    }
                    Err(e) => {
                        log::error!("tick {}: {e}", self.tick);
                        (None, vfi, "error".to_string(), margin)
                    }
                }
            }
            Err(e) => {
                log::error!("tick {}: {e}", self.tick);
                (None, vec![f64::NAN; k], "error".to_string(), None)
            }
        };
        let tool_poses = self.controller.system.tool_poses(&self.q).expect("dimension checked at load");

        let mut latch_drift = None;
        if let Some((b, _, _)) = &self.grasp {
            let b = *b;
            let closed = self.gripper(b);
            let g = &mut self.grasp.as_mut().expect("present").1;
            g.grasp_update(&tool_poses[b], closed);
            latch_drift = g.drift(&tool_poses[b]);
        }
        let mut new_marker = None;
        if let Some((b, shell)) = &self.shell {
            if let Some(m) = shell.drill_update(&tool_poses[*b].translation(), self.tick) {
                if m.tier == 2 && self.breakthrough_tick.is_none() {
                    self.breakthrough_tick = Some(self.tick);
                }
                self.markers.push(m);
                new_marker = Some(m);
            }
        }

        let errors = output.as_ref().map_or_else(
            || {
                self.targets
                    .iter()
                    .zip(&tool_poses)
                    .map(|(xd, x)| crate::controller::pose_error(x, xd).0.norm())
                    .collect()
            },
            |o| o.task_errors.clone(),
        );
        let record = TraceRecord {
            tick: self.tick,
            t: self.time(),
            q: self.q.clone(),
            vfi,
            status,
            errors,
            markers: self.markers.len(),
            breakthrough: self.breakthrough_tick.is_some(),
            latched: self.grasp.as_ref().is_some_and(|g| g.1.latched()),
        };

        if let Some(out) = &output {
            self.q = crate::controller::integrate_step(&self.controller.system, &self.q, &out.u, self.dt());
        }
        self.tick += 1;
        TickInfo {
            record,
            output,
            min_margin,
            latch_drift,
            tool_poses,
            targets: self.targets.clone(),
            new_marker,
        }
    }

    /// Runs the whole scenario, passing every tick to `sink`.
    pub fn run<F: FnMut(&TickInfo)>(&mut self, mut sink: F) -> SimSummary {
        let steps = self.scenario.steps();
        let mut summary = SimSummary::default();
        let oval = self.oval_task();
        for _ in 0..=steps {
            let info = self.step();
            summary.absorb(&info);
            if let Some(o) = &oval {
                let d = o.lateral_deviation(&info.tool_poses[o.branch].translation());
                summary.max_lateral_deviation = Some(summary.max_lateral_deviation.map_or(d, |w: f64| w.max(d)));
            }
            sink(&info);
        }
        summary.markers = self.markers.len();
        summary.breakthrough_tick = self.breakthrough_tick;
        summary.latch_episodes = self.grasp().map_or(0, |g| g.episodes);
        summary
    }

    /// Runs the scenario and writes a trace.
    pub fn run_to_trace<W: Write>(&mut self, out: W) -> Result<SimSummary, SimError> {
        let mut w = TraceWriter::new(out, self.system().total_dof(), self.vfi_names.len(), self.system().branch_count())
            .map_err(|source| SimError::Io { path: "<trace>".into(), source })?;
        let mut err = None;
        let summary = self.run(|info| {
            if err.is_none() {
                err = w.write(&info.record).err();
            }
        });
        if let Some(source) = err.or_else(|| w.flush().err()) {
            return Err(SimError::Io { path: "<trace>".into(), source });
        }
        Ok(summary)
    }
}

/// Aggregate statistics of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimSummary {
    pub ticks: u64,
    pub worst_margin: Option<f64>,
    pub final_errors: Vec<f64>,
    pub optimal: u64,
    pub infeasible: u64,
    pub max_iter: u64,
    pub errors: u64,
    pub max_iterations_used: usize,
    pub markers: usize,
    pub breakthrough_tick: Option<u64>,
    pub latch_episodes: usize,
    pub max_latch_drift: Option<f64>,
    /// Largest in-plane distance between the oval-tracing tool tip and its ellipse.
    pub max_lateral_deviation: Option<f64>,
}

impl SimSummary {
    fn absorb(&mut self, info: &TickInfo) {
        self.ticks += 1;
        if let Some(m) = info.min_margin {
            self.worst_margin = Some(self.worst_margin.map_or(m, |w: f64| w.min(m)));
        }
        if let Some(d) = info.latch_drift {
            self.max_latch_drift = Some(self.max_latch_drift.map_or(d, |w: f64| w.max(d)));
        }
        self.final_errors = info.record.errors.clone();
        match info.record.status.as_str() {
            "optimal" => self.optimal += 1,
            "infeasible" => self.infeasible += 1,
            "max_iter" => self.max_iter += 1,
            _ => self.errors += 1,
        }
        if let Some(o) = &info.output {
            self.max_iterations_used = self.max_iterations_used.max(o.iterations);
        }
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ticks: {}", self.ticks);
        match self.worst_margin {
            Some(m) => {
                let _ = writeln!(s, "worst VFI margin: {m:.6} m");
            }
            None => s.push_str("worst VFI margin: n/a\n"),
        }
        let errs: Vec<String> = self.final_errors.iter().map(|e| format!("{e:.3e}")).collect();
        let _ = writeln!(s, "final task errors: [{}]", errs.join(", "));
        let _ = writeln!(
            s,
            "solver: {} optimal, {} infeasible, {} max_iter, {} errors, max {} iterations",
            self.optimal, self.infeasible, self.max_iter, self.errors, self.max_iterations_used
        );
        if self.markers > 0 || self.breakthrough_tick.is_some() {
            let _ = writeln!(s, "markers: {}, breakthrough tick: {:?}", self.markers, self.breakthrough_tick);
        }
        if let Some(d) = self.max_lateral_deviation {
            let _ = writeln!(s, "max oval lateral deviation: {:.3e} m", d);
        }
        if self.latch_episodes > 0 {
            let _ = writeln!(s, "grasp episodes: {}, max latch drift: {:.3e}", self.latch_episodes, self.max_latch_drift.unwrap_or(0.0));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Traces

pub fn trace_header(dof: usize, vfis: usize, branches: usize) -> Vec<String> {
    let mut h = vec!["tick".to_string(), "t".to_string()];
    h.extend((0..dof).map(|i| format!("q_{i}")));
    h.extend((0..vfis).map(|i| format!("vfi_{i}")));
    h.push("status".into());
    h.extend((0..branches).map(|i| format!("err_{i}")));
    h.extend(["markers", "breakthrough", "latched"].map(String::from));
    h
}

pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, dof: usize, vfis: usize, branches: usize) -> std::io::Result<Self> {
        writeln!(out, "{TRACE_SCHEMA}")?;
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(trace_header(dof, vfis, branches)).map_err(std::io::Error::other)?;
        Ok(TraceWriter { inner })
    }

    pub fn write(&mut self, r: &TraceRecord) -> std::io::Result<()> {
        let mut row = vec![r.tick.to_string(), r.t.to_string()];
        row.extend(r.q.iter().map(f64::to_string));
        row.extend(r.vfi.iter().map(f64::to_string));
        row.push(r.status.clone());
        row.extend(r.errors.iter().map(f64::to_string));
        row.push(r.markers.to_string());
        row.push((r.breakthrough as u8).to_string());
        row.push((r.latched as u8).to_string());
        self.inner.write_record(&row).map_err(std::io::Error::other)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Parses a trace written by [`TraceWriter`].
pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, SimError> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|source| SimError::Io { path: "<trace>".into(), source })?;
    if first.trim_end() != TRACE_SCHEMA {
        return Err(SimError::SchemaMismatch(format!("expected `{TRACE_SCHEMA}`, found `{}`", first.trim_end())));
    }
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = csv
        .headers()
        .map_err(|e| SimError::SchemaMismatch(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let count = |p: &str| header.iter().filter(|h| h.starts_with(p)).count();
    let (dof, vfis, branches) = (count("q_"), count("vfi_"), count("err_"));
    if header != trace_header(dof, vfis, branches) {
        return Err(SimError::SchemaMismatch("unexpected column layout".into()));
    }
    let mut out = Vec::new();
    for (i, row) in csv.records().enumerate() {
        let line = i + 3;
        let corrupt = |m: String| SimError::CorruptRow { line, message: m };
        let row = row.map_err(|e| corrupt(e.to_string()))?;
        if row.len() != header.len() {
            return Err(corrupt(format!("expected {} fields, got {}", header.len(), row.len())));
        }
        let num = |j: usize| row[j].parse::<f64>().map_err(|_| corrupt(format!("column {} is not a number: `{}`", header[j], &row[j])));
        let flag = |j: usize| match &row[j] {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(corrupt(format!("column {} is not 0/1: `{v}`", header[j]))),
        };
        let tick: u64 = row[0].parse().map_err(|_| corrupt(format!("bad tick `{}`", &row[0])))?;
        let mut c = 2;
        let mut take = |n: usize| -> Result<Vec<f64>, SimError> {
            let v = (c..c + n).map(num).collect::<Result<Vec<_>, _>>()?;
            c += n;
            Ok(v)
        };
        let t = num(1)?;
        let q = take(dof)?;
        let vfi = take(vfis)?;
        let status = row[2 + dof + vfis].to_string();
        if !["optimal", "infeasible", "max_iter", "error"].contains(&status.as_str()) {
            return Err(corrupt(format!("unknown status `{status}`")));
        }
        let base = 3 + dof + vfis;
        let errors = (base..base + branches).map(num).collect::<Result<Vec<_>, _>>()?;
        let markers = row[base + branches].parse().map_err(|_| corrupt("bad marker count".into()))?;
        let rec = TraceRecord {
            tick,
            t,
            q,
            vfi,
            status,
            errors,
            markers,
            breakthrough: flag(base + branches + 1)?,
            latched: flag(base + branches + 2)?,
        };
        if let Some(prev) = out.last() {
            let prev: &TraceRecord = prev;
            if rec.tick != prev.tick + 1 || !(rec.t > prev.t) {
                return Err(corrupt("ticks must be consecutive with increasing time".into()));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>, SimError> {
    let f = std::fs::File::open(path).map_err(|source| SimError::Io { path: path.display().to_string(), source })?;
    read_trace(f)
}

/// Replays recorded states, paced at `speed` times real time when given.
pub fn replay_trace<F: FnMut(&TraceRecord)>(records: &[TraceRecord], speed: Option<f64>, mut sink: F) -> Duration {
    let start = Instant::now();
    let t0 = records.first().map_or(0.0, |r| r.t);
    for r in records {
        if let Some(s) = speed.filter(|s| *s > 0.0 && s.is_finite()) {
            let due = start + Duration::from_secs_f64((r.t - t0) / s);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        sink(r);
    }
    start.elapsed()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDiff {
    pub compared: usize,
    pub length_mismatch: bool,
    pub max_joint_diff: f64,
    /// First tick whose record differs in any field.
    pub first_mismatch: Option<u64>,
}

impl TraceDiff {
    pub fn is_identical(&self) -> bool {
        !self.length_mismatch && self.first_mismatch.is_none()
    }
}

pub fn diff_traces(a: &[TraceRecord], b: &[TraceRecord]) -> TraceDiff {
    let mut d = TraceDiff { compared: 0, length_mismatch: a.len() != b.len(), max_joint_diff: 0.0, first_mismatch: None };
    for (x, y) in a.iter().zip(b) {
        d.compared += 1;
        if x.q.len() != y.q.len() {
            d.first_mismatch.get_or_insert(x.tick);
            continue;
        }
        for (p, q) in x.q.iter().zip(&y.q) {
            d.max_joint_diff = d.max_joint_diff.max((p - q).abs());
        }
        let same = |u: &[f64], v: &[f64]| u.len() == v.len() && u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits());
        let equal = x.tick == y.tick
            && x.t.to_bits() == y.t.to_bits()
            && same(&x.q, &y.q)
            && same(&x.vfi, &y.vfi)
            && same(&x.errors, &y.errors)
            && x.status == y.status
            && x.markers == y.markers
            && x.breakthrough == y.breakthrough
            && x.latched == y.latched;
        if !equal && d.first_mismatch.is_none() {
            d.first_mismatch = Some(x.tick);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oval_endpoints() {
        let c = DualQuaternion::IDENTITY;
        let p0 = oval_trajectory(0.0, &c, 0.02, 0.01, 4.0, 0.0).translation();
        assert!((p0 - Vector3::new(0.02, 0.0, 0.0)).norm() < 1e-15);
        let p1 = oval_trajectory(1.0, &c, 0.02, 0.01, 4.0, 0.0).translation();
        assert!((p1 - Vector3::new(0.0, 0.01, 0.0)).norm() < 1e-15);
        let pt = oval_trajectory(4.0, &c, 0.02, 0.01, 4.0, 0.0).translation();
        assert!((pt - p0).norm() < 1e-15);
    }

    #[test]
    fn ellipse_distance_known_points() {
        assert!(ellipse_distance(2.0, 1.0, 2.0, 0.0) < 1e-12);
        assert!((ellipse_distance(2.0, 1.0, 0.0, 0.0) - 1.0).abs() < 1e-9);
        assert!((ellipse_distance(2.0, 1.0, 3.0, 0.0) - 1.0).abs() < 1e-9);
        assert!((ellipse_distance(1.0, 1.0, 0.3, 0.4) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn drill_tiers() {
        let s = Shell { center: Vector3::zeros(), radius: 0.01, mark_depth: 1e-4, break_depth: 5e-4 };
        assert!(s.drill_update(&Vector3::new(0.0, 0.0, 0.02), 0).is_none());
        assert!(s.drill_update(&Vector3::new(0.0, 0.0, 0.01 - 0.5e-4), 0).is_none());
        let m = s.drill_update(&Vector3::new(0.0, 0.0, 0.01 - 2e-4), 3).unwrap();
        assert_eq!(m.tier, 1);
        assert!((m.position - Vector3::new(0.0, 0.0, 0.01)).norm() < 1e-15);
        assert_eq!(s.drill_update(&Vector3::new(0.0, 0.0, 0.01 - 6e-4), 4).unwrap().tier, 2);
    }

    #[test]
    fn grasp_threshold_and_rigidity() {
        let block = DualQuaternion::from_translation(&Vector3::new(0.0, 0.0, 0.0));
        let mut g = Grasp::new(block, 0.005);
        let far = DualQuaternion::from_translation(&Vector3::new(0.01, 0.0, 0.0));
        g.grasp_update(&far, true);
        assert!(!g.latched());
        g.grasp_update(&far, false);
        let near = DualQuaternion::from_translation(&Vector3::new(0.003, 0.0, 0.0));
        g.grasp_update(&near, true);
        assert!(g.latched());
        let moved = DualQuaternion::from_translation(&Vector3::new(0.053, 0.0, 0.0));
        g.grasp_update(&moved, true);
        assert!((g.block.translation() - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
        assert!(g.drift(&moved).unwrap() < 1e-12);
        g.grasp_update(&moved, false);
        assert!(!g.latched());
        g.grasp_update(&DualQuaternion::IDENTITY, false);
        assert!((g.block.translation().x - 0.05).abs() < 1e-15);
        assert_eq!(g.episodes, 1);
    }

    #[test]
    fn trace_roundtrip_and_corruption() {
        let rec = |tick: u64| TraceRecord {
            tick,
            t: tick as f64 * 0.004,
            q: vec![0.1 * tick as f64, -1.0 / 3.0],
            vfi: vec![0.25],
            status: "optimal".into(),
            errors: vec![1e-17],
            markers: 0,
            breakthrough: false,
            latched: tick == 1,
        };
        let mut buf = Vec::new();
        let mut w = TraceWriter::new(&mut buf, 2, 1, 1).unwrap();
        for k in 0..3 {
            w.write(&rec(k)).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back, (0..3).map(rec).collect::<Vec<_>>());
        assert!(diff_traces(&back, &back).is_identical());

        let text = String::from_utf8(buf.clone()).unwrap();
        let edited = text.replacen("optimal", "bogus", 1);
        assert!(matches!(read_trace(edited.as_bytes()), Err(SimError::CorruptRow { line: 3, .. })));
        let edited = text.replacen("# railkit trace v1", "# other", 1);
        assert!(matches!(read_trace(edited.as_bytes()), Err(SimError::SchemaMismatch(_))));
    }
}
