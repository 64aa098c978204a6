//! Denavit–Hartenberg serial chains and their composition into branches.
//!
//! Joint transforms use the standard (distal) convention
//! `A_i = Rz(θ_i) · Tz(d_i) · Tx(a_i) · Rx(α_i)` where the joint value is
//! added to `θ` for revolute joints and to `d` for prismatic joints. A chain
//! evaluates to `base · A_1 ⋯ A_n · tool`.
//!
//! A [`CompositeChain`] stacks several serial chains end to end (e.g. rail,
//! linear actuator and arm) and is treated everywhere as one serial robot.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::pose::{DualQuaternion, Quaternion};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChainError {
    #[error("joint vector has length {got}, chain has {expected} degrees of freedom")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("joint index {index} out of range for a chain with {dof} joints")]
    IndexOutOfRange { index: usize, dof: usize },
    #[error("cannot compose an empty list of chains")]
    EmptyComposition,
    #[error("a serial chain needs at least one joint")]
    EmptyChain,
    #[error("invalid joint {index}: {reason}")]
    InvalidJoint { index: usize, reason: String },
    #[error("chain file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DhParams {
    pub theta: f64,
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDesc {
    pub kind: JointKind,
    pub dh: DhParams,
    pub q_min: f64,
    pub q_max: f64,
    pub velocity_limit: f64,
}

impl JointDesc {
    pub fn revolute(dh: DhParams, q_min: f64, q_max: f64, velocity_limit: f64) -> Self {
        Self { kind: JointKind::Revolute, dh, q_min, q_max, velocity_limit }
    }

    pub fn prismatic(dh: DhParams, q_min: f64, q_max: f64, velocity_limit: f64) -> Self {
        Self { kind: JointKind::Prismatic, dh, q_min, q_max, velocity_limit }
    }

    /// Rigid transform of this joint at value `q`.
    pub fn transform(&self, q: f64) -> DualQuaternion {
        let (theta, d) = match self.kind {
            JointKind::Revolute => (self.dh.theta + q, self.dh.d),
            JointKind::Prismatic => (self.dh.theta, self.dh.d + q),
        };
        let rz = DualQuaternion::from_rotation(Quaternion::rot_z(theta));
        let tz = DualQuaternion::from_translation(&Vector3::new(0.0, 0.0, d));
        let tx = DualQuaternion::from_translation(&Vector3::new(self.dh.a, 0.0, 0.0));
        let rx = DualQuaternion::from_rotation(Quaternion::rot_x(self.dh.alpha));
        rz * tz * tx * rx
    }

    /// Unit twist of the joint expressed in the frame preceding it.
    fn local_twist(&self) -> DualQuaternion {
        let k = Quaternion::new(0.0, 0.0, 0.0, 1.0);
        match self.kind {
            JointKind::Revolute => DualQuaternion::new(k, Quaternion::ZERO),
            JointKind::Prismatic => DualQuaternion::new(Quaternion::ZERO, k),
        }
    }

    fn validate(&self, index: usize) -> Result<(), ChainError> {
        let bad = |reason: &str| ChainError::InvalidJoint { index, reason: reason.to_string() };
        if !(self.q_min < self.q_max) {
            return Err(bad("q_min must be strictly below q_max"));
        }
        if !(self.velocity_limit > 0.0) {
            return Err(bad("velocity_limit must be positive"));
        }
        let dh = &self.dh;
        if ![dh.theta, dh.d, dh.a, dh.alpha].iter().all(|v| v.is_finite()) {
            return Err(bad("DH parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialChain {
    pub name: String,
    pub base: DualQuaternion,
    pub joints: Vec<JointDesc>,
    pub tool: DualQuaternion,
}

impl SerialChain {
    pub fn new(
        name: impl Into<String>,
        base: DualQuaternion,
        joints: Vec<JointDesc>,
        tool: DualQuaternion,
    ) -> Result<Self, ChainError> {
        if joints.is_empty() {
            return Err(ChainError::EmptyChain);
        }
        for (i, j) in joints.iter().enumerate() {
            j.validate(i)?;
        }
        Ok(Self { name: name.into(), base, joints, tool })
    }
}

/// Several serial chains attached end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeChain {
    segments: Vec<SerialChain>,
    joint_offsets: Vec<(usize, usize)>,
}

/// Stacks `segments` into one serial robot.
pub fn compose(segments: Vec<SerialChain>) -> Result<CompositeChain, ChainError> {
    if segments.is_empty() {
        return Err(ChainError::EmptyComposition);
    }
    let joint_offsets = segments
        .iter()
        .enumerate()
        .flat_map(|(s, seg)| (0..seg.joints.len()).map(move |j| (s, j)))
        .collect();
    Ok(CompositeChain { segments, joint_offsets })
}

impl CompositeChain {
    /// Maps a composite joint index to `(segment, local index)`.
    pub fn joint_location(&self, i: usize) -> Option<(usize, usize)> {
        self.joint_offsets.get(i).copied()
    }

    /// Index of the first composite joint of each segment.
    pub fn segment_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for s in &self.segments {
            starts.push(acc);
            acc += s.joints.len();
        }
        starts
    }

    /// Prepends `mount` to the first segment's base pose.
    pub fn mounted(mut self, mount: DualQuaternion) -> Self {
        self.segments[0].base = mount * self.segments[0].base;
        self
    }

    pub fn from_yaml_str(text: &str) -> Result<Self, ChainError> {
        let file: ChainFile = serde_yaml::from_str(text).map_err(|e| ChainError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        file.into_chain()
    }

    pub fn from_file(path: &Path) -> Result<Self, ChainError> {
        let file_err = |message: String| ChainError::File { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let file: ChainFile = serde_yaml::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        file.into_chain()
    }
}

/// Poses of every frame along a chain for one joint configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// Frame whose z axis is the axis of joint `i`.
    pub before: Vec<DualQuaternion>,
    /// Frame immediately after joint `i`.
    pub after: Vec<DualQuaternion>,
    /// End-effector pose including the final tool offset.
    pub end: DualQuaternion,
}

pub trait Kinematics {
    fn segments(&self) -> &[SerialChain];

    fn dof(&self) -> usize {
        self.segments().iter().map(|s| s.joints.len()).sum()
    }

    fn joints(&self) -> Vec<&JointDesc> {
        self.segments().iter().flat_map(|s| s.joints.iter()).collect()
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), ChainError> {
        let n = self.dof();
        if q.len() != n {
            return Err(ChainError::DimensionMismatch { expected: n, got: q.len() });
        }
        Ok(())
    }

    fn frames(&self, q: &[f64]) -> Result<ChainFrames, ChainError> {
        self.check_dim(q)?;
        let n = q.len();
        let mut before = Vec::with_capacity(n);
        let mut after = Vec::with_capacity(n);
        let mut x = DualQuaternion::IDENTITY;
        let mut k = 0;
        for seg in self.segments() {
            x = x * seg.base;
            for joint in &seg.joints {
                if q[k] < joint.q_min || q[k] > joint.q_max {
                    log::warn!("joint {k} value {} outside [{}, {}]", q[k], joint.q_min, joint.q_max);
                }
                before.push(x);
                x = x * joint.transform(q[k]);
                after.push(x);
                k += 1;
            }
            x = x * seg.tool;
        }
        Ok(ChainFrames { before, after, end: x })
    }

    fn fk(&self, q: &[f64]) -> Result<DualQuaternion, ChainError> {
        Ok(self.frames(q)?.end)
    }

    /// Pose of the frame immediately after joint `i`.
    fn fk_prefix(&self, q: &[f64], i: usize) -> Result<DualQuaternion, ChainError> {
        self.check_dim(q)?;
        if i >= q.len() {
            return Err(ChainError::IndexOutOfRange { index: i, dof: q.len() });
        }
        Ok(self.frames(q)?.after[i])
    }

    /// 8×n matrix `J` with `d/dt vec8(fk(q)) = J q̇`.
    fn pose_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, ChainError> {
        let frames = self.frames(q)?;
        let joints = self.joints();
        let mut jac = DMatrix::zeros(8, q.len());
        for (i, joint) in joints.iter().enumerate() {
            let pre = frames.before[i];
            let twist = pre * joint.local_twist() * pre.conj();
            let col = (twist * frames.end).scale(0.5).vec8();
            jac.column_mut(i).copy_from_slice(&col.0);
        }
        Ok(jac)
    }

    /// Angular (3×n) and linear (3×n) velocity Jacobians of a point rigidly
    /// attached to the frame after joint `frame`, given in world coordinates.
    /// Columns of joints after `frame` are zero.
    fn point_jacobian(
        &self,
        frames: &ChainFrames,
        frame: usize,
        world_point: &Vector3<f64>,
    ) -> (Matrix3xX<f64>, Matrix3xX<f64>) {
        let joints = self.joints();
        let n = joints.len();
        let mut ang = Matrix3xX::zeros(n);
        let mut lin = Matrix3xX::zeros(n);
        for (k, joint) in joints.iter().enumerate().take(frame + 1) {
            let pre = frames.before[k];
            let axis = pre.primary.rotate(&Vector3::z());
            match joint.kind {
                JointKind::Revolute => {
                    let origin = pre.translation();
                    ang.set_column(k, &axis);
                    lin.set_column(k, &axis.cross(&(world_point - origin)));
                }
                JointKind::Prismatic => lin.set_column(k, &axis),
            }
        }
        (ang, lin)
    }

    /// Componentwise clamp into the joint limits.
    fn clamp_joints(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.joints())
            .map(|(&v, j)| v.clamp(j.q_min, j.q_max))
            .collect()
    }

    fn lower_limits(&self) -> Vec<f64> {
        self.joints().iter().map(|j| j.q_min).collect()
    }

    fn upper_limits(&self) -> Vec<f64> {
        self.joints().iter().map(|j| j.q_max).collect()
    }

    fn velocity_limits(&self) -> Vec<f64> {
        self.joints().iter().map(|j| j.velocity_limit).collect()
    }
}

impl Kinematics for SerialChain {
    fn segments(&self) -> &[SerialChain] {
        std::slice::from_ref(self)
    }
}

impl Kinematics for CompositeChain {
    fn segments(&self) -> &[SerialChain] {
        &self.segments
    }
}

/// Pose given as translation (m) plus fixed-axis roll/pitch/yaw (rad).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl PoseSpec {
    pub fn to_pose(&self) -> DualQuaternion {
        let [r, p, y] = self.rpy;
        let t = Vector3::from(self.translation);
        DualQuaternion::from_rt_unchecked(Quaternion::from_rpy(r, p, y), &t)
    }
}

impl From<PoseSpec> for DualQuaternion {
    fn from(p: PoseSpec) -> Self {
        p.to_pose()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainFile {
    #[allow(dead_code)]
    #[serde(default)]
    description: Option<String>,
    segments: Vec<SegmentFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentFile {
    name: String,
    #[serde(default)]
    base: PoseSpec,
    joints: Vec<JointFile>,
    #[serde(default)]
    tool: PoseSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    kind: JointKind,
    #[serde(default)]
    theta: f64,
    #[serde(default)]
    d: f64,
    #[serde(default)]
    a: f64,
    #[serde(default)]
    alpha: f64,
    q_min: f64,
    q_max: f64,
    velocity_limit: f64,
}

impl From<JointFile> for JointDesc {
    fn from(j: JointFile) -> Self {
        JointDesc {
            kind: j.kind,
            dh: DhParams { theta: j.theta, d: j.d, a: j.a, alpha: j.alpha },
            q_min: j.q_min,
            q_max: j.q_max,
            velocity_limit: j.velocity_limit,
        }
    }
}

impl ChainFile {
    fn into_chain(self) -> Result<CompositeChain, ChainError> {
        let segments = self
            .segments
            .into_iter()
            .map(|s| {
                let joints = s.joints.into_iter().map(JointDesc::from).collect();
                SerialChain::new(s.name, s.base.to_pose(), joints, s.tool.to_pose())
            })
            .collect::<Result<Vec<_>, _>>()?;
        compose(segments)
    }
}
