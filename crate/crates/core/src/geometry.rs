//! Geometric primitives, signed distances between them, and distance Jacobians.
//!
//! Lines are infinite. Distances involving a plane or a sphere are signed
//! (negative inside the sphere or behind the plane); the others are plain
//! Euclidean distances.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DVector, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainError, ChainFrames, Kinematics};
use crate::pose::{skew, DualQuaternion};

/// Maximum deviation from unit length accepted for directions and normals.
pub const UNIT_TOL: f64 = 1e-9;
/// Below this `‖u₁ × u₂‖` two lines are treated as parallel.
pub const PARALLEL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("unsupported primitive pair {0}-{1}")]
    UnsupportedPair(ShapeKind, ShapeKind),
    #[error("attachment mismatch: {0}")]
    AttachmentMismatch(String),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Point,
    Line,
    Plane,
    Sphere,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Point => "point",
            ShapeKind::Line => "line",
            ShapeKind::Plane => "plane",
            ShapeKind::Sphere => "sphere",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Point { position: Vector3<f64> },
    Line { point: Vector3<f64>, direction: Vector3<f64> },
    Plane { point: Vector3<f64>, normal: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
}

impl Shape {
    pub fn point(position: Vector3<f64>) -> Self {
        Shape::Point { position }
    }

    pub fn line(point: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeometryError> {
        check_unit("line direction", &direction)?;
        Ok(Shape::Line { point, direction })
    }

    pub fn plane(point: Vector3<f64>, normal: Vector3<f64>) -> Result<Self, GeometryError> {
        check_unit("plane normal", &normal)?;
        Ok(Shape::Plane { point, normal })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self, GeometryError> {
        if !(radius > 0.0) {
            return Err(GeometryError::InvalidPrimitive(format!("sphere radius must be positive, got {radius}")));
        }
        Ok(Shape::Sphere { center, radius })
    }

    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Point { .. } => ShapeKind::Point,
            Shape::Line { .. } => ShapeKind::Line,
            Shape::Plane { .. } => ShapeKind::Plane,
            Shape::Sphere { .. } => ShapeKind::Sphere,
        }
    }

    /// Reference point: position, line point, plane point or sphere center.
    pub fn anchor(&self) -> Vector3<f64> {
        match *self {
            Shape::Point { position } => position,
            Shape::Line { point, .. } | Shape::Plane { point, .. } => point,
            Shape::Sphere { center, .. } => center,
        }
    }

    /// Direction of a line or normal of a plane.
    pub fn axis(&self) -> Option<Vector3<f64>> {
        match *self {
            Shape::Line { direction, .. } => Some(direction),
            Shape::Plane { normal, .. } => Some(normal),
            _ => None,
        }
    }

    /// The shape expressed in the frame that `pose` maps into.
    pub fn transformed(&self, pose: &DualQuaternion) -> Shape {
        match *self {
            Shape::Point { position } => Shape::Point { position: pose.transform_point(&position) },
            Shape::Line { point, direction } => Shape::Line {
                point: pose.transform_point(&point),
                direction: pose.primary.rotate(&direction),
            },
            Shape::Plane { point, normal } => Shape::Plane {
                point: pose.transform_point(&point),
                normal: pose.primary.rotate(&normal),
            },
            Shape::Sphere { center, radius } => Shape::Sphere { center: pose.transform_point(&center), radius },
        }
    }

    fn sort_key(&self) -> [f64; 7] {
        let a = self.anchor();
        let (u, r) = match *self {
            Shape::Sphere { radius, .. } => (Vector3::zeros(), radius),
            _ => (self.axis().unwrap_or_else(Vector3::zeros), 0.0),
        };
        [a.x, a.y, a.z, u.x, u.y, u.z, r]
    }
}

fn check_unit(what: &str, v: &Vector3<f64>) -> Result<(), GeometryError> {
    let n = v.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(GeometryError::InvalidPrimitive(format!("{what} must be unit, has norm {n}")));
    }
    Ok(())
}

/// Where a primitive lives. Robot joint indices are zero-based and refer to
/// the frame immediately after that joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attachment {
    Environment,
    Robot { branch: usize, joint: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    /// Parameters in the attachment frame (world frame for the environment).
    pub shape: Shape,
    pub attachment: Attachment,
}

/// Gradient of a distance with respect to one primitive's world anchor and axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamGradient {
    pub anchor: Vector3<f64>,
    pub axis: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceResult {
    pub distance: f64,
    /// Closest point on (or the surface of) the first primitive.
    pub witness_a: Vector3<f64>,
    pub witness_b: Vector3<f64>,
    pub grad_a: ParamGradient,
    pub grad_b: ParamGradient,
}

impl DistanceResult {
    fn swapped(self) -> Self {
        DistanceResult {
            distance: self.distance,
            witness_a: self.witness_b,
            witness_b: self.witness_a,
            grad_a: self.grad_b,
            grad_b: self.grad_a,
        }
    }
}

fn unit_or_zero(v: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let n = v.norm();
    if n > 0.0 {
        (n, v / n)
    } else {
        (0.0, Vector3::zeros())
    }
}

fn anchor_only(anchor: Vector3<f64>) -> ParamGradient {
    ParamGradient { anchor, axis: Vector3::zeros() }
}

/// Signed distance between two shapes given in the same frame.
///
/// Exactly symmetric: `shape_distance(a, b)` and `shape_distance(b, a)` run
/// the same floating point computation.
pub fn shape_distance(a: &Shape, b: &Shape) -> Result<DistanceResult, GeometryError> {
    let swap = match a.kind().cmp(&b.kind()) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => {
            let (ka, kb) = (a.sort_key(), b.sort_key());
            ka.iter().zip(&kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(Ordering::Greater)
        }
    };
    if swap {
        Ok(ordered_distance(b, a)?.swapped())
    } else {
        ordered_distance(a, b)
    }
}

/// Requires `a.kind() <= b.kind()`.
fn ordered_distance(a: &Shape, b: &Shape) -> Result<DistanceResult, GeometryError> {
    use Shape::*;
    let res = match (*a, *b) {
        (Point { position: p }, Point { position: q }) => {
            let (d, n) = unit_or_zero(&(p - q));
            DistanceResult { distance: d, witness_a: p, witness_b: q, grad_a: anchor_only(n), grad_b: anchor_only(-n) }
        }
        (Point { position: p }, Line { point, direction: u }) => {
            let r = p - point;
            let s = r.dot(&u);
            let foot = point + u * s;
            let (d, n) = unit_or_zero(&(p - foot));
            DistanceResult {
                distance: d,
                witness_a: p,
                witness_b: foot,
                grad_a: anchor_only(n),
                grad_b: ParamGradient { anchor: -n, axis: -n * s },
            }
        }
        (Point { position: p }, Plane { point, normal }) => {
            let d = normal.dot(&(p - point));
            DistanceResult {
                distance: d,
                witness_a: p,
                witness_b: p - normal * d,
                grad_a: anchor_only(normal),
                grad_b: ParamGradient { anchor: -normal, axis: p - point },
            }
        }
        (Point { position: p }, Sphere { center, radius }) => {
            let (c, n) = unit_or_zero(&(p - center));
            DistanceResult {
                distance: c - radius,
                witness_a: p,
                witness_b: center + n * radius,
                grad_a: anchor_only(n),
                grad_b: anchor_only(-n),
            }
        }
        (Line { point: p1, direction: u1 }, Line { point: p2, direction: u2 }) => line_line(p1, u1, p2, u2),
        (Plane { point, normal }, Sphere { center, radius }) => {
            let h = normal.dot(&(center - point));
            DistanceResult {
                distance: h - radius,
                witness_a: center - normal * h,
                witness_b: center - normal * radius,
                grad_a: ParamGradient { anchor: -normal, axis: center - point },
                grad_b: anchor_only(normal),
            }
        }
        (Sphere { center: c1, radius: r1 }, Sphere { center: c2, radius: r2 }) => {
            let (c, n) = unit_or_zero(&(c1 - c2));
            DistanceResult {
                distance: c - r1 - r2,
                witness_a: c1 - n * r1,
                witness_b: c2 + n * r2,
                grad_a: anchor_only(n),
                grad_b: anchor_only(-n),
            }
        }
        _ => return Err(GeometryError::UnsupportedPair(a.kind(), b.kind())),
    };
    Ok(res)
}

fn line_line(p1: Vector3<f64>, u1: Vector3<f64>, p2: Vector3<f64>, u2: Vector3<f64>) -> DistanceResult {
    let w = u1.cross(&u2);
    let wn = w.norm();
    let r = p2 - p1;
    if wn < PARALLEL_TOL {
        // Parallel: distance from the first line's anchor to the second line.
        let q = p1 - p2;
        let s = q.dot(&u2);
        let foot = p2 + u2 * s;
        let (d, n) = unit_or_zero(&(p1 - foot));
        return DistanceResult {
            distance: d,
            witness_a: p1,
            witness_b: foot,
            grad_a: anchor_only(n),
            grad_b: ParamGradient { anchor: -n, axis: -n * s },
        };
    }
    let what = w / wn;
    let proj = r.dot(&what);
    let sigma = if proj < 0.0 { -1.0 } else { 1.0 };
    let d = proj * sigma;
    // Closest points: p1 + s u1 and p2 + t u2.
    let b = u1.dot(&u2);
    let denom = 1.0 - b * b;
    let s = (r.dot(&u1) - b * r.dot(&u2)) / denom;
    let t = (b * r.dot(&u1) - r.dot(&u2)) / denom;
    let tangential = r - what * proj;
    DistanceResult {
        distance: d,
        witness_a: p1 + u1 * s,
        witness_b: p2 + u2 * t,
        grad_a: ParamGradient {
            anchor: -what * sigma,
            axis: skew(&u2) * tangential * (sigma / wn),
        },
        grad_b: ParamGradient {
            anchor: what * sigma,
            axis: -skew(&u1) * tangential * (sigma / wn),
        },
    }
}

/// Distance between two shapes each placed by a world pose.
pub fn pair_distance(
    a: &Shape,
    pose_a: &DualQuaternion,
    b: &Shape,
    pose_b: &DualQuaternion,
) -> Result<DistanceResult, GeometryError> {
    shape_distance(&a.transformed(pose_a), &b.transformed(pose_b))
}

/// A primitive resolved into world coordinates together with the Jacobians
/// of its anchor point and axis with respect to its chain's joint velocities.
#[derive(Debug, Clone)]
pub struct Feature {
    pub world: Shape,
    pub anchor_jacobian: Matrix3xX<f64>,
    pub axis_jacobian: Matrix3xX<f64>,
}

impl Feature {
    pub fn fixed(world: Shape, n: usize) -> Self {
        Feature { world, anchor_jacobian: Matrix3xX::zeros(n), axis_jacobian: Matrix3xX::zeros(n) }
    }

    /// A shape attached to the frame after joint `joint` of `chain`.
    pub fn attached<K: Kinematics + ?Sized>(
        chain: &K,
        frames: &ChainFrames,
        local: &Shape,
        joint: usize,
    ) -> Result<Self, GeometryError> {
        let n = frames.after.len();
        if joint >= n {
            return Err(ChainError::IndexOutOfRange { index: joint, dof: n }.into());
        }
        let world = local.transformed(&frames.after[joint]);
        let anchor = world.anchor();
        let (ang, lin) = chain.point_jacobian(frames, joint, &anchor);
        let axis_jacobian = match world.axis() {
            Some(u) => -skew(&u) * &ang,
            None => Matrix3xX::zeros(n),
        };
        Ok(Feature { world, anchor_jacobian: lin, axis_jacobian })
    }

    /// Row contribution `∂d/∂q` of this feature for a distance gradient.
    pub fn project(&self, grad: &ParamGradient) -> DVector<f64> {
        self.anchor_jacobian.tr_mul(&grad.anchor) + self.axis_jacobian.tr_mul(&grad.axis)
    }
}

fn robot_joint(p: &Primitive) -> Result<usize, GeometryError> {
    match p.attachment {
        Attachment::Robot { joint, .. } => Ok(joint),
        Attachment::Environment => Err(GeometryError::AttachmentMismatch(
            "expected a robot-attached primitive, got an environment primitive".into(),
        )),
    }
}

/// Distance between a robot primitive and an environment primitive together
/// with the row `J_d` such that `ḋ = J_d q̇`.
pub fn distance_jacobian_env<K: Kinematics + ?Sized>(
    chain: &K,
    q: &[f64],
    robot: &Primitive,
    env: &Primitive,
) -> Result<(DistanceResult, DVector<f64>), GeometryError> {
    let joint = robot_joint(robot)?;
    if env.attachment != Attachment::Environment {
        return Err(GeometryError::AttachmentMismatch("second primitive must belong to the environment".into()));
    }
    let frames = chain.frames(q)?;
    let feature = Feature::attached(chain, &frames, &robot.shape, joint)?;
    let res = shape_distance(&feature.world, &env.shape)?;
    Ok((res, feature.project(&res.grad_a)))
}

/// Distance between primitives on two chains and the row over the stacked
/// velocities `(q̇_a, q̇_b)`.
pub fn distance_jacobian_pair<A: Kinematics + ?Sized, B: Kinematics + ?Sized>(
    chain_a: &A,
    q_a: &[f64],
    prim_a: &Primitive,
    chain_b: &B,
    q_b: &[f64],
    prim_b: &Primitive,
) -> Result<(DistanceResult, DVector<f64>), GeometryError> {
    let (ja, jb) = (robot_joint(prim_a)?, robot_joint(prim_b)?);
    let fa = Feature::attached(chain_a, &chain_a.frames(q_a)?, &prim_a.shape, ja)?;
    let fb = Feature::attached(chain_b, &chain_b.frames(q_b)?, &prim_b.shape, jb)?;
    let res = shape_distance(&fa.world, &fb.world)?;
    let (ra, rb) = (fa.project(&res.grad_a), fb.project(&res.grad_b));
    let mut row = DVector::zeros(ra.len() + rb.len());
    row.rows_mut(0, ra.len()).copy_from(&ra);
    row.rows_mut(ra.len(), rb.len()).copy_from(&rb);
    Ok((res, row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{DhParams, JointDesc, SerialChain};
    use crate::pose::Quaternion;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn point_sphere() {
        let d = shape_distance(&Shape::point(v(0., 0., 0.)), &Shape::sphere(v(0., 0., 3.), 1.0).unwrap()).unwrap();
        assert_eq!(d.distance, 2.0);
        assert_eq!(d.witness_b, v(0., 0., 2.));
    }

    #[test]
    fn parallel_lines() {
        let a = Shape::line(v(0., 0., 0.), v(1., 0., 0.)).unwrap();
        let b = Shape::line(v(0., 1., 0.), v(1., 0., 0.)).unwrap();
        assert_eq!(shape_distance(&a, &b).unwrap().distance, 1.0);
        assert_eq!(shape_distance(&b, &a).unwrap().distance, 1.0);
    }

    #[test]
    fn skew_lines_known_distance() {
        let a = Shape::line(v(0., 0., 0.), v(1., 0., 0.)).unwrap();
        let b = Shape::line(v(0., 0., 2.), v(0., 1., 0.)).unwrap();
        let r = shape_distance(&a, &b).unwrap();
        assert!((r.distance - 2.0).abs() < 1e-15);
        assert!((r.witness_a - v(0., 0., 0.)).norm() < 1e-15);
        assert!((r.witness_b - v(0., 0., 2.)).norm() < 1e-15);
    }

    #[test]
    fn signed_plane_and_sphere_distances() {
        let plane = Shape::plane(v(0., 0., 1.), v(0., 0., 1.)).unwrap();
        assert_eq!(shape_distance(&Shape::point(v(3., 1., 0.5)), &plane).unwrap().distance, -0.5);
        let s = Shape::sphere(v(0., 0., 3.), 0.5).unwrap();
        assert_eq!(shape_distance(&plane, &s).unwrap().distance, 1.5);
        let s2 = Shape::sphere(v(0., 0., 3.6), 0.2).unwrap();
        assert!((shape_distance(&s, &s2).unwrap().distance + 0.1).abs() < 1e-12);
    }

    #[test]
    fn unsupported_pairs_are_named() {
        let l = Shape::line(v(0., 0., 0.), v(1., 0., 0.)).unwrap();
        let p = Shape::plane(v(0., 0., 0.), v(0., 0., 1.)).unwrap();
        let err = shape_distance(&p, &l).unwrap_err();
        assert_eq!(err, GeometryError::UnsupportedPair(ShapeKind::Line, ShapeKind::Plane));
        assert_eq!(err.to_string(), "unsupported primitive pair line-plane");
        assert!(shape_distance(&p, &p).is_err());
    }

    #[test]
    fn invalid_primitives() {
        assert!(Shape::line(v(0., 0., 0.), v(1., 1., 0.)).is_err());
        assert!(Shape::sphere(v(0., 0., 0.), 0.0).is_err());
    }

    #[test]
    fn env_jacobian_attachment_locality() {
        let rev = |a: f64| JointDesc::revolute(DhParams { a, ..Default::default() }, -3.0, 3.0, 1.0);
        let chain = SerialChain::new("c", DualQuaternion::IDENTITY, vec![rev(0.5), rev(0.5), rev(0.5)], DualQuaternion::IDENTITY)
            .unwrap();
        let robot = Primitive { shape: Shape::point(v(0.1, 0.0, 0.0)), attachment: Attachment::Robot { branch: 0, joint: 0 } };
        let env = Primitive { shape: Shape::sphere(v(2.0, 1.0, 0.3), 0.2).unwrap(), attachment: Attachment::Environment };
        let (_, row) = distance_jacobian_env(&chain, &[0.3, 0.2, -0.4], &robot, &env).unwrap();
        assert!(row[0] != 0.0);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[2], 0.0);
        assert!(matches!(
            distance_jacobian_env(&chain, &[0.0; 3], &env, &robot),
            Err(GeometryError::AttachmentMismatch(_))
        ));
    }

    #[test]
    fn transformed_moves_anchor_and_axis() {
        let pose = DualQuaternion::from_rt(Quaternion::rot_z(std::f64::consts::FRAC_PI_2), &v(1., 0., 0.)).unwrap();
        let l = Shape::line(v(1., 0., 0.), v(1., 0., 0.)).unwrap().transformed(&pose);
        assert!((l.anchor() - v(1., 1., 0.)).norm() < 1e-15);
        assert!((l.axis().unwrap() - v(0., 1., 0.)).norm() < 1e-15);
    }
}
