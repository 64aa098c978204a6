//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the dual quaternion or QP code paths it checks:
//! poses are rebuilt as 4×4 homogeneous matrices, derivatives come from
//! central differences, and QPs are solved by brute-force enumeration of
//! active sets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use railkit::chain::{CompositeChain, DhParams, JointDesc, JointKind, SerialChain};
use railkit::pose::{DualQuaternion, Quaternion};

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rodrigues' formula.
pub fn axis_angle_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

pub fn homogeneous(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Rotation matrix of a (unit) quaternion, textbook closed form.
pub fn quat_matrix(q: &Quaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    )
}

/// Homogeneous matrix of a unit dual quaternion, translation from `2 d r*`.
pub fn dq_matrix(p: &DualQuaternion) -> Matrix4<f64> {
    let r = p.primary;
    let d = p.dual;
    // vector part of 2 d conj(r), expanded by hand
    let (rw, rx, ry, rz) = (r.w, -r.x, -r.y, -r.z);
    let tx = 2.0 * (d.w * rx + d.x * rw + d.y * rz - d.z * ry);
    let ty = 2.0 * (d.w * ry - d.x * rz + d.y * rw + d.z * rx);
    let tz = 2.0 * (d.w * rz + d.x * ry - d.y * rx + d.z * rw);
    homogeneous(&quat_matrix(&r), &Vector3::new(tx, ty, tz))
}

/// Standard DH link matrix.
pub fn dh_matrix(theta: f64, d: f64, a: f64, alpha: f64) -> Matrix4<f64> {
    let (st, ct) = theta.sin_cos();
    let (sa, ca) = alpha.sin_cos();
    Matrix4::new(
        ct, -st * ca, st * sa, a * ct,
        st, ct * ca, -ct * sa, a * st,
        0.0, sa, ca, d,
        0.0, 0.0, 0.0, 1.0,
    )
}

pub struct RandomPose {
    pub axis: Vector3<f64>,
    pub angle: f64,
    pub t: Vector3<f64>,
}

impl RandomPose {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let axis = loop {
            let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if v.norm() > 0.1 {
                break v.normalize();
            }
        };
        RandomPose {
            axis,
            angle: rng.gen_range(-3.1..3.1),
            t: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
        }
    }

    pub fn dq(&self) -> DualQuaternion {
        DualQuaternion::from_rt(Quaternion::from_axis_angle(&self.axis, self.angle), &self.t).unwrap()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        homogeneous(&axis_angle_matrix(&self.axis, self.angle), &self.t)
    }
}

pub fn random_joint(rng: &mut ChaCha8Rng) -> JointDesc {
    let dh = DhParams {
        theta: rng.gen_range(-3.0..3.0),
        d: rng.gen_range(-0.5..0.5),
        a: rng.gen_range(-0.5..0.5),
        alpha: rng.gen_range(-3.0..3.0),
    };
    if rng.gen_bool(0.25) {
        JointDesc::prismatic(dh, -0.5, 0.5, 0.2)
    } else {
        JointDesc::revolute(dh, -3.2, 3.2, 1.0)
    }
}

pub fn random_chain(rng: &mut ChaCha8Rng, joints: usize) -> SerialChain {
    let js = (0..joints).map(|_| random_joint(rng)).collect();
    SerialChain::new("random", RandomPose::sample(rng).dq(), js, RandomPose::sample(rng).dq()).unwrap()
}

pub fn random_q(rng: &mut ChaCha8Rng, joints: &[&JointDesc]) -> Vec<f64> {
    joints.iter().map(|j| rng.gen_range(j.q_min..j.q_max)).collect()
}

/// Homogeneous-matrix forward kinematics of a composite chain, up to and
/// including joint `upto` (or the full chain plus tool when `None`).
pub fn oracle_fk(chain: &CompositeChain, q: &[f64], upto: Option<usize>) -> Matrix4<f64> {
    use railkit::chain::Kinematics;
    let mut m = Matrix4::identity();
    let mut k = 0;
    for seg in chain.segments() {
        m *= dq_matrix(&seg.base);
        for j in &seg.joints {
            let (theta, d) = match j.kind {
                JointKind::Revolute => (j.dh.theta + q[k], j.dh.d),
                JointKind::Prismatic => (j.dh.theta, j.dh.d + q[k]),
            };
            m *= dh_matrix(theta, d, j.dh.a, j.dh.alpha);
            if Some(k) == upto {
                return m;
            }
            k += 1;
        }
        m *= dq_matrix(&seg.tool);
    }
    m
}

/// Central-difference Jacobian of `f: Rⁿ → Rᵐ`.
pub fn central_difference<F>(q: &[f64], h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let f0 = f(q);
    let mut jac = DMatrix::zeros(f0.len(), q.len());
    let mut qp = q.to_vec();
    for i in 0..q.len() {
        qp[i] = q[i] + h;
        let fp = f(&qp);
        qp[i] = q[i] - h;
        let fm = f(&qp);
        qp[i] = q[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Normwise relative error `max|A − B| / max(1, max|B|)`.
pub fn rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

pub enum OracleResult {
    Optimal { u: DVector<f64>, lambda: DVector<f64> },
    Infeasible,
}

/// Solves `min ½uᵀHu + fᵀu s.t. Au ≤ b` by trying every active subset of
/// size ≤ n, solving its KKT system with LU, and keeping the one point that
/// is primal and dual feasible.
pub fn enumerate_qp(h: &DMatrix<f64>, f: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> OracleResult {
    let n = f.len();
    let m = b.len();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (c, &r) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + c, j)] = a[(r, j)];
                kkt[(j, n + c)] = a[(r, j)];
            }
            rhs[n + c] = b[r];
        }
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let u = sol.rows(0, n).into_owned();
        let lam_s = sol.rows(n, k).into_owned();
        if lam_s.iter().any(|&l| l < -1e-9) {
            continue;
        }
        if (a * &u - b).iter().any(|&s| s > 1e-9) {
            continue;
        }
        let obj = 0.5 * u.dot(&(h * &u)) + f.dot(&u);
        let mut lambda = DVector::zeros(m);
        for (c, &r) in rows.iter().enumerate() {
            lambda[r] = lam_s[c];
        }
        if best.as_ref().is_none_or(|(o, _, _)| obj < *o) {
            best = Some((obj, u, lambda));
        }
    }
    match best {
        Some((_, u, lambda)) => OracleResult::Optimal { u, lambda },
        None => OracleResult::Infeasible,
    }
}

pub struct RandomQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub fn random_qp(rng: &mut ChaCha8Rng) -> RandomQp {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(0..=6);
    let mtx = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = mtx.tr_mul(&mtx) + DMatrix::identity(n, n) * 0.1;
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
    RandomQp { h, f, a, b }
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// The four-branch platform: two eight-joint and two nine-joint branches
/// mounted at 45°, 135°, −135° and −45° around the table.
pub fn platform_system() -> railkit::system::RobotSystem {
    use std::f64::consts::PI;
    let d = data_dir();
    let mount = |yaw: f64| DualQuaternion::from_rotation(Quaternion::rot_z(yaw));
    railkit::system::RobotSystem::from_files(&[
        (d.join("chains/branch_6axis.yaml"), mount(PI / 4.0)),
        (d.join("chains/branch_6axis.yaml"), mount(3.0 * PI / 4.0)),
        (d.join("chains/branch_7axis.yaml"), mount(-3.0 * PI / 4.0)),
        (d.join("chains/branch_7axis.yaml"), mount(-PI / 4.0)),
    ])
    .unwrap()
}

pub fn platform_q0() -> Vec<f64> {
    let mut q = Vec::new();
    q.extend([0.0, 0.1, 0.0, 0.1, -1.5, 0.0, -1.0, 0.0].repeat(2));
    q.extend([0.0, 0.1, 0.0, 0.3, 0.0, -1.8, 0.0, 0.3, 0.0].repeat(2));
    q
}

pub fn platform_vfi_text() -> String {
    std::fs::read_to_string(data_dir().join("vfi/platform.yaml")).unwrap()
}

/// Random configuration inside the joint limits of every branch.
pub fn random_system_q(rng: &mut ChaCha8Rng, system: &railkit::system::RobotSystem) -> Vec<f64> {
    use railkit::chain::Kinematics;
    system.branches().iter().flat_map(|b| random_q(rng, &b.joints())).collect()
}

/// Penetration of a point into a sphere, `max(0, R - |p - c|)`.
pub fn sphere_penetration(c: &Vector3<f64>, r: f64, p: &Vector3<f64>) -> f64 {
    (r - (p - c).norm()).max(0.0)
}

/// Time at which a sampled depth signal first exceeds `level`, linearly
/// interpolated between ticks.
pub fn crossing_time(depths: &[f64], level: f64, dt: f64) -> Option<f64> {
    let k = depths.iter().position(|d| *d > level)?;
    if k == 0 {
        return Some(0.0);
    }
    let (a, b) = (depths[k - 1], depths[k]);
    Some((k as f64 - 1.0 + (level - a) / (b - a)) * dt)
}

/// Distance to the ellipse `(a cos θ, b sin θ)` by dense sampling and
/// ternary refinement.
pub fn ellipse_distance_oracle(a: f64, b: f64, x: f64, y: f64) -> f64 {
    let d = |t: f64| (a * t.cos() - x).hypot(b * t.sin() - y);
    let n = 4096;
    let step = std::f64::consts::TAU / n as f64;
    let k = (0..n).min_by(|i, j| d(*i as f64 * step).total_cmp(&d(*j as f64 * step))).unwrap();
    let (mut lo, mut hi) = ((k as f64 - 1.0) * step, (k as f64 + 1.0) * step);
    for _ in 0..100 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if d(m1) < d(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    d(0.5 * (lo + hi))
}

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    data_dir().join("scenarios").join(format!("{name}.yaml"))
}

/// Runs a scenario file, returning the trace bytes.
pub fn trace_bytes(scenario: railkit::sim::Scenario) -> Vec<u8> {
    let mut sim = railkit::sim::Simulation::new(scenario).unwrap();
    let mut buf = Vec::new();
    sim.run_to_trace(&mut buf).unwrap();
    buf
}

/// Largest coefficient difference between two dual quaternions.
pub fn dq_max_diff(a: &DualQuaternion, b: &DualQuaternion) -> f64 {
    a.vec8().0.iter().zip(b.vec8().0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
