//! Centralized differential kinematics controller.
//!
//! Every tick solves one QP over the stacked joint velocities of all branches:
//!
//! ```text
//! min  Σᵢ ‖Nᵢ q̇ᵢ + η eᵢ‖² + λ²‖q̇ᵢ‖²
//! s.t. W_s q̇ ≤ w_s,  W_p q̇ ≤ w_p
//! ```
//!
//! with `eᵢ = vec8(xᵢ ⊗ conj(x_d,i) − 1)`.

use nalgebra::{DMatrix, DVector};

use crate::chain::{ChainError, Kinematics};
use crate::geometry::GeometryError;
use crate::pose::{DualQuaternion, PoseError, POSE_UNIT_TOL};
use crate::qp::{QpError, QpProblem, QpSolver, QpStatus};
use crate::system::RobotSystem;
use crate::vfi::{assemble, ConstraintGains, ConstraintSet, VfiSpec};

pub const DEFAULT_DT: f64 = 0.004;
pub const DEFAULT_TASK_GAIN: f64 = 10.0;
pub const DEFAULT_DAMPING: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("target pose for branch {branch} is not a unit dual quaternion")]
    NonUnitTarget { branch: usize },
    #[error("task refers to branch {branch} but the system has {count}")]
    BranchOutOfRange { branch: usize, count: usize },
    #[error("more than one task for branch {0}")]
    DuplicateTask(usize),
    #[error("task gain and damping must be positive")]
    InvalidGain,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Pose-tracking task for one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlTask {
    pub branch: usize,
    pub target: DualQuaternion,
    pub gain: f64,
    pub damping: f64,
}

impl ControlTask {
    pub fn new(branch: usize, target: DualQuaternion) -> Self {
        ControlTask { branch, target, gain: DEFAULT_TASK_GAIN, damping: DEFAULT_DAMPING }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub dt: f64,
    pub task_gain: f64,
    pub damping: f64,
    pub constraint_gains: ConstraintGains,
    pub solver: QpSolver,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            dt: DEFAULT_DT,
            task_gain: DEFAULT_TASK_GAIN,
            damping: DEFAULT_DAMPING,
            constraint_gains: ConstraintGains::default(),
            solver: QpSolver::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    /// Stacked joint velocities; zero whenever `status` is not optimal.
    pub u: DVector<f64>,
    /// `‖eᵢ‖` per branch.
    pub task_errors: Vec<f64>,
    /// Smallest VFI distance this tick, if any VFI is configured.
    pub min_distance: Option<f64>,
    /// Smallest `d − d_safe` over keepout VFIs.
    pub min_margin: Option<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Pose error with double-cover sign selection, and the target actually used.
pub fn pose_error(x: &DualQuaternion, target: &DualQuaternion) -> (DVector<f64>, DualQuaternion) {
    let mut xd = *target;
    if (*x * xd.conj()).primary.w < 0.0 {
        xd = -xd;
    }
    let mut e = DVector::from_row_slice(&(*x * xd.conj()).vec8().0);
    e[0] -= 1.0;
    (e, xd)
}

/// Quadratic form `(H, f)` of one branch's objective and its error norm.
pub fn task_objective<K: Kinematics + ?Sized>(
    chain: &K,
    q: &[f64],
    task: &ControlTask,
) -> Result<(DMatrix<f64>, DVector<f64>, f64), ControlError> {
    if !(task.gain > 0.0 && task.damping > 0.0) {
        return Err(ControlError::InvalidGain);
    }
    task.target.check_unit(POSE_UNIT_TOL).map_err(|_: PoseError| ControlError::NonUnitTarget { branch: task.branch })?;
    let x = chain.fk(q)?;
    let j = chain.pose_jacobian(q)?;
    let (e, xd) = pose_error(&x, &task.target);
    let c = xd.conj().hminus8();
    let c = DMatrix::from_column_slice(8, 8, c.as_slice());
    let nmat = c * j;
    let n = q.len();
    let h = (nmat.tr_mul(&nmat) + DMatrix::identity(n, n) * task.damping.powi(2)) * 2.0;
    let f = nmat.tr_mul(&e) * (2.0 * task.gain);
    Ok((h, f, e.norm()))
}

/// Fills in hold-pose tasks for branches without one.
pub fn complete_tasks(
    system: &RobotSystem,
    q: &[f64],
    tasks: &[ControlTask],
    config: &ControllerConfig,
) -> Result<Vec<ControlTask>, ControlError> {
    let count = system.branch_count();
    let mut slots: Vec<Option<ControlTask>> = vec![None; count];
    for t in tasks {
        if t.branch >= count {
            return Err(ControlError::BranchOutOfRange { branch: t.branch, count });
        }
        if slots[t.branch].replace(*t).is_some() {
            return Err(ControlError::DuplicateTask(t.branch));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(b, t)| match t {
            Some(t) => Ok(t),
            None => {
                let pose = system.branches()[b].fk(system.slice(q, b))?;
                Ok(ControlTask { branch: b, target: pose, gain: config.task_gain, damping: config.damping })
            }
        })
        .collect()
}

/// Builds the full QP for one tick.
pub fn build_problem(
    system: &RobotSystem,
    q: &[f64],
    tasks: &[ControlTask],
    constraints: &ConstraintSet,
    config: &ControllerConfig,
) -> Result<(QpProblem, Vec<f64>), ControlError> {
    system.check_dim(q)?;
    let tasks = complete_tasks(system, q, tasks, config)?;
    let n = system.total_dof();
    let mut h = DMatrix::zeros(n, n);
    let mut f = DVector::zeros(n);
    let mut errors = Vec::with_capacity(tasks.len());
    for t in &tasks {
        let b = t.branch;
        let (hi, fi, err) = task_objective(&system.branches()[b], system.slice(q, b), t)?;
        let off = system.offset(b);
        let ni = fi.len();
        h.view_mut((off, off), (ni, ni)).copy_from(&hi);
        f.rows_mut(off, ni).copy_from(&fi);
        errors.push(err);
    }
    let (a, bvec) = constraints.stacked();
    Ok((QpProblem::new(h, f, a, bvec)?, errors))
}

/// Solves one tick given a precomputed constraint set.
pub fn control_step(
    system: &RobotSystem,
    q: &[f64],
    tasks: &[ControlTask],
    constraints: &ConstraintSet,
    config: &ControllerConfig,
) -> Result<ControlOutput, ControlError> {
    let (problem, task_errors) = build_problem(system, q, tasks, constraints, config)?;
    let sol = config.solver.solve(&problem)?;
    let u = match sol.status {
        QpStatus::Optimal => sol.u,
        status => {
            log::warn!("QP returned {}; freezing joints", status.as_str());
            DVector::zeros(problem.n())
        }
    };
    Ok(ControlOutput {
        u,
        task_errors,
        min_distance: constraints.readings.iter().map(|r| r.distance).reduce(f64::min),
        min_margin: constraints.min_keepout_margin(),
        status: sol.status,
        iterations: sol.iterations,
    })
}

/// `clamp(q + u·dt)` against each branch's joint limits.
pub fn integrate_step(system: &RobotSystem, q: &[f64], u: &DVector<f64>, dt: f64) -> Vec<f64> {
    debug_assert!(dt > 0.0);
    let next: Vec<f64> = q.iter().zip(u.iter()).map(|(qi, ui)| qi + ui * dt).collect();
    system.clamp_joints(&next)
}

/// A system, its VFI set and configuration bundled for per-tick use.
#[derive(Debug, Clone)]
pub struct Controller {
    pub system: RobotSystem,
    pub specs: Vec<VfiSpec>,
    pub config: ControllerConfig,
}

impl Controller {
    pub fn new(system: RobotSystem, specs: Vec<VfiSpec>, config: ControllerConfig) -> Self {
        Controller { system, specs, config }
    }

    pub fn constraints(&self, q: &[f64]) -> Result<ConstraintSet, ControlError> {
        Ok(assemble(&self.specs, &self.system, q, self.config.constraint_gains)?)
    }

    pub fn step(&self, q: &[f64], tasks: &[ControlTask]) -> Result<ControlOutput, ControlError> {
        let cs = self.constraints(q)?;
        control_step(&self.system, q, tasks, &cs, &self.config)
    }

    /// One tick plus integration; returns the next joint state.
    pub fn advance(&self, q: &[f64], tasks: &[ControlTask]) -> Result<(Vec<f64>, ControlOutput), ControlError> {
        let out = self.step(q, tasks)?;
        let next = integrate_step(&self.system, q, &out.u, self.config.dt);
        Ok((next, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{compose, DhParams, JointDesc, SerialChain};
    use std::f64::consts::PI;

    fn planar(name: &str) -> RobotSystem {
        let j = |a| JointDesc::revolute(DhParams { theta: 0.0, d: 0.0, a, alpha: 0.0 }, -PI, PI, 2.0);
        let seg = SerialChain::new(name, DualQuaternion::IDENTITY, vec![j(0.4), j(0.3), j(0.2)], DualQuaternion::IDENTITY)
            .unwrap();
        RobotSystem::new(vec![compose(vec![seg]).unwrap()])
    }

    #[test]
    fn zero_error_gives_zero_velocity() {
        let sys = planar("p");
        let q = [0.3, -0.2, 0.5];
        let ctl = Controller::new(sys, vec![], ControllerConfig::default());
        let out = ctl.step(&q, &[]).unwrap();
        assert_eq!(out.status, QpStatus::Optimal);
        assert!(out.u.norm() < 1e-9);
        assert!(out.task_errors[0] < 1e-12);
    }

    #[test]
    fn sign_flip_of_target_is_irrelevant() {
        let sys = planar("p");
        let q = [0.3, -0.2, 0.5];
        let target = sys.branches()[0].fk(&[0.1, 0.1, 0.1]).unwrap();
        let t1 = ControlTask::new(0, target);
        let t2 = ControlTask::new(0, -target);
        let (h1, f1, _) = task_objective(&sys.branches()[0], &q, &t1).unwrap();
        let (h2, f2, _) = task_objective(&sys.branches()[0], &q, &t2).unwrap();
        assert!((h1 - h2).amax() < 1e-12);
        assert!((f1 - f2).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_tasks() {
        let sys = planar("p");
        let q = [0.0; 3];
        let bad = ControlTask::new(0, DualQuaternion::IDENTITY.scale(2.0));
        assert!(matches!(task_objective(&sys.branches()[0], &q, &bad), Err(ControlError::NonUnitTarget { .. })));
        let cfg = ControllerConfig::default();
        let t = ControlTask::new(3, DualQuaternion::IDENTITY);
        assert!(matches!(complete_tasks(&sys, &q, &[t], &cfg), Err(ControlError::BranchOutOfRange { .. })));
        let t = ControlTask::new(0, DualQuaternion::IDENTITY);
        assert!(matches!(complete_tasks(&sys, &q, &[t, t], &cfg), Err(ControlError::DuplicateTask(0))));
    }

    #[test]
    fn integrate_clamps_and_is_linear() {
        let sys = planar("p");
        let u = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let mut q = vec![0.0; 3];
        for _ in 0..10 {
            q = integrate_step(&sys, &q, &u, 0.01);
        }
        assert!((q[0] - 0.1).abs() < 1e-12 && (q[1] + 0.1).abs() < 1e-12);
        let q = integrate_step(&sys, &[3.1, 0.0, 0.0], &u, 1.0);
        assert_eq!(q[0], PI);
        assert_eq!(integrate_step(&sys, &[0.2, 0.1, 0.0], &DVector::zeros(3), 0.004), vec![0.2, 0.1, 0.0]);
    }
}
