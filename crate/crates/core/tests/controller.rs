mod common;

use nalgebra::{DMatrix, DVector, Vector3};

use common::*;
use railkit::chain::Kinematics;
use railkit::controller::{
    build_problem, control_step, integrate_step, pose_error, task_objective, ControlError, ControlTask, Controller,
    ControllerConfig,
};
use railkit::pose::{DualQuaternion, Quaternion};
use railkit::qp::QpStatus;
use railkit::vfi::{assemble, parse_vfi_config, ConstraintGains, RowSource};

fn error_at(chain: &impl Kinematics, target: &DualQuaternion, q: &[f64]) -> DVector<f64> {
    pose_error(&chain.fk(q).unwrap(), target).0
}

#[test]
fn pose_error_vanishes_at_target_for_both_covers() {
    let mut rng = rng(61);
    for _ in 0..100 {
        let x = RandomPose::sample(&mut rng).dq();
        assert!(pose_error(&x, &x).0.amax() < 1e-15);
        assert!(pose_error(&x, &-x).0.amax() < 1e-15);
        let y = RandomPose::sample(&mut rng).dq();
        let (e1, _) = pose_error(&x, &y);
        let (e2, _) = pose_error(&x, &-y);
        assert_eq!(e1, e2);
    }
}

#[test]
fn objective_matches_finite_difference_error_jacobian() {
    let system = platform_system();
    let mut rng = rng(62);
    for _ in 0..40 {
        let q = random_system_q(&mut rng, &system);
        let b = (q[0].abs() * 1000.0) as usize % 4;
        let chain = &system.branches()[b];
        let qb = system.slice(&q, b).to_vec();
        let target = chain.fk(&random_q(&mut rng, &chain.joints())).unwrap();
        let task = ControlTask { branch: b, target, gain: 7.0, damping: 0.1 };
        let (h, f, err) = task_objective(chain, &qb, &task).unwrap();

        let n = central_difference(&qb, 1e-7, |x| error_at(chain, &target, x));
        let e = error_at(chain, &target, &qb);
        let h_oracle = (n.transpose() * &n + DMatrix::identity(qb.len(), qb.len()) * 0.01) * 2.0;
        let f_oracle = n.transpose() * &e * 14.0;
        assert!(rel_error(&h, &h_oracle) < 1e-6, "H error {}", rel_error(&h, &h_oracle));
        assert!((f - f_oracle).amax() < 1e-6 * 14.0);
        assert!((err - e.norm()).abs() < 1e-15);
    }
}

#[test]
fn unconstrained_step_is_damped_least_squares() {
    let system = platform_system();
    let q = platform_q0();
    let poses = system.tool_poses(&q).unwrap();
    let target = DualQuaternion::from_translation(&Vector3::new(0.0, 0.0, 0.01)) * poses[2];
    let tasks = [ControlTask::new(2, target)];
    let empty = assemble(&[], &system, &q, ConstraintGains::default()).unwrap();
    // drop every inequality row
    let mut free = empty.clone();
    free.ws = DMatrix::zeros(0, 34);
    free.w_s = DVector::zeros(0);
    free.source_s.clear();
    let out = control_step(&system, &q, &tasks, &free, &ControllerConfig::default()).unwrap();
    assert_eq!(out.status, QpStatus::Optimal);

    let chain = &system.branches()[2];
    let qb = system.slice(&q, 2);
    let n = central_difference(qb, 1e-7, |x| error_at(chain, &target, x));
    let e = error_at(chain, &target, qb);
    let lhs = n.transpose() * &n + DMatrix::identity(9, 9) * 0.05f64.powi(2);
    let expected = lhs.lu().solve(&(-(n.transpose() * e) * 10.0)).unwrap();
    let got = out.u.rows(system.offset(2), 9);
    assert!((got - &expected).amax() < 1e-5, "{}", (got - expected).amax());
    // branches without a task hold their pose
    for b in [0, 1, 3] {
        assert!(out.u.rows(system.offset(b), system.dofs()[b]).amax() < 1e-12);
        assert!(out.task_errors[b] < 1e-15);
    }
}

#[test]
fn reaches_a_reachable_target_without_constraints() {
    let system = platform_system();
    let controller = Controller::new(system.clone(), vec![], ControllerConfig::default());
    let mut rng = rng(63);
    let mut q = platform_q0();
    let goal_q = {
        let mut g = q.clone();
        for v in &mut g[17..26] {
            *v += rand::Rng::gen_range(&mut rng, -0.15..0.15);
        }
        system.clamp_joints(&g)
    };
    let target = system.tool_poses(&goal_q).unwrap()[2];
    let tasks = [ControlTask::new(2, target)];
    let mut last = f64::INFINITY;
    for _ in 0..1500 {
        let (next, out) = controller.advance(&q, &tasks).unwrap();
        assert!(out.task_errors[2] <= last + 1e-12, "error grew: {} -> {}", last, out.task_errors[2]);
        last = out.task_errors[2];
        q = next;
    }
    assert!(last < 1e-3, "final error {last}");
}

#[test]
fn infeasible_constraints_freeze_the_robot() {
    let system = platform_system();
    let q = platform_q0();
    let mut cs = assemble(&[], &system, &q, ConstraintGains::default()).unwrap();
    let k = cs.source_s.iter().position(|s| matches!(s, RowSource::VelocityLower { branch: 1, joint: 3 })).unwrap();
    // u >= vmax + 1 contradicts u <= vmax
    cs.w_s[k] = -(cs.w_s[k + 1] + 1.0);
    let target = DualQuaternion::from_translation(&Vector3::new(0.01, 0.0, 0.0)) * system.tool_poses(&q).unwrap()[0];
    let out = control_step(&system, &q, &[ControlTask::new(0, target)], &cs, &ControllerConfig::default()).unwrap();
    assert_eq!(out.status, QpStatus::Infeasible);
    assert_eq!(out.u, DVector::zeros(34));
    assert_eq!(integrate_step(&system, &q, &out.u, 0.004), q);
}

#[test]
fn iteration_cap_freezes_too() {
    let system = platform_system();
    let specs = parse_vfi_config(&platform_vfi_text()).unwrap();
    let mut config = ControllerConfig::default();
    config.solver.max_iterations = 0;
    let q = platform_q0();
    let controller = Controller::new(system.clone(), specs, config);
    let far = DualQuaternion::from_translation(&Vector3::new(0.0, 0.0, -0.5)) * system.tool_poses(&q).unwrap()[0];
    let out = controller.step(&q, &[ControlTask::new(0, far)]).unwrap();
    assert_eq!(out.status, QpStatus::MaxIterations);
    assert_eq!(out.u.amax(), 0.0);
}

#[test]
fn task_validation() {
    let system = platform_system();
    let q = platform_q0();
    let cs = assemble(&[], &system, &q, ConstraintGains::default()).unwrap();
    let config = ControllerConfig::default();
    let x = system.tool_poses(&q).unwrap()[0];
    let run = |tasks: &[ControlTask]| build_problem(&system, &q, tasks, &cs, &config).map(|_| ());

    assert!(matches!(run(&[ControlTask::new(4, x)]), Err(ControlError::BranchOutOfRange { branch: 4, count: 4 })));
    assert!(matches!(run(&[ControlTask::new(1, x), ControlTask::new(1, x)]), Err(ControlError::DuplicateTask(1))));
    let mut bad = ControlTask::new(0, x.scale(1.01));
    assert!(matches!(run(&[bad]), Err(ControlError::NonUnitTarget { branch: 0 })));
    bad = ControlTask { gain: 0.0, ..ControlTask::new(0, x) };
    assert!(matches!(run(&[bad]), Err(ControlError::InvalidGain)));
    assert!(matches!(build_problem(&system, &q[1..], &[], &cs, &config), Err(ControlError::Chain(_))));
}

#[test]
fn integration_clamps_to_limits() {
    let system = platform_system();
    let q = platform_q0();
    let u = DVector::from_element(34, 1000.0);
    let next = integrate_step(&system, &q, &u, 0.004);
    let uppers: Vec<f64> = system.branches().iter().flat_map(|b| b.upper_limits()).collect();
    assert_eq!(next, uppers);
}

#[test]
fn rotation_targets_are_tracked() {
    let system = platform_system();
    let controller = Controller::new(system.clone(), vec![], ControllerConfig::default());
    let mut q = platform_q0();
    let x0 = system.tool_poses(&q).unwrap()[0];
    let target = x0 * DualQuaternion::from_rotation(Quaternion::rot_z(0.2));
    for _ in 0..1500 {
        q = controller.advance(&q, &[ControlTask::new(0, target)]).unwrap().0;
    }
    let x = system.tool_poses(&q).unwrap()[0];
    assert!(pose_error(&x, &target).0.norm() < 1e-3);
}
