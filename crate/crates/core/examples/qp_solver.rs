//! Solve a small strictly convex QP and check its KKT residuals.
use nalgebra::{DMatrix, DVector};
use railkit::qp::{kkt_residuals, solve, QpProblem};

fn main() {
    // minimise (u0-1)^2 + (u1-2)^2 subject to u0 + u1 <= 1 and u0 >= 0.
    let h = DMatrix::from_diagonal_element(2, 2, 2.0);
    let f = DVector::from_vec(vec![-2.0, -4.0]);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.0]);
    let b = DVector::from_vec(vec![1.0, 0.0]);
    let p = QpProblem::new(h, f, a, b).expect("well formed");

    let s = solve(&p).expect("solver");
    println!("status {}, {} iterations", s.status.as_str(), s.iterations);
    println!("u = {:.6?}", s.u.as_slice());
    println!("lambda = {:.6?}, active rows {:?}", s.multipliers.as_slice(), s.active);
    let k = kkt_residuals(&p, &s).unwrap();
    println!("KKT: {k:?}");

    let infeasible = QpProblem::new(
        DMatrix::identity(1, 1),
        DVector::zeros(1),
        DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        DVector::from_vec(vec![-1.0, -1.0]),
    )
    .unwrap();
    println!("u <= -1 and u >= 1: {}", solve(&infeasible).unwrap().status.as_str());
}
