//! Dense strictly convex QP: `min ½uᵀHu + fᵀu  s.t.  Au ≤ b`.
//!
//! The solver is a dual active-set method (Goldfarb–Idnani). It starts from
//! the unconstrained minimizer, so no feasible starting point is needed, and
//! it detects infeasibility exactly when a violated constraint can no longer
//! be satisfied by any combination of the active ones. Equality solves use a
//! Cholesky factor of `H` and a thin QR of the active normals, recomputed at
//! every add/drop step; problem sizes here are a few dozen variables.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

/// Default cap on active-set changes per solve.
pub const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Hessian is not symmetric (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("problem data contains a non-finite value")]
    NonFinite,
    #[error("malformed problem dump at line {line}: {message}")]
    Dump { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// One multiplier per row of `A`, zero for inactive rows.
    pub multipliers: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Rows of `A` active at the returned point, in the order they were added.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Hu + f + Aᵀλ‖_∞`
    pub stationarity: f64,
    /// `max(0, max(Au − b))`
    pub primal: f64,
    /// `max |λᵢ (Au − b)ᵢ|`
    pub complementarity: f64,
    /// `max(0, −min λ)`
    pub dual: f64,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        let p = QpProblem { h, f, a, b };
        p.validate()?;
        Ok(p)
    }

    /// A problem with no inequality rows.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self, QpError> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.f.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "H is {}x{}, f has length {n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.ncols() != n || self.a.nrows() != self.b.len() {
            return Err(QpError::DimensionMismatch(format!(
                "A is {}x{}, expected {}x{n}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.len()
            )));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(self.h.as_slice()) && finite(self.f.as_slice()) && finite(self.a.as_slice()) && finite(self.b.as_slice())) {
            return Err(QpError::NonFinite);
        }
        let scale = self.h.amax().max(1.0);
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }

    /// Plain-text dump: a header line, then labelled `H`, `f`, `A`, `b`
    /// blocks with one matrix row per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# railkit qp v1");
        let _ = writeln!(s, "n {} m {}", self.n(), self.m());
        let mut block = |name: &str, rows: usize, cols: usize, get: &dyn Fn(usize, usize) -> f64| {
            let _ = writeln!(s, "{name}");
            for i in 0..rows {
                let line: Vec<String> = (0..cols).map(|j| format!("{:?}", get(i, j))).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        };
        let (n, m) = (self.n(), self.m());
        block("H", n, n, &|i, j| self.h[(i, j)]);
        block("f", 1, n, &|_, j| self.f[j]);
        block("A", m, n, &|i, j| self.a[(i, j)]);
        block("b", 1, m, &|_, j| self.b[j]);
        s
    }

    pub fn parse_dump(text: &str) -> Result<Self, QpError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim_start().starts_with('#'));
        let err = |line: usize, message: &str| QpError::Dump { line: line + 1, message: message.to_string() };
        let (ln, header) = lines.next().ok_or_else(|| err(0, "empty dump"))?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        let (n, m) = match tok.as_slice() {
            ["n", n, "m", m] => (
                n.parse::<usize>().map_err(|_| err(ln, "bad n"))?,
                m.parse::<usize>().map_err(|_| err(ln, "bad m"))?,
            ),
            _ => return Err(err(ln, "expected `n <n> m <m>`")),
        };
        let mut read_block = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>, QpError> {
            let (ln, label) = lines.next().ok_or_else(|| err(0, "unexpected end of dump"))?;
            if label.trim() != name {
                return Err(err(ln, &format!("expected block `{name}`")));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| err(0, "unexpected end of dump"))?;
                let vals = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| err(ln, "bad number")))
                    .collect::<Result<Vec<_>, _>>()?;
                if vals.len() != cols {
                    return Err(err(ln, "wrong number of columns"));
                }
                out.extend(vals);
            }
            Ok(out)
        };
        let h = read_block("H", n, n)?;
        let f = read_block("f", usize::from(n > 0), n)?;
        let a = read_block("A", m, n)?;
        let b = read_block("b", usize::from(m > 0), m)?;
        Self::new(
            DMatrix::from_row_slice(n, n, &h),
            DVector::from_vec(f),
            DMatrix::from_row_slice(m, n, &a),
            DVector::from_vec(b),
        )
    }
}

/// Reusable solver; holds its configuration only.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub max_iterations: usize,
    /// Constraint violation (in units of the row's transformed norm) that
    /// triggers adding a row to the active set.
    pub violation_tol: f64,
}

impl Default for QpSolver {
    fn default() -> Self {
        QpSolver { max_iterations: MAX_ITERATIONS, violation_tol: 1e-12 }
    }
}

struct Active {
    rows: Vec<usize>,
    lambda: Vec<f64>,
}

impl QpSolver {
    pub fn solve(&self, p: &QpProblem) -> Result<QpSolution, QpError> {
        p.validate()?;
        let m = p.m();
        let chol = p.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
        let l = chol.l();
        // Change of variables y = Lᵀu turns the problem into
        // min ½‖y + g‖² s.t. Ã y ≤ b with g = L⁻¹f and Ã = A L⁻ᵀ.
        let g = l.solve_lower_triangular(&p.f).ok_or(QpError::NotPositiveDefinite)?;
        let at = l.solve_lower_triangular(&p.a.transpose()).ok_or(QpError::NotPositiveDefinite)?;
        let norms: Vec<f64> = (0..m).map(|i| at.column(i).norm()).collect();

        let mut y = -&g;
        let mut act = Active { rows: Vec::new(), lambda: Vec::new() };
        let mut iterations = 0;
        let mut status = QpStatus::Optimal;

        'outer: loop {
            // Most violated row, measured in the transformed metric.
            let mut worst: Option<(usize, f64)> = None;
            for (i, &norm) in norms.iter().enumerate() {
                if act.rows.contains(&i) {
                    continue;
                }
                let viol = at.column(i).dot(&y) - p.b[i];
                if norm == 0.0 {
                    if viol > self.violation_tol {
                        status = QpStatus::Infeasible;
                        break 'outer;
                    }
                    continue;
                }
                let scaled = viol / norm;
                if scaled > self.violation_tol && worst.is_none_or(|(_, w)| scaled > w) {
                    worst = Some((i, scaled));
                }
            }
            let Some((pi, _)) = worst else { break };
            let ap = at.column(pi).into_owned();
            let mut lambda_p = 0.0;

            loop {
                if iterations >= self.max_iterations {
                    status = QpStatus::MaxIterations;
                    break 'outer;
                }
                iterations += 1;
                let (z, r) = step_directions(&at, &act.rows, &ap);
                let zz = z.norm_squared();
                let full = if zz > (1e-14 * norms[pi]).powi(2) {
                    Some((ap.dot(&y) - p.b[pi]) / zz)
                } else {
                    None
                };
                let mut partial: Option<(usize, f64)> = None;
                for (k, &rk) in r.iter().enumerate() {
                    if rk > 0.0 {
                        let t = act.lambda[k] / rk;
                        if partial.is_none_or(|(_, best)| t < best) {
                            partial = Some((k, t));
                        }
                    }
                }
                match (full, partial) {
                    (None, None) => {
                        status = QpStatus::Infeasible;
                        break 'outer;
                    }
                    (Some(t2), partial) if partial.is_none_or(|(_, t1)| t2 <= t1) => {
                        y += &z * t2;
                        for (lam, rk) in act.lambda.iter_mut().zip(r.iter()) {
                            *lam -= t2 * rk;
                        }
                        act.rows.push(pi);
                        act.lambda.push(lambda_p + t2);
                        continue 'outer;
                    }
                    (full, Some((k, t1))) => {
                        if full.is_some() {
                            y += &z * t1;
                        }
                        for (lam, rk) in act.lambda.iter_mut().zip(r.iter()) {
                            *lam -= t1 * rk;
                        }
                        lambda_p += t1;
                        act.rows.remove(k);
                        act.lambda.remove(k);
                    }
                    (Some(_), None) => unreachable!(),
                }
            }
        }

        if status == QpStatus::Optimal {
            polish(&at, &g, p, &mut y, &mut act);
        }
        let u = l.transpose().solve_upper_triangular(&y).ok_or(QpError::NotPositiveDefinite)?;
        let mut multipliers = DVector::zeros(m);
        for (&row, &lam) in act.rows.iter().zip(&act.lambda) {
            multipliers[row] = lam;
        }
        Ok(QpSolution { u, multipliers, status, iterations, active: act.rows })
    }
}

/// Primal step `z = −(I − QQᵀ) a_p` and dual step `r = R⁻¹Qᵀ a_p` for the
/// active normals `N = QR`.
fn step_directions(at: &DMatrix<f64>, rows: &[usize], ap: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if rows.is_empty() {
        return (-ap, DVector::zeros(0));
    }
    let nmat = at.select_columns(rows);
    let qr = nmat.qr();
    let q = qr.q();
    let r = qr.r();
    let qta = q.tr_mul(ap);
    let z = -(ap - &q * &qta);
    let dual = r.solve_upper_triangular(&qta).unwrap_or_else(|| DVector::zeros(rows.len()));
    (z, dual)
}

/// Re-solves the equality-constrained problem on the final active set to
/// remove accumulated drift; kept only if it stays dual and primal feasible.
fn polish(at: &DMatrix<f64>, g: &DVector<f64>, p: &QpProblem, y: &mut DVector<f64>, act: &mut Active) {
    if act.rows.is_empty() {
        *y = -g;
        return;
    }
    let nmat = at.select_columns(&act.rows);
    let qr = nmat.clone().qr();
    let r = qr.r();
    let rhs = -(DVector::from_iterator(act.rows.len(), act.rows.iter().map(|&i| p.b[i])) + nmat.tr_mul(g));
    let Some(w) = r.transpose().solve_lower_triangular(&rhs) else { return };
    let Some(lambda) = r.solve_upper_triangular(&w) else { return };
    if lambda.iter().any(|l| !l.is_finite() || *l < -1e-12) {
        return;
    }
    let y_new = -(g + &nmat * &lambda);
    let viol = |yy: &DVector<f64>| {
        (0..p.m()).map(|i| at.column(i).dot(yy) - p.b[i]).fold(0.0f64, f64::max)
    };
    if viol(&y_new) <= viol(y).max(1e-12) {
        *y = y_new;
        act.lambda = lambda.iter().map(|l| l.max(0.0)).collect();
    }
}

/// Solves with the default solver configuration.
pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    QpSolver::default().solve(p)
}

pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> Result<KktResiduals, QpError> {
    kkt_residuals_at(p, &s.u, &s.multipliers)
}

pub fn kkt_residuals_at(p: &QpProblem, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<KktResiduals, QpError> {
    if u.len() != p.n() || lambda.len() != p.m() {
        return Err(QpError::DimensionMismatch(format!(
            "u has length {}, multipliers {}, problem is {}x{}",
            u.len(),
            lambda.len(),
            p.m(),
            p.n()
        )));
    }
    let grad = &p.h * u + &p.f + p.a.tr_mul(lambda);
    let slack = &p.a * u - &p.b;
    Ok(KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().fold(0.0f64, |acc, &v| acc.max(v)),
        complementarity: slack.iter().zip(lambda.iter()).fold(0.0f64, |acc, (s, l)| acc.max((s * l).abs())),
        dual: lambda.iter().fold(0.0f64, |acc, &l| acc.max(-l)),
    })
}
