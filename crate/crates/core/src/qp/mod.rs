//! Small dense convex QPs with affine inequality constraints.
//!
//! Every agent subproblem of both equilibrium-seeking loops, the
//! centralized welfare problem and the projections used by the KKT checker
//! funnel through [`solve_qp`]. Strictly convex problems go straight to the
//! dual active-set solver; merely convex ones (zero curvature on epigraph
//! variables, pure LPs) are solved by a proximal-point outer loop whose
//! regularization vanishes at the fixed point.

mod active_set;
mod local;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub use local::{solve_local_pfb, solve_local_prox, solve_standalone, LeastSquaresTerm};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20_000;

/// Quadratic part of a QP objective, `1/2 x' Q x`.
#[derive(Debug, Clone, PartialEq)]
pub enum QuadTerm {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl QuadTerm {
    fn dim(&self) -> usize {
        match self {
            QuadTerm::Diagonal(d) => d.len(),
            QuadTerm::Dense(m) => m.nrows(),
        }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            QuadTerm::Diagonal(d) => d.component_mul(x),
            QuadTerm::Dense(m) => m * x,
        }
    }

    fn diagonal(&self) -> DVector<f64> {
        match self {
            QuadTerm::Diagonal(d) => d.clone(),
            QuadTerm::Dense(m) => m.diagonal(),
        }
    }

    fn max_diag(&self) -> f64 {
        match self {
            QuadTerm::Diagonal(d) => d.iter().cloned().fold(0.0, f64::max),
            QuadTerm::Dense(m) => m.diagonal().iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// `minimize 1/2 x' Q x + lin' x  subject to  a_ineq x <= b_ineq`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub quad: QuadTerm,
    pub lin: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    /// Problem with a separable quadratic term; `q_diag` must be nonnegative.
    pub fn diagonal(
        q_diag: DVector<f64>,
        lin: DVector<f64>,
        a_ineq: DMatrix<f64>,
        b_ineq: DVector<f64>,
    ) -> Result<Self> {
        if q_diag.iter().any(|&q| !(q >= 0.0)) {
            return Err(Error::invalid("qp", "quadratic weights must be nonnegative"));
        }
        let p = QpProblem {
            quad: QuadTerm::Diagonal(q_diag),
            lin,
            a_ineq,
            b_ineq,
        };
        p.check()?;
        Ok(p)
    }

    /// Problem with a dense symmetric positive semidefinite quadratic term.
    pub fn dense(q: DMatrix<f64>, lin: DVector<f64>, a_ineq: DMatrix<f64>, b_ineq: DVector<f64>) -> Result<Self> {
        check_len("qp quadratic columns", q.nrows(), q.ncols())?;
        let p = QpProblem {
            quad: QuadTerm::Dense(q),
            lin,
            a_ineq,
            b_ineq,
        };
        p.check()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.lin.len();
        check_len("qp quadratic term", n, self.quad.dim())?;
        check_len("qp constraint columns", n, self.a_ineq.ncols())?;
        check_len("qp constraint rows", self.a_ineq.nrows(), self.b_ineq.len())?;
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.quad.apply(x)) + self.lin.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x_opt: DVector<f64>,
    pub obj: f64,
    /// Multipliers for the rows of `a_ineq`.
    pub dual: DVector<f64>,
    pub status: QpStatus,
    /// Constraint additions performed by the active-set solver, summed over
    /// proximal outer iterations.
    pub iterations: usize,
}

/// Residuals of the QP optimality conditions at a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpKkt {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

impl QpKkt {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

/// Scaled KKT residuals, computed only from the problem data and `(x, dual)`.
pub fn qp_kkt_residual(problem: &QpProblem, x: &DVector<f64>, dual: &DVector<f64>) -> QpKkt {
    let qx = problem.quad.apply(x);
    let grad = &qx + &problem.lin + problem.a_ineq.tr_mul(dual);
    let scale = 1.0 + problem.lin.amax().max(qx.amax());
    let ax = &problem.a_ineq * x;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..ax.len() {
        let slack = problem.b_ineq[i] - ax[i];
        primal = primal.max(-slack / (1.0 + problem.b_ineq[i].abs()));
        comp = comp.max((dual[i] * slack).abs() / scale);
    }
    QpKkt {
        stationarity: grad.amax() / scale,
        primal: primal.max(0.0),
        complementarity: comp,
        dual_sign: (-dual.min()).max(0.0),
    }
}

/// Factor `G = Q + diag(shift)` as `L L'` and return `J = L^{-T}`
/// column-major, or `None` when `G` is singular or too badly conditioned
/// for the active-set recursion.
fn inverse_factor(quad: &QuadTerm, shift: &[f64]) -> Option<Vec<f64>> {
    match quad {
        QuadTerm::Diagonal(d) => {
            let n = d.len();
            let g: Vec<f64> = (0..n).map(|k| d[k] + shift[k]).collect();
            let max = g.iter().cloned().fold(0.0f64, f64::max);
            let mut j = vec![0.0; n * n];
            for k in 0..n {
                if !(g[k] > 1e-12 * max.max(1e-300)) {
                    return None;
                }
                j[k + k * n] = 1.0 / g[k].sqrt();
            }
            Some(j)
        }
        QuadTerm::Dense(q) => {
            let n = q.nrows();
            let mut g = q.clone();
            for k in 0..n {
                g[(k, k)] += shift[k];
            }
            let chol = g.cholesky()?;
            let l = chol.l();
            let piv: Vec<f64> = (0..n).map(|k| l[(k, k)] * l[(k, k)]).collect();
            let max = piv.iter().cloned().fold(0.0, f64::max);
            if piv.iter().any(|&p| !(p > 1e-12 * max)) {
                return None;
            }
            let linv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
            // column k of J = L^{-T} is row k of L^{-1}
            Some(linv.transpose().as_slice().to_vec())
        }
    }
}

/// Solve the equality-constrained KKT system on the rows with positive
/// multipliers and keep the answer if it certifies optimality of the
/// original problem.
fn polish(problem: &QpProblem, dual: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    polish_rows(problem, &active_rows(dual), tol)
}

/// Indices of the rows with a positive multiplier.
pub fn active_rows(dual: &DVector<f64>) -> Vec<usize> {
    (0..dual.len()).filter(|&i| dual[i] > 0.0).collect()
}

fn polish_rows(problem: &QpProblem, rows: &[usize], tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.dim();
    let m = problem.b_ineq.len();
    if rows.iter().any(|&r| r >= m) {
        return None;
    }
    let k = rows.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    match &problem.quad {
        QuadTerm::Diagonal(d) => {
            for i in 0..n {
                kkt[(i, i)] = d[i];
            }
        }
        QuadTerm::Dense(q) => kkt.view_mut((0, 0), (n, n)).copy_from(q),
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&problem.lin));
    for (c, &r) in rows.iter().enumerate() {
        for j in 0..n {
            let a = problem.a_ineq[(r, j)];
            kkt[(n + c, j)] = a;
            kkt[(j, n + c)] = a;
        }
        rhs[n + c] = problem.b_ineq[r];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut full = DVector::zeros(m);
    for (c, &r) in rows.iter().enumerate() {
        full[r] = sol[n + c];
    }
    if qp_kkt_residual(problem, &x, &full).max() <= tol {
        Some((x, full.map(|v| v.max(0.0))))
    } else {
        None
    }
}

fn row_major(a: &DMatrix<f64>) -> Vec<f64> {
    a.transpose().as_slice().to_vec()
}

fn map_outcome(o: active_set::Outcome) -> QpStatus {
    match o {
        active_set::Outcome::Optimal => QpStatus::Optimal,
        active_set::Outcome::Infeasible => QpStatus::Infeasible,
        active_set::Outcome::MaxIter => QpStatus::MaxIter,
    }
}

/// Solve a convex QP.
///
/// `tol` bounds the scaled KKT residuals of an `Optimal` answer and
/// `max_iter` the total number of active-set additions. Infeasibility and
/// iteration exhaustion are reported through [`QpStatus`], with the last
/// iterate in `x_opt`.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    solve_qp_centered(problem, tol, max_iter, None)
}

/// Like [`solve_qp_centered`], but first tries the rows in `active` as the
/// optimal active set. A guess that fails the KKT check costs one linear
/// solve before falling back to the full active-set method.
pub fn solve_qp_warm(
    problem: &QpProblem,
    tol: f64,
    max_iter: usize,
    center: Option<&DVector<f64>>,
    active: &[usize],
) -> Result<QpSolution> {
    problem.check()?;
    if !active.is_empty() && tol > 0.0 {
        if let Some((x, dual)) = polish_rows(problem, active, tol) {
            return Ok(finalize(problem, x, dual, QpStatus::Optimal, 0, tol));
        }
    }
    solve_qp_centered(problem, tol, max_iter, center)
}

/// Like [`solve_qp`]; `center` seeds the proximal outer loop used when `Q`
/// is singular. Among several optimizers the one reached from `center` is
/// returned.
pub fn solve_qp_centered(
    problem: &QpProblem,
    tol: f64,
    max_iter: usize,
    center: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    problem.check()?;
    if !(tol > 0.0) {
        return Err(Error::invalid("qp", "tolerance must be positive"));
    }
    let n = problem.dim();
    let a_rows = row_major(&problem.a_ineq);
    let b = problem.b_ineq.as_slice();
    let feas_tol = (tol * 1e-3).max(1e-14);

    if let Some(j) = inverse_factor(&problem.quad, &vec![0.0; n]) {
        let res = active_set::solve(&j, problem.lin.as_slice(), &a_rows, b, feas_tol, max_iter);
        return Ok(finalize(
            problem,
            res.x,
            res.dual,
            map_outcome(res.outcome),
            res.iterations,
            tol,
        ));
    }

    // Proximal point: minimize f(x) + 1/2 |x - center|^2_W until the center
    // stops moving. W is nonzero only on curvature-free coordinates when
    // that suffices for a positive definite factor.
    let delta = 1e-4 * problem.quad.max_diag().max(problem.lin.amax()).max(1.0);
    let diag = problem.quad.diagonal();
    let partial: Vec<f64> = diag.iter().map(|&q| if q > 0.0 { 0.0 } else { delta }).collect();
    let (shift, j) = match inverse_factor(&problem.quad, &partial) {
        Some(j) => (partial, j),
        None => {
            let full = vec![delta; n];
            let j = inverse_factor(&problem.quad, &full)
                .ok_or_else(|| Error::invalid("qp", "quadratic term is not positive semidefinite"))?;
            (full, j)
        }
    };
    let mut xc = match center {
        Some(c) => {
            check_len("qp center", n, c.len())?;
            c.clone()
        }
        None => DVector::zeros(n),
    };
    let mut used = 0usize;
    let mut lin = problem.lin.clone();
    for _outer in 0..500 {
        for k in 0..n {
            lin[k] = problem.lin[k] - shift[k] * xc[k];
        }
        let res = active_set::solve(&j, lin.as_slice(), &a_rows, b, feas_tol, max_iter - used.min(max_iter));
        used += res.iterations;
        let x = DVector::from_vec(res.x);
        let dual = DVector::from_vec(res.dual);
        let status = map_outcome(res.outcome);
        if status != QpStatus::Optimal {
            return Ok(finalize(problem, x, dual, status, used, tol));
        }
        if let Some((xp, dp)) = polish(problem, &dual, tol) {
            return Ok(finalize(problem, xp, dp, status, used, tol));
        }
        let moved = (&x - &xc).amax();
        let kkt = qp_kkt_residual(problem, &x, &dual);
        if moved <= tol * (1.0 + x.amax()) && kkt.max() <= tol {
            return Ok(finalize(problem, x, dual, status, used, tol));
        }
        xc = x;
        if used >= max_iter {
            break;
        }
    }
    let m = problem.b_ineq.len();
    Ok(QpSolution {
        obj: problem.objective(&xc),
        x_opt: xc,
        dual: DVector::zeros(m),
        status: QpStatus::MaxIter,
        iterations: used,
    })
}

fn finalize(
    problem: &QpProblem,
    x: impl Into<DVector<f64>>,
    dual: impl Into<DVector<f64>>,
    status: QpStatus,
    iterations: usize,
    tol: f64,
) -> QpSolution {
    let x: DVector<f64> = x.into();
    let dual: DVector<f64> = dual.into();
    let mut status = status;
    if status == QpStatus::Optimal && qp_kkt_residual(problem, &x, &dual).max() > tol {
        log::debug!("active-set answer failed the KKT check");
        status = QpStatus::MaxIter;
    }
    QpSolution {
        obj: problem.objective(&x),
        x_opt: x,
        dual,
        status,
        iterations,
    }
}

/// Element-wise `max(0, v)`.
pub fn project_nonneg(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(p: &QpProblem) -> QpSolution {
        solve_qp(p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }

    #[test]
    fn box_projection_is_clamp() {
        let c = DVector::from_vec(vec![-2.0, 0.3, 5.0]);
        let lo = -1.0;
        let hi = 1.0;
        let mut a = DMatrix::zeros(6, 3);
        let mut b = DVector::zeros(6);
        for k in 0..3 {
            a[(k, k)] = -1.0;
            b[k] = -lo;
            a[(3 + k, k)] = 1.0;
            b[3 + k] = hi;
        }
        // |x - c|^2 / 2 -> q = 1, lin = -c
        let p = QpProblem::diagonal(DVector::from_element(3, 1.0), -&c, a, b).unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        for k in 0..3 {
            assert!((s.x_opt[k] - c[k].clamp(lo, hi)).abs() < 1e-12);
        }
    }

    #[test]
    fn active_lower_bound_has_unit_dual() {
        // min x^2 + x s.t. x >= 0
        let p = QpProblem::diagonal(
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
        )
        .unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.x_opt[0].abs() < 1e-12);
        assert!((s.dual[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_program_via_proximal_loop() {
        // min -x - y s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0 -> (1.6, 1.2)
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let b = DVector::from_vec(vec![4.0, 6.0, 0.0, 0.0]);
        let p = QpProblem::diagonal(DVector::zeros(2), DVector::from_vec(vec![-1.0, -1.0]), a, b).unwrap();
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x_opt[0] - 1.6).abs() < 1e-7, "{}", s.x_opt);
        assert!((s.x_opt[1] - 1.2).abs() < 1e-7);
        assert!((s.obj + 2.8).abs() < 1e-7);
    }

    #[test]
    fn infeasible_is_reported() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, -1.0]);
        let p = QpProblem::diagonal(DVector::from_element(1, 1.0), DVector::zeros(1), a, b).unwrap();
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn negative_weight_rejected() {
        let r = QpProblem::diagonal(
            DVector::from_element(1, -1.0),
            DVector::zeros(1),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn project_nonneg_examples() {
        let v = DVector::from_vec(vec![-1.0, 2.0]);
        assert_eq!(project_nonneg(&v), DVector::from_vec(vec![0.0, 2.0]));
        let v = DVector::from_vec(vec![-1.0, -3.0]);
        assert_eq!(project_nonneg(&v), DVector::zeros(2));
    }
}
