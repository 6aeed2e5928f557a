//! Agent-level subproblems over the epigraph set `a x~ <= b`.

use nalgebra::{DMatrix, DVector};

use super::{solve_qp, solve_qp_warm, QpProblem, QpSolution, QuadTerm, DEFAULT_MAX_ITER};
use crate::error::{check_len, Result};
use crate::model::AgentSet;

/// `weight / 2 * |mat x - target|^2` acting on the battery part `x` of `x~`.
#[derive(Debug, Clone)]
pub struct LeastSquaresTerm {
    pub mat: DMatrix<f64>,
    pub target: DVector<f64>,
    pub weight: f64,
}

/// `minimize grad' x~ + 1/(2 rho) |x~ - prev|^2` over the agent set: one
/// forward-backward step with `grad` the full partial gradient. `active` is a
/// warm-start guess of the binding rows, typically from the previous step.
pub fn solve_local_pfb(
    set: &AgentSet,
    grad: &DVector<f64>,
    prev: &DVector<f64>,
    rho: f64,
    active: &[usize],
    tol: f64,
) -> Result<QpSolution> {
    let n = set.dim();
    check_len("local gradient", n, grad.len())?;
    check_len("local iterate", n, prev.len())?;
    let lin = grad - prev / rho;
    let p = QpProblem {
        quad: QuadTerm::Diagonal(DVector::from_element(n, 1.0 / rho)),
        lin,
        a_ineq: set.a.clone(),
        b_ineq: set.b.clone(),
    };
    solve_qp_warm(&p, tol, DEFAULT_MAX_ITER, None, active)
}

/// `minimize (l + extra)' x~ + wear_dt / 2 |x|^2 + sum of least-squares terms`
/// over the agent set. `extra` has length `3T`; `center` seeds the proximal
/// loop on the curvature-free epigraph variables.
pub fn solve_local_prox(
    set: &AgentSet,
    wear_dt: f64,
    extra: &DVector<f64>,
    terms: &[LeastSquaresTerm],
    center: Option<&DVector<f64>>,
    active: &[usize],
    tol: f64,
) -> Result<QpSolution> {
    let n = set.dim();
    let w = n - n / 3;
    check_len("local linear term", n, extra.len())?;
    let mut q = DMatrix::zeros(n, n);
    let mut lin = &set.l + extra;
    for k in 0..w {
        q[(k, k)] = wear_dt;
    }
    for term in terms {
        check_len("least-squares columns", w, term.mat.ncols())?;
        check_len("least-squares target", term.mat.nrows(), term.target.len())?;
        let gram = term.mat.tr_mul(&term.mat) * term.weight;
        let mut block = q.view_mut((0, 0), (w, w));
        block += gram;
        let pull = term.mat.tr_mul(&term.target) * term.weight;
        let mut head = lin.rows_mut(0, w);
        head -= pull;
    }
    let p = QpProblem {
        quad: QuadTerm::Dense(q),
        lin,
        a_ineq: set.a.clone(),
        b_ineq: set.b.clone(),
    };
    solve_qp_warm(&p, tol, DEFAULT_MAX_ITER, center, active)
}

/// Agent's best response when trading alone with the grid: energy cost plus
/// battery wear, no community terms.
pub fn solve_standalone(set: &AgentSet, wear_dt: f64, tol: f64) -> Result<QpSolution> {
    let n = set.dim();
    let w = n - n / 3;
    let mut q = DVector::zeros(n);
    q.rows_mut(0, w).fill(wear_dt);
    let p = QpProblem {
        quad: QuadTerm::Diagonal(q),
        lin: set.l.clone(),
        a_ineq: set.a.clone(),
        b_ineq: set.b.clone(),
    };
    solve_qp(&p, tol, DEFAULT_MAX_ITER)
}
