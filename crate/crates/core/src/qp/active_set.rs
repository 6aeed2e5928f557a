//! Dual active-set method of Goldfarb and Idnani for strictly convex QPs.
//!
//! ```text
//!     minimize     1/2 x' G x + c' x
//!     subject to   a_i' x <= b_i
//! ```
//!
//! The solver starts at the unconstrained minimizer and adds the most
//! violated constraint (row-normalized) at each major iteration, keeping
//! the dual iterate feasible throughout. `G` enters only through
//! `J = L^{-T}` where `G = L L'`, so callers hand in that factor directly.
//!
//! Storage: `J` and `R` are dense column-major `n x n` buffers; column `k`
//! of `J` lives at `j[k * n..(k + 1) * n]`. The first `q` columns of `J`
//! span the active normals and `R` (upper triangular, `q x q`) satisfies
//! `J1' N = R` for the active normal matrix `N`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub(crate) struct ActiveSetResult {
    pub x: Vec<f64>,
    /// Multipliers for every row of the constraint matrix (zero when inactive).
    pub dual: Vec<f64>,
    pub iterations: usize,
    pub outcome: Outcome,
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Rotate columns `c0` and `c1` of a column-major `n x n` buffer:
/// `new_c0 = gc*c0 + gs*c1`, `new_c1 = gs*c0 - gc*c1`.
fn rotate_columns(buf: &mut [f64], n: usize, c0: usize, gc: f64, gs: f64) {
    let (left, right) = buf.split_at_mut((c0 + 1) * n);
    let a = &mut left[c0 * n..];
    let b = &mut right[..n];
    for (ai, bi) in a.iter_mut().zip(b.iter_mut()) {
        let (u, v) = (*ai, *bi);
        *ai = gc * u + gs * v;
        *bi = gs * u - gc * v;
    }
}

fn swap_columns(buf: &mut [f64], n: usize, c0: usize) {
    let (left, right) = buf.split_at_mut((c0 + 1) * n);
    left[c0 * n..].swap_with_slice(&mut right[..n]);
}

/// Solve the QP given `J = L^{-T}` (column-major) and row-major constraints.
///
/// `feas_tol` bounds the accepted row-normalized violation
/// `(a_i' x - b_i) / |a_i|` relative to `1 + |b_i| / |a_i|`.
pub(crate) fn solve(
    j_init: &[f64],
    c: &[f64],
    a_rows: &[f64],
    b: &[f64],
    feas_tol: f64,
    max_iter: usize,
) -> ActiveSetResult {
    let n = c.len();
    let m = b.len();
    debug_assert_eq!(j_init.len(), n * n);
    debug_assert_eq!(a_rows.len(), n * m);

    let mut j = j_init.to_vec();
    let mut r = vec![0.0; n * n];

    // x = -G^{-1} c = -J J' c
    let mut x = vec![0.0; n];
    for k in 0..n {
        let col = &j[k * n..(k + 1) * n];
        let coef = dot(col, c);
        axpy(-coef, col, &mut x);
    }

    let norms: Vec<f64> = a_rows.chunks_exact(n.max(1)).map(|row| dot(row, row).sqrt()).collect();

    // A zero row is either trivially satisfied or certifies infeasibility.
    for i in 0..m {
        if n == 0 || norms[i] == 0.0 {
            if b[i] < -feas_tol * (1.0 + b[i].abs()) {
                return ActiveSetResult {
                    x,
                    dual: vec![0.0; m],
                    iterations: 0,
                    outcome: Outcome::Infeasible,
                };
            }
        }
    }

    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut in_active = vec![false; m];
    let mut d = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut rv = vec![0.0; n];
    let mut np = vec![0.0; n];
    let mut iterations = 0usize;

    let finish = |x: Vec<f64>, active: &[usize], u: &[f64], iterations, outcome| {
        let mut dual = vec![0.0; m];
        for (&row, &ui) in active.iter().zip(u) {
            dual[row] = ui.max(0.0);
        }
        ActiveSetResult {
            x,
            dual,
            iterations,
            outcome,
        }
    };

    loop {
        // Most violated inactive constraint, measured after row normalization.
        let mut add: Option<usize> = None;
        let mut worst = 0.0;
        for i in 0..m {
            if in_active[i] || norms[i] == 0.0 {
                continue;
            }
            let row = &a_rows[i * n..(i + 1) * n];
            let viol = (dot(row, &x) - b[i]) / norms[i];
            let thr = feas_tol * (1.0 + b[i].abs() / norms[i]);
            if viol > thr && viol > worst {
                worst = viol;
                add = Some(i);
            }
        }
        let Some(p) = add else {
            return finish(x, &active, &u, iterations, Outcome::Optimal);
        };
        if iterations >= max_iter {
            return finish(x, &active, &u, iterations, Outcome::MaxIter);
        }
        iterations += 1;

        // Internally the constraint reads n+' x >= -b_p with n+ = -a_p.
        for (npk, ak) in np.iter_mut().zip(&a_rows[p * n..(p + 1) * n]) {
            *npk = -ak;
        }
        let mut u_plus = 0.0;

        loop {
            let q = active.len();
            for k in 0..n {
                d[k] = dot(&j[k * n..(k + 1) * n], &np);
            }
            z.fill(0.0);
            for k in q..n {
                axpy(d[k], &j[k * n..(k + 1) * n], &mut z);
            }
            // rv = R^{-1} d1, the negative dual step direction
            for i in (0..q).rev() {
                let mut s = d[i];
                for l in i + 1..q {
                    s -= r[i + l * n] * rv[l];
                }
                rv[i] = s / r[i + i * n];
            }

            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for i in 0..q {
                if rv[i] > 0.0 {
                    let t = u[i] / rv[i];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(i);
                    }
                }
            }

            let d2sq: f64 = d[q..].iter().map(|v| v * v).sum();
            let dsq: f64 = d.iter().map(|v| v * v).sum();
            let slack = dot(&np, &x) + b[p];
            let t2 = if d2sq <= 1e-22 * dsq {
                f64::INFINITY
            } else {
                -slack / d2sq
            };

            if t1.is_infinite() && t2.is_infinite() {
                return finish(x, &active, &u, iterations, Outcome::Infeasible);
            }

            if t2 <= t1 {
                axpy(t2, &z, &mut x);
                for i in 0..q {
                    u[i] -= t2 * rv[i];
                }
                u_plus += t2;

                // Add p: rotate d[q+1..] to zero, carrying J along.
                for i in (q + 1..n).rev() {
                    if d[i] == 0.0 {
                        continue;
                    }
                    if d[i - 1] == 0.0 {
                        d[i - 1] = d[i];
                        d[i] = 0.0;
                        swap_columns(&mut j, n, i - 1);
                    } else {
                        let h = d[i - 1].hypot(d[i]).copysign(d[i - 1]);
                        let gc = d[i - 1] / h;
                        let gs = d[i] / h;
                        d[i - 1] = h;
                        d[i] = 0.0;
                        rotate_columns(&mut j, n, i - 1, gc, gs);
                    }
                }
                for i in 0..=q {
                    r[i + q * n] = d[i];
                }
                active.push(p);
                in_active[p] = true;
                u.push(u_plus);
                break;
            }

            // Partial step, then drop the blocking constraint.
            if t1 > 0.0 {
                axpy(t1, &z, &mut x);
            }
            for i in 0..q {
                u[i] -= t1 * rv[i];
            }
            u_plus += t1;
            let k = drop_at.expect("finite t1 has a blocking index");
            drop_column(&mut r, &mut j, n, q, k);
            in_active[active[k]] = false;
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Remove column `k` of the `q x q` upper triangular `R` and restore the
/// triangular shape with Givens rotations on rows, mirrored on `J` columns.
fn drop_column(r: &mut [f64], j: &mut [f64], n: usize, q: usize, k: usize) {
    for col in k..q - 1 {
        for row in 0..=(col + 1).min(q - 1) {
            r[row + col * n] = r[row + (col + 1) * n];
        }
    }
    for row in 0..q {
        r[row + (q - 1) * n] = 0.0;
    }
    for i in k..q - 1 {
        let a = r[i + i * n];
        let bb = r[i + 1 + i * n];
        if bb == 0.0 {
            continue;
        }
        if a == 0.0 {
            for col in i..q - 1 {
                r.swap(i + col * n, i + 1 + col * n);
            }
            swap_columns(j, n, i);
        } else {
            let h = a.hypot(bb).copysign(a);
            let gc = a / h;
            let gs = bb / h;
            for col in i..q - 1 {
                let (p0, p1) = (r[i + col * n], r[i + 1 + col * n]);
                r[i + col * n] = gc * p0 + gs * p1;
                r[i + 1 + col * n] = gs * p0 - gc * p1;
            }
            rotate_columns(j, n, i, gc, gs);
        }
        r[i + 1 + i * n] = 0.0;
    }
}
