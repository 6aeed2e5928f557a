//! Equilibrium-seeking loops (preconditioned forward-backward and the
//! weighted exchange ADMM), the centralized welfare reference, stopping
//! rules, traces and the cost accounting used for individual rationality.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::economics::{community_surplus, coupling_payments, energy_cost, ir_gate, smooth_price, smooth_price_slope};
use crate::error::{check_len, Error, Result};
use crate::game::{game_map, kkt_residual, sigma, KktResidual, Market, Profile};
use crate::model::{agent_net_power, assemble_local_constraints, difference_matrix, idle_decision};
use crate::qp::{
    active_rows, solve_local_pfb, solve_local_prox, solve_qp, solve_standalone, LeastSquaresTerm, QpProblem,
    QpSolution, QpStatus, QuadTerm, DEFAULT_MAX_ITER,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pfb,
    Admm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::Pfb, Algorithm::Admm];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pfb => "pfb",
            Algorithm::Admm => "admm",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pfb" => Ok(Algorithm::Pfb),
            "admm" => Ok(Algorithm::Admm),
            other => Err(Error::invalid("algorithm", format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Cost model of the ADMM aggregate update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateCost {
    /// tanh-smoothed tariff, the same community term the game map uses.
    Smooth,
    /// Piecewise-linear tariff, closed-form soft threshold.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub max_iter: usize,
    /// Relative change of the social cost between consecutive iterates.
    pub rel_sigma_tol: f64,
    /// Optional bound on `|x^{k+1} - x^k|_inf`, required together with the
    /// relative-change test.
    #[serde(default)]
    pub step_tol: Option<f64>,
    /// Stop at the first iterate meeting the tolerances; otherwise run all
    /// `max_iter` iterations and only record when they were first met.
    #[serde(default = "default_true")]
    pub stop_early: bool,
}

fn default_true() -> bool {
    true
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule {
            max_iter: 200,
            rel_sigma_tol: 1e-5,
            step_tol: None,
            stop_early: true,
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_sigma_tol > 0.0) {
            return Err(Error::invalid("stopping rule", "rel_sigma_tol must be positive"));
        }
        if let Some(s) = self.step_tol {
            if !(s > 0.0) {
                return Err(Error::invalid("stopping rule", "step_tol must be positive"));
            }
        }
        Ok(())
    }

    fn met(&self, rel: f64, dx: f64) -> bool {
        rel <= self.rel_sigma_tol && self.step_tol.map_or(true, |s| dx <= s)
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_change(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// ADMM penalty parameter and pFB primal step.
    pub rho: f64,
    /// pFB dual step.
    pub beta: f64,
    pub stopping: StoppingRule,
    pub ir_gate: bool,
    pub aggregate: AggregateCost,
    /// Tie-breaking cost on discharge at steps the ADMM reference asks to charge.
    pub punishment: bool,
    /// Evaluate the (costly) stationarity residual every this many
    /// iterations; 0 means only after the last one.
    pub kkt_every: usize,
    pub qp_tol: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            rho: 0.1,
            beta: 0.1,
            stopping: StoppingRule::default(),
            ir_gate: true,
            aggregate: AggregateCost::Smooth,
            punishment: true,
            kkt_every: 1,
            qp_tol: 1e-10,
        }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.beta > 0.0) {
            return Err(Error::invalid("run options", "step sizes must be positive"));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::invalid("run options", "qp tolerance must be positive"));
        }
        self.stopping.validate()
    }
}

/// Primal and dual iterates of either loop.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub x: Profile,
    /// Scaled exchange dual (ADMM).
    pub lambda_ex: DVector<f64>,
    /// Aggregate battery power auxiliary (ADMM).
    pub y_agg: DVector<f64>,
    /// Coupling dual; raw multiplier for pFB, scaled for ADMM.
    pub lambda_a: DVector<f64>,
    /// Coupling auxiliary (ADMM).
    pub y_a: DVector<f64>,
    pub iter: usize,
    /// Factor turning `lambda_a` into the coupling multiplier.
    pub multiplier_scale: f64,
    /// Binding rows of each agent's last local solve, used as warm start.
    pub active: Vec<Vec<usize>>,
}

impl IterateState {
    /// Idle batteries with tight cost envelopes, all duals zero.
    pub fn initial(market: &Market, algorithm: Algorithm, rho: f64) -> Self {
        let s = &market.scenario;
        let x = s
            .prosumers
            .iter()
            .map(|p| idle_decision(p, &s.tariff, &s.grid))
            .collect();
        let t_len = market.steps();
        let m = market.n_rows();
        let multiplier_scale = match algorithm {
            Algorithm::Pfb => 1.0,
            Algorithm::Admm => 1.0 / (rho * market.n_agents() as f64),
        };
        IterateState {
            x,
            lambda_ex: DVector::zeros(t_len),
            y_agg: DVector::zeros(t_len),
            lambda_a: DVector::zeros(m),
            y_a: DVector::zeros(m),
            iter: 0,
            multiplier_scale,
            active: vec![Vec::new(); market.n_agents()],
        }
    }

    /// Multiplier of the coupling rows in the equilibrium KKT system.
    pub fn coupling_multiplier(&self) -> DVector<f64> {
        &self.lambda_a * self.multiplier_scale
    }
}

/// Outcome of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub dx_inf: f64,
    pub gated_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub sigma: f64,
    /// Absent on iterations where stationarity was not evaluated.
    pub stat_res: Option<f64>,
    pub primal_res: f64,
    pub comp_res: f64,
    pub dx_inf: f64,
    pub gate_frozen_steps: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// σ after `iter` iterations (1-based), if recorded.
    pub fn sigma_at(&self, iter: usize) -> Option<f64> {
        self.records.iter().find(|r| r.iter == iter).map(|r| r.sigma)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRecord>, _>>()?;
        Ok(ConvergenceTrace { records })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub algorithm: Algorithm,
    pub state: IterateState,
    pub trace: ConvergenceTrace,
    pub stop: StopReason,
    /// First iteration meeting the stopping tolerances.
    pub converged_at: Option<usize>,
    /// Residuals at the returned state.
    pub kkt: Option<KktResidual>,
}

fn agent_nets(market: &Market, x: &Profile) -> Vec<Vec<f64>> {
    let s = &market.scenario;
    x.iter()
        .zip(&s.prosumers)
        .map(|(xi, p)| agent_net_power(xi.as_slice(), &p.baseline, &s.grid))
        .collect()
}

/// Per-step gate mask at decisions `x` and coupling multiplier `mu`.
pub fn gate_mask(market: &Market, x: &Profile, mu: &DVector<f64>) -> Result<Vec<bool>> {
    let s = &market.scenario;
    let nets = agent_nets(market, x);
    let e = community_surplus(&nets, &s.tariff, s.grid.dt)?;
    let pay = coupling_payments(&s.coupling, &s.grid, mu, &nets)?;
    ir_gate(&s.alphas(), &e, &pay)
}

/// Rows touching at least one gated step.
fn frozen_rows(market: &Market, mask: &[bool]) -> Vec<bool> {
    market
        .row_steps
        .iter()
        .map(|steps| steps.iter().any(|&t| !mask[t]))
        .collect()
}

fn gate(market: &Market, enabled: bool, x: &Profile, mu: &DVector<f64>) -> Result<(Vec<bool>, usize)> {
    if !enabled || market.n_rows() == 0 {
        return Ok((vec![false; market.n_rows()], 0));
    }
    let mask = gate_mask(market, x, mu)?;
    let count = mask.iter().filter(|m| !**m).count();
    Ok((frozen_rows(market, &mask), count))
}

fn profile_step(a: &Profile, b: &Profile) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).amax()).fold(0.0, f64::max)
}

fn accept(agent: usize, sol: QpSolution) -> Result<(DVector<f64>, Vec<usize>)> {
    match sol.status {
        QpStatus::Optimal => Ok((sol.x_opt, active_rows(&sol.dual))),
        status => Err(Error::Subproblem { agent, status }),
    }
}

/// One preconditioned forward-backward iteration.
pub fn pfb_step(
    market: &Market,
    state: &mut IterateState,
    alpha_step: f64,
    beta_step: f64,
    ir_gate_on: bool,
    qp_tol: f64,
) -> Result<StepInfo> {
    if !(alpha_step > 0.0 && beta_step > 0.0) {
        return Err(Error::invalid("pfb step", "step sizes must be positive"));
    }
    let f = game_map(market, &state.x)?;
    let ag = market.coupling_gradient(&state.lambda_a);
    let solved: Vec<_> = (0..market.n_agents())
        .into_par_iter()
        .map(|i| {
            let grad = &f[i] + &ag[i];
            let hint = &state.active[i];
            accept(
                i,
                solve_local_pfb(&market.sets[i], &grad, &state.x[i], alpha_step, hint, qp_tol)?,
            )
        })
        .collect::<Result<_>>()?;
    let (x_new, active): (Profile, Vec<_>) = solved.into_iter().unzip();
    state.active = active;

    let mut gated_steps = 0;
    if market.n_rows() > 0 {
        let ax_old = market.coupling_value(&state.x);
        let ax_new = market.coupling_value(&x_new);
        let b = &market.scenario.coupling.b_vec;
        let candidate = DVector::from_fn(b.len(), |r, _| {
            (state.lambda_a[r] + beta_step * (2.0 * ax_new[r] - ax_old[r] - b[r])).max(0.0)
        });
        let (frozen, count) = gate(market, ir_gate_on, &x_new, &candidate)?;
        gated_steps = count;
        for r in 0..b.len() {
            if !frozen[r] {
                state.lambda_a[r] = candidate[r];
            }
        }
    }
    let dx_inf = profile_step(&x_new, &state.x);
    state.x = x_new;
    state.iter += 1;
    Ok(StepInfo { dx_inf, gated_steps })
}

/// Minimizer of `dt * cost(s) + (s - w)^2 / (2 c)`, `cost` the smoothed or
/// exact tariff of one step.
fn aggregate_prox(w: f64, c: f64, dt: f64, p_b: f64, p_s: f64, k: f64, model: AggregateCost) -> f64 {
    match model {
        AggregateCost::Exact => {
            let hi = w - c * dt * p_b;
            let lo = w - c * dt * p_s;
            if hi > 0.0 {
                hi
            } else if lo < 0.0 {
                lo
            } else {
                0.0
            }
        }
        AggregateCost::Smooth => {
            // phi(s) = dt g(s) + (s - w) / c is strictly increasing and
            // changes sign on [w - c dt p_b, w - c dt p_s]
            let phi = |s: f64| dt * smooth_price(s, p_b, p_s, k) + (s - w) / c;
            let mut lo = w - c * dt * p_b;
            let mut hi = w - c * dt * p_s;
            if hi - lo <= 0.0 {
                return lo;
            }
            let mut s = 0.5 * (lo + hi);
            for _ in 0..200 {
                let v = phi(s);
                if v > 0.0 {
                    hi = s;
                } else {
                    lo = s;
                }
                let slope = dt * smooth_price_slope(s, p_b, p_s, k) + 1.0 / c;
                let mut next = s - v / slope;
                if !(next > lo && next < hi) {
                    next = 0.5 * (lo + hi);
                }
                if (next - s).abs() <= 1e-15 * (1.0 + s.abs()) || hi - lo <= 1e-15 * (1.0 + s.abs()) {
                    return next;
                }
                s = next;
            }
            s
        }
    }
}

/// One iteration of the weighted exchange ADMM with coupling rows.
pub fn admm_step(market: &Market, state: &mut IterateState, rho: f64, opts: &RunOptions) -> Result<StepInfo> {
    if !(rho > 0.0) {
        return Err(Error::invalid("admm step", "rho must be positive"));
    }
    let s = &market.scenario;
    let grid = &s.grid;
    let t_len = grid.steps;
    let n = market.n_agents() as f64;
    let m = market.n_rows();
    let d = difference_matrix(grid);

    let sx = battery_sum(&state.x, t_len);
    let exch = (&sx - &state.y_agg + &state.lambda_ex) / n;
    let coup = if m > 0 {
        (market.coupling_value(&state.x) - &state.y_a + &state.lambda_a) / n
    } else {
        DVector::zeros(0)
    };
    let tie = 1e-3 * grid.dt * s.tariff.p_buy.iter().sum::<f64>() / t_len as f64;

    let solved: Vec<_> = (0..market.n_agents())
        .into_par_iter()
        .map(|i| {
            let xi = &state.x[i];
            let bat = xi.rows(0, 2 * t_len);
            let alpha = s.prosumers[i].alpha;
            let mut terms = Vec::with_capacity(2);
            let r = &d * &bat - &exch;
            if alpha > 0.0 {
                terms.push(LeastSquaresTerm {
                    mat: d.clone(),
                    target: r.clone(),
                    weight: alpha / rho,
                });
            }
            if m > 0 {
                let blk = &market.blocks[i];
                terms.push(LeastSquaresTerm {
                    mat: blk.clone(),
                    target: blk * &bat - &coup,
                    weight: 1.0 / rho,
                });
            }
            let mut extra = DVector::zeros(3 * t_len);
            if opts.punishment {
                for t in 0..t_len {
                    if r[t] > 0.0 {
                        extra[2 * t + 1] = tie;
                    }
                }
            }
            let wear_dt = s.prosumers[i].battery.wear * grid.dt;
            accept(
                i,
                solve_local_prox(
                    &market.sets[i],
                    wear_dt,
                    &extra,
                    &terms,
                    Some(xi),
                    &state.active[i],
                    opts.qp_tol,
                )?,
            )
        })
        .collect::<Result<_>>()?;
    let (x_new, active): (Profile, Vec<_>) = solved.into_iter().unzip();
    state.active = active;

    let sx_new = battery_sum(&x_new, t_len);
    let agg = s.aggregate_baseline();
    let c = rho * n;
    for t in 0..t_len {
        let w = sx_new[t] + state.lambda_ex[t] + agg[t];
        let z = aggregate_prox(
            w,
            c,
            grid.dt,
            s.tariff.p_buy[t],
            s.tariff.p_sell[t],
            s.k_steepness,
            opts.aggregate,
        );
        state.y_agg[t] = z - agg[t];
    }
    state.lambda_ex += &sx_new - &state.y_agg;

    let mut gated_steps = 0;
    if m > 0 {
        let ax = market.coupling_value(&x_new);
        let b = &s.coupling.b_vec;
        let y_cand = DVector::from_fn(m, |r, _| (ax[r] + state.lambda_a[r]).min(b[r]));
        let lam_cand = DVector::from_fn(m, |r, _| state.lambda_a[r] + ax[r] - y_cand[r]);
        let mu = &lam_cand * state.multiplier_scale;
        let (frozen, count) = gate(market, opts.ir_gate, &x_new, &mu)?;
        gated_steps = count;
        for r in 0..m {
            state.y_a[r] = y_cand[r];
            if !frozen[r] {
                state.lambda_a[r] = lam_cand[r];
            }
        }
    }
    let dx_inf = profile_step(&x_new, &state.x);
    state.x = x_new;
    state.iter += 1;
    Ok(StepInfo { dx_inf, gated_steps })
}

fn battery_sum(x: &Profile, t_len: usize) -> DVector<f64> {
    let mut s = DVector::zeros(t_len);
    for xi in x {
        for t in 0..t_len {
            s[t] += xi[2 * t] - xi[2 * t + 1];
        }
    }
    s
}

fn coupling_residuals(market: &Market, x: &Profile, mu: &DVector<f64>) -> (f64, f64) {
    let ax = market.coupling_value(x);
    let b = &market.scenario.coupling.b_vec;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for r in 0..b.len() {
        primal = primal.max(ax[r] - b[r]);
        comp = comp.max((mu[r] * (b[r] - ax[r])).abs());
    }
    (primal, comp)
}

/// Iterate until the stopping rule fires. Step failures end the run with
/// [`StopReason::Failed`] and keep the partial trace.
pub fn run(algorithm: Algorithm, market: &Market, opts: &RunOptions) -> Result<RunOutcome> {
    opts.validate()?;
    let mut state = IterateState::initial(market, algorithm, opts.rho);
    let mut trace = ConvergenceTrace::default();
    let start = Instant::now();
    let mut prev_sigma = sigma(market, &state.x)?;
    let mut stop = StopReason::MaxIter;
    let mut converged_at = None;
    let mut last_kkt = None;

    for k in 1..=opts.stopping.max_iter {
        let step = match algorithm {
            Algorithm::Pfb => pfb_step(market, &mut state, opts.rho, opts.beta, opts.ir_gate, opts.qp_tol),
            Algorithm::Admm => admm_step(market, &mut state, opts.rho, opts),
        };
        let info = match step {
            Ok(info) => info,
            Err(e) => {
                stop = StopReason::Failed(e.to_string());
                break;
            }
        };
        let sig = sigma(market, &state.x)?;
        let rel = relative_change(sig, prev_sigma);
        prev_sigma = sig;
        let mu = state.coupling_multiplier();
        let (primal, comp) = coupling_residuals(market, &state.x, &mu);
        let met = opts.stopping.met(rel, info.dx_inf);
        let last = k == opts.stopping.max_iter || (met && opts.stopping.stop_early);
        let stat = if last || (opts.kkt_every > 0 && k % opts.kkt_every == 0) {
            let r = kkt_residual(market, &state.x, &mu)?;
            last_kkt = Some(r);
            Some(r.stationarity)
        } else {
            None
        };
        trace.records.push(TraceRecord {
            iter: k,
            sigma: sig,
            stat_res: stat,
            primal_res: primal,
            comp_res: comp,
            dx_inf: info.dx_inf,
            gate_frozen_steps: info.gated_steps,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if met && converged_at.is_none() {
            converged_at = Some(k);
        }
        if met && opts.stopping.stop_early {
            stop = StopReason::Converged;
            break;
        }
    }
    if stop == StopReason::MaxIter && converged_at.is_some() {
        stop = StopReason::Converged;
    }
    let kkt = match (&stop, last_kkt) {
        (StopReason::Failed(_), _) | (_, None) => kkt_residual(market, &state.x, &state.coupling_multiplier()).ok(),
        (_, Some(r)) => Some(r),
    };
    Ok(RunOutcome {
        algorithm,
        state,
        trace,
        stop,
        converged_at,
        kkt,
    })
}

/// Welfare optimum of the whole community.
#[derive(Debug, Clone)]
pub struct Centralized {
    pub x: Profile,
    pub sigma: f64,
    /// Multipliers of the coupling rows.
    pub mu: DVector<f64>,
}

/// Minimize the social cost over all agent sets and the coupling rows as a
/// single QP, with the pooled tariff in epigraph form.
pub fn centralized_reference(market: &Market, tol: f64) -> Result<Centralized> {
    let s = &market.scenario;
    let grid = &s.grid;
    let t_len = grid.steps;
    let w = 2 * t_len;
    let n = market.n_agents();
    let nx = n * w;
    let dim = nx + t_len;
    let m_loc = 3 * w;
    let m_cpl = market.n_rows();
    let rows = n * m_loc + 2 * t_len + m_cpl;

    let mut a = DMatrix::zeros(rows, dim);
    let mut b = DVector::zeros(rows);
    let mut q = DVector::zeros(dim);
    for (i, p) in s.prosumers.iter().enumerate() {
        let (a_c, b_c) = assemble_local_constraints(p, grid);
        a.view_mut((i * m_loc, i * w), (m_loc, w)).copy_from(&a_c);
        b.rows_mut(i * m_loc, m_loc).copy_from(&b_c);
        q.rows_mut(i * w, w).fill(p.battery.wear * grid.dt);
    }
    let agg = s.aggregate_baseline();
    let base = n * m_loc;
    for t in 0..t_len {
        for (blk, price) in [(0, s.tariff.p_buy[t]), (1, s.tariff.p_sell[t])] {
            let r = base + blk * t_len + t;
            let p = grid.dt * price;
            for i in 0..n {
                a[(r, i * w + 2 * t)] = p;
                a[(r, i * w + 2 * t + 1)] = -p;
            }
            a[(r, nx + t)] = -1.0;
            b[r] = -p * agg[t];
        }
    }
    if m_cpl > 0 {
        let r0 = base + 2 * t_len;
        a.view_mut((r0, 0), (m_cpl, nx)).copy_from(&s.coupling.a_mat);
        b.rows_mut(r0, m_cpl)
            .copy_from(&DVector::from_column_slice(&s.coupling.b_vec));
    }
    let mut lin = DVector::zeros(dim);
    lin.rows_mut(nx, t_len).fill(1.0);
    let problem = QpProblem {
        quad: QuadTerm::Diagonal(q),
        lin,
        a_ineq: a,
        b_ineq: b,
    };
    let sol = solve_qp(&problem, tol, 50 * DEFAULT_MAX_ITER)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => return Err(Error::InfeasibleCoupling),
        st => return Err(Error::Qp(st)),
    }
    let x: Profile = (0..n)
        .map(|i| {
            let p = &s.prosumers[i];
            let bat = sol.x_opt.rows(i * w, w);
            let net = agent_net_power(bat.as_slice(), &p.baseline, grid);
            let cost = energy_cost(&net, &s.tariff, grid.dt).expect("lengths match");
            let mut xi = DVector::zeros(3 * t_len);
            xi.rows_mut(0, w).copy_from(&bat);
            xi.rows_mut(w, t_len).copy_from(&DVector::from_vec(cost));
            xi
        })
        .collect();
    let sigma = sigma(market, &x)?;
    let mu = if m_cpl > 0 {
        sol.dual.rows(base + 2 * t_len, m_cpl).into_owned()
    } else {
        DVector::zeros(0)
    };
    Ok(Centralized { x, sigma, mu })
}

/// Normalized optimality gaps of several final social costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PBestGaps {
    /// Smallest of the supplied values.
    pub best: f64,
    /// Value subtracted before normalizing (the centralized optimum).
    pub shift: f64,
    /// `(sigma - shift) / (best - shift)`, guarded when the denominator vanishes.
    pub shifted: Vec<f64>,
    /// `sigma / best`.
    pub unshifted: Vec<f64>,
}

pub fn p_best(sigmas: &[f64], shift: f64) -> Result<PBestGaps> {
    if sigmas.is_empty() {
        return Err(Error::invalid("p_best", "need at least one result"));
    }
    let best = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = 1e-9 * (1.0 + shift.abs());
    let denom = (best - shift).max(floor);
    Ok(PBestGaps {
        best,
        shift,
        shifted: sigmas.iter().map(|s| 1.0 + (s - best) / denom).collect(),
        unshifted: sigmas.iter().map(|s| s / best).collect(),
    })
}

/// Linear-interpolation quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Cost breakdown of one agent under the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentIr {
    pub energy_cost: f64,
    pub wear: f64,
    pub surplus_share: f64,
    pub payments: f64,
    pub mechanism_cost: f64,
    pub standalone_cost: f64,
}

impl AgentIr {
    /// Mechanism cost minus standalone cost; positive means worse off.
    pub fn excess(&self) -> f64 {
        self.mechanism_cost - self.standalone_cost
    }
}

/// Each agent's optimal cost when trading alone with the grid.
pub fn standalone_costs(market: &Market, tol: f64) -> Result<Vec<f64>> {
    let s = &market.scenario;
    (0..market.n_agents())
        .into_par_iter()
        .map(|i| {
            let wear_dt = s.prosumers[i].battery.wear * s.grid.dt;
            let sol = solve_standalone(&market.sets[i], wear_dt, tol)?;
            let (x, _) = accept(i, sol)?;
            let w = 2 * market.steps();
            let net = agent_net_power(x.as_slice(), &s.prosumers[i].baseline, &s.grid);
            let c: f64 = energy_cost(&net, &s.tariff, s.grid.dt)?.iter().sum();
            Ok(c + 0.5 * wear_dt * x.rows(0, w).norm_squared())
        })
        .collect()
}

/// Per-agent mechanism cost `c_i + wear + alpha_i sum_t e_t + payments` at
/// `(x, mu)`, next to the standalone cost.
pub fn ir_report(market: &Market, x: &Profile, mu: &DVector<f64>, standalone: &[f64]) -> Result<Vec<AgentIr>> {
    market.check_profile(x)?;
    check_len("standalone costs", market.n_agents(), standalone.len())?;
    let s = &market.scenario;
    let nets = agent_nets(market, x);
    let e: f64 = community_surplus(&nets, &s.tariff, s.grid.dt)?.iter().sum();
    let pay = coupling_payments(&s.coupling, &s.grid, mu, &nets)?;
    let wear = crate::game::wear_costs(market, x);
    (0..market.n_agents())
        .map(|i| {
            let energy: f64 = energy_cost(&nets[i], &s.tariff, s.grid.dt)?.iter().sum();
            let share = s.prosumers[i].alpha * e;
            let payments: f64 = pay[i].iter().sum();
            Ok(AgentIr {
                energy_cost: energy,
                wear: wear[i],
                surplus_share: share,
                payments,
                mechanism_cost: energy + wear[i] + share + payments,
                standalone_cost: standalone[i],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economics::Tariff;
    use crate::model::{BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid};
    use approx::assert_relative_eq;

    fn toy(n: usize, coupling: bool) -> Market {
        let g = TimeGrid::new(4, 1.0).unwrap();
        let mut bat = BatteryParams::from_efficiency(1.0, 0.5, 0.95, 0.95, 1.0);
        bat.wear = 0.05;
        let pros: Vec<ProsumerConfig> = (0..n)
            .map(|i| {
                let sgn = if i % 2 == 0 { 1.0 } else { -1.0 };
                ProsumerConfig::new(
                    bat,
                    vec![0.4 * sgn, -0.3 * sgn, 0.2, 0.5 - 0.1 * i as f64],
                    1.0 + i as f64,
                )
            })
            .collect();
        let t = Tariff::new(vec![0.3, 0.2, 0.25, 0.3], vec![0.05, 0.05, 0.1, 0.05]).unwrap();
        let bases: Vec<Vec<f64>> = pros.iter().map(|p| p.baseline.clone()).collect();
        let cc = if coupling {
            CouplingConstraints::aggregate_corridor(&bases, &g, -0.3, 0.3)
        } else {
            CouplingConstraints::none(n, &g)
        };
        Market::new(Scenario::new(g, pros, t, cc, 10.0).unwrap())
    }

    fn opts() -> RunOptions {
        RunOptions {
            stopping: StoppingRule {
                max_iter: 3000,
                rel_sigma_tol: 1e-12,
                step_tol: Some(1e-10),
                stop_early: true,
            },
            ir_gate: false,
            kkt_every: 0,
            ..RunOptions::default()
        }
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let m = toy(2, false);
        let o = RunOptions {
            stopping: StoppingRule {
                max_iter: 0,
                ..StoppingRule::default()
            },
            ..RunOptions::default()
        };
        let out = run(Algorithm::Pfb, &m, &o).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.state.x, IterateState::initial(&m, Algorithm::Pfb, 0.1).x);
    }

    #[test]
    fn single_agent_reaches_total_cost_minimizer() {
        let m = toy(1, false);
        for algo in Algorithm::ALL {
            let out = run(algo, &m, &opts()).unwrap();
            assert_eq!(out.stop, StopReason::Converged, "{algo}");
            let r = out.kkt.unwrap();
            assert!(r.max() < 1e-6, "{algo}: {r:?}");
        }
    }

    #[test]
    fn both_loops_agree_with_binding_coupling() {
        let m = toy(3, true);
        let a = run(Algorithm::Pfb, &m, &opts()).unwrap();
        let b = run(Algorithm::Admm, &m, &opts()).unwrap();
        assert_eq!(a.stop, StopReason::Converged);
        assert_eq!(b.stop, StopReason::Converged);
        let diff = profile_step(&a.state.x, &b.state.x);
        assert!(diff < 1e-6, "{diff}");
        assert!(a.kkt.unwrap().max() < 1e-6, "{:?}", a.kkt);
        assert!(b.kkt.unwrap().max() < 1e-6, "{:?}", b.kkt);
        assert!(a.state.lambda_a.max() > 0.0, "corridor should bind");
        let mu_a = a.state.coupling_multiplier();
        let mu_b = b.state.coupling_multiplier();
        assert!((mu_a - mu_b).amax() < 1e-5);
    }

    #[test]
    fn centralized_lower_bounds_equilibria() {
        let m = toy(3, true);
        let c = centralized_reference(&m, 1e-10).unwrap();
        for algo in Algorithm::ALL {
            let out = run(algo, &m, &opts()).unwrap();
            assert!(c.sigma <= sigma(&m, &out.state.x).unwrap() + 1e-9);
        }
    }

    #[test]
    fn centralized_single_agent_is_standalone() {
        let m = toy(1, false);
        let c = centralized_reference(&m, 1e-10).unwrap();
        let s = standalone_costs(&m, 1e-10).unwrap();
        assert_relative_eq!(c.sigma, s[0], epsilon = 1e-8);
    }

    #[test]
    fn exact_aggregate_prox_is_soft_threshold() {
        // dt = 1, c = 1, p_b = 0.2, p_s = 0.05
        assert_relative_eq!(
            aggregate_prox(1.0, 1.0, 1.0, 0.2, 0.05, 10.0, AggregateCost::Exact),
            0.8
        );
        assert_relative_eq!(
            aggregate_prox(-1.0, 1.0, 1.0, 0.2, 0.05, 10.0, AggregateCost::Exact),
            -1.05
        );
        assert_eq!(
            aggregate_prox(0.1, 1.0, 1.0, 0.2, 0.05, 10.0, AggregateCost::Exact),
            0.0
        );
        for w in [-2.0, -0.01, 0.0, 0.03, 1.5] {
            let s = aggregate_prox(w, 0.7, 0.5, 0.2, 0.05, 10.0, AggregateCost::Smooth);
            let resid = 0.5 * smooth_price(s, 0.2, 0.05, 10.0) + (s - w) / 0.7;
            assert!(resid.abs() < 1e-13, "{w}: {resid}");
        }
    }

    #[test]
    fn p_best_examples() {
        let g = p_best(&[2.0, 2.0], 1.0).unwrap();
        assert_eq!(g.shifted, vec![1.0, 1.0]);
        let g = p_best(&[2.0, 3.0], 1.0).unwrap();
        assert_eq!(g.shifted, vec![1.0, 2.0]);
        assert_eq!(g.unshifted, vec![1.0, 1.5]);
        assert!(p_best(&[], 0.0).is_err());
    }

    #[test]
    fn quantile_matches_sorted_oracle() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(3.0));
        assert_eq!(quantile(&v, 0.25), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.5), Some(1.5));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn trace_csv_roundtrip() {
        let m = toy(2, false);
        let o = RunOptions {
            stopping: StoppingRule {
                max_iter: 5,
                ..StoppingRule::default()
            },
            kkt_every: 2,
            ..RunOptions::default()
        };
        let out = run(Algorithm::Admm, &m, &o).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iter,sigma,stat_res,primal_res,comp_res,dx_inf,gate_frozen_steps,wall_ms"));
        let back = ConvergenceTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), out.trace.len());
        for (a, b) in back.records.iter().zip(&out.trace.records) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(a.stat_res, b.stat_res);
        }
    }

    #[test]
    fn gate_freezes_rows_bitwise() {
        let m = toy(3, true);
        let mut st = IterateState::initial(&m, Algorithm::Pfb, 0.1);
        for _ in 0..200 {
            let before = st.lambda_a.clone();
            let info = pfb_step(&m, &mut st, 0.1, 0.1, true, 1e-10).unwrap();
            assert!(st.lambda_a.min() >= 0.0);
            if info.gated_steps > 0 {
                let mask = gate_mask(&m, &st.x, &before).unwrap();
                for (r, steps) in m.row_steps.iter().enumerate() {
                    if steps.iter().any(|&t| !mask[t]) {
                        assert_eq!(st.lambda_a[r].to_bits(), before[r].to_bits());
                    }
                }
            }
        }
    }
}
