//! Game-level quantities: the pseudogradient, the social cost, a
//! monotonicity probe and KKT residuals of the variational equilibrium.
//!
//! Decisions are handled per agent in epigraph form (`x~_i`, length `3T`).
//! Agent `i` minimizes
//! `v_i = sum_t y_i,t + wear_i dt / 2 |x_i|^2 + alpha_i dt sum_t C(Z_t)`
//! where `Z` is the community net power and `C` the smoothed aggregate cost.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::economics::{energy_cost, smooth_antiderivative, smooth_price};
use crate::error::{check_len, Error, Result};
use crate::model::{agent_sets, AgentSet, Scenario};
use crate::qp::{solve_qp, QpProblem, QpStatus, QuadTerm, DEFAULT_MAX_ITER};

/// Per-agent epigraph decisions.
pub type Profile = Vec<DVector<f64>>;

/// A scenario together with its per-agent constraint data.
#[derive(Debug, Clone)]
pub struct Market {
    pub scenario: Scenario,
    pub sets: Vec<AgentSet>,
    /// Columns of the coupling matrix owned by each agent (`m x 2T`).
    pub blocks: Vec<DMatrix<f64>>,
    /// Steps touched by each coupling row.
    pub row_steps: Vec<Vec<usize>>,
}

impl Market {
    pub fn new(scenario: Scenario) -> Self {
        let sets = agent_sets(&scenario);
        let blocks = (0..scenario.n_agents())
            .map(|i| scenario.coupling.agent_block(i, &scenario.grid))
            .collect();
        let row_steps = scenario.coupling.row_steps(&scenario.grid);
        Market {
            scenario,
            sets,
            blocks,
            row_steps,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.n_agents()
    }

    pub fn steps(&self) -> usize {
        self.scenario.grid.steps
    }

    pub fn n_rows(&self) -> usize {
        self.scenario.coupling.rows()
    }

    pub fn check_profile(&self, x: &Profile) -> Result<()> {
        check_len("profile agents", self.n_agents(), x.len())?;
        for xi in x {
            check_len("agent decision", 3 * self.steps(), xi.len())?;
        }
        Ok(())
    }

    /// Community net power `Z_t = sum_i (P_in - P_out + P_m)_i,t`.
    pub fn community_power(&self, x: &Profile) -> Vec<f64> {
        let t_len = self.steps();
        let mut z = self.scenario.aggregate_baseline();
        for xi in x {
            for t in 0..t_len {
                z[t] += xi[2 * t] - xi[2 * t + 1];
            }
        }
        z
    }

    /// Stacked battery decisions (length `2NT`).
    pub fn stack_battery(&self, x: &Profile) -> DVector<f64> {
        let w = 2 * self.steps();
        let mut s = DVector::zeros(self.n_agents() * w);
        for (i, xi) in x.iter().enumerate() {
            s.rows_mut(i * w, w).copy_from(&xi.rows(0, w));
        }
        s
    }

    /// `A x` over the battery parts.
    pub fn coupling_value(&self, x: &Profile) -> DVector<f64> {
        let w = 2 * self.steps();
        let mut v = DVector::zeros(self.n_rows());
        for (blk, xi) in self.blocks.iter().zip(x) {
            v.gemv(1.0, blk, &xi.rows(0, w), 1.0);
        }
        v
    }

    /// `A_i' mu` for every agent, padded with zeros on the epigraph part.
    pub fn coupling_gradient(&self, mu: &DVector<f64>) -> Profile {
        let t_len = self.steps();
        self.blocks
            .iter()
            .map(|blk| {
                let mut g = DVector::zeros(3 * t_len);
                if blk.nrows() > 0 {
                    g.rows_mut(0, 2 * t_len).copy_from(&blk.tr_mul(mu));
                }
                g
            })
            .collect()
    }

    fn wear_dt(&self, i: usize) -> f64 {
        self.scenario.prosumers[i].battery.wear * self.scenario.grid.dt
    }
}

/// Smoothed marginal price of the community power, times `dt`.
fn community_price(market: &Market, x: &Profile) -> Vec<f64> {
    let s = &market.scenario;
    market
        .community_power(x)
        .iter()
        .enumerate()
        .map(|(t, &z)| s.grid.dt * smooth_price(z, s.tariff.p_buy[t], s.tariff.p_sell[t], s.k_steepness))
        .collect()
}

/// Pseudogradient: block `i` is the gradient of `v_i` in `x~_i`.
pub fn game_map(market: &Market, x: &Profile) -> Result<Profile> {
    market.check_profile(x)?;
    let t_len = market.steps();
    let price = community_price(market, x);
    Ok(x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let alpha = market.scenario.prosumers[i].alpha;
            let wear = market.wear_dt(i);
            let mut f = DVector::zeros(3 * t_len);
            for t in 0..t_len {
                f[2 * t] = wear * xi[2 * t] + alpha * price[t];
                f[2 * t + 1] = wear * xi[2 * t + 1] - alpha * price[t];
                f[2 * t_len + t] = 1.0;
            }
            f
        })
        .collect())
}

/// `v_i(x_i, x_-i)` with the smoothed community term.
pub fn agent_value(market: &Market, x: &Profile, i: usize) -> Result<f64> {
    market.check_profile(x)?;
    let s = &market.scenario;
    let t_len = market.steps();
    let xi = &x[i];
    let own: f64 = xi.rows(2 * t_len, t_len).sum();
    let wear = 0.5 * market.wear_dt(i) * xi.rows(0, 2 * t_len).norm_squared();
    let community: f64 = market
        .community_power(x)
        .iter()
        .enumerate()
        .map(|(t, &z)| smooth_antiderivative(z, s.tariff.p_buy[t], s.tariff.p_sell[t], s.k_steepness))
        .sum();
    Ok(own + wear + s.prosumers[i].alpha * s.grid.dt * community)
}

/// Battery wear of every agent.
pub fn wear_costs(market: &Market, x: &Profile) -> Vec<f64> {
    let w = 2 * market.steps();
    x.iter()
        .enumerate()
        .map(|(i, xi)| 0.5 * market.wear_dt(i) * xi.rows(0, w).norm_squared())
        .collect()
}

/// Social cost `sum_i c_i(x_i) + e(x) + wear`, with the exact piecewise-linear
/// tariff; equals the pooled cost of the community power.
pub fn sigma(market: &Market, x: &Profile) -> Result<f64> {
    market.check_profile(x)?;
    let s = &market.scenario;
    let z = market.community_power(x);
    let pooled: f64 = energy_cost(&z, &s.tariff, s.grid.dt)?.iter().sum();
    Ok(pooled + wear_costs(market, x).iter().sum::<f64>())
}

/// Minimum of `<x - y, F(x) - F(y)>` over random pairs drawn from the box
/// hull of the agent sets. A value below `-1e-8` flags a non-monotone map.
pub fn monotonicity_probe(market: &Market, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("monotonicity probe", "need at least one sample"));
    }
    let t_len = market.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Profile {
        market
            .sets
            .iter()
            .map(|set| {
                DVector::from_fn(3 * t_len, |k, _| {
                    if k < 2 * t_len {
                        rng.gen::<f64>() * set.x_max[k]
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
            })
            .collect()
    };
    let mut min = f64::INFINITY;
    for _ in 0..n_samples {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let fa = game_map(market, &a)?;
        let fb = game_map(market, &b)?;
        let ip: f64 = (0..a.len()).map(|i| (&a[i] - &b[i]).dot(&(&fa[i] - &fb[i]))).sum();
        min = min.min(ip);
    }
    Ok(min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    pub dual_sign: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

/// Euclidean projection onto an agent set.
pub fn project_agent(set: &AgentSet, v: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = set.dim();
    let p = QpProblem {
        quad: QuadTerm::Diagonal(DVector::from_element(n, 1.0)),
        lin: -v,
        a_ineq: set.a.clone(),
        b_ineq: set.b.clone(),
    };
    let sol = solve_qp(&p, tol, DEFAULT_MAX_ITER)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.x_opt),
        s => Err(Error::Qp(s)),
    }
}

/// Residuals of the variational-equilibrium KKT system at `(x, mu)`, where
/// `mu` multiplies the coupling rows.
pub fn kkt_residual(market: &Market, x: &Profile, mu: &DVector<f64>) -> Result<KktResidual> {
    market.check_profile(x)?;
    check_len("coupling multipliers", market.n_rows(), mu.len())?;
    let f = game_map(market, x)?;
    let ag = market.coupling_gradient(mu);
    let stat: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let v = &x[i] - (&f[i] + &ag[i]);
            let p = project_agent(&market.sets[i], &v, 1e-12)?;
            Ok((&x[i] - p).amax())
        })
        .collect::<Result<_>>()?;
    let ax = market.coupling_value(x);
    let b = &market.scenario.coupling.b_vec;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for r in 0..b.len() {
        let slack = b[r] - ax[r];
        primal = primal.max(-slack);
        comp = comp.max((mu[r] * slack).abs());
    }
    let dual_sign = if mu.is_empty() { 0.0 } else { (-mu.min()).max(0.0) };
    Ok(KktResidual {
        stationarity: stat.into_iter().fold(0.0, f64::max),
        primal,
        complementarity: comp,
        dual_sign,
    })
}

/// Largest violation of the local constraints over all agents.
pub fn local_violation(market: &Market, x: &Profile) -> f64 {
    market
        .sets
        .iter()
        .zip(x)
        .map(|(set, xi)| (&set.a * xi - &set.b).max().max(0.0))
        .fold(0.0, f64::max)
}
