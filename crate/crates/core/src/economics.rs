//! Tariffs, energy costs, the community surplus and its smooth surrogate,
//! repartition weights and the individual-rationality gate.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{lift_net_power, CouplingConstraints, TimeGrid};

/// Buying and selling prices per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    pub p_buy: Vec<f64>,
    pub p_sell: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TariffRow {
    buy: f64,
    sell: f64,
}

impl Tariff {
    pub fn new(p_buy: Vec<f64>, p_sell: Vec<f64>) -> Result<Self> {
        let t = Tariff { p_buy, p_sell };
        t.validate(t.p_buy.len())?;
        Ok(t)
    }

    pub fn flat(steps: usize, p_buy: f64, p_sell: f64) -> Result<Self> {
        Self::new(vec![p_buy; steps], vec![p_sell; steps])
    }

    pub fn len(&self) -> usize {
        self.p_buy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_buy.is_empty()
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        check_len("tariff buy prices", steps, self.p_buy.len())?;
        check_len("tariff sell prices", steps, self.p_sell.len())?;
        for (b, s) in self.p_buy.iter().zip(&self.p_sell) {
            if !(*s >= 0.0 && b >= s) || !b.is_finite() {
                return Err(Error::invalid("tariff", "need p_buy >= p_sell >= 0 at every step"));
            }
        }
        Ok(())
    }

    /// Multiply every price by `factor` (e.g. to convert to per-unit power).
    pub fn scaled(&self, factor: f64) -> Self {
        Tariff {
            p_buy: self.p_buy.iter().map(|p| p * factor).collect(),
            p_sell: self.p_sell.iter().map(|p| p * factor).collect(),
        }
    }

    /// Two-column CSV with header `buy,sell`, one row per step.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut buy = Vec::new();
        let mut sell = Vec::new();
        for row in rdr.deserialize() {
            let row: TariffRow = row?;
            buy.push(row.buy);
            sell.push(row.sell);
        }
        Self::new(buy, sell)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (&buy, &sell) in self.p_buy.iter().zip(&self.p_sell) {
            w.serialize(TariffRow { buy, sell })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Piecewise-linear cost of net power `z`: buy above zero, sell below.
pub fn energy_cost(z: &[f64], tariff: &Tariff, dt: f64) -> Result<Vec<f64>> {
    check_len("energy cost input", tariff.len(), z.len())?;
    Ok(z.iter()
        .enumerate()
        .map(|(t, &v)| dt * v * if v >= 0.0 { tariff.p_buy[t] } else { tariff.p_sell[t] })
        .collect())
}

/// `e_t = c(sum_i z_i,t) - sum_i c(z_i,t)` for per-agent net power profiles.
/// Nonpositive whenever `p_buy >= p_sell`.
pub fn community_surplus(agent_net: &[Vec<f64>], tariff: &Tariff, dt: f64) -> Result<Vec<f64>> {
    let t_len = tariff.len();
    let mut agg = vec![0.0; t_len];
    let mut individual = vec![0.0; t_len];
    for z in agent_net {
        for (t, c) in energy_cost(z, tariff, dt)?.into_iter().enumerate() {
            individual[t] += c;
            agg[t] += z[t];
        }
    }
    let pooled = energy_cost(&agg, tariff, dt)?;
    Ok(pooled.iter().zip(&individual).map(|(p, i)| p - i).collect())
}

/// Marginal price of the smoothed aggregate cost:
/// `(p_b - p_s) (tanh(k z) + 1) / 2 + p_s`.
pub fn smooth_cost_gradient(z_agg: &[f64], tariff: &Tariff, k: f64) -> Result<Vec<f64>> {
    check_len("surrogate input", tariff.len(), z_agg.len())?;
    Ok(z_agg
        .iter()
        .enumerate()
        .map(|(t, &z)| smooth_price(z, tariff.p_buy[t], tariff.p_sell[t], k))
        .collect())
}

#[inline]
pub(crate) fn smooth_price(z: f64, p_b: f64, p_s: f64, k: f64) -> f64 {
    (p_b - p_s) * ((k * z).tanh() + 1.0) / 2.0 + p_s
}

/// Derivative of [`smooth_price`] in `z`.
#[inline]
pub(crate) fn smooth_price_slope(z: f64, p_b: f64, p_s: f64, k: f64) -> f64 {
    let th = (k * z).tanh();
    (p_b - p_s) * k * (1.0 - th * th) / 2.0
}

/// `ln cosh(u)` without overflow.
#[inline]
pub(crate) fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Antiderivative of [`smooth_price`] vanishing at zero.
#[inline]
pub(crate) fn smooth_antiderivative(z: f64, p_b: f64, p_s: f64, k: f64) -> f64 {
    p_s * z + (p_b - p_s) * 0.5 * (z + ln_cosh(k * z) / k)
}

/// Per-step smoothed aggregate cost (without the `dt` factor).
pub fn smooth_cost(z_agg: &[f64], tariff: &Tariff, k: f64) -> Result<Vec<f64>> {
    check_len("surrogate input", tariff.len(), z_agg.len())?;
    Ok(z_agg
        .iter()
        .enumerate()
        .map(|(t, &z)| smooth_antiderivative(z, tariff.p_buy[t], tariff.p_sell[t], k))
        .collect())
}

/// Past absolute net power of every agent, one row per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepartitionHistory {
    pub window: Vec<Vec<f64>>,
}

impl RepartitionHistory {
    pub fn new(window: Vec<Vec<f64>>) -> Result<Self> {
        let h = RepartitionHistory { window };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.window.first() else {
            return Err(Error::invalid("repartition history", "no agents"));
        };
        if first.is_empty() {
            return Err(Error::invalid(
                "repartition history",
                "window must hold at least one step",
            ));
        }
        for row in &self.window {
            check_len("repartition window", first.len(), row.len())?;
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(
                    "repartition history",
                    "entries must be finite and nonnegative",
                ));
            }
        }
        Ok(())
    }
}

/// Share of the community surplus carried by each agent: its fraction of the
/// total absolute power exchanged over the window.
pub fn compute_alpha(history: &RepartitionHistory) -> Result<Vec<f64>> {
    history.validate()?;
    let sums: Vec<f64> = history.window.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedRepartition);
    }
    Ok(sums.into_iter().map(|s| s / total).collect())
}

/// [`compute_alpha`], falling back to the uniform split on an all-zero window.
pub fn compute_alpha_or_uniform(history: &RepartitionHistory) -> Result<Vec<f64>> {
    match compute_alpha(history) {
        Err(Error::UndefinedRepartition) => {
            let n = history.window.len();
            Ok(vec![1.0 / n as f64; n])
        }
        other => other,
    }
}

/// Per-agent, per-step coupling charge `sum_r mu_r (A_i q_i)_r` restricted to
/// the columns of step `t`, where `q_i` lifts agent `i`'s total net power
/// (battery plus baseline) to the decision layout. Negative means a reward.
pub fn coupling_payments(
    coupling: &CouplingConstraints,
    grid: &TimeGrid,
    mu: &DVector<f64>,
    agent_net: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let t_len = grid.steps;
    let w = 2 * t_len;
    check_len("coupling multipliers", coupling.rows(), mu.len())?;
    let mut pay = vec![vec![0.0; t_len]; agent_net.len()];
    if coupling.rows() == 0 {
        return Ok(pay);
    }
    // column weights mu' A
    let price = coupling.a_mat.tr_mul(mu);
    check_len("coupling columns", agent_net.len() * w, price.len())?;
    for (i, z) in agent_net.iter().enumerate() {
        check_len("agent net power", t_len, z.len())?;
        let q = lift_net_power(z);
        for t in 0..t_len {
            let c = i * w + 2 * t;
            pay[i][t] = price[c] * q[2 * t] + price[c + 1] * q[2 * t + 1];
        }
    }
    Ok(pay)
}

/// Slack absorbing rounding in the pooled-minus-individual surplus.
pub const GATE_TOL: f64 = 1e-12;

/// `mask_t` is true iff `alpha_i e_t + payment_i,t <= 0` (up to
/// [`GATE_TOL`]) for every agent; a false entry freezes the coupling
/// multipliers of step `t`.
pub fn ir_gate(alpha: &[f64], surplus: &[f64], payments: &[Vec<f64>]) -> Result<Vec<bool>> {
    check_len("gate payments", alpha.len(), payments.len())?;
    let t_len = surplus.len();
    let mut mask = vec![true; t_len];
    for (a, pay) in alpha.iter().zip(payments) {
        check_len("gate payment row", t_len, pay.len())?;
        for t in 0..t_len {
            if a * surplus[t] + pay[t] > GATE_TOL {
                mask[t] = false;
            }
        }
    }
    Ok(mask)
}
