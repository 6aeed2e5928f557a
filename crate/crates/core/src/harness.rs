//! Synthetic scenario generation, batch experiments and report export.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    centralized_reference, ir_report, p_best, quantile, run, standalone_costs, AgentIr, AggregateCost, Algorithm,
    ConvergenceTrace, RunOptions, StopReason, StoppingRule, TraceRecord,
};
use crate::economics::{compute_alpha_or_uniform, RepartitionHistory, Tariff};
use crate::error::{Error, Result};
use crate::game::{sigma, KktResidual, Market, Profile};
use crate::model::{BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid};

/// Parameters of the synthetic household generator. Energies in kWh,
/// powers in kW, prices in currency per kWh, times in hours of the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfileSpec {
    /// Daily consumption drawn uniformly from this range.
    pub daily_consumption: [f64; 2],
    /// PV peak power as a multiple of the mean consumption power.
    pub pv_multiplier: [f64; 2],
    /// Daylight window of the PV bell.
    pub daylight: [f64; 2],
    /// Standard deviation of the log of the multiplicative load noise.
    pub noise: f64,
    pub morning_peak: f64,
    pub evening_peak: f64,
    /// Battery capacity floor as a fraction of daily consumption.
    pub battery_floor: f64,
    /// Hours needed to fill the battery at rated power.
    pub battery_hours: f64,
    pub efficiency: f64,
    pub self_discharge: f64,
    /// Buying price per hour of day: off-peak, shoulder, evening peak.
    pub buy_prices: [f64; 3],
    pub sell_price: f64,
    /// Coupling corridor on the per-unit community power.
    pub corridor: f64,
    /// Peak aggregate baseline in per-unit; above `corridor` the batteries
    /// must shave it.
    pub fill: f64,
    pub k_steepness: f64,
    /// Wear added on top of the monotonicity floor (per-unit).
    pub wear_base: f64,
    /// Add linearized voltage-band rows.
    pub voltage_rows: bool,
}

impl Default for SyntheticProfileSpec {
    fn default() -> Self {
        SyntheticProfileSpec {
            daily_consumption: [6.0, 16.0],
            pv_multiplier: [2.0, 10.0],
            daylight: [6.0, 18.0],
            noise: 0.15,
            morning_peak: 7.5,
            evening_peak: 19.5,
            battery_floor: 0.1,
            battery_hours: 2.0,
            efficiency: 0.95,
            self_discharge: 0.999,
            buy_prices: [0.18, 0.24, 0.30],
            sell_price: 0.08,
            corridor: 1.1,
            fill: 1.0,
            k_steepness: 10.0,
            wear_base: 0.05,
            voltage_rows: false,
        }
    }
}

impl SyntheticProfileSpec {
    /// Tight-corridor variant: the aggregate baseline overshoots the corridor.
    pub fn stress() -> Self {
        SyntheticProfileSpec {
            fill: 1.6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.daily_consumption) {
            return Err(Error::invalid(
                "profile spec",
                "consumption range must be positive and ordered",
            ));
        }
        if !ordered(self.pv_multiplier) {
            return Err(Error::invalid(
                "profile spec",
                "PV multiplier range must be positive and ordered",
            ));
        }
        if !(self.daylight[0] < self.daylight[1]) {
            return Err(Error::invalid("profile spec", "daylight window must be ordered"));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::invalid("profile spec", "efficiency must lie in (0, 1]"));
        }
        if !(self.corridor > 0.0 && self.fill > 0.0 && self.k_steepness > 0.0 && self.wear_base >= 0.0) {
            return Err(Error::invalid(
                "profile spec",
                "corridor, fill, steepness and wear must be positive",
            ));
        }
        if !(self.sell_price >= 0.0 && self.buy_prices.iter().all(|&p| p >= self.sell_price && p > 0.0)) {
            return Err(Error::invalid("profile spec", "need buy prices >= sell price >= 0"));
        }
        Ok(())
    }
}

/// Which solvers a batch runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pfb,
    Admm,
    Central,
}

impl Method {
    pub fn algorithm(&self) -> Option<Algorithm> {
        match self {
            Method::Pfb => Some(Algorithm::Pfb),
            Method::Admm => Some(Algorithm::Admm),
            Method::Central => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pfb" => Ok(Method::Pfb),
            "admm" => Ok(Method::Admm),
            "central" | "centralized" => Ok(Method::Central),
            other => Err(Error::invalid("method", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_sims: usize,
    pub n_agents: usize,
    pub grid: TimeGrid,
    pub rho: f64,
    pub iters: usize,
    pub algorithms: Vec<Method>,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub profile: SyntheticProfileSpec,
    pub ir_gate: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_sims: 50,
            n_agents: 10,
            grid: TimeGrid::default(),
            rho: 0.1,
            iters: 200,
            algorithms: vec![Method::Pfb, Method::Admm, Method::Central],
            seed: 0,
            output: None,
            profile: SyntheticProfileSpec::default(),
            ir_gate: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sims == 0 || self.n_agents == 0 {
            return Err(Error::invalid(
                "experiment",
                "need at least one simulation and one agent",
            ));
        }
        if self.algorithms.is_empty() {
            return Err(Error::invalid("experiment", "no method selected"));
        }
        if !(self.rho > 0.0) {
            return Err(Error::invalid("experiment", "rho must be positive"));
        }
        self.grid.validate()?;
        self.profile.validate()
    }

    /// Seed of simulation `sim`.
    pub fn sim_seed(&self, sim: usize) -> u64 {
        self.seed.wrapping_add(sim as u64)
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            rho: self.rho,
            beta: self.rho,
            stopping: StoppingRule {
                max_iter: self.iters,
                stop_early: false,
                ..StoppingRule::default()
            },
            ir_gate: self.ir_gate,
            aggregate: AggregateCost::Smooth,
            punishment: true,
            kkt_every: 0,
            qp_tol: 1e-10,
        }
    }
}

fn hour_of(t: usize, grid: &TimeGrid) -> f64 {
    (t as f64 + 0.5) * grid.dt
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    // wrap around midnight
    let d = (h - center + 36.0).rem_euclid(24.0) - 12.0;
    (-0.5 * (d / width).powi(2)).exp()
}

fn load_shape(spec: &SyntheticProfileSpec, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps)
        .map(|t| {
            let h = hour_of(t, grid);
            0.35 + 0.6 * bump(h, spec.morning_peak, 1.5) + bump(h, spec.evening_peak, 2.0)
        })
        .collect()
}

fn pv_shape(spec: &SyntheticProfileSpec, grid: &TimeGrid) -> Vec<f64> {
    let [rise, set] = spec.daylight;
    (0..grid.steps)
        .map(|t| {
            let h = hour_of(t, grid);
            if h > rise && h < set {
                (PI * (h - rise) / (set - rise)).sin()
            } else {
                0.0
            }
        })
        .collect()
}

/// Load and PV of one household over one day (kW).
struct Household {
    load: Vec<f64>,
    pv: Vec<f64>,
    daily: f64,
}

fn draw_day(spec: &SyntheticProfileSpec, grid: &TimeGrid, rng: &mut ChaCha8Rng, daily: f64, pv_peak: f64) -> Household {
    let noise = LogNormal::new(0.0, spec.noise.max(1e-12)).expect("valid lognormal");
    let shape = load_shape(spec, grid);
    let total: f64 = shape.iter().sum::<f64>() * grid.dt;
    let load: Vec<f64> = shape.iter().map(|s| s * daily / total * noise.sample(rng)).collect();
    let clear = rng.gen_range(0.7..=1.0);
    let pv = pv_shape(spec, grid).into_iter().map(|s| s * pv_peak * clear).collect();
    Household { load, pv, daily }
}

fn draw_household(spec: &SyntheticProfileSpec, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> (Household, Household) {
    let [lo, hi] = spec.daily_consumption;
    let daily = rng.gen_range(lo..=hi);
    let [mlo, mhi] = spec.pv_multiplier;
    let mult = rng.gen_range(mlo..=mhi);
    let pv_peak = mult * daily / 24.0;
    let today = draw_day(spec, grid, rng, daily, pv_peak);
    let yesterday = draw_day(spec, grid, rng, daily, pv_peak);
    (today, yesterday)
}

/// Build one synthetic scenario. Powers are per-unit of the community peak
/// baseline (scaled by `fill`), prices per-unit of the highest buying price.
pub fn generate_scenario(spec: &SyntheticProfileSpec, n_agents: usize, grid: &TimeGrid, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    grid.validate()?;
    if n_agents == 0 {
        return Err(Error::invalid("generator", "need at least one agent"));
    }
    let mut houses = Vec::with_capacity(n_agents);
    let mut history = Vec::with_capacity(n_agents);
    let mut attempt = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while houses.len() < n_agents {
        let (today, yesterday) = draw_household(spec, grid, &mut rng);
        let consumption: f64 = today.load.iter().sum::<f64>() * grid.dt;
        if !(consumption > 1e-9) || !consumption.is_finite() {
            attempt += 1;
            log::warn!("degenerate household draw (zero consumption), resampling with sub-seed {attempt}");
            rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(attempt);
            continue;
        }
        history.push(
            yesterday
                .load
                .iter()
                .zip(&yesterday.pv)
                .map(|(l, p)| (l - p).abs())
                .collect::<Vec<f64>>(),
        );
        houses.push(today);
    }

    let t_len = grid.steps;
    let net: Vec<Vec<f64>> = houses
        .iter()
        .map(|h| h.load.iter().zip(&h.pv).map(|(l, p)| l - p).collect())
        .collect();
    let peak = (0..t_len)
        .map(|t| net.iter().map(|z| z[t]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::invalid("generator", "community baseline vanishes"));
    }
    let p_base = peak / spec.fill;

    let buy: Vec<f64> = (0..t_len)
        .map(|t| {
            let h = hour_of(t, grid);
            if (17.0..22.0).contains(&h) {
                spec.buy_prices[2]
            } else if (7.0..17.0).contains(&h) {
                spec.buy_prices[1]
            } else {
                spec.buy_prices[0]
            }
        })
        .collect();
    let price_base = buy.iter().cloned().fold(0.0, f64::max);
    let tariff = Tariff::new(
        buy.iter().map(|p| p / price_base).collect(),
        vec![spec.sell_price / price_base; t_len],
    )?;

    let alpha = compute_alpha_or_uniform(&RepartitionHistory::new(history)?)?;
    // Wear keeps the game map strongly monotone for unequal shares: the
    // community term can contribute down to -kappa (|alpha| sqrt(N) - 1)|dx|^2.
    let kappa = spec.k_steepness
        * (0..t_len)
            .map(|t| tariff.p_buy[t] - tariff.p_sell[t])
            .fold(0.0, f64::max)
        / 2.0;
    let a_norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
    let excess = (a_norm * (n_agents as f64).sqrt() - 1.0).max(0.0);
    let wear = spec.wear_base + 1.25 * kappa * excess;

    let mut prosumers = Vec::with_capacity(n_agents);
    for (i, h) in houses.iter().enumerate() {
        let surplus: f64 = h.pv.iter().zip(&h.load).map(|(p, l)| (p - l).max(0.0)).sum::<f64>() * grid.dt;
        let cap_kwh = surplus.max(spec.battery_floor * h.daily);
        let p_max = cap_kwh / spec.battery_hours;
        let mut bat = BatteryParams::from_efficiency(
            cap_kwh / p_base,
            p_max / p_base,
            spec.efficiency,
            spec.efficiency,
            grid.dt,
        );
        bat.a_state = spec.self_discharge;
        bat.wear = wear;
        let baseline = net[i].iter().map(|z| z / p_base).collect();
        prosumers.push(ProsumerConfig::new(bat, baseline, alpha[i]));
    }
    let baselines: Vec<Vec<f64>> = prosumers.iter().map(|p| p.baseline.clone()).collect();
    let mut coupling = CouplingConstraints::aggregate_corridor(&baselines, grid, -spec.corridor, spec.corridor);
    if spec.voltage_rows {
        let mut vr = ChaCha8Rng::seed_from_u64(seed);
        vr.set_stream(u64::MAX);
        let sens: Vec<f64> = (0..n_agents).map(|_| vr.gen_range(0.02..0.06)).collect();
        let v0 = (0..t_len)
            .map(|t| baselines.iter().zip(&sens).map(|(b, s)| s * b[t]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let volt = CouplingConstraints::voltage_band(&baselines, grid, &sens, 1.1 * v0.max(1e-3));
        coupling = coupling.stack(&volt)?;
    }
    Scenario::new(*grid, prosumers, tariff, coupling, spec.k_steepness)
}

/// Result of one algorithm on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoSummary {
    pub algorithm: Algorithm,
    pub final_sigma: f64,
    pub iterations: usize,
    pub converged_at: Option<usize>,
    pub stop: StopReason,
    pub kkt: Option<KktResidual>,
    /// Shifted p_best gap at the final iteration.
    pub gap_shifted: Option<f64>,
    pub gap_unshifted: Option<f64>,
    /// Largest `min(P_in, P_out)` over agents and steps, relative to the
    /// largest power bound.
    pub overlap: f64,
    pub ir: Vec<AgentIr>,
    #[serde(skip)]
    pub trace: ConvergenceTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub sim: usize,
    pub seed: u64,
    pub central_sigma: Option<f64>,
    pub algorithms: Vec<AlgoSummary>,
    /// `|x_pfb - x_admm|_inf` over battery decisions, when both ran.
    pub agreement_inf: Option<f64>,
    pub error: Option<String>,
}

/// Quantile band of the normalized σ trajectories at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub algorithm: Algorithm,
    pub iter: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub config: ExperimentConfig,
    pub sims: Vec<SimSummary>,
    pub bands: Vec<Band>,
    pub failures: Vec<String>,
}

impl BatchReport {
    pub fn summary(&self, sim: usize, algorithm: Algorithm) -> Option<&AlgoSummary> {
        self.sims
            .iter()
            .find(|s| s.sim == sim)
            .and_then(|s| s.algorithms.iter().find(|a| a.algorithm == algorithm))
    }
}

fn battery_overlap(market: &Market, x: &Profile) -> f64 {
    let t_len = market.steps();
    let mut worst = 0.0f64;
    let mut bound = 0.0f64;
    for (xi, set) in x.iter().zip(&market.sets) {
        bound = bound.max(set.x_max.max());
        for t in 0..t_len {
            worst = worst.max(xi[2 * t].min(xi[2 * t + 1]));
        }
    }
    if bound > 0.0 {
        worst / bound
    } else {
        worst
    }
}

fn battery_diff(a: &Profile, b: &Profile, t_len: usize) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u.rows(0, 2 * t_len) - v.rows(0, 2 * t_len)).amax())
        .fold(0.0, f64::max)
}

/// Run every requested method on one scenario.
pub fn run_scenario(config: &ExperimentConfig, sim: usize, scenario: Scenario) -> Result<SimSummary> {
    let market = Market::new(scenario);
    let opts = config.run_options();
    let central = if config.algorithms.contains(&Method::Central) {
        Some(centralized_reference(&market, 1e-9)?)
    } else {
        None
    };
    let standalone = standalone_costs(&market, 1e-10)?;
    let mut outcomes = Vec::new();
    for m in &config.algorithms {
        if let Some(algo) = m.algorithm() {
            outcomes.push(run(algo, &market, &opts)?);
        }
    }
    let finals: Vec<f64> = outcomes
        .iter()
        .map(|o| sigma(&market, &o.state.x))
        .collect::<Result<_>>()?;
    let gaps = match (&central, finals.is_empty()) {
        (Some(c), false) => Some(p_best(&finals, c.sigma)?),
        _ => None,
    };
    let mut algorithms = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let mu = o.state.coupling_multiplier();
        algorithms.push(AlgoSummary {
            algorithm: o.algorithm,
            final_sigma: finals[k],
            iterations: o.trace.len(),
            converged_at: o.converged_at,
            stop: o.stop.clone(),
            kkt: o.kkt,
            gap_shifted: gaps.as_ref().map(|g| g.shifted[k]),
            gap_unshifted: gaps.as_ref().map(|g| g.unshifted[k]),
            overlap: battery_overlap(&market, &o.state.x),
            ir: ir_report(&market, &o.state.x, &mu, &standalone)?,
            trace: o.trace.clone(),
        });
    }
    let find = |a: Algorithm| outcomes.iter().find(|o| o.algorithm == a);
    let agreement_inf = match (find(Algorithm::Pfb), find(Algorithm::Admm)) {
        (Some(a), Some(b)) => Some(battery_diff(&a.state.x, &b.state.x, market.steps())),
        _ => None,
    };
    Ok(SimSummary {
        sim,
        seed: config.sim_seed(sim),
        central_sigma: central.map(|c| c.sigma),
        algorithms,
        agreement_inf,
        error: None,
    })
}

/// Generate and solve every simulation of the batch. Failing scenarios are
/// recorded and skipped.
pub fn run_experiment(config: &ExperimentConfig) -> Result<BatchReport> {
    config.validate()?;
    let sims: Vec<SimSummary> = (0..config.n_sims)
        .into_par_iter()
        .map(|sim| {
            let seed = config.sim_seed(sim);
            let res = generate_scenario(&config.profile, config.n_agents, &config.grid, seed)
                .and_then(|s| run_scenario(config, sim, s));
            res.unwrap_or_else(|e| SimSummary {
                sim,
                seed,
                central_sigma: None,
                algorithms: Vec::new(),
                agreement_inf: None,
                error: Some(e.to_string()),
            })
        })
        .collect();
    let failures = sims
        .iter()
        .filter_map(|s| s.error.as_ref().map(|e| format!("sim {}: {e}", s.sim)))
        .collect();
    let bands = sigma_bands(&sims);
    Ok(BatchReport {
        config: config.clone(),
        sims,
        bands,
        failures,
    })
}

/// Normalized σ trajectory `1 + (σ_k - p_best) / (p_best - σ_central)` of
/// every (sim, algorithm), reduced to quartile bands per iteration.
pub fn sigma_bands(sims: &[SimSummary]) -> Vec<Band> {
    let mut bands = Vec::new();
    for algo in Algorithm::ALL {
        let mut curves: Vec<Vec<f64>> = Vec::new();
        for s in sims {
            let (Some(c), Some(a)) = (s.central_sigma, s.algorithms.iter().find(|a| a.algorithm == algo)) else {
                continue;
            };
            let best = s.algorithms.iter().map(|a| a.final_sigma).fold(f64::INFINITY, f64::min);
            let denom = (best - c).max(1e-9 * (1.0 + c.abs()));
            curves.push(a.trace.records.iter().map(|r| 1.0 + (r.sigma - best) / denom).collect());
        }
        let len = curves.iter().map(|c| c.len()).max().unwrap_or(0);
        for k in 0..len {
            let col: Vec<f64> = curves.iter().filter_map(|c| c.get(k).copied()).collect();
            if let (Some(q25), Some(median), Some(q75)) =
                (quantile(&col, 0.25), quantile(&col, 0.5), quantile(&col, 0.75))
            {
                bands.push(Band {
                    algorithm: algo,
                    iter: k + 1,
                    q25,
                    median,
                    q75,
                });
            }
        }
    }
    bands
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// CSV, one row per (sim, algorithm, iteration).
    Tabular,
    /// JSON summary plus one trace CSV per (sim, algorithm) next to it.
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TabularRow {
    sim: usize,
    algorithm: Algorithm,
    iter: usize,
    sigma: f64,
    stat_res: Option<f64>,
    primal_res: f64,
    comp_res: f64,
    dx_inf: f64,
    gate_frozen_steps: usize,
    wall_ms: f64,
}

fn trace_file_name(sim: usize, algorithm: Algorithm) -> String {
    format!("trace_sim{sim:03}_{algorithm}.csv")
}

/// Write the report. Structured output writes `path` as JSON and the traces
/// into `<path stem>_traces/`; tabular output writes a single CSV.
pub fn export_report(report: &BatchReport, path: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Tabular => {
            let mut w = csv::Writer::from_path(path)?;
            let mut wrote = false;
            for s in &report.sims {
                for a in &s.algorithms {
                    for r in &a.trace.records {
                        w.serialize(TabularRow {
                            sim: s.sim,
                            algorithm: a.algorithm,
                            iter: r.iter,
                            sigma: r.sigma,
                            stat_res: r.stat_res,
                            primal_res: r.primal_res,
                            comp_res: r.comp_res,
                            dx_inf: r.dx_inf,
                            gate_frozen_steps: r.gate_frozen_steps,
                            wall_ms: r.wall_ms,
                        })?;
                        wrote = true;
                    }
                }
            }
            if !wrote {
                w.write_record([
                    "sim",
                    "algorithm",
                    "iter",
                    "sigma",
                    "stat_res",
                    "primal_res",
                    "comp_res",
                    "dx_inf",
                    "gate_frozen_steps",
                    "wall_ms",
                ])?;
            }
            w.flush()?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Structured => {
            let dir = traces_dir(path);
            fs::create_dir_all(&dir)?;
            let mut written = vec![path.to_path_buf()];
            for s in &report.sims {
                for a in &s.algorithms {
                    let p = dir.join(trace_file_name(s.sim, a.algorithm));
                    a.trace.write_csv(fs::File::create(&p)?)?;
                    written.push(p);
                }
            }
            fs::write(path, serde_json::to_string_pretty(report)?)?;
            Ok(written)
        }
    }
}

fn traces_dir(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_traces"))
}

/// Read a report written by [`export_report`]. The tabular form carries only
/// traces, so the summary fields of the returned report are left empty.
pub fn import_report(path: &Path, format: ReportFormat) -> Result<BatchReport> {
    match format {
        ReportFormat::Structured => {
            let mut report: BatchReport = serde_json::from_str(&fs::read_to_string(path)?)?;
            let dir = traces_dir(path);
            for s in &mut report.sims {
                for a in &mut s.algorithms {
                    let p = dir.join(trace_file_name(s.sim, a.algorithm));
                    if p.exists() {
                        a.trace = ConvergenceTrace::read_csv(fs::File::open(&p)?)?;
                    }
                }
            }
            Ok(report)
        }
        ReportFormat::Tabular => {
            let mut rdr = csv::Reader::from_path(path)?;
            let mut sims: Vec<SimSummary> = Vec::new();
            for row in rdr.deserialize() {
                let row: TabularRow = row?;
                if sims.last().map_or(true, |s| s.sim != row.sim) {
                    sims.push(SimSummary {
                        sim: row.sim,
                        seed: 0,
                        central_sigma: None,
                        algorithms: Vec::new(),
                        agreement_inf: None,
                        error: None,
                    });
                }
                let sim = sims.last_mut().expect("pushed above");
                if sim.algorithms.last().map_or(true, |a| a.algorithm != row.algorithm) {
                    sim.algorithms.push(AlgoSummary {
                        algorithm: row.algorithm,
                        final_sigma: f64::NAN,
                        iterations: 0,
                        converged_at: None,
                        stop: StopReason::MaxIter,
                        kkt: None,
                        gap_shifted: None,
                        gap_unshifted: None,
                        overlap: f64::NAN,
                        ir: Vec::new(),
                        trace: ConvergenceTrace::default(),
                    });
                }
                let a = sim.algorithms.last_mut().expect("pushed above");
                a.trace.records.push(TraceRecord {
                    iter: row.iter,
                    sigma: row.sigma,
                    stat_res: row.stat_res,
                    primal_res: row.primal_res,
                    comp_res: row.comp_res,
                    dx_inf: row.dx_inf,
                    gate_frozen_steps: row.gate_frozen_steps,
                    wall_ms: row.wall_ms,
                });
                a.iterations = a.trace.len();
                a.final_sigma = row.sigma;
            }
            Ok(BatchReport {
                config: ExperimentConfig::default(),
                sims,
                bands: Vec::new(),
                failures: Vec::new(),
            })
        }
    }
}
