//! Prosumers, batteries and grid coupling, plus the constraint matrices that
//! describe each agent's feasible set.
//!
//! Decision layout, fixed crate-wide: agent `i` controls
//! `x_i = [P_in,1, P_out,1, ..., P_in,T, P_out,T]` (length `2T`) and, once
//! the tariff epigraph is attached, `x~_i = [x_i; y_i]` with `y_i` the
//! per-step energy cost envelope (length `T`). Stacked decisions are
//! agent-major. Powers are per-unit, positive net power means consumption.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::economics::Tariff;
use crate::error::{check_len, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub steps: usize,
    /// Step length in hours.
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, dt: f64) -> Result<Self> {
        let g = TimeGrid { steps, dt };
        g.validate()?;
        Ok(g)
    }

    /// `steps` equal slices of one day.
    pub fn daily(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("time grid", "T must be at least 1"));
        }
        Self::new(steps, 24.0 / steps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("time grid", "T must be at least 1"));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("time grid", "dt must be positive"));
        }
        Ok(())
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid { steps: 24, dt: 1.0 }
    }
}

/// Linear battery `s_{t+1} = a_state s_t + b_charge P_in,t - b_discharge P_out,t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryParams {
    pub a_state: f64,
    pub b_charge: f64,
    pub b_discharge: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub p_in_max: f64,
    pub p_out_max: f64,
    pub e0: f64,
    /// Quadratic wear cost: `wear / 2 * (P_in^2 + P_out^2) * dt` per step.
    #[serde(default)]
    pub wear: f64,
}

impl BatteryParams {
    /// Battery with charge/discharge efficiencies folded into the input
    /// coefficients, starting half full.
    pub fn from_efficiency(capacity: f64, p_max: f64, eta_charge: f64, eta_discharge: f64, dt: f64) -> Self {
        BatteryParams {
            a_state: 1.0,
            b_charge: eta_charge * dt,
            b_discharge: dt / eta_discharge,
            e_min: 0.0,
            e_max: capacity,
            p_in_max: p_max,
            p_out_max: p_max,
            e0: 0.5 * capacity,
            wear: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("battery", r.to_string()));
        if !(self.e_min >= 0.0 && self.e_min < self.e_max) {
            return bad("need 0 <= e_min < e_max");
        }
        if !(self.e0 >= self.e_min && self.e0 <= self.e_max) {
            return bad("initial charge outside [e_min, e_max]");
        }
        if !(self.p_in_max > 0.0 && self.p_out_max > 0.0) {
            return bad("power bounds must be positive");
        }
        if !(self.a_state > 0.0 && self.a_state <= 1.0) {
            return bad("a_state must lie in (0, 1]");
        }
        if !(self.b_charge > 0.0 && self.b_discharge > 0.0) {
            return bad("input coefficients must be positive");
        }
        if !(self.wear >= 0.0) {
            return bad("wear must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerConfig {
    pub battery: BatteryParams,
    /// Uncontrollable net power per step (load minus generation).
    pub baseline: Vec<f64>,
    pub alpha: f64,
    /// Optional per-step `[p_in_max, p_out_max]` replacing the battery's
    /// constant bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_limits: Option<Vec<[f64; 2]>>,
}

impl ProsumerConfig {
    pub fn new(battery: BatteryParams, baseline: Vec<f64>, alpha: f64) -> Self {
        ProsumerConfig {
            battery,
            baseline,
            alpha,
            power_limits: None,
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        self.battery.validate()?;
        check_len("prosumer baseline", grid.steps, self.baseline.len())?;
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("prosumer", "alpha must be nonnegative"));
        }
        if let Some(lims) = &self.power_limits {
            check_len("prosumer power limits", grid.steps, lims.len())?;
            if lims.iter().flatten().any(|&p| !(p >= 0.0)) {
                return Err(Error::invalid("prosumer", "power limits must be nonnegative"));
            }
        }
        Ok(())
    }

    /// `[p_in_max, p_out_max]` at step `t`.
    pub fn power_bounds(&self, t: usize) -> [f64; 2] {
        match &self.power_limits {
            Some(l) => l[t],
            None => [self.battery.p_in_max, self.battery.p_out_max],
        }
    }
}

/// Shared affine constraints `a_mat x <= b_vec` over the stacked battery
/// decisions (`2NT` columns). Zero rows mean no coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingConstraints {
    #[serde(with = "nested_rows")]
    pub a_mat: DMatrix<f64>,
    pub b_vec: Vec<f64>,
}

impl CouplingConstraints {
    pub fn none(n_agents: usize, grid: &TimeGrid) -> Self {
        CouplingConstraints {
            a_mat: DMatrix::zeros(0, 2 * n_agents * grid.steps),
            b_vec: Vec::new(),
        }
    }

    /// Rows encoding `lower <= S x + sum_i P_m,i <= upper` at every step.
    pub fn aggregate_corridor(baselines: &[Vec<f64>], grid: &TimeGrid, lower: f64, upper: f64) -> Self {
        let n = baselines.len();
        let t_len = grid.steps;
        let s = summation_matrix(n, grid);
        let mut a = DMatrix::zeros(2 * t_len, 2 * n * t_len);
        let mut b = vec![0.0; 2 * t_len];
        for t in 0..t_len {
            let agg: f64 = baselines.iter().map(|p| p[t]).sum();
            a.row_mut(2 * t).copy_from(&s.row(t));
            b[2 * t] = upper - agg;
            a.row_mut(2 * t + 1).copy_from(&(-s.row(t)));
            b[2 * t + 1] = agg - lower;
        }
        CouplingConstraints { a_mat: a, b_vec: b }
    }

    /// Linearized voltage band rows: `v_t = sum_i sens_i * z_i,t` kept within
    /// `[-dev_max, dev_max]`, where `z_i,t` is agent `i`'s net power.
    pub fn voltage_band(baselines: &[Vec<f64>], grid: &TimeGrid, sensitivity: &[f64], dev_max: f64) -> Self {
        let n = baselines.len();
        let t_len = grid.steps;
        let mut a = DMatrix::zeros(2 * t_len, 2 * n * t_len);
        let mut b = vec![0.0; 2 * t_len];
        for t in 0..t_len {
            let mut v0 = 0.0;
            for i in 0..n {
                let c = i * 2 * t_len + 2 * t;
                a[(2 * t, c)] = sensitivity[i];
                a[(2 * t, c + 1)] = -sensitivity[i];
                a[(2 * t + 1, c)] = -sensitivity[i];
                a[(2 * t + 1, c + 1)] = sensitivity[i];
                v0 += sensitivity[i] * baselines[i][t];
            }
            b[2 * t] = dev_max - v0;
            b[2 * t + 1] = dev_max + v0;
        }
        CouplingConstraints { a_mat: a, b_vec: b }
    }

    /// Row-wise concatenation.
    pub fn stack(&self, other: &CouplingConstraints) -> Result<Self> {
        check_len("coupling columns", self.a_mat.ncols(), other.a_mat.ncols())?;
        let (m1, m2) = (self.a_mat.nrows(), other.a_mat.nrows());
        let mut a = DMatrix::zeros(m1 + m2, self.a_mat.ncols());
        a.rows_mut(0, m1).copy_from(&self.a_mat);
        a.rows_mut(m1, m2).copy_from(&other.a_mat);
        let mut b = self.b_vec.clone();
        b.extend_from_slice(&other.b_vec);
        Ok(CouplingConstraints { a_mat: a, b_vec: b })
    }

    pub fn rows(&self) -> usize {
        self.b_vec.len()
    }

    pub fn validate(&self, n_agents: usize, grid: &TimeGrid) -> Result<()> {
        check_len("coupling columns", 2 * n_agents * grid.steps, self.a_mat.ncols())?;
        check_len("coupling bounds", self.a_mat.nrows(), self.b_vec.len())?;
        if self.b_vec.iter().chain(self.a_mat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("coupling", "non-finite entry"));
        }
        Ok(())
    }

    /// Columns of agent `i` (an `m x 2T` block).
    pub fn agent_block(&self, i: usize, grid: &TimeGrid) -> DMatrix<f64> {
        let w = 2 * grid.steps;
        self.a_mat.columns(i * w, w).into_owned()
    }

    /// Time steps touched by each row.
    pub fn row_steps(&self, grid: &TimeGrid) -> Vec<Vec<usize>> {
        let t_len = grid.steps;
        (0..self.rows())
            .map(|r| {
                let mut steps: Vec<usize> = (0..self.a_mat.ncols())
                    .filter(|&c| self.a_mat[(r, c)] != 0.0)
                    .map(|c| (c % (2 * t_len)) / 2)
                    .collect();
                steps.sort_unstable();
                steps.dedup();
                steps
            })
            .collect()
    }
}

/// The full game instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioFile", into = "ScenarioFile")]
pub struct Scenario {
    pub grid: TimeGrid,
    pub prosumers: Vec<ProsumerConfig>,
    pub tariff: Tariff,
    pub coupling: CouplingConstraints,
    pub k_steepness: f64,
}

impl Scenario {
    /// Validates every component and rescales the repartition weights to sum
    /// to one. All-zero weights fall back to the uniform split; weights that
    /// already sum to one are kept bit for bit.
    pub fn new(
        grid: TimeGrid,
        mut prosumers: Vec<ProsumerConfig>,
        tariff: Tariff,
        coupling: CouplingConstraints,
        k_steepness: f64,
    ) -> Result<Self> {
        grid.validate()?;
        if prosumers.is_empty() {
            return Err(Error::invalid("scenario", "need at least one prosumer"));
        }
        for p in &prosumers {
            p.validate(&grid)?;
        }
        tariff.validate(grid.steps)?;
        coupling.validate(prosumers.len(), &grid)?;
        if !(k_steepness > 0.0) {
            return Err(Error::invalid("scenario", "steepness must be positive"));
        }
        let total: f64 = prosumers.iter().map(|p| p.alpha).sum();
        let n = prosumers.len() as f64;
        if (total - 1.0).abs() > 1e-12 {
            for p in &mut prosumers {
                p.alpha = if total > 0.0 { p.alpha / total } else { 1.0 / n };
            }
        }
        Ok(Scenario {
            grid,
            prosumers,
            tariff,
            coupling,
            k_steepness,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.prosumers.len()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.prosumers.iter().map(|p| p.alpha).collect()
    }

    pub fn baselines(&self) -> Vec<Vec<f64>> {
        self.prosumers.iter().map(|p| p.baseline.clone()).collect()
    }

    /// `sum_i P_m,i` per step.
    pub fn aggregate_baseline(&self) -> Vec<f64> {
        (0..self.grid.steps)
            .map(|t| self.prosumers.iter().map(|p| p.baseline[t]).sum())
            .collect()
    }

    /// Same scenario with different coupling rows.
    pub fn with_coupling(&self, coupling: CouplingConstraints) -> Result<Self> {
        coupling.validate(self.n_agents(), &self.grid)?;
        let mut s = self.clone();
        s.coupling = coupling;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(s)?;
        Scenario::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk form of a [`Scenario`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioFile {
    schema_version: u32,
    grid: TimeGrid,
    prosumers: Vec<ProsumerConfig>,
    tariff: Tariff,
    coupling: CouplingConstraints,
    k_steepness: f64,
}

impl TryFrom<ScenarioFile> for Scenario {
    type Error = Error;

    fn try_from(f: ScenarioFile) -> Result<Self> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                found: f.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Scenario::new(f.grid, f.prosumers, f.tariff, f.coupling, f.k_steepness)
    }
}

impl From<Scenario> for ScenarioFile {
    fn from(s: Scenario) -> Self {
        ScenarioFile {
            schema_version: SCHEMA_VERSION,
            grid: s.grid,
            prosumers: s.prosumers,
            tariff: s.tariff,
            coupling: s.coupling,
            k_steepness: s.k_steepness,
        }
    }
}

mod nested_rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Shaped {
        cols: usize,
        rows: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows = (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect();
        Shaped { cols: m.ncols(), rows }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let sh = Shaped::deserialize(d)?;
        if sh.rows.iter().any(|r| r.len() != sh.cols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = sh.rows.iter().flatten().cloned().collect();
        Ok(DMatrix::from_row_slice(sh.rows.len(), sh.cols, &flat))
    }
}

/// Batch form of the battery recursion: `s = lambda * e0 + gamma * x`, where
/// `s_t` is the state after step `t`.
pub fn build_batch_matrices(battery: &BatteryParams, grid: &TimeGrid) -> (DVector<f64>, DMatrix<f64>) {
    let t_len = grid.steps;
    let a = battery.a_state;
    let lambda = DVector::from_fn(t_len, |t, _| a.powi(t as i32 + 1));
    let mut gamma = DMatrix::zeros(t_len, 2 * t_len);
    for t in 0..t_len {
        for tau in 0..=t {
            let decay = a.powi((t - tau) as i32);
            gamma[(t, 2 * tau)] = decay * battery.b_charge;
            gamma[(t, 2 * tau + 1)] = -decay * battery.b_discharge;
        }
    }
    (lambda, gamma)
}

/// Power and energy box constraints as `a_c x <= b_c`, rows ordered
/// `[-I; I; -gamma; gamma]` (`6T x 2T`).
pub fn assemble_local_constraints(prosumer: &ProsumerConfig, grid: &TimeGrid) -> (DMatrix<f64>, DVector<f64>) {
    let t_len = grid.steps;
    let w = 2 * t_len;
    let bat = &prosumer.battery;
    let (lambda, gamma) = build_batch_matrices(bat, grid);
    let mut a = DMatrix::zeros(3 * w, w);
    let mut b = DVector::zeros(3 * w);
    for k in 0..w {
        a[(k, k)] = -1.0;
        a[(w + k, k)] = 1.0;
        let [p_in, p_out] = prosumer.power_bounds(k / 2);
        b[w + k] = if k % 2 == 0 { p_in } else { p_out };
    }
    for t in 0..t_len {
        let drift = lambda[t] * bat.e0;
        for c in 0..w {
            a[(2 * w + t, c)] = -gamma[(t, c)];
            a[(2 * w + t_len + t, c)] = gamma[(t, c)];
        }
        b[2 * w + t] = drift - bat.e_min;
        b[2 * w + t_len + t] = bat.e_max - drift;
    }
    (a, b)
}

/// Attach the tariff epigraph: `x~ = [x; y]` with `y_t >= dt p_b,t z_t` and
/// `y_t >= dt p_s,t z_t`, `z = D x + P_m`. Returns `(a~, b~, l)` where
/// `l' x~ = sum_t y_t`.
pub fn augment_epigraph(
    a_c: &DMatrix<f64>,
    b_c: &DVector<f64>,
    tariff: &Tariff,
    baseline: &[f64],
    grid: &TimeGrid,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let t_len = grid.steps;
    let w = 2 * t_len;
    let mc = a_c.nrows();
    let mut a = DMatrix::zeros(mc + 2 * t_len, 3 * t_len);
    a.view_mut((0, 0), (mc, w)).copy_from(a_c);
    let mut b = DVector::zeros(mc + 2 * t_len);
    b.rows_mut(0, mc).copy_from(b_c);
    for t in 0..t_len {
        for (block, price) in [(0, tariff.p_buy[t]), (1, tariff.p_sell[t])] {
            let r = mc + block * t_len + t;
            let p = grid.dt * price;
            a[(r, 2 * t)] = p;
            a[(r, 2 * t + 1)] = -p;
            a[(r, w + t)] = -1.0;
            b[r] = -p * baseline[t];
        }
    }
    let mut l = DVector::zeros(3 * t_len);
    l.rows_mut(w, t_len).fill(1.0);
    (a, b, l)
}

/// `D = I_T (x) [1, -1]`, mapping `x_i` to the battery's net power.
pub fn difference_matrix(grid: &TimeGrid) -> DMatrix<f64> {
    let t_len = grid.steps;
    let mut d = DMatrix::zeros(t_len, 2 * t_len);
    for t in 0..t_len {
        d[(t, 2 * t)] = 1.0;
        d[(t, 2 * t + 1)] = -1.0;
    }
    d
}

/// Horizontal tiling of `D` over `n` agents (`T x 2nT`).
pub fn summation_matrix(n: usize, grid: &TimeGrid) -> DMatrix<f64> {
    let d = difference_matrix(grid);
    let w = 2 * grid.steps;
    let mut s = DMatrix::zeros(grid.steps, n * w);
    for i in 0..n {
        s.columns_mut(i * w, w).copy_from(&d);
    }
    s
}

/// Battery net power `P_in,t - P_out,t` of one agent; accepts `x_i` or `x~_i`.
pub fn battery_net(x: &[f64], grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps).map(|t| x[2 * t] - x[2 * t + 1]).collect()
}

/// Agent net power `D x_i + P_m,i`.
pub fn agent_net_power(x: &[f64], baseline: &[f64], grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps).map(|t| x[2 * t] - x[2 * t + 1] + baseline[t]).collect()
}

/// `S x + sum_i P_m,i` for stacked battery decisions `x` (length `2NT`).
pub fn net_community_power(x: &[f64], baselines: &[Vec<f64>], grid: &TimeGrid) -> Result<Vec<f64>> {
    let t_len = grid.steps;
    let w = 2 * t_len;
    check_len("stacked decisions", baselines.len() * w, x.len())?;
    let mut z = vec![0.0; t_len];
    for (i, base) in baselines.iter().enumerate() {
        check_len("baseline", t_len, base.len())?;
        for t in 0..t_len {
            z[t] += x[i * w + 2 * t] - x[i * w + 2 * t + 1] + base[t];
        }
    }
    Ok(z)
}

/// Per-agent polyhedron `a x~ <= b` and cost vector `l`, in epigraph form.
#[derive(Debug, Clone)]
pub struct AgentSet {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub l: DVector<f64>,
    /// Upper power bounds of the `2T` battery variables.
    pub x_max: DVector<f64>,
}

impl AgentSet {
    pub fn build(prosumer: &ProsumerConfig, tariff: &Tariff, grid: &TimeGrid) -> Self {
        let (a_c, b_c) = assemble_local_constraints(prosumer, grid);
        let (a, b, l) = augment_epigraph(&a_c, &b_c, tariff, &prosumer.baseline, grid);
        let x_max = DVector::from_fn(2 * grid.steps, |k, _| prosumer.power_bounds(k / 2)[k % 2]);
        AgentSet { a, b, l, x_max }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }
}

/// Epigraph sets for every agent of a scenario.
pub fn agent_sets(scenario: &Scenario) -> Vec<AgentSet> {
    scenario
        .prosumers
        .iter()
        .map(|p| AgentSet::build(p, &scenario.tariff, &scenario.grid))
        .collect()
}

/// Idle battery with a tight cost envelope: the neutral starting point.
pub fn idle_decision(prosumer: &ProsumerConfig, tariff: &Tariff, grid: &TimeGrid) -> DVector<f64> {
    let t_len = grid.steps;
    let mut x = DVector::zeros(3 * t_len);
    for t in 0..t_len {
        let z = prosumer.baseline[t];
        x[2 * t_len + t] = grid.dt * z * if z >= 0.0 { tariff.p_buy[t] } else { tariff.p_sell[t] };
    }
    x
}

/// Lift a net power profile to decisions with the same `D` image
/// (`[max(z, 0), max(-z, 0)]` per step).
pub fn lift_net_power(z: &[f64]) -> Vec<f64> {
    z.iter().flat_map(|&v| [v.max(0.0), (-v).max(0.0)]).collect()
}
