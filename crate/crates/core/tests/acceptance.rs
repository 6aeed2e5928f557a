//! End-to-end acceptance run. Built with `harness = false` so the verdict
//! lines are printed even when everything passes.

use std::time::Instant;

use gne_market::algorithms::{centralized_reference, run, Algorithm, RunOptions, StopReason, StoppingRule};
use gne_market::economics::Tariff;
use gne_market::game::{agent_value, game_map, kkt_residual, monotonicity_probe, Market, Profile};
use gne_market::harness::{generate_scenario, run_experiment, ExperimentConfig, SyntheticProfileSpec};
use gne_market::model::{BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid};
use gne_market::qp::{solve_qp, QpProblem, QpStatus};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    let v = Verdict { name, pass, detail };
    println!("[{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    v
}

fn battery_diff(a: &Profile, b: &Profile, t_len: usize) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u.rows(0, 2 * t_len) - v.rows(0, 2 * t_len)).amax())
        .fold(0.0, f64::max)
}

fn overlap(market: &Market, x: &Profile) -> f64 {
    let t_len = market.steps();
    let bound = market.sets.iter().map(|s| s.x_max.max()).fold(0.0, f64::max);
    let worst = x
        .iter()
        .flat_map(|xi| (0..t_len).map(move |t| xi[2 * t].min(xi[2 * t + 1])))
        .fold(0.0, f64::max);
    worst / bound
}

fn tight_options() -> RunOptions {
    RunOptions {
        stopping: StoppingRule {
            max_iter: 3000,
            rel_sigma_tol: 1e-11,
            step_tol: Some(1e-8),
            stop_early: true,
        },
        kkt_every: 0,
        ..RunOptions::default()
    }
}

fn seeded_markets() -> Vec<Market> {
    let grid = TimeGrid::daily(24).unwrap();
    (0..10)
        .map(|seed| Market::new(generate_scenario(&SyntheticProfileSpec::default(), 10, &grid, 1000 + seed).unwrap()))
        .collect()
}

/// Criteria 1, 3 and part of 7 on long runs.
fn converged_runs(markets: &[Market]) -> Vec<Verdict> {
    let opts = tight_options();
    let mut worst_agree = 0.0f64;
    let mut worst_time = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut worst_overlap = 0.0f64;
    let mut all_converged = true;
    for m in markets {
        let start = Instant::now();
        let pfb = run(Algorithm::Pfb, m, &opts).unwrap();
        let admm = run(Algorithm::Admm, m, &opts).unwrap();
        worst_time = worst_time.max(start.elapsed().as_secs_f64());
        all_converged &= pfb.stop == StopReason::Converged && admm.stop == StopReason::Converged;
        worst_agree = worst_agree.max(battery_diff(&pfb.state.x, &admm.state.x, m.steps()));
        for o in [&pfb, &admm] {
            let r = kkt_residual(m, &o.state.x, &o.state.coupling_multiplier()).unwrap();
            worst_kkt = worst_kkt.max(r.max());
            worst_overlap = worst_overlap.max(overlap(m, &o.state.x));
        }
    }
    vec![
        verdict(
            "1 pFB/ADMM agreement",
            all_converged && worst_agree <= 1e-3 && worst_time <= 60.0,
            format!("max |x_pfb - x_admm|_inf = {worst_agree:.3e}, slowest scenario {worst_time:.1} s, all converged = {all_converged}"),
        ),
        verdict(
            "3 KKT residuals",
            worst_kkt <= 1e-4,
            format!("max residual over 20 converged runs = {worst_kkt:.3e}"),
        ),
        verdict(
            "7a battery complementarity (converged runs)",
            worst_overlap <= 1e-6,
            format!("max min(P_in, P_out) / P_max = {worst_overlap:.3e}"),
        ),
    ]
}

/// Criteria 2, 4, 6a and 7 on the standard 50-simulation batch.
fn batch_criteria() -> Vec<Verdict> {
    let cfg = ExperimentConfig::default();
    let rep = run_experiment(&cfg).unwrap();
    let ok_sims: Vec<_> = rep.sims.iter().filter(|s| s.error.is_none()).collect();
    let failures = rep.failures.len();

    let mut counts = Vec::new();
    for algo in Algorithm::ALL {
        let n = ok_sims
            .iter()
            .filter(|s| {
                s.algorithms
                    .iter()
                    .any(|a| a.algorithm == algo && a.converged_at.map_or(false, |k| k <= 200))
            })
            .count();
        counts.push((algo, n));
    }
    let c2 = counts.iter().all(|&(_, n)| n >= 45);

    let mut gaps: Vec<f64> = ok_sims
        .iter()
        .flat_map(|s| s.algorithms.iter().filter_map(|a| a.gap_shifted))
        .collect();
    gaps.sort_by(f64::total_cmp);
    let median = if gaps.is_empty() {
        f64::INFINITY
    } else {
        gaps[gaps.len() / 2]
    };
    let mut bound_violations = 0;
    for s in &ok_sims {
        let central = s.central_sigma.unwrap();
        for a in &s.algorithms {
            for r in &a.trace.records {
                if r.primal_res <= 1e-9 && r.sigma < central - 1e-7 * (1.0 + central.abs()) {
                    bound_violations += 1;
                }
            }
        }
    }
    let c4 = median <= 1.01 && bound_violations == 0 && gaps.len() == 2 * cfg.n_sims;

    // IR in expectation: each agent's excess averaged over the batch
    let n_agents = cfg.n_agents;
    let mut worst_batch_mean = f64::NEG_INFINITY;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_overlap = 0.0f64;
    let mut violations = 0;
    let mut total = 0;
    for algo in Algorithm::ALL {
        let mut sums = vec![0.0; n_agents];
        for s in &ok_sims {
            let a = s.algorithms.iter().find(|a| a.algorithm == algo).unwrap();
            for (i, r) in a.ir.iter().enumerate() {
                sums[i] += r.excess();
                worst_excess = worst_excess.max(r.excess());
                violations += usize::from(r.excess() > 1e-6);
                total += 1;
            }
            worst_overlap = worst_overlap.max(a.overlap);
        }
        for v in sums {
            worst_batch_mean = worst_batch_mean.max(v / ok_sims.len() as f64);
        }
    }
    vec![
        verdict(
            "2 relative sigma change within 200 iterations",
            c2 && failures == 0,
            format!(
                "{} (of {} runs each), failed sims = {failures}",
                counts
                    .iter()
                    .map(|(a, n)| format!("{a}: {n}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                cfg.n_sims
            ),
        ),
        verdict(
            "4 p_best gap and centralized lower bound",
            c4,
            format!("median shifted gap = {median:.6}, feasible iterates below the optimum = {bound_violations}"),
        ),
        verdict(
            "6a IR with the gate enabled",
            worst_batch_mean <= 1e-6 && !ok_sims.is_empty(),
            format!(
                "max over agents of the batch-mean excess = {worst_batch_mean:.3e}; \
                 single runs above 1e-6: {violations} of {total} (worst {worst_excess:.3e})"
            ),
        ),
        verdict(
            "7b battery complementarity (batch)",
            worst_overlap <= 1e-6,
            format!("max min(P_in, P_out) / P_max = {worst_overlap:.3e}"),
        ),
    ]
}

fn monotonicity(markets: &[Market]) -> Verdict {
    let stress =
        Market::new(generate_scenario(&SyntheticProfileSpec::stress(), 10, &TimeGrid::daily(24).unwrap(), 0).unwrap());
    let mut min = f64::INFINITY;
    for (k, m) in markets.iter().take(3).chain(std::iter::once(&stress)).enumerate() {
        min = min.min(monotonicity_probe(m, 10_000, k as u64).unwrap());
    }
    verdict(
        "5 monotonicity probe",
        min >= -1e-8,
        format!("min <x - y, F(x) - F(y)> over 4 x 10^4 pairs = {min:.3e}"),
    )
}

fn ir_without_gate() -> Verdict {
    let cfg = ExperimentConfig {
        n_sims: 1,
        profile: SyntheticProfileSpec::stress(),
        ir_gate: false,
        ..ExperimentConfig::default()
    };
    let rep = run_experiment(&cfg).unwrap();
    let sim = &rep.sims[0];
    let mut violated = Vec::new();
    for a in &sim.algorithms {
        let worst = a.ir.iter().map(|r| r.excess()).fold(f64::NEG_INFINITY, f64::max);
        violated.push((a.algorithm, worst));
    }
    let pass = sim.error.is_none() && !violated.is_empty() && violated.iter().all(|&(_, w)| w > 1e-6);
    verdict(
        "6b IR violated without the gate (stress)",
        pass,
        violated
            .iter()
            .map(|(a, w)| format!("{a} max agent excess = {w:.3e}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

/// Two agents, two steps, aggregate power kept positive by the baselines so
/// the smoothed price equals the buy price everywhere on the feasible set.
fn toy_market() -> Market {
    let grid = TimeGrid::new(2, 1.0).unwrap();
    let mut bat = BatteryParams::from_efficiency(4.0, 0.5, 0.95, 0.95, 1.0);
    bat.wear = 1.0;
    let pros = vec![
        ProsumerConfig::new(bat, vec![1.2, 1.0], 0.3),
        ProsumerConfig::new(bat, vec![0.9, 1.3], 0.7),
    ];
    let bases: Vec<Vec<f64>> = pros.iter().map(|p| p.baseline.clone()).collect();
    let cc = CouplingConstraints::aggregate_corridor(&bases, &grid, 1.75, 10.0);
    let tariff = Tariff::new(vec![0.1, 0.3], vec![0.05, 0.05]).unwrap();
    Market::new(Scenario::new(grid, pros, tariff, cc, 20.0).unwrap())
}

/// All minimizers of `1/2 x'Qx + c'x` s.t. `A x <= b` found by trying every
/// candidate active set.
fn enumerate_kkt(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    active_sets: impl Iterator<Item = Vec<usize>>,
) -> Vec<DVector<f64>> {
    let n = c.len();
    let mut found = Vec::new();
    for rows in active_sets {
        let k = rows.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(q);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for (j, &r) in rows.iter().enumerate() {
            for col in 0..n {
                kkt[(n + j, col)] = a[(r, col)];
                kkt[(col, n + j)] = a[(r, col)];
            }
            rhs[n + j] = b[r];
        }
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = (a * &x - b).iter().all(|&v| v <= 1e-10);
        let dual_ok = sol.rows(n, k).iter().all(|&v| v >= -1e-10);
        if feasible && dual_ok {
            found.push(x);
        }
    }
    found
}

fn toy_oracle(market: &Market) -> DVector<f64> {
    let s = &market.scenario;
    let n = 8;
    let dt = s.grid.dt;
    let mut q = DMatrix::zeros(n, n);
    let mut c = DVector::zeros(n);
    for i in 0..2 {
        let p = &s.prosumers[i];
        for t in 0..2 {
            let price = (1.0 + p.alpha) * dt * s.tariff.p_buy[t];
            c[4 * i + 2 * t] = price;
            c[4 * i + 2 * t + 1] = -price;
        }
        for k in 0..4 {
            q[(4 * i + k, 4 * i + k)] = p.battery.wear * dt;
        }
    }
    // rows: 8 lower bounds, 8 upper bounds, then per step Z <= hi, Z >= lo
    let mut a = DMatrix::zeros(20, n);
    let mut b = DVector::zeros(20);
    for v in 0..n {
        a[(v, v)] = -1.0;
        a[(8 + v, v)] = 1.0;
        b[8 + v] = 0.5;
    }
    for t in 0..2 {
        let base: f64 = s.prosumers.iter().map(|p| p.baseline[t]).sum();
        for i in 0..2 {
            a[(16 + 2 * t, 4 * i + 2 * t)] = 1.0;
            a[(16 + 2 * t, 4 * i + 2 * t + 1)] = -1.0;
            a[(17 + 2 * t, 4 * i + 2 * t)] = -1.0;
            a[(17 + 2 * t, 4 * i + 2 * t + 1)] = 1.0;
        }
        b[16 + 2 * t] = 10.0 - base;
        b[17 + 2 * t] = base - 1.75;
    }
    // each variable: free / lower / upper; each step: free / upper / lower
    let sets = (0..3usize.pow(10)).map(|mut code| {
        let mut rows = Vec::new();
        for v in 0..8 {
            match code % 3 {
                1 => rows.push(v),
                2 => rows.push(8 + v),
                _ => {}
            }
            code /= 3;
        }
        for t in 0..2 {
            match code % 3 {
                1 => rows.push(16 + 2 * t),
                2 => rows.push(17 + 2 * t),
                _ => {}
            }
            code /= 3;
        }
        rows
    });
    let found = enumerate_kkt(&q, &c, &a, &b, sets);
    assert!(!found.is_empty(), "toy oracle found no KKT point");
    for x in &found {
        assert!((x - &found[0]).amax() < 1e-9, "toy oracle found distinct minimizers");
    }
    let x = found[0].clone();
    // the relaxation drops the state-of-charge rows; they must be slack
    for i in 0..2 {
        let bat = &s.prosumers[i].battery;
        let mut e = bat.e0;
        for t in 0..2 {
            e = bat.a_state * e + bat.b_charge * x[4 * i + 2 * t] - bat.b_discharge * x[4 * i + 2 * t + 1];
            assert!(e > bat.e_min && e < bat.e_max);
        }
    }
    x
}

fn random_qp_case(rng: &mut ChaCha8Rng) -> (QpProblem, DVector<f64>) {
    let n = 6;
    let m = 8;
    let mm = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = mm.tr_mul(&mm) + DMatrix::identity(n, n) * 0.5;
    let c = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
    let sets = (0u32..1 << m)
        .filter(|s| s.count_ones() as usize <= n)
        .map(|s| (0..m).filter(|r| s & (1 << r) != 0).collect::<Vec<usize>>());
    let found = enumerate_kkt(&q, &c, &a, &b, sets);
    assert_eq!(found.len(), 1, "strictly convex case must have one KKT point");
    (QpProblem::dense(q, c, a, b).unwrap(), found[0].clone())
}

fn enumeration_checks() -> Verdict {
    let market = toy_market();
    let oracle = toy_oracle(&market);
    let opts = RunOptions {
        stopping: StoppingRule {
            max_iter: 20_000,
            rel_sigma_tol: 1e-14,
            step_tol: Some(1e-12),
            stop_early: true,
        },
        kkt_every: 0,
        ..RunOptions::default()
    };
    let mut toy_err = 0.0f64;
    for algo in Algorithm::ALL {
        let out = run(algo, &market, &opts).unwrap();
        for i in 0..2 {
            let d = (out.state.x[i].rows(0, 4) - oracle.rows(4 * i, 4)).amax();
            toy_err = toy_err.max(d);
        }
    }
    let central = centralized_reference(&market, 1e-10).unwrap();
    let mut central_err = 0.0f64;
    for i in 0..2 {
        central_err = central_err.max((central.x[i].rows(0, 4) - oracle.rows(4 * i, 4)).amax());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut qp_err = 0.0f64;
    let mut qp_bad = 0;
    for _ in 0..100 {
        let (p, x) = random_qp_case(&mut rng);
        let sol = solve_qp(&p, 1e-10, 1000).unwrap();
        if sol.status != QpStatus::Optimal {
            qp_bad += 1;
        }
        qp_err = qp_err.max((sol.x_opt - x).amax());
    }
    verdict(
        "8 active-set enumeration",
        toy_err <= 1e-6 && qp_err <= 1e-6 && qp_bad == 0,
        format!(
            "toy equilibrium error = {toy_err:.3e} (social optimum lies {central_err:.3e} away), \
             random QP error = {qp_err:.3e}, non-optimal QP answers = {qp_bad}"
        ),
    )
}

fn finite_differences(markets: &[Market]) -> Verdict {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut points = 0;
    for (k, m) in markets.iter().enumerate() {
        let t_len = m.steps();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + k as u64);
        for _ in 0..100 {
            let x: Profile = m
                .sets
                .iter()
                .map(|set| {
                    DVector::from_fn(3 * t_len, |j, _| {
                        if j < 2 * t_len {
                            rng.gen::<f64>() * set.x_max[j]
                        } else {
                            rng.gen_range(-1.0..1.0)
                        }
                    })
                })
                .collect();
            let f = game_map(m, &x).unwrap();
            for i in 0..x.len() {
                let mut fd = DVector::zeros(3 * t_len);
                let mut xp = x.clone();
                for j in 0..3 * t_len {
                    let v = x[i][j];
                    xp[i][j] = v + h;
                    let up = agent_value(m, &xp, i).unwrap();
                    xp[i][j] = v - h;
                    let down = agent_value(m, &xp, i).unwrap();
                    xp[i][j] = v;
                    fd[j] = (up - down) / (2.0 * h);
                }
                let err = (&fd - &f[i]).amax() / f[i].rows(0, 2 * t_len).amax().max(1e-12);
                worst = worst.max(err);
            }
            points += 1;
        }
    }
    verdict(
        "9 game map vs finite differences",
        worst <= 1e-5,
        format!("max relative error = {worst:.3e} over {points} points"),
    )
}

fn main() {
    let start = Instant::now();
    let markets = seeded_markets();
    let mut all = Vec::new();
    all.extend(converged_runs(&markets));
    all.extend(batch_criteria());
    all.push(monotonicity(&markets));
    all.push(ir_without_gate());
    all.push(enumeration_checks());
    all.push(finite_differences(&markets));
    let failed: Vec<&str> = all.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    println!(
        "acceptance: {} of {} checks passed in {:.0} s",
        all.len() - failed.len(),
        all.len(),
        start.elapsed().as_secs_f64()
    );
    for v in &all {
        if !v.pass {
            eprintln!("failed: {} ({})", v.name, v.detail);
        }
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
