//! `gnemarket`: generate prosumer communities, solve them, and run batches.
//!
//! Exit codes: 0 on success, 1 when some runs failed or did not finish,
//! 2 for invalid arguments or unreadable inputs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gne_market::algorithms::{centralized_reference, run, RunOptions, StopReason, StoppingRule};
use gne_market::game::{kkt_residual, Market};
use gne_market::harness::{
    export_report, generate_scenario, import_report, run_experiment, BatchReport, ExperimentConfig, Method,
    ReportFormat, SyntheticProfileSpec,
};
use gne_market::{Scenario, Tariff, TimeGrid};

#[derive(Parser)]
#[command(
    name = "gnemarket",
    version,
    about = "Distributed equilibrium seeking for prosumer energy markets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic community and write it as scenario JSON.
    Generate(GenerateArgs),
    /// Solve one scenario with a single method.
    Solve(SolveArgs),
    /// Run a batch of synthetic scenarios and write the report.
    Batch(BatchArgs),
    /// Summarize a report written by `batch`.
    Report(ReportArgs),
}

#[derive(Args)]
struct ProfileArgs {
    /// Use the tight-corridor stress profile.
    #[arg(long)]
    stress: bool,
}

impl ProfileArgs {
    fn spec(&self) -> SyntheticProfileSpec {
        if self.stress {
            SyntheticProfileSpec::stress()
        } else {
            SyntheticProfileSpec::default()
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    agents: usize,
    #[arg(long, default_value_t = 24)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    profile: ProfileArgs,
    /// Scenario JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the tariff as `buy,sell` CSV.
    #[arg(long)]
    tariff_out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario JSON.
    #[arg(long)]
    scenario: PathBuf,
    /// Replace the scenario tariff with a `buy,sell` CSV.
    #[arg(long)]
    tariff: Option<PathBuf>,
    #[arg(long, default_value = "pfb")]
    algo: Method,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Relative social-cost change accepted as converged.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Disable the individual-rationality gate.
    #[arg(long)]
    no_gate: bool,
    /// Trace CSV for pfb/admm, solution JSON for central.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Structured,
    Tabular,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Structured => ReportFormat::Structured,
            FormatArg::Tabular => ReportFormat::Tabular,
        }
    }
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long, default_value_t = 50)]
    sims: usize,
    #[arg(long, default_value_t = 10)]
    agents: usize,
    #[arg(long, default_value_t = 24)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "pfb,admm,central")]
    algo: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long)]
    no_gate: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Structured)]
    format: FormatArg,
    /// Report path; structured reports put traces in `<stem>_traces/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Structured report JSON.
    input: PathBuf,
    /// Also write the traces as one tabular CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks errors caused by the invocation rather than by a run.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn config<T, E>(r: std::result::Result<T, E>, what: impl Into<String>) -> Result<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.map_err(|e| anyhow::Error::new(e).context(ConfigError(what.into())))
}

enum Status {
    Done,
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve(a),
        Command::Batch(a) => batch(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn grid(steps: usize) -> Result<TimeGrid> {
    config(TimeGrid::daily(steps), "time grid")
}

fn generate(a: GenerateArgs) -> Result<Status> {
    let grid = grid(a.steps)?;
    let scenario = config(
        generate_scenario(&a.profile.spec(), a.agents, &grid, a.seed),
        "generator",
    )?;
    scenario
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.tariff_out {
        scenario
            .tariff
            .save(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "wrote {} ({} agents, {} steps, {} coupling rows)",
        a.out.display(),
        scenario.n_agents(),
        grid.steps,
        scenario.coupling.rows()
    );
    Ok(Status::Done)
}

fn load_scenario(path: &Path, tariff: Option<&Path>) -> Result<Scenario> {
    let mut s = config(Scenario::load(path), format!("reading scenario {}", path.display()))?;
    if let Some(t) = tariff {
        let tariff = config(Tariff::load(t), format!("reading tariff {}", t.display()))?;
        config(tariff.validate(s.grid.steps), "tariff length")?;
        s.tariff = tariff;
    }
    Ok(s)
}

fn solve(a: SolveArgs) -> Result<Status> {
    let scenario = load_scenario(&a.scenario, a.tariff.as_deref())?;
    let market = Market::new(scenario);
    let Some(algorithm) = a.algo.algorithm() else {
        let c = centralized_reference(&market, 1e-9)?;
        println!("central sigma {:.8}", c.sigma);
        if let Some(p) = &a.out {
            let x: Vec<Vec<f64>> = c.x.iter().map(|v| v.as_slice().to_vec()).collect();
            let doc = serde_json::json!({ "sigma": c.sigma, "x": x, "mu": c.mu.as_slice() });
            std::fs::write(p, serde_json::to_string_pretty(&doc)?)
                .with_context(|| format!("writing {}", p.display()))?;
        }
        return Ok(Status::Done);
    };
    let opts = RunOptions {
        rho: a.rho,
        beta: a.rho,
        stopping: StoppingRule {
            max_iter: a.iters,
            rel_sigma_tol: a.tol,
            ..StoppingRule::default()
        },
        ir_gate: !a.no_gate,
        ..RunOptions::default()
    };
    config(opts.validate(), "run options")?;
    let out = run(algorithm, &market, &opts)?;
    if let Some(p) = &a.out {
        let f = std::fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
        out.trace.write_csv(f)?;
    }
    let last = out.trace.last();
    let kkt = match out.kkt {
        Some(k) => k,
        None => kkt_residual(&market, &out.state.x, &out.state.coupling_multiplier())?,
    };
    println!(
        "{algorithm}: {:?} after {} iterations, sigma {:.8}, KKT {:.3e}",
        out.stop,
        out.trace.len(),
        last.map_or(f64::NAN, |r| r.sigma),
        kkt.max()
    );
    Ok(match out.stop {
        StopReason::Failed(msg) => {
            eprintln!("run failed: {msg}");
            Status::Partial
        }
        _ => Status::Done,
    })
}

fn batch(a: BatchArgs) -> Result<Status> {
    let cfg = ExperimentConfig {
        n_sims: a.sims,
        n_agents: a.agents,
        grid: grid(a.steps)?,
        rho: a.rho,
        iters: a.iters,
        algorithms: a.algo,
        seed: a.seed,
        output: Some(a.out.clone()),
        profile: a.profile.spec(),
        ir_gate: !a.no_gate,
    };
    config(cfg.validate(), "experiment")?;
    let rep = run_experiment(&cfg)?;
    let written = export_report(&rep, &a.out, a.format.into())?;
    println!("wrote {} files", written.len());
    print_summary(&rep);
    Ok(if rep.failures.is_empty() {
        Status::Done
    } else {
        Status::Partial
    })
}

fn report(a: ReportArgs) -> Result<Status> {
    let rep = config(
        import_report(&a.input, ReportFormat::Structured),
        format!("reading report {}", a.input.display()),
    )?;
    if let Some(p) = &a.out {
        export_report(&rep, p, ReportFormat::Tabular)?;
    }
    print_summary(&rep);
    Ok(if rep.failures.is_empty() {
        Status::Done
    } else {
        Status::Partial
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn print_summary(rep: &BatchReport) {
    let iters = rep.config.iters;
    println!(
        "{:<6} {:>5} {:>10} {:>12} {:>12}",
        "method", "runs", "converged", "median gap", "max IR excess"
    );
    for m in &rep.config.algorithms {
        let Some(algo) = m.algorithm() else { continue };
        let runs: Vec<_> = rep
            .sims
            .iter()
            .flat_map(|s| s.algorithms.iter().filter(move |a| a.algorithm == algo))
            .collect();
        let conv = runs
            .iter()
            .filter(|a| a.converged_at.map_or(false, |k| k <= iters))
            .count();
        let gap = median(runs.iter().filter_map(|a| a.gap_shifted).collect());
        let excess = runs
            .iter()
            .flat_map(|a| a.ir.iter().map(|r| r.excess()))
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{:<6} {:>5} {:>10} {:>12.6} {:>12.3e}",
            algo.name(),
            runs.len(),
            conv,
            gap,
            excess
        );
    }
    for f in &rep.failures {
        println!("failed: {f}");
    }
}
