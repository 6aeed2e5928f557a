//! Decentralized generalized Nash equilibrium seeking for a community of
//! prosumers sharing a grid connection.
//!
//! Agents own batteries and trade with the grid under a buy/sell tariff. The
//! community pays the pooled energy cost, and each agent receives a share of
//! the pooling surplus. Shared coupling rows such as an aggregate power
//! corridor link the agents. Two distributed schemes,
//! preconditioned forward-backward ([`algorithms::Algorithm::Pfb`]) and an
//! exchange ADMM ([`algorithms::Algorithm::Admm`]), compute the variational
//! equilibrium; [`harness`] generates synthetic communities and runs batches.

pub mod algorithms;
pub mod economics;
pub mod error;
pub mod game;
pub mod harness;
pub mod model;
pub mod qp;

pub use algorithms::{
    centralized_reference, run, AggregateCost, Algorithm, ConvergenceTrace, IterateState, RunOptions, RunOutcome,
    StopReason, StoppingRule, TraceRecord,
};
pub use economics::{RepartitionHistory, Tariff};
pub use error::{Error, Result};
pub use game::{game_map, kkt_residual, sigma, KktResidual, Market, Profile};
pub use harness::{
    export_report, generate_scenario, import_report, run_experiment, BatchReport, ExperimentConfig, Method,
    ReportFormat, SyntheticProfileSpec,
};
pub use model::{BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus, QuadTerm};
