//! Stochastic ridesharing market toolkit: scenario-tree welfare optimization
//! with dual certification, dynamic and static trip pricing, a two-stage
//! stochastic matching process, a population-scale driver simulator with
//! incentive auditing, and empirical tail-bound checks.

pub mod concentration;
pub mod io;
pub mod market;
pub mod matching;
pub mod presets;
pub mod pricing;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod stats;

pub use market::{
    expected_requests, node_probability, transition_supply, validate_instance, MarketInstance,
    MarketState, ScenarioNode, ScenarioTree, ValidationReport, ValueDistribution,
};
pub use solver::{
    extract_duals, kkt_residuals, objective_and_gradient, solve_and_certify, solve_fluid,
    DualCertificate, FlowPlan, SolveCache, SolveParams, SolveReport,
};
