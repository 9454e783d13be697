//! Bilateral peer-to-peer electricity market modelled as an assignment game.
//!
//! The market operator matches buyers and sellers so that total contract
//! value is maximal, then every matched pair bargains over how to split its
//! contract value. The fair split is the tau-value of the game; the
//! [`negotiation`] module simulates a distributed protocol that reaches it
//! from any opening proposals.
//!
//! Pipeline: [`market_model`] (instance and contract values) →
//! [`assignment`] (matrix, optimal matching, coalition values) →
//! [`solution`] (core points, tau-value, prices, welfare) →
//! [`negotiation`] → [`report`].

pub mod assignment;
pub mod error;
pub mod market_model;
pub mod negotiation;
pub mod report;
pub mod solution;

pub use assignment::{
    brute_force_assignment, build_assignment_matrix, coalition_value, solve_optimal_assignment, AssignmentMatrix,
    Matching,
};
pub use error::{Error, Result};
pub use market_model::{
    contract_value, expected_generation, unit_value, validate_instance, Buyer, GridTariff, MarketInstance, Scenario,
    ScenarioSet, Seller, Violation,
};
pub use negotiation::{
    check_paracontraction, make_weight_family, negotiation_step, project_favorable, run_negotiation, FavorableSet,
    NegotiationConfig, NegotiationOutcome, NegotiationState, Side, WeightSchedule,
};
pub use report::{build_report, grid_baseline, run_pipeline, MarketReport, PipelineConfig, Stage};
pub use solution::{AssignmentGame, CoreCheck, CoreViolation, PairBounds, PayoffAllocation, Provenance};
