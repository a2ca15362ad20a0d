//! Online learning in episodic loop-free constrained MDPs with unknown
//! transitions.
//!
//! The learner is a primal-dual pair: projected gradient descent over an
//! estimated occupancy-measure polytope (with UCRL-style confidence sets and
//! epoch doubling) plays against projected gradient ascent on truncated
//! Lagrange multipliers. The crate also ships the offline oracles, the
//! environment generators and the measurement harness used to check regret,
//! violation and multiplier growth empirically.

pub mod cmdp;
pub mod confidence;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod metrics;
pub mod orchestrator;
pub mod polytope;
pub mod primal;
pub mod scenario;

pub use cmdp::{
    cast_loop_free, induce_occupancy, induce_policy, sample_trajectory, ConstraintSample, FiniteMdp, Layout,
    LoopFreeCmdp, OccupancyMeasure, Policy, RewardSample, Trajectory,
};
pub use confidence::ConfidenceState;
pub use dual::{DualOptions, DualState};
pub use error::{Error, Result};
pub use experiment::{run_matrix, Criterion, CriterionKind, ExperimentConfig, ExperimentReport};
pub use polytope::{
    build_polytope, lp_maximize, project, LinearInequality, LpSolution, LpStatus, OccupancyPolytope, PolytopeMode,
    PolytopeSource, ProjectionSettings,
};
pub use metrics::{compute_metrics, fit_growth, GrowthFit, MetricsSummary};
pub use orchestrator::{build_loss, run, run_with_oracle, EpisodeRecord, RunConfig, RunSummary, RunTrace};
pub use primal::{PrimalOptions, PrimalState};
pub use scenario::{solve_offline, Environment, EnvironmentSpec, OracleReport};
