//! Deterministic discrete-time simulator and analysis toolkit for
//! decentralized stable channel allocation in heterogeneous multi-user
//! ad-hoc networks.
//!
//! Users learn channel qualities with optimistic indices, claim channels by
//! random hopping, and then negotiate pairwise channel exchanges over a
//! collision-signalled block schedule until no user wants to deviate. The
//! crate simulates the whole protocol slot by slot, checks the resulting
//! allocations for stability, and evaluates the analytical convergence
//! bounds.

pub mod analysis;
pub mod cli;
pub mod env;
pub mod learning;
pub mod protocol;
pub mod sim;

pub use analysis::{
    bound_report, dynamic_bounds, is_soc, network_potential, optimal_reward, static_bounds,
    t_m_numeric, user_rank, Allocation, AnalysisError, BoundReport, RankTable, Witness,
};
pub use env::{random_matrix, random_row, EnvError, GapStats, RewardMatrix, RngStream};
pub use learning::{s_min, ChannelStats, LearningError};
pub use protocol::{
    decide_accept, rh_duration, step, AgentState, BlockClock, Mode, Observation, Phase,
    ProtocolError, SlotAction, Variant,
};
pub use sim::{
    run_replications, run_scenario, write_trace_csv, Event, EventKind, MatrixSpec, Metrics,
    RunOutput, Scenario, SimError,
};
