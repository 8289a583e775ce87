//! Executable theory and metric aggregation.

mod bound;
mod dp;
mod metrics;
mod stability;

pub use bound::{roe_mpc_bound, BoundConstants, BoundInputs};
pub use dp::{q_error_epsilon, ToyMdp};
pub use metrics::{aggregate_metrics, population_sd, write_summary, CellStats, RewardRow, SummaryRow, SUMMARY_HEADER};
pub use stability::{sigma_min, verify_stabilizability, StabilityReport};
