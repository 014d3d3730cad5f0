//! Throughput-maximizing scheduling for deadline-constrained multi-hop
//! wireless networks.
//!
//! Node budgets are enforced only on average, through per-node prices. Given
//! prices, every packet solves its own small finite-horizon DP over
//! `(hop, time_to_go)`, and each node learns its price from its own observed
//! attempt rate. The crate provides:
//!
//! - [`net_model`]: network, link and flow descriptions plus validation
//! - [`packet_dp`]: the per-packet value/policy tables for a price vector
//! - [`oracle`]: exhaustive and Monte Carlo checks of the DP
//! - [`price_learner`]: dual value, usage gradients, subgradient iterations
//! - [`sim_engine`]: slotted packet-level simulator
//! - [`policies`]: dual-price, EDF, greedy and idle schedulers
//! - [`experiment`]: configs, capacity sweeps and CSV output

pub mod error;
pub mod experiment;
pub mod net_model;
pub mod oracle;
pub mod packet_dp;
pub mod policies;
pub mod price_learner;
pub mod sim_engine;

pub use error::{Error, Result};
