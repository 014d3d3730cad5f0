//! Scheduling policies the simulator can run: the dual-price per-packet rule
//! and the EDF, greedy and idle baselines, plus optional token-bucket budget
//! enforcement per node.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{FlowId, ValidatedSpec};
use crate::packet_dp::{attempt_decision, Action, PolicyTable};

/// A packet resident at a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub flow: FlowId,
    /// Current hop index, `1..=L+1`.
    pub hop: usize,
    pub time_to_go: usize,
    pub birth_slot: u64,
}

impl Packet {
    pub fn hops_remaining(&self, hop_count: usize) -> usize {
        hop_count + 1 - self.hop
    }

    pub fn is_feasible(&self, hop_count: usize) -> bool {
        self.time_to_go >= self.hops_remaining(hop_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Dual,
    Edf,
    Greedy,
    Idle,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Dual => "dual",
            PolicyKind::Edf => "edf",
            PolicyKind::Greedy => "greedy",
            PolicyKind::Idle => "idle",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(PolicyKind::Dual),
            "edf" => Ok(PolicyKind::Edf),
            "greedy" => Ok(PolicyKind::Greedy),
            "idle" => Ok(PolicyKind::Idle),
            other => Err(Error::Precondition(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecisionSource {
    /// One policy table per flow, indexed by flow id.
    DualPrice(Vec<PolicyTable>),
    Edf { feasible_only: bool },
    /// Attempt every feasible packet.
    Greedy,
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetEnforcement {
    #[default]
    None,
    /// Per-node token bucket with rate `M_v` and carry cap 1. When the
    /// decision source wants more attempts than the bucket allows, the
    /// earliest-deadline packets keep their slot.
    TokenBucket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub source: DecisionSource,
    pub enforcement: BudgetEnforcement,
}

impl PolicyBundle {
    /// Dual-price bundle; checks there is one table per flow shaped like its route.
    pub fn dual(spec: &ValidatedSpec, tables: Vec<PolicyTable>) -> Result<Self> {
        if tables.len() != spec.num_flows() {
            return Err(Error::Precondition(format!(
                "{} policy tables for {} flows",
                tables.len(),
                spec.num_flows()
            )));
        }
        for (f, table) in spec.flows().iter().zip(&tables) {
            if table.flow != f.id {
                return Err(Error::MissingTable(f.id));
            }
            if table.hop_count() != spec.hop_count(f.id)
                || table.max_deadline() < f.deadline.max_deadline()
            {
                return Err(Error::Precondition(format!(
                    "policy table for {} does not cover its route and deadlines",
                    f.id
                )));
            }
        }
        Ok(Self {
            source: DecisionSource::DualPrice(tables),
            enforcement: BudgetEnforcement::None,
        })
    }

    pub fn edf() -> Self {
        Self {
            source: DecisionSource::Edf {
                feasible_only: true,
            },
            enforcement: BudgetEnforcement::TokenBucket,
        }
    }

    pub fn greedy() -> Self {
        Self {
            source: DecisionSource::Greedy,
            enforcement: BudgetEnforcement::None,
        }
    }

    pub fn idle() -> Self {
        Self {
            source: DecisionSource::Idle,
            enforcement: BudgetEnforcement::None,
        }
    }

    pub fn with_enforcement(mut self, enforcement: BudgetEnforcement) -> Self {
        self.enforcement = enforcement;
        self
    }

    pub fn kind(&self) -> PolicyKind {
        match self.source {
            DecisionSource::DualPrice(_) => PolicyKind::Dual,
            DecisionSource::Edf { .. } => PolicyKind::Edf,
            DecisionSource::Greedy => PolicyKind::Greedy,
            DecisionSource::Idle => PolicyKind::Idle,
        }
    }
}

/// EDF attempt set: indices into `packets` in priority order, at most
/// `budget` of them. Priority is `(time_to_go, birth_slot, flow, position)`.
pub fn edf_select(
    packets: &[Packet],
    budget: usize,
    hop_count: impl Fn(FlowId) -> usize,
    feasible_only: bool,
) -> Vec<usize> {
    if budget == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..packets.len())
        .filter(|&k| !feasible_only || packets[k].is_feasible(hop_count(packets[k].flow)))
        .collect();
    order.sort_by_key(|&k| {
        let p = &packets[k];
        (p.time_to_go, p.birth_slot, p.flow, k)
    });
    order.truncate(budget);
    order
}

/// Draws one uniform and applies the packet's flow table.
pub fn dual_price_decide(
    bundle: &PolicyBundle,
    packet: &Packet,
    rng: &mut impl Rng,
) -> Result<Action> {
    let DecisionSource::DualPrice(tables) = &bundle.source else {
        return Err(Error::Precondition("bundle is not a dual-price bundle".into()));
    };
    let table = tables
        .get(packet.flow.0)
        .ok_or(Error::MissingTable(packet.flow))?;
    let u: f64 = rng.random();
    attempt_decision(table, packet.hop, packet.time_to_go, u)
}

/// Deterministic credit scheme: `rate` credit per slot, at most 1 carried over.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    credit: f64,
}

impl TokenBucket {
    pub const CARRY_CAP: f64 = 1.0;

    pub fn new(rate: f64) -> Self {
        Self { rate, credit: 0.0 }
    }

    /// Adds this slot's credit and returns the whole-attempt budget.
    pub fn begin_slot(&mut self) -> usize {
        self.credit += self.rate;
        self.credit.floor().max(0.0) as usize
    }

    pub fn consume(&mut self, attempts: usize) {
        self.credit = (self.credit - attempts as f64).min(Self::CARRY_CAP);
    }
}
