//! Single-packet finite-horizon DP for one flow at fixed node prices.
//!
//! State is `(hop, time_to_go)`: hop `i` in `1..=L` means the packet sits at the
//! tail of link `l_i`, and hop `L+1` means delivered. From `(i, s)` an attempt
//! costs the tail node's price, succeeds with probability `p_{l_i}` and moves
//! to `(i+1, s-1)`. Idling moves to `(i, s-1)`. A packet at hop `i` needs
//! `L-i+1` more slots, so `V(i, s) = 0` for `s <= L-i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{FlowId, NodeId, Route};

/// Absolute margin below which the attempt and idle branches count as tied.
pub const TIE_EPSILON: f64 = 1e-12;

/// Nonnegative per-node prices λ̂_v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    pub lambda: Vec<f64>,
}

impl PriceVector {
    pub fn zeros(nodes: usize) -> Self {
        Self {
            lambda: vec![0.0; nodes],
        }
    }

    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if let Some((v, p)) = lambda
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p >= 0.0))
        {
            return Err(Error::Precondition(format!(
                "price of node {v} is {p}; prices must be finite and nonnegative"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub fn get(&self, node: NodeId) -> f64 {
        self.lambda[node.0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambda
    }

    pub fn max_abs_diff(&self, other: &PriceVector) -> f64 {
        self.lambda
            .iter()
            .zip(&other.lambda)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// What a hop charges and how reliable it is, as seen by the DP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopCharge {
    pub node: NodeId,
    pub reliability: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Attempt,
    Idle,
}

/// Dense value table over `(hop 1..=L+1) x (time_to_go 0..=Δ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub flow: FlowId,
    pub alpha: f64,
    hops: Vec<HopCharge>,
    max_deadline: usize,
    // rows[i - 1][s] = V(i, s)
    rows: Vec<Vec<f64>>,
    evaluations: usize,
}

impl ValueTable {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    pub fn max_deadline(&self) -> usize {
        self.max_deadline
    }

    pub fn hop_charge(&self, hop: usize) -> &HopCharge {
        &self.hops[hop - 1]
    }

    pub fn hop_charges(&self) -> &[HopCharge] {
        &self.hops
    }

    /// `V(hop, time_to_go)`, with hop in `1..=L+1`.
    pub fn value(&self, hop: usize, time_to_go: usize) -> f64 {
        self.rows[hop - 1][time_to_go]
    }

    /// Value of a fresh packet with the given relative deadline.
    pub fn source_value(&self, deadline: usize) -> f64 {
        self.rows[0][deadline.min(self.max_deadline)]
    }

    /// Number of `(i, s)` cells the backward pass evaluated.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Attempt branch minus idle branch at `(hop, s)`, for `hop <= L`, `s >= 1`:
    /// `-λ + p·(V(i+1, s-1) - V(i, s-1))`.
    pub fn branch_margin(&self, hop: usize, time_to_go: usize) -> f64 {
        let h = self.hop_charge(hop);
        let idle = self.value(hop, time_to_go - 1);
        let advance = self.value(hop + 1, time_to_go - 1);
        -h.price + h.reliability * (advance - idle)
    }

    pub fn is_feasible(&self, hop: usize, time_to_go: usize) -> bool {
        hop <= self.hop_count() && time_to_go + hop > self.hop_count()
    }
}

/// Solves the per-packet DP for `route` at `prices`.
///
/// Cells are filled for `i = L, ..., 1` and ascending `s`, giving exactly
/// `L·Δ` interior evaluations. With `Δ < L` the source row is all zero; that
/// is a valid result, not an error.
pub fn solve_value_table(
    route: &Route,
    alpha: f64,
    prices: &PriceVector,
    max_deadline: usize,
) -> Result<ValueTable> {
    solve_value_table_for(FlowId(0), route, alpha, prices, max_deadline)
}

pub fn solve_value_table_for(
    flow: FlowId,
    route: &Route,
    alpha: f64,
    prices: &PriceVector,
    max_deadline: usize,
) -> Result<ValueTable> {
    let hops = route
        .hops()
        .iter()
        .map(|h| {
            let price = *prices
                .lambda
                .get(h.tail.0)
                .ok_or(Error::UnknownNode(h.tail))?;
            if !(price.is_finite() && price >= 0.0) {
                return Err(Error::Precondition(format!(
                    "price {price} at {} must be nonnegative",
                    h.tail
                )));
            }
            Ok(HopCharge {
                node: h.tail,
                reliability: h.reliability,
                price,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let len = hops.len();
    let mut rows = vec![vec![0.0; max_deadline + 1]; len + 1];
    rows[len].fill(alpha);

    let mut evaluations = 0;
    for i in (1..=len).rev() {
        let HopCharge {
            reliability: p,
            price,
            ..
        } = hops[i - 1];
        for s in 1..=max_deadline {
            evaluations += 1;
            if s <= len - i {
                continue;
            }
            let idle = rows[i - 1][s - 1];
            let attempt = -price + p * rows[i][s - 1] + (1.0 - p) * idle;
            rows[i - 1][s] = idle.max(attempt);
        }
    }

    Ok(ValueTable {
        flow,
        alpha,
        hops,
        max_deadline,
        rows,
        evaluations,
    })
}

/// How to set φ at states where both branches are within [`TIE_EPSILON`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    #[default]
    Idle,
    Attempt,
    Probability(f64),
}

impl TieRule {
    pub fn probability(self) -> f64 {
        match self {
            TieRule::Idle => 0.0,
            TieRule::Attempt => 1.0,
            TieRule::Probability(q) => q.clamp(0.0, 1.0),
        }
    }
}

/// Attempt probabilities φ(hop, time_to_go).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub flow: FlowId,
    max_deadline: usize,
    // phi[i - 1][s], i in 1..=L
    phi: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn from_rows(flow: FlowId, phi: Vec<Vec<f64>>) -> Self {
        let max_deadline = phi.first().map_or(0, |r| r.len().saturating_sub(1));
        Self {
            flow,
            max_deadline,
            phi,
        }
    }

    /// Never attempts.
    pub fn idle(flow: FlowId, hops: usize, max_deadline: usize) -> Self {
        Self {
            flow,
            max_deadline,
            phi: vec![vec![0.0; max_deadline + 1]; hops],
        }
    }

    pub fn hop_count(&self) -> usize {
        self.phi.len()
    }

    pub fn max_deadline(&self) -> usize {
        self.max_deadline
    }

    pub fn phi(&self, hop: usize, time_to_go: usize) -> f64 {
        self.phi[hop - 1][time_to_go]
    }

    pub fn get(&self, hop: usize, time_to_go: usize) -> Option<f64> {
        if hop == 0 {
            return None;
        }
        self.phi.get(hop - 1)?.get(time_to_go).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.phi
    }
}

/// φ from a value table with one tie rule everywhere.
pub fn policy_from_table(vt: &ValueTable, tie_rule: TieRule) -> PolicyTable {
    let q = tie_rule.probability();
    policy_from_table_with(vt, |_| q)
}

/// φ from a value table, with the tie probability chosen per hop.
pub fn policy_from_table_with(vt: &ValueTable, tie_at_hop: impl Fn(usize) -> f64) -> PolicyTable {
    let len = vt.hop_count();
    let mut phi = vec![vec![0.0; vt.max_deadline + 1]; len];
    for (i, row) in phi.iter_mut().enumerate().map(|(k, r)| (k + 1, r)) {
        let tie = tie_at_hop(i).clamp(0.0, 1.0);
        for s in (len - i + 1)..=vt.max_deadline {
            let margin = vt.branch_margin(i, s);
            row[s] = if margin > TIE_EPSILON {
                1.0
            } else if margin < -TIE_EPSILON {
                0.0
            } else {
                tie
            };
        }
    }
    PolicyTable {
        flow: vt.flow,
        max_deadline: vt.max_deadline,
        phi,
    }
}

/// Attempt iff `uniform_draw < φ(hop, time_to_go)`.
pub fn attempt_decision(
    pt: &PolicyTable,
    hop: usize,
    time_to_go: usize,
    uniform_draw: f64,
) -> Result<Action> {
    let phi = pt
        .get(hop, time_to_go)
        .ok_or(Error::StateOutOfRange { hop, time_to_go })?;
    Ok(if uniform_draw < phi {
        Action::Attempt
    } else {
        Action::Idle
    })
}

/// Probability that an always-attempting packet starting at hop 1 is delivered
/// within `time_to_go` slots.
pub fn delivery_probability(route: &Route, time_to_go: usize) -> f64 {
    let len = route.len();
    // mass[j]: probability of having completed j hops
    let mut mass = vec![0.0; len + 1];
    mass[0] = 1.0;
    for _ in 0..time_to_go {
        for j in (0..len).rev() {
            let moved = mass[j] * route.hops()[j].reliability;
            mass[j] -= moved;
            mass[j + 1] += moved;
        }
    }
    mass[len]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prices(v: &[f64]) -> PriceVector {
        PriceVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_link_zero_price() {
        let vt = solve_value_table(&Route::chain(&[0.5]), 1.0, &prices(&[0.0, 0.0]), 2).unwrap();
        assert_eq!(vt.value(1, 1), 0.5);
        assert_eq!(vt.value(1, 2), 0.75);
    }

    #[test]
    fn single_link_priced() {
        // frozen from exhaustive enumeration of the four attempt/idle policies
        let vt = solve_value_table(&Route::chain(&[0.5]), 1.0, &prices(&[0.3, 0.0]), 2).unwrap();
        assert!((vt.value(1, 1) - 0.2).abs() < 1e-15);
        assert!((vt.value(1, 2) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn boundary_is_zero() {
        let route = Route::chain(&[0.7, 0.4, 0.9]);
        let vt = solve_value_table(&route, 2.0, &prices(&[0.1, 0.2, 0.05, 0.0]), 5).unwrap();
        for i in 1..=3 {
            for s in 0..=(3 - i) {
                assert_eq!(vt.value(i, s), 0.0, "V({i},{s})");
            }
        }
        for s in 0..=5 {
            assert_eq!(vt.value(4, s), 2.0);
        }
        assert_eq!(vt.evaluations(), 3 * 5);
    }

    #[test]
    fn deterministic_two_hop() {
        let vt = solve_value_table(&Route::chain(&[1.0, 1.0]), 1.0, &prices(&[0.0; 3]), 2).unwrap();
        assert_eq!(vt.value(1, 2), 1.0);
    }

    #[test]
    fn short_horizon_source_row_is_zero() {
        let route = Route::chain(&[0.9, 0.9, 0.9]);
        let vt = solve_value_table(&route, 1.0, &prices(&[0.0; 4]), 2).unwrap();
        assert!((0..=2).all(|s| vt.value(1, s) == 0.0));
    }

    #[test]
    fn negative_price_rejected() {
        assert!(PriceVector::new(vec![0.0, -0.1]).is_err());
        let bad = PriceVector {
            lambda: vec![-1.0, 0.0],
        };
        assert!(solve_value_table(&Route::chain(&[0.5]), 1.0, &bad, 2).is_err());
    }

    #[test]
    fn policy_examples() {
        let route = Route::chain(&[0.5]);
        let vt = solve_value_table(&route, 1.0, &prices(&[0.3, 0.0]), 2).unwrap();
        let pt = policy_from_table(&vt, TieRule::Idle);
        assert_eq!(pt.phi(1, 1), 1.0);

        let vt = solve_value_table(&route, 1.0, &prices(&[0.6, 0.0]), 2).unwrap();
        let pt = policy_from_table(&vt, TieRule::Attempt);
        assert_eq!(pt.phi(1, 1), 0.0);
        assert!((vt.branch_margin(1, 1) + 0.1).abs() < 1e-15);

        let vt = solve_value_table(&Route::chain(&[0.5, 0.5]), 1.0, &prices(&[0.0; 3]), 3).unwrap();
        let pt = policy_from_table(&vt, TieRule::Attempt);
        assert_eq!(pt.phi(1, 1), 0.0);
        assert_eq!(pt.phi(2, 0), 0.0);
    }

    #[test]
    fn tie_rules() {
        // p = 0 makes every feasible state an exact tie
        let vt = solve_value_table(&Route::chain(&[0.0]), 1.0, &prices(&[0.0, 0.0]), 3).unwrap();
        assert_eq!(policy_from_table(&vt, TieRule::Idle).phi(1, 2), 0.0);
        assert_eq!(policy_from_table(&vt, TieRule::Attempt).phi(1, 2), 1.0);
        assert_eq!(policy_from_table(&vt, TieRule::Probability(0.25)).phi(1, 2), 0.25);
    }

    #[test]
    fn decisions() {
        let pt = PolicyTable::from_rows(FlowId(0), vec![vec![0.0, 1.0, 0.5]]);
        assert_eq!(attempt_decision(&pt, 1, 1, 0.999).unwrap(), Action::Attempt);
        assert_eq!(attempt_decision(&pt, 1, 0, 0.0).unwrap(), Action::Idle);
        assert_eq!(attempt_decision(&pt, 1, 2, 0.4).unwrap(), Action::Attempt);
        assert_eq!(attempt_decision(&pt, 1, 2, 0.6).unwrap(), Action::Idle);
        assert!(matches!(
            attempt_decision(&pt, 2, 1, 0.1),
            Err(Error::StateOutOfRange { .. })
        ));
        assert!(attempt_decision(&pt, 1, 3, 0.1).is_err());
    }

    #[test]
    fn delivery_closed_forms() {
        assert_eq!(delivery_probability(&Route::chain(&[0.5]), 2), 0.75);
        assert_eq!(delivery_probability(&Route::chain(&[1.0, 1.0]), 2), 1.0);
        assert_eq!(delivery_probability(&Route::chain(&[1.0, 1.0]), 1), 0.0);
        // 2 successes needed in 3 fair trials: 4 of the 8 paths
        assert_eq!(delivery_probability(&Route::chain(&[0.5, 0.5]), 3), 0.5);
    }
}
