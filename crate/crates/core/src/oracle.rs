//! Brute-force and Monte Carlo checks for the per-packet DP.
//!
//! Nothing here calls into the backward recursion of [`crate::packet_dp`]:
//! policies are scored by pushing probability mass forward in time, so
//! agreement between the two is a real cross-check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net_model::Route;
use crate::packet_dp::{attempt_decision, solve_value_table, Action, PolicyTable, PriceVector};

/// Largest feasible-state count [`enumerate_best_value`] will accept.
pub const ENUMERATION_STATE_CAP: usize = 20;

const SCORE_TOLERANCE: f64 = 1e-12;

/// A deterministic Markov policy on the feasible states of one packet MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPolicy {
    pub hops: usize,
    pub max_deadline: usize,
    /// `(hop, time_to_go, action)` for every feasible state.
    pub actions: Vec<(usize, usize, Action)>,
}

impl EnumeratedPolicy {
    pub fn action(&self, hop: usize, time_to_go: usize) -> Action {
        self.actions
            .iter()
            .find(|(i, s, _)| *i == hop && *s == time_to_go)
            .map(|(_, _, a)| a.clone())
            .unwrap_or(Action::Idle)
    }

    pub fn attempts(&self) -> usize {
        self.actions
            .iter()
            .filter(|(_, _, a)| *a == Action::Attempt)
            .count()
    }
}

fn feasible_states(hops: usize, max_deadline: usize) -> Vec<(usize, usize)> {
    (1..=hops)
        .flat_map(|i| ((hops - i + 1)..=max_deadline).map(move |s| (i, s)))
        .collect()
}

/// Exact expected reward of a deterministic policy for a packet starting at
/// `(start_hop, start_s)`, by forward propagation of the state distribution.
fn forward_reward(
    route: &Route,
    alpha: f64,
    prices: &PriceVector,
    attempt: &dyn Fn(usize, usize) -> bool,
    start_hop: usize,
    start_s: usize,
) -> f64 {
    let len = route.len();
    // mass[i]: probability the packet is live at hop i (1-based) at the current s
    let mut mass = vec![0.0; len + 2];
    mass[start_hop] = 1.0;
    let mut reward = 0.0;
    for s in (1..=start_s).rev() {
        let mut next = vec![0.0; len + 2];
        for i in 1..=len {
            let m = mass[i];
            if m == 0.0 || s + i <= len {
                continue;
            }
            if attempt(i, s) {
                let hop = route.hop(i);
                reward -= m * prices.get(hop.tail);
                let ok = m * hop.reliability;
                if i == len {
                    reward += alpha * ok;
                } else {
                    next[i + 1] += ok;
                }
                next[i] += m - ok;
            } else {
                next[i] += m;
            }
        }
        mass = next;
    }
    reward
}

/// Best expected reward from `(hop 1, Δ)` over every deterministic Markov
/// policy, together with a maximizer.
///
/// Among policies tied at the source the maximizer is the one with the largest
/// summed value over all feasible start states, then the fewest attempts.
pub fn enumerate_best_value(
    route: &Route,
    alpha: f64,
    prices: &PriceVector,
    max_deadline: usize,
) -> Result<(f64, EnumeratedPolicy)> {
    let len = route.len();
    let states = feasible_states(len, max_deadline);
    if states.len() > ENUMERATION_STATE_CAP {
        return Err(Error::EnumerationCap {
            states: states.len(),
            cap: ENUMERATION_STATE_CAP,
        });
    }
    let index_of = |i: usize, s: usize| states.iter().position(|&st| st == (i, s));

    let score = |mask: u64| {
        let attempt = |i: usize, s: usize| index_of(i, s).is_some_and(|k| mask >> k & 1 == 1);
        forward_reward(route, alpha, prices, &attempt, 1, max_deadline)
    };
    let total_value = |mask: u64| {
        let attempt = |i: usize, s: usize| index_of(i, s).is_some_and(|k| mask >> k & 1 == 1);
        states
            .iter()
            .map(|&(i, s)| forward_reward(route, alpha, prices, &attempt, i, s))
            .sum::<f64>()
    };

    let scores: Vec<f64> = (0..1u64 << states.len()).map(score).collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut chosen: Option<(u64, f64)> = None;
    for (mask, &v) in scores.iter().enumerate() {
        if v < best - SCORE_TOLERANCE {
            continue;
        }
        let mask = mask as u64;
        let total = total_value(mask);
        chosen = match chosen {
            None => Some((mask, total)),
            Some((m, t)) => {
                let better = total > t + SCORE_TOLERANCE
                    || ((total - t).abs() <= SCORE_TOLERANCE && mask.count_ones() < m.count_ones());
                Some(if better { (mask, total) } else { (m, t) })
            }
        };
    }
    let (mask, _) = chosen.expect("at least the all-idle policy exists");

    let actions = states
        .iter()
        .enumerate()
        .map(|(k, &(i, s))| {
            let a = if mask >> k & 1 == 1 {
                Action::Attempt
            } else {
                Action::Idle
            };
            (i, s, a)
        })
        .collect();
    Ok((
        best,
        EnumeratedPolicy {
            hops: len,
            max_deadline,
            actions,
        },
    ))
}

/// Sample mean and standard error of one packet's reward under `pt`, starting
/// at `(hop 1, pt.max_deadline())`. Deterministic given `seed`.
pub fn monte_carlo_packet_reward(
    pt: &PolicyTable,
    route: &Route,
    alpha: f64,
    prices: &PriceVector,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::Precondition("need at least one trial".into()));
    }
    let len = route.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut hop = 1;
        let mut s = pt.max_deadline();
        let mut reward = 0.0;
        while hop <= len && s + hop > len {
            let u: f64 = rng.random();
            let channel: f64 = rng.random();
            if attempt_decision(pt, hop, s, u)? == Action::Attempt {
                let h = route.hop(hop);
                reward -= prices.get(h.tail);
                if channel < h.reliability {
                    hop += 1;
                }
            }
            s -= 1;
        }
        if hop > len {
            reward += alpha;
        }
        sum += reward;
        sum_sq += reward * reward;
    }
    let n = trials as f64;
    let mean = sum / n;
    let std_error = if trials > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_error))
}

/// A random desk-scale per-packet instance.
#[derive(Debug, Clone)]
pub struct PacketInstance {
    pub route: Route,
    pub alpha: f64,
    pub prices: PriceVector,
    pub max_deadline: usize,
}

/// Uniform draws: `L` in `1..=max_hops`, `Δ` in `L..=max_deadline`,
/// `p ~ U[0,1)`, `α ~ U[0.5, 2)`, `λ_v ~ U[0, α/2)`.
pub fn random_instance(rng: &mut impl Rng, max_hops: usize, max_deadline: usize) -> PacketInstance {
    let hops = rng.random_range(1..=max_hops.max(1));
    let max_deadline = rng.random_range(hops..=max_deadline.max(hops));
    let reliabilities: Vec<f64> = (0..hops).map(|_| rng.random()).collect();
    let alpha = rng.random_range(0.5..2.0);
    let lambda = (0..=hops).map(|_| rng.random_range(0.0..alpha / 2.0)).collect();
    PacketInstance {
        route: Route::chain(&reliabilities),
        alpha,
        prices: PriceVector { lambda },
        max_deadline,
    }
}

#[derive(Debug, Clone)]
pub struct CrossCheckReport {
    pub instances: usize,
    pub max_discrepancy: f64,
    pub worst: Option<PacketInstance>,
}

/// Compares the DP source value with exhaustive enumeration on random instances.
pub fn cross_validate(
    instances: usize,
    max_hops: usize,
    max_deadline: usize,
    seed: u64,
) -> Result<CrossCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CrossCheckReport {
        instances,
        max_discrepancy: 0.0,
        worst: None,
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng, max_hops, max_deadline);
        let vt = solve_value_table(&inst.route, inst.alpha, &inst.prices, inst.max_deadline)?;
        let (best, _) =
            enumerate_best_value(&inst.route, inst.alpha, &inst.prices, inst.max_deadline)?;
        let gap = (vt.source_value(inst.max_deadline) - best).abs();
        if gap > report.max_discrepancy || report.worst.is_none() {
            report.max_discrepancy = report.max_discrepancy.max(gap);
            report.worst = Some(inst);
        }
    }
    Ok(report)
}
