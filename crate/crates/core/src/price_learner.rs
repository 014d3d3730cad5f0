//! Node-price learning by projected subgradient descent on the dual.
//!
//! At prices λ the dual is `D(λ) = Σ_f r_f·E_δ[V_f(1, δ)] + Σ_v λ_v M_v`, and
//! `g_v = M_v - Σ_f r_f·τ(f, v)` is a subgradient, where `τ(f, v)` is the
//! expected number of attempts one packet of flow `f` makes at node `v` under
//! the price-optimal policy (ties idle). Offline training computes `τ`
//! exactly; online training has each node measure its own attempt rate.
//!
//! With deterministic tie-breaking the iterates settle into oscillating around
//! a tie, and the policy at any single iterate is either over budget or leaves
//! budget unused. [`recover_tie_probabilities`] picks the tie-state
//! randomization per node so that usage meets the budget.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{DeadlineDistribution, FlowId, NodeId, Route, ValidatedSpec};
use crate::packet_dp::{
    policy_from_table, solve_value_table_for, PolicyTable, PriceVector, TieRule, ValueTable,
    TIE_EPSILON,
};
use crate::policies::PolicyBundle;
use crate::sim_engine::Simulator;

/// Expected per-packet attempts and delivery probability for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowUsage {
    pub flow: FlowId,
    /// `(node, expected attempts per packet)`, one entry per hop.
    pub attempts: Vec<(NodeId, f64)>,
    pub delivery_probability: f64,
}

/// τ̃(f, v) per flow plus rate-weighted per-node totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedUsage {
    /// `per_packet[f][v]`
    pub per_packet: Vec<Vec<f64>>,
    /// `Σ_f r_f · per_packet[f][v]`
    pub totals: Vec<f64>,
}

/// Forward propagation of the packet state distribution under `pt`, starting
/// at hop 1 with time-to-go drawn from `deadlines`.
pub fn expected_usage_per_packet(
    pt: &PolicyTable,
    route: &Route,
    deadlines: &DeadlineDistribution,
) -> FlowUsage {
    let len = route.len();
    let horizon = pt.max_deadline();
    // mass[i][s], i in 1..=len
    let mut mass = vec![vec![0.0; horizon + 1]; len + 1];
    for &(d, p) in &deadlines.support {
        mass[1][d.min(horizon)] += p;
    }
    let mut attempts = vec![0.0; len];
    let mut delivered = 0.0;
    for s in (1..=horizon).rev() {
        for i in 1..=len {
            let m = mass[i][s];
            if m == 0.0 || s + i <= len {
                continue;
            }
            let tried = m * pt.phi(i, s);
            attempts[i - 1] += tried;
            let ok = tried * route.hop(i).reliability;
            if i == len {
                delivered += ok;
            } else {
                mass[i + 1][s - 1] += ok;
            }
            mass[i][s - 1] += m - ok;
        }
    }
    FlowUsage {
        flow: pt.flow,
        attempts: route
            .hops()
            .iter()
            .zip(attempts)
            .map(|(h, a)| (h.tail, a))
            .collect(),
        delivery_probability: delivered,
    }
}

pub fn expected_usage(spec: &ValidatedSpec, policies: &[PolicyTable]) -> ExpectedUsage {
    let nodes = spec.num_nodes();
    let mut per_packet = vec![vec![0.0; nodes]; spec.num_flows()];
    let mut totals = vec![0.0; nodes];
    for (f, pt) in spec.flows().iter().zip(policies) {
        let row = expected_usage_per_packet(pt, spec.route(f.id), &f.deadline);
        let rate = f.arrival.mean_rate();
        for (node, a) in row.attempts {
            per_packet[f.id.0][node.0] += a;
            totals[node.0] += rate * a;
        }
    }
    ExpectedUsage { per_packet, totals }
}

/// `g_v = M_v - Σ_f r_f τ̃(f, v)`.
pub fn usage_gradient(spec: &ValidatedSpec, usage: &ExpectedUsage) -> Vec<f64> {
    gradient_from_totals(spec, &usage.totals)
}

fn gradient_from_totals(spec: &ValidatedSpec, totals: &[f64]) -> Vec<f64> {
    spec.nodes()
        .iter()
        .zip(totals)
        .map(|(n, u)| n.budget - u)
        .collect()
}

/// Step size `a0 / k^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a0: f64,
    pub exponent: f64,
}

impl StepSchedule {
    /// `a0 = 1 / max_v M_v`, `exponent = 1/2`.
    pub fn for_spec(spec: &ValidatedSpec) -> Self {
        let max_budget = spec.budgets().into_iter().fold(0.0, f64::max);
        Self {
            a0: 1.0 / max_budget,
            exponent: 0.5,
        }
    }

    pub fn step(&self, k: usize) -> f64 {
        self.a0 / (k as f64).powf(self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    pub prices: PriceVector,
    /// Steps taken so far.
    pub k: usize,
    pub schedule: StepSchedule,
    pub gradients: Vec<Vec<f64>>,
}

impl LearnerState {
    pub fn new(prices: PriceVector, schedule: StepSchedule) -> Self {
        Self {
            prices,
            k: 0,
            schedule,
            gradients: Vec::new(),
        }
    }
}

/// `λ_v ← max(0, λ_v − α_k g_v)` with `α_k = a0 / k^exponent`, `k` 1-based.
pub fn subgradient_step(state: LearnerState, gradient: &[f64]) -> LearnerState {
    let k = state.k + 1;
    let step = state.schedule.step(k);
    let lambda = state
        .prices
        .lambda
        .iter()
        .zip(gradient)
        .map(|(l, g)| (l - step * g).max(0.0))
        .collect();
    let mut gradients = state.gradients;
    gradients.push(gradient.to_vec());
    LearnerState {
        prices: PriceVector { lambda },
        k,
        schedule: state.schedule,
        gradients,
    }
}

/// Value tables for every flow at `prices`, each sized to the flow's Δ.
pub fn solve_tables(spec: &ValidatedSpec, prices: &PriceVector) -> Result<Vec<ValueTable>> {
    spec.flows()
        .iter()
        .map(|f| {
            solve_value_table_for(
                f.id,
                spec.route(f.id),
                f.weight,
                prices,
                f.deadline.max_deadline(),
            )
        })
        .collect()
}

/// Deadline-averaged source value `E_δ[V_f(1, δ)]`.
pub fn per_packet_value(vt: &ValueTable, deadlines: &DeadlineDistribution) -> f64 {
    deadlines
        .support
        .iter()
        .map(|&(d, p)| p * vt.source_value(d))
        .sum()
}

fn dual_from_tables(spec: &ValidatedSpec, prices: &PriceVector, tables: &[ValueTable]) -> f64 {
    let packets: f64 = spec
        .flows()
        .iter()
        .zip(tables)
        .map(|(f, vt)| f.arrival.mean_rate() * per_packet_value(vt, &f.deadline))
        .sum();
    let priced: f64 = prices
        .lambda
        .iter()
        .zip(spec.nodes())
        .map(|(l, n)| l * n.budget)
        .sum();
    packets + priced
}

pub fn dual_value(spec: &ValidatedSpec, prices: &PriceVector) -> Result<f64> {
    check_prices(spec, prices)?;
    let tables = solve_tables(spec, prices)?;
    Ok(dual_from_tables(spec, prices, &tables))
}

fn check_prices(spec: &ValidatedSpec, prices: &PriceVector) -> Result<()> {
    if prices.len() != spec.num_nodes() {
        return Err(Error::Precondition(format!(
            "{} prices for {} nodes",
            prices.len(),
            spec.num_nodes()
        )));
    }
    PriceVector::new(prices.lambda.clone()).map(|_| ())
}

/// Everything the learner needs at one price vector.
#[derive(Debug, Clone)]
pub struct DualEvaluation {
    pub tables: Vec<ValueTable>,
    /// Ties idle.
    pub policies: Vec<PolicyTable>,
    pub usage: ExpectedUsage,
    pub gradient: Vec<f64>,
    pub dual: f64,
}

pub fn evaluate_dual(spec: &ValidatedSpec, prices: &PriceVector) -> Result<DualEvaluation> {
    check_prices(spec, prices)?;
    let tables = solve_tables(spec, prices)?;
    let policies: Vec<PolicyTable> = tables
        .iter()
        .map(|vt| policy_from_table(vt, TieRule::Idle))
        .collect();
    let usage = expected_usage(spec, &policies);
    let gradient = usage_gradient(spec, &usage);
    let dual = dual_from_tables(spec, prices, &tables);
    Ok(DualEvaluation {
        tables,
        policies,
        usage,
        gradient,
        dual,
    })
}

/// One row of a training trace: prices at iteration `k`, the subgradient
/// there, and the dual value there.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub prices: Vec<f64>,
    pub gradient: Vec<f64>,
    pub dual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    /// Build the final tables with per-node tie randomization.
    pub recovery: bool,
    /// Fraction of the final iterates scanned for flipping decisions.
    pub tail_fraction: f64,
    pub converge_tol: f64,
    pub converge_window: usize,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            recovery: true,
            tail_fraction: 0.2,
            converge_tol: 1e-4,
            converge_window: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub state: LearnerState,
    pub trace: Vec<IterationRecord>,
    /// Tables for the final prices (with tie randomization if enabled).
    pub policies: Vec<PolicyTable>,
    /// Tie probability per node; 1 where nothing is contested.
    pub tie_probabilities: Vec<f64>,
    pub converged_at: Option<usize>,
}

/// Up to `iterations` rounds of solve → usage → gradient → step. Stops early
/// once the price change stays below `converge_tol` for `converge_window`
/// consecutive steps.
pub fn run_offline_iteration(
    spec: &ValidatedSpec,
    init: PriceVector,
    schedule: StepSchedule,
    iterations: usize,
    options: &TrainingOptions,
) -> Result<OfflineOutcome> {
    if iterations == 0 {
        return Err(Error::Precondition("need at least one iteration".into()));
    }
    check_prices(spec, &init)?;
    let tail_len = ((iterations as f64 * options.tail_fraction).ceil() as usize).max(1);
    let mut tail: VecDeque<Vec<PolicyTable>> = VecDeque::with_capacity(tail_len + 1);
    let mut state = LearnerState::new(init, schedule);
    let mut trace = Vec::with_capacity(iterations);
    let mut quiet = 0;
    let mut converged_at = None;

    for _ in 0..iterations {
        let eval = evaluate_dual(spec, &state.prices)?;
        trace.push(IterationRecord {
            k: state.k + 1,
            prices: state.prices.lambda.clone(),
            gradient: eval.gradient.clone(),
            dual: eval.dual,
        });
        tail.push_back(eval.policies);
        if tail.len() > tail_len {
            tail.pop_front();
        }
        let before = state.prices.clone();
        state = subgradient_step(state, &eval.gradient);
        let moved = state.prices.max_abs_diff(&before);
        quiet = if moved < options.converge_tol { quiet + 1 } else { 0 };
        if quiet >= options.converge_window {
            converged_at = Some(state.k);
            break;
        }
    }

    let final_eval = evaluate_dual(spec, &state.prices)?;
    let (policies, tie_probabilities) = if options.recovery {
        let history: Vec<Vec<PolicyTable>> = tail.into_iter().collect();
        let contested = contested_states(&final_eval.tables, &final_eval.policies, &history);
        recover_tie_probabilities(spec, &final_eval.policies, &contested)
    } else {
        (final_eval.policies, vec![1.0; spec.num_nodes()])
    };

    Ok(OfflineOutcome {
        state,
        trace,
        policies,
        tie_probabilities,
        converged_at,
    })
}

/// `contested[f][i-1][s]` is true where the attempt decision is exactly tied
/// at the final tables or changed across `history`.
pub fn contested_states(
    tables: &[ValueTable],
    finals: &[PolicyTable],
    history: &[Vec<PolicyTable>],
) -> Vec<Vec<Vec<bool>>> {
    tables
        .iter()
        .zip(finals)
        .enumerate()
        .map(|(f, (vt, fin))| {
            let len = vt.hop_count();
            (1..=len)
                .map(|i| {
                    (0..=vt.max_deadline())
                        .map(|s| {
                            if !vt.is_feasible(i, s) {
                                return false;
                            }
                            let tie = vt.branch_margin(i, s).abs() <= TIE_EPSILON;
                            let flipped = history.iter().any(|it| it[f].phi(i, s) != fin.phi(i, s));
                            tie || flipped
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn apply_ties(
    base: &[PolicyTable],
    contested: &[Vec<Vec<bool>>],
    spec: &ValidatedSpec,
    q: &[f64],
) -> Vec<PolicyTable> {
    base.iter()
        .zip(contested)
        .zip(spec.flows())
        .map(|((pt, marks), f)| {
            let route = spec.route(f.id);
            let rows = pt
                .rows()
                .iter()
                .zip(marks)
                .enumerate()
                .map(|(k, (row, m))| {
                    let node = route.hop(k + 1).tail;
                    row.iter()
                        .zip(m)
                        .map(|(&phi, &c)| if c { q[node.0] } else { phi })
                        .collect()
                })
                .collect();
            PolicyTable::from_rows(pt.flow, rows)
        })
        .collect()
}

/// Sets one tie probability `q_v` per node: the largest value in `[0, 1]`
/// whose expected usage stays within `M_v`, found by bisection and swept
/// over nodes until stable.
pub fn recover_tie_probabilities(
    spec: &ValidatedSpec,
    base: &[PolicyTable],
    contested: &[Vec<Vec<bool>>],
) -> (Vec<PolicyTable>, Vec<f64>) {
    const ROUNDS: usize = 50;
    const BISECTIONS: usize = 60;
    let nodes = spec.num_nodes();
    let mut involved = vec![false; nodes];
    for (marks, f) in contested.iter().zip(spec.flows()) {
        let route = spec.route(f.id);
        for (k, m) in marks.iter().enumerate() {
            if m.iter().any(|&c| c) {
                involved[route.hop(k + 1).tail.0] = true;
            }
        }
    }
    let mut q = vec![1.0; nodes];
    let usage_at = |q: &[f64], v: usize| {
        expected_usage(spec, &apply_ties(base, contested, spec, q)).totals[v]
    };
    for _ in 0..ROUNDS {
        let mut change: f64 = 0.0;
        for v in (0..nodes).filter(|&v| involved[v]) {
            let budget = spec.budget(NodeId(v)) * (1.0 + 1e-12);
            let mut trial = q.clone();
            trial[v] = 1.0;
            let new_q = if usage_at(&trial, v) <= budget {
                1.0
            } else {
                trial[v] = 0.0;
                if usage_at(&trial, v) > budget {
                    0.0
                } else {
                    let (mut lo, mut hi) = (0.0, 1.0);
                    for _ in 0..BISECTIONS {
                        trial[v] = 0.5 * (lo + hi);
                        if usage_at(&trial, v) <= budget {
                            lo = trial[v];
                        } else {
                            hi = trial[v];
                        }
                    }
                    lo
                }
            };
            change = change.max((new_q - q[v]).abs());
            q[v] = new_q;
        }
        if change < 1e-12 {
            break;
        }
    }
    (apply_ties(base, contested, spec, &q), q)
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub state: LearnerState,
    pub trace: Vec<IterationRecord>,
}

/// Online learning against a running simulator. Each update installs the
/// tables for the current prices (ties idle), lets `settle` slots pass
/// unmeasured, then measures each node's attempts per slot over `window`
/// slots and takes one projected step with `g_v = M_v - observed_v`.
pub fn run_online_iteration(
    spec: &ValidatedSpec,
    sim: &mut Simulator,
    init: PriceVector,
    window: u64,
    settle: u64,
    schedule: StepSchedule,
    iterations: usize,
) -> Result<OnlineOutcome> {
    if window == 0 {
        return Err(Error::Precondition("window must be at least one slot".into()));
    }
    check_prices(spec, &init)?;
    let mut state = LearnerState::new(init, schedule);
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let eval = evaluate_dual(spec, &state.prices)?;
        sim.set_bundle(PolicyBundle::dual(spec, eval.policies)?)?;
        sim.advance(settle)?;
        let before = sim.metrics().attempts.clone();
        sim.advance(window)?;
        let observed: Vec<f64> = sim
            .metrics()
            .attempts
            .iter()
            .zip(&before)
            .map(|(a, b)| (a - b) as f64 / window as f64)
            .collect();
        let gradient = gradient_from_totals(spec, &observed);
        trace.push(IterationRecord {
            k: state.k + 1,
            prices: state.prices.lambda.clone(),
            gradient: gradient.clone(),
            dual: eval.dual,
        });
        state = subgradient_step(state, &gradient);
    }
    Ok(OnlineOutcome { state, trace })
}
