//! Slotted packet-level simulator.
//!
//! Slot order:
//! 1. arrivals are drawn per flow, each with an i.i.d. relative deadline;
//! 2. every node picks its attempt set from its resident packets;
//! 3. each attempt succeeds independently with the link reliability;
//! 4. time-to-go drops by one; delivered packets leave, and packets that can no
//!    longer make their deadline are dropped;
//! 5. counters are updated.
//!
//! A packet relayed in slot `t` is first eligible at the next node in `t + 1`.
//! Randomness comes from four independent substreams (arrivals, deadlines,
//! channel, policy). The channel stream is consumed once per resident packet
//! per slot in queue order, attempted or not, so two policies that attempt the
//! same packets see the same outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{ArrivalProcess, FlowId, NodeId, ValidatedSpec};
use crate::packet_dp::{attempt_decision, Action};
use crate::policies::{edf_select, BudgetEnforcement, DecisionSource, Packet, PolicyBundle, TokenBucket};

const ARRIVAL_STREAM: u64 = 0;
const DEADLINE_STREAM: u64 = 1;
const CHANNEL_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;

/// Named, independent random substreams derived from one seed.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub seed: u64,
    pub arrivals: ChaCha8Rng,
    pub deadlines: ChaCha8Rng,
    pub channel: ChaCha8Rng,
    pub policy: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let sub = |stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Self {
            seed,
            arrivals: sub(ARRIVAL_STREAM),
            deadlines: sub(DEADLINE_STREAM),
            channel: sub(CHANNEL_STREAM),
            policy: sub(POLICY_STREAM),
        }
    }
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub slots: u64,
    pub arrivals: Vec<u64>,
    pub delivered: Vec<u64>,
    pub dropped: Vec<u64>,
    /// Attempts per node, summed over its out-links.
    pub attempts: Vec<u64>,
}

impl SimMetrics {
    fn new(flows: usize, nodes: usize) -> Self {
        Self {
            slots: 0,
            arrivals: vec![0; flows],
            delivered: vec![0; flows],
            dropped: vec![0; flows],
            attempts: vec![0; nodes],
        }
    }

    /// Deliveries per slot of one flow (q_f).
    pub fn throughput(&self, flow: FlowId) -> f64 {
        self.delivered[flow.0] as f64 / self.slots as f64
    }

    pub fn throughputs(&self) -> Vec<f64> {
        (0..self.delivered.len()).map(|f| self.throughput(FlowId(f))).collect()
    }

    /// Attempts per slot at a node.
    pub fn usage(&self, node: NodeId) -> f64 {
        self.attempts[node.0] as f64 / self.slots as f64
    }

    pub fn usages(&self) -> Vec<f64> {
        (0..self.attempts.len()).map(|v| self.usage(NodeId(v))).collect()
    }

    pub fn weighted_throughput(&self, weights: &[f64]) -> f64 {
        self.throughputs().iter().zip(weights).map(|(q, a)| q * a).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub slots: u64,
    pub weighted_throughput: f64,
    pub throughputs: Vec<f64>,
    pub usages: Vec<f64>,
    pub budgets: Vec<f64>,
    /// `M_v - usage_v`; negative means the budget was exceeded.
    pub slack: Vec<f64>,
    pub drop_fractions: Vec<f64>,
}

pub fn metrics_summary(metrics: &SimMetrics, spec: &ValidatedSpec) -> Result<MetricsReport> {
    if metrics.slots == 0 {
        return Err(Error::Precondition("metrics cover zero slots".into()));
    }
    let weights: Vec<f64> = spec.flows().iter().map(|f| f.weight).collect();
    let budgets = spec.budgets();
    let usages = metrics.usages();
    Ok(MetricsReport {
        slots: metrics.slots,
        weighted_throughput: metrics.weighted_throughput(&weights),
        throughputs: metrics.throughputs(),
        slack: budgets.iter().zip(&usages).map(|(m, u)| m - u).collect(),
        usages,
        budgets,
        drop_fractions: metrics
            .dropped
            .iter()
            .zip(&metrics.arrivals)
            .map(|(&d, &a)| if a == 0 { 0.0 } else { d as f64 / a as f64 })
            .collect(),
    })
}

/// One packet's decision in one slot (recorded on request).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub packet: u64,
    pub flow: FlowId,
    pub node: NodeId,
    pub hop: usize,
    pub time_to_go: usize,
    pub attempted: bool,
    pub success: bool,
}

/// Per-slot counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotEvents {
    pub slot: u64,
    pub arrivals: Vec<u64>,
    pub delivered: Vec<u64>,
    pub dropped: Vec<u64>,
    pub attempts: Vec<u64>,
    pub decisions: Vec<Decision>,
}

enum ArrivalSampler {
    Batch(u64),
    Bernoulli(f64),
    Poisson(Poisson<f64>),
}

impl ArrivalSampler {
    fn new(process: &ArrivalProcess) -> Result<Self> {
        Ok(match *process {
            ArrivalProcess::Batch { count } => ArrivalSampler::Batch(u64::from(count)),
            ArrivalProcess::Bernoulli { prob } => ArrivalSampler::Bernoulli(prob),
            ArrivalProcess::Poisson { rate } => ArrivalSampler::Poisson(
                Poisson::new(rate).map_err(|e| Error::Precondition(e.to_string()))?,
            ),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        match self {
            ArrivalSampler::Batch(n) => *n,
            ArrivalSampler::Bernoulli(q) => u64::from(rng.random::<f64>() < *q),
            ArrivalSampler::Poisson(d) => d.sample(rng) as u64,
        }
    }
}

pub struct Simulator {
    spec: ValidatedSpec,
    bundle: PolicyBundle,
    rng: RngStream,
    slot: u64,
    next_id: u64,
    queues: Vec<Vec<Packet>>,
    buckets: Vec<TokenBucket>,
    metrics: SimMetrics,
    arrivals: Vec<ArrivalSampler>,
    // cumulative deadline distribution per flow
    deadline_cdf: Vec<Vec<(usize, f64)>>,
    hop_counts: Vec<usize>,
    record_decisions: bool,
}

impl Simulator {
    pub fn new(spec: &ValidatedSpec, bundle: PolicyBundle, seed: u64) -> Result<Self> {
        let arrivals = spec
            .flows()
            .iter()
            .map(|f| ArrivalSampler::new(&f.arrival))
            .collect::<Result<Vec<_>>>()?;
        let deadline_cdf = spec
            .flows()
            .iter()
            .map(|f| {
                let mut acc = 0.0;
                f.deadline
                    .support
                    .iter()
                    .map(|&(d, p)| {
                        acc += p;
                        (d, acc)
                    })
                    .collect()
            })
            .collect();
        let sim = Self {
            hop_counts: spec.flows().iter().map(|f| spec.hop_count(f.id)).collect(),
            buckets: spec.nodes().iter().map(|n| TokenBucket::new(n.budget)).collect(),
            queues: vec![Vec::new(); spec.num_nodes()],
            metrics: SimMetrics::new(spec.num_flows(), spec.num_nodes()),
            spec: spec.clone(),
            bundle,
            rng: RngStream::new(seed),
            slot: 0,
            next_id: 0,
            arrivals,
            deadline_cdf,
            record_decisions: false,
        };
        sim.check_bundle(&sim.bundle)?;
        Ok(sim)
    }

    pub fn record_decisions(mut self, on: bool) -> Self {
        self.record_decisions = on;
        self
    }

    fn check_bundle(&self, bundle: &PolicyBundle) -> Result<()> {
        if let DecisionSource::DualPrice(tables) = &bundle.source {
            for f in self.spec.flows() {
                let table = tables.get(f.id.0).ok_or(Error::MissingTable(f.id))?;
                if table.hop_count() != self.hop_counts[f.id.0]
                    || table.max_deadline() < f.deadline.max_deadline()
                {
                    return Err(Error::Precondition(format!(
                        "policy table for {} does not cover its route and deadlines",
                        f.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Swaps the policy in place; resident packets and counters are kept.
    pub fn set_bundle(&mut self, bundle: PolicyBundle) -> Result<()> {
        self.check_bundle(&bundle)?;
        self.bundle = bundle;
        Ok(())
    }

    pub fn spec(&self) -> &ValidatedSpec {
        &self.spec
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    /// Resident packets per node, in queue order.
    pub fn queues(&self) -> &[Vec<Packet>] {
        &self.queues
    }

    /// Live packets per flow, counted from the queues.
    pub fn in_flight(&self) -> Vec<u64> {
        let mut counts = vec![0; self.spec.num_flows()];
        for p in self.queues.iter().flatten() {
            counts[p.flow.0] += 1;
        }
        counts
    }

    fn draw_deadline(&mut self, flow: usize) -> usize {
        let cdf = &self.deadline_cdf[flow];
        let u: f64 = self.rng.deadlines.random();
        cdf.iter()
            .find(|(_, c)| u < *c)
            .or(cdf.last())
            .map(|(d, _)| *d)
            .expect("validated deadline support is nonempty")
    }

    pub fn step(&mut self) -> Result<SlotEvents> {
        let flows = self.spec.num_flows();
        let nodes = self.spec.num_nodes();
        let mut ev = SlotEvents {
            slot: self.slot,
            arrivals: vec![0; flows],
            delivered: vec![0; flows],
            dropped: vec![0; flows],
            attempts: vec![0; nodes],
            decisions: Vec::new(),
        };

        for f in 0..flows {
            let n = self.arrivals[f].draw(&mut self.rng.arrivals);
            let source = self.spec.route(FlowId(f)).source().expect("nonempty route");
            for _ in 0..n {
                let deadline = self.draw_deadline(f);
                let packet = Packet {
                    id: self.next_id,
                    flow: FlowId(f),
                    hop: 1,
                    time_to_go: deadline,
                    birth_slot: self.slot,
                };
                self.next_id += 1;
                ev.arrivals[f] += 1;
                if packet.is_feasible(self.hop_counts[f]) {
                    self.queues[source.0].push(packet);
                } else {
                    ev.dropped[f] += 1;
                }
            }
        }

        let mut transit: Vec<(NodeId, Packet)> = Vec::new();
        let mut wanted: Vec<bool> = Vec::new();
        for v in 0..nodes {
            let queue = std::mem::take(&mut self.queues[v]);
            wanted.clear();
            wanted.resize(queue.len(), false);

            let hop_counts = &self.hop_counts;
            match &self.bundle.source {
                DecisionSource::DualPrice(tables) => {
                    for (k, p) in queue.iter().enumerate() {
                        let u: f64 = self.rng.policy.random();
                        wanted[k] = attempt_decision(&tables[p.flow.0], p.hop, p.time_to_go, u)?
                            == Action::Attempt;
                    }
                }
                DecisionSource::Greedy => {
                    for (k, p) in queue.iter().enumerate() {
                        wanted[k] = p.is_feasible(hop_counts[p.flow.0]);
                    }
                }
                DecisionSource::Edf { feasible_only } => {
                    for k in edf_select(&queue, usize::MAX, |f| hop_counts[f.0], *feasible_only) {
                        wanted[k] = true;
                    }
                }
                DecisionSource::Idle => {}
            }

            if self.bundle.enforcement == BudgetEnforcement::TokenBucket {
                let budget = self.buckets[v].begin_slot();
                let n_wanted = wanted.iter().filter(|w| **w).count();
                if n_wanted > budget {
                    let candidates: Vec<Packet> = queue
                        .iter()
                        .zip(&wanted)
                        .filter(|(_, w)| **w)
                        .map(|(p, _)| p.clone())
                        .collect();
                    let positions: Vec<usize> = wanted
                        .iter()
                        .enumerate()
                        .filter(|(_, w)| **w)
                        .map(|(k, _)| k)
                        .collect();
                    wanted.fill(false);
                    for c in edf_select(&candidates, budget, |f| hop_counts[f.0], false) {
                        wanted[positions[c]] = true;
                    }
                }
                self.buckets[v].consume(wanted.iter().filter(|w| **w).count());
            }

            let mut stay = Vec::with_capacity(queue.len());
            for (k, mut p) in queue.into_iter().enumerate() {
                let c: f64 = self.rng.channel.random();
                let attempted = wanted[k];
                let hop = self.spec.route(p.flow).hop(p.hop);
                let success = attempted && c < hop.reliability;
                if attempted {
                    ev.attempts[v] += 1;
                }
                if self.record_decisions {
                    ev.decisions.push(Decision {
                        packet: p.id,
                        flow: p.flow,
                        node: NodeId(v),
                        hop: p.hop,
                        time_to_go: p.time_to_go,
                        attempted,
                        success,
                    });
                }
                if success {
                    p.hop += 1;
                    if p.hop > self.hop_counts[p.flow.0] {
                        ev.delivered[p.flow.0] += 1;
                    } else {
                        transit.push((hop.head, p));
                    }
                } else {
                    stay.push(p);
                }
            }
            self.queues[v] = stay;
        }

        for v in 0..nodes {
            let hop_counts = &self.hop_counts;
            let dropped = &mut ev.dropped;
            self.queues[v].retain_mut(|p| {
                p.time_to_go -= 1;
                let keep = p.is_feasible(hop_counts[p.flow.0]);
                if !keep {
                    dropped[p.flow.0] += 1;
                }
                keep
            });
        }
        for (node, mut p) in transit {
            p.time_to_go -= 1;
            if p.is_feasible(self.hop_counts[p.flow.0]) {
                self.queues[node.0].push(p);
            } else {
                ev.dropped[p.flow.0] += 1;
            }
        }

        let m = &mut self.metrics;
        m.slots += 1;
        for f in 0..flows {
            m.arrivals[f] += ev.arrivals[f];
            m.delivered[f] += ev.delivered[f];
            m.dropped[f] += ev.dropped[f];
        }
        for v in 0..nodes {
            m.attempts[v] += ev.attempts[v];
        }
        self.slot += 1;
        Ok(ev)
    }

    /// Runs `slots` steps, discarding per-slot events.
    pub fn advance(&mut self, slots: u64) -> Result<()> {
        for _ in 0..slots {
            self.step()?;
        }
        Ok(())
    }
}

pub fn run(spec: &ValidatedSpec, bundle: PolicyBundle, slots: u64, seed: u64) -> Result<SimMetrics> {
    run_with_observer(spec, bundle, slots, seed, |_| {})
}

pub fn run_with_observer(
    spec: &ValidatedSpec,
    bundle: PolicyBundle,
    slots: u64,
    seed: u64,
    mut observe: impl FnMut(&SlotEvents),
) -> Result<SimMetrics> {
    if slots == 0 {
        return Err(Error::Precondition("need at least one slot".into()));
    }
    let mut sim = Simulator::new(spec, bundle, seed)?;
    for _ in 0..slots {
        let ev = sim.step()?;
        observe(&ev);
    }
    Ok(sim.metrics)
}
