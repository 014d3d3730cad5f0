//! Experiment configs, capacity sweeps and result CSVs.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{validate_spec, NetworkSpec, NodeId, ValidatedSpec};
use crate::packet_dp::{PolicyTable, PriceVector};
use crate::policies::{PolicyBundle, PolicyKind};
use crate::price_learner::{
    contested_states, evaluate_dual, recover_tie_probabilities, run_offline_iteration,
    OfflineOutcome, StepSchedule, TrainingOptions,
};
use crate::sim_engine::{run, SimMetrics};

/// The bundled three-flow experiment (`configs/fig3.json`, `s1` budget swept).
pub const FIG3_CONFIG: &str = include_str!("../../../configs/fig3.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub node: NodeRef,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub iters: usize,
    /// Defaults to `1 / max_v M_v` at each sweep point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0: Option<f64>,
    pub exponent: f64,
    pub recovery: bool,
    pub tail_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            a0: None,
            exponent: 0.5,
            recovery: true,
            tail_fraction: 0.2,
        }
    }
}

impl TrainingConfig {
    pub fn schedule(&self, spec: &ValidatedSpec) -> StepSchedule {
        StepSchedule {
            a0: self.a0.unwrap_or_else(|| StepSchedule::for_spec(spec).a0),
            exponent: self.exponent,
        }
    }

    pub fn options(&self) -> TrainingOptions {
        TrainingOptions {
            recovery: self.recovery,
            tail_fraction: self.tail_fraction,
            ..TrainingOptions::default()
        }
    }

    pub fn train(&self, spec: &ValidatedSpec, init: PriceVector) -> Result<OfflineOutcome> {
        run_offline_iteration(spec, init, self.schedule(spec), self.iters, &self.options())
    }
}

fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::Dual, PolicyKind::Edf]
}

fn default_slots() -> u64 {
    100_000
}

fn default_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_slots")]
    pub slots: u64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub training: TrainingConfig,
}

/// A checked config with its validated network.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ValidatedSpec,
    pub sweep_node: Option<NodeId>,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

pub fn parse_config(text: &str) -> Result<Experiment> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| config_error(&e.path().to_string(), e.inner().to_string()))?;
    Experiment::new(config)
}

pub fn fig3() -> Experiment {
    parse_config(FIG3_CONFIG).expect("bundled config is valid")
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let spec = validate_spec(&config.network)?;
        if config.seeds == 0 {
            return Err(config_error("seeds", "need at least one seed"));
        }
        if config.slots == 0 {
            return Err(config_error("slots", "need at least one slot"));
        }
        if config.policies.is_empty() {
            return Err(config_error("policies", "need at least one policy"));
        }
        if config.training.iters == 0 {
            return Err(config_error("training.iters", "need at least one iteration"));
        }
        let sweep_node = match &config.sweep {
            None => None,
            Some(sweep) => {
                let node = match &sweep.node {
                    NodeRef::Id(i) if *i < spec.num_nodes() => Some(NodeId(*i)),
                    NodeRef::Id(_) => None,
                    NodeRef::Name(n) => config.network.resolve_node(n),
                };
                let node = node.ok_or_else(|| {
                    config_error("sweep.node", format!("{:?} is not a node", sweep.node))
                })?;
                if sweep.values.is_empty() {
                    return Err(config_error("sweep.values", "sweep needs at least one value"));
                }
                if let Some(k) = sweep.values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(config_error(
                        &format!("sweep.values[{k}]"),
                        "budget must be positive",
                    ));
                }
                Some(node)
            }
        };
        Ok(Self {
            config,
            spec,
            sweep_node,
        })
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.config.seeds as u64).map(|i| self.config.base_seed + i)
    }
}

/// Tables at fixed prices. With `recovery`, exactly tied states get the
/// per-node tie probabilities that keep expected usage within budget.
pub fn policies_at_prices(
    spec: &ValidatedSpec,
    prices: &PriceVector,
    recovery: bool,
) -> Result<(Vec<PolicyTable>, Vec<f64>)> {
    let eval = evaluate_dual(spec, prices)?;
    if !recovery {
        return Ok((eval.policies, vec![1.0; spec.num_nodes()]));
    }
    let contested = contested_states(&eval.tables, &eval.policies, &[]);
    Ok(recover_tie_probabilities(spec, &eval.policies, &contested))
}

/// The bundle a policy name stands for; `dual` needs trained tables.
pub fn bundle_for(
    kind: PolicyKind,
    spec: &ValidatedSpec,
    trained: Option<&[PolicyTable]>,
) -> Result<PolicyBundle> {
    Ok(match kind {
        PolicyKind::Dual => {
            let tables = trained
                .ok_or_else(|| Error::Precondition("dual policy needs trained tables".into()))?;
            PolicyBundle::dual(spec, tables.to_vec())?
        }
        PolicyKind::Edf => PolicyBundle::edf(),
        PolicyKind::Greedy => PolicyBundle::greedy(),
        PolicyKind::Idle => PolicyBundle::idle(),
    })
}

/// One simulated run at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub policy: PolicyKind,
    pub seed: u64,
    pub weighted_throughput: f64,
    pub throughputs: Vec<f64>,
    pub usages: Vec<f64>,
    /// Trained prices; only dual rows carry them.
    pub prices: Option<Vec<f64>>,
}

impl ResultRow {
    pub fn from_metrics(
        sweep_value: f64,
        policy: PolicyKind,
        seed: u64,
        spec: &ValidatedSpec,
        metrics: &SimMetrics,
        prices: Option<Vec<f64>>,
    ) -> Self {
        let weights: Vec<f64> = spec.flows().iter().map(|f| f.weight).collect();
        Self {
            sweep_value,
            policy,
            seed,
            weighted_throughput: metrics.weighted_throughput(&weights),
            throughputs: metrics.throughputs(),
            usages: metrics.usages(),
            prices,
        }
    }

    fn sort_key(&self, other: &Self) -> Ordering {
        self.sweep_value
            .total_cmp(&other.sweep_value)
            .then(self.policy.cmp(&other.policy))
            .then(self.seed.cmp(&other.seed))
    }
}

/// Trained state at one sweep point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub spec: ValidatedSpec,
    pub training: Option<OfflineOutcome>,
}

/// Trains prices at every sweep value, ascending, each warm-started from the
/// previous point's prices.
pub fn train_sweep_points(exp: &Experiment) -> Result<Vec<SweepPoint>> {
    let node = exp
        .sweep_node
        .ok_or_else(|| config_error("sweep", "config has no sweep section"))?;
    let mut values = exp.config.sweep.as_ref().map(|s| s.values.clone()).unwrap_or_default();
    values.sort_by(f64::total_cmp);
    values.dedup();

    let needs_training = exp.config.policies.contains(&PolicyKind::Dual);
    let mut warm = PriceVector::zeros(exp.spec.num_nodes());
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let spec = exp.spec.with_budget(node, value)?;
        let training = if needs_training {
            let outcome = exp.config.training.train(&spec, warm.clone())?;
            warm = outcome.state.prices.clone();
            Some(outcome)
        } else {
            None
        };
        points.push(SweepPoint {
            value,
            spec,
            training,
        });
    }
    Ok(points)
}

/// Runs every `(sweep value, policy, seed)` combination. Prices are trained
/// sequentially; runs go in parallel on the current rayon pool. Rows come
/// back sorted by value, policy, then seed.
pub fn run_sweep(exp: &Experiment) -> Result<Vec<ResultRow>> {
    let points = train_sweep_points(exp)?;
    let seeds: Vec<u64> = exp.seeds().collect();
    let jobs: Vec<(&SweepPoint, PolicyKind, u64)> = points
        .iter()
        .flat_map(|pt| {
            let seeds = &seeds;
            exp.config
                .policies
                .iter()
                .flat_map(move |&k| seeds.iter().map(move |&s| (pt, k, s)))
        })
        .collect();

    let mut rows = jobs
        .into_par_iter()
        .map(|(pt, kind, seed)| {
            let wrap = |e: Error| Error::SweepPoint {
                value: pt.value,
                policy: kind.to_string(),
                seed,
                source: Box::new(e),
            };
            let trained = pt.training.as_ref();
            let bundle = bundle_for(kind, &pt.spec, trained.map(|t| t.policies.as_slice()))
                .map_err(wrap)?;
            let metrics = run(&pt.spec, bundle, exp.config.slots, seed).map_err(wrap)?;
            let prices = match kind {
                PolicyKind::Dual => trained.map(|t| t.state.prices.lambda.clone()),
                _ => None,
            };
            Ok(ResultRow::from_metrics(pt.value, kind, seed, &pt.spec, &metrics, prices))
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.sort_key(b));
    Ok(rows)
}

fn label(name: &Option<String>, id: usize) -> String {
    name.clone().unwrap_or_else(|| id.to_string())
}

pub fn csv_header(spec: &ValidatedSpec) -> Vec<String> {
    let mut header: Vec<String> = ["sweep_value", "policy", "seed", "weighted_throughput"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(spec.flows().iter().map(|f| format!("q_{}", label(&f.name, f.id.0))));
    header.extend(spec.nodes().iter().map(|n| format!("usage_{}", label(&n.name, n.id.0))));
    header.extend(spec.nodes().iter().map(|n| format!("price_{}", label(&n.name, n.id.0))));
    header
}

/// Fixed scientific notation with 17 significant digits; parses back exactly.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header plus one line per row; reals carry 17 significant digits.
pub fn emit_csv(spec: &ValidatedSpec, rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Precondition("no result rows to emit".into()));
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(csv_header(spec))?;
    for r in rows {
        let mut rec = vec![
            format_real(r.sweep_value),
            r.policy.to_string(),
            r.seed.to_string(),
            format_real(r.weighted_throughput),
        ];
        rec.extend(r.throughputs.iter().copied().map(format_real));
        rec.extend(r.usages.iter().copied().map(format_real));
        match &r.prices {
            Some(p) => rec.extend(p.iter().copied().map(format_real)),
            None => rec.extend(std::iter::repeat_n(String::new(), spec.num_nodes())),
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(spec: &ValidatedSpec, text: &str) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != csv_header(spec) {
        return Err(Error::Precondition("csv header does not match the network".into()));
    }
    let (flows, nodes) = (spec.num_flows(), spec.num_nodes());
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Precondition(format!("bad number `{s}`: {e}")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let reals = |from: usize, n: usize| (from..from + n).map(|k| num(field(k))).collect::<Result<Vec<_>>>();
        let price_start = 4 + flows + nodes;
        let prices = if field(price_start).is_empty() {
            None
        } else {
            Some(reals(price_start, nodes)?)
        };
        rows.push(ResultRow {
            sweep_value: num(field(0))?,
            policy: field(1).parse()?,
            seed: field(2)
                .parse()
                .map_err(|e| Error::Precondition(format!("bad seed: {e}")))?,
            weighted_throughput: num(field(3))?,
            throughputs: reals(4, flows)?,
            usages: reals(4 + flows, nodes)?,
            prices,
        });
    }
    Ok(rows)
}

/// Across-seed mean and standard error of weighted throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub sweep_value: f64,
    pub policy: PolicyKind,
    pub samples: usize,
    pub mean: f64,
    pub std_error: f64,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<PointSummary> {
    let mut keys: Vec<(f64, PolicyKind)> = rows.iter().map(|r| (r.sweep_value, r.policy)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.dedup();
    keys.into_iter()
        .map(|(value, policy)| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.sweep_value == value && r.policy == policy)
                .map(|r| r.weighted_throughput)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std_error = if xs.len() > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            PointSummary {
                sweep_value: value,
                policy,
                samples: xs.len(),
                mean,
                std_error,
            }
        })
        .collect()
}
