//! Static network description: nodes with attempt budgets, directed links with
//! Bernoulli reliabilities, and flows pinned to fixed simple routes.
//!
//! A [`NetworkSpec`] is plain data (it is what the JSON config deserializes
//! into). [`ValidatedSpec`] is the checked form every other module consumes;
//! it carries derived indices such as the out-link set of each node and the
//! hop count of each flow.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(NodeId, "node#");
id_type!(LinkId, "link#");
id_type!(FlowId, "flow#");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Average number of transmission attempts per slot over all out-links.
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: LinkId,
    pub tail: NodeId,
    pub head: NodeId,
    /// Per-attempt success probability.
    pub reliability: f64,
}

/// Per-slot arrival distribution of a flow; i.i.d. across slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    /// Exactly `count` packets every slot.
    Batch { count: u32 },
    /// One packet with probability `prob`, otherwise none.
    Bernoulli { prob: f64 },
    /// Poisson-distributed count with mean `rate`.
    Poisson { rate: f64 },
}

impl ArrivalProcess {
    pub fn mean_rate(&self) -> f64 {
        match *self {
            ArrivalProcess::Batch { count } => f64::from(count),
            ArrivalProcess::Bernoulli { prob } => prob,
            ArrivalProcess::Poisson { rate } => rate,
        }
    }
}

/// Relative-deadline distribution: `(deadline in slots, probability)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadlineDistribution {
    pub support: Vec<(usize, f64)>,
}

impl DeadlineDistribution {
    pub fn fixed(deadline: usize) -> Self {
        Self {
            support: vec![(deadline, 1.0)],
        }
    }

    /// Largest deadline with positive probability (Δ). Zero if the support is empty.
    pub fn max_deadline(&self) -> usize {
        self.support
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(d, _)| *d)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub id: FlowId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub route: Vec<LinkId>,
    /// Reward per delivered packet (α_f).
    pub weight: f64,
    pub arrival: ArrivalProcess,
    pub deadline: DeadlineDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub flows: Vec<FlowSpec>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec is always serializable")
    }

    /// Looks a node up by name first, then by numeric id.
    pub fn resolve_node(&self, key: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.name.as_deref() == Some(key))
            .map(|n| n.id)
            .or_else(|| {
                key.parse::<usize>()
                    .ok()
                    .filter(|&i| i < self.nodes.len())
                    .map(NodeId)
            })
    }
}

/// One invariant violation, tagged with the entity that broke it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecViolation {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ValidationError {
    pub violations: Vec<SpecViolation>,
}

impl ValidationError {
    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid network spec:")?;
        for v in &self.violations {
            write!(f, " [{v}]")?;
        }
        Ok(())
    }
}

/// A single hop of a flow route (link `l_i` in hop-indexed form).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hop {
    pub link: LinkId,
    pub tail: NodeId,
    pub head: NodeId,
    pub reliability: f64,
}

/// Hop-indexed view of a route: `hops[0]` is `l_1`, leaving the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    hops: Vec<Hop>,
}

impl Route {
    /// Builds a route directly from hops. Chaining is not checked here; routes
    /// taken from a [`ValidatedSpec`] are already chained.
    pub fn new(hops: Vec<Hop>) -> Self {
        Self { hops }
    }

    /// A chain `0 -> 1 -> ... -> L` with the given link reliabilities, using
    /// link and node ids equal to the hop position.
    pub fn chain(reliabilities: &[f64]) -> Self {
        let hops = reliabilities
            .iter()
            .enumerate()
            .map(|(i, &p)| Hop {
                link: LinkId(i),
                tail: NodeId(i),
                head: NodeId(i + 1),
                reliability: p,
            })
            .collect();
        Self { hops }
    }

    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    /// Number of links L.
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// Hop `i` in 1-based indexing (1..=L).
    pub fn hop(&self, i: usize) -> &Hop {
        &self.hops[i - 1]
    }

    pub fn source(&self) -> Option<NodeId> {
        self.hops.first().map(|h| h.tail)
    }

    pub fn destination(&self) -> Option<NodeId> {
        self.hops.last().map(|h| h.head)
    }
}

/// A network spec whose invariants have been checked, plus derived indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedSpec {
    spec: NetworkSpec,
    out_links: Vec<Vec<LinkId>>,
    routes: Vec<Route>,
}

/// Checks every invariant and returns either the normalized spec or the full
/// list of violations.
pub fn validate_spec(spec: &NetworkSpec) -> std::result::Result<ValidatedSpec, ValidationError> {
    let mut violations = Vec::new();
    let mut push = |entity: String, message: String| {
        violations.push(SpecViolation { entity, message });
    };

    for (pos, node) in spec.nodes.iter().enumerate() {
        if node.id.0 != pos {
            push(
                node.id.to_string(),
                format!("node ids must be dense and ordered; expected id {pos}"),
            );
        }
        if !(node.budget.is_finite() && node.budget > 0.0) {
            push(node.id.to_string(), "budget must be positive".into());
        }
    }

    let n_nodes = spec.nodes.len();
    for (pos, link) in spec.links.iter().enumerate() {
        if link.id.0 != pos {
            push(
                link.id.to_string(),
                format!("link ids must be dense and ordered; expected id {pos}"),
            );
        }
        if link.tail.0 >= n_nodes {
            push(link.id.to_string(), format!("tail {} is not a declared node", link.tail));
        }
        if link.head.0 >= n_nodes {
            push(link.id.to_string(), format!("head {} is not a declared node", link.head));
        }
        if link.tail == link.head {
            push(link.id.to_string(), "tail and head must differ".into());
        }
        if !(0.0..=1.0).contains(&link.reliability) {
            push(link.id.to_string(), "reliability must lie in [0, 1]".into());
        }
    }

    if spec.flows.is_empty() {
        push("flows".into(), "at least one flow is required".into());
    }

    for (pos, flow) in spec.flows.iter().enumerate() {
        let who = flow.id.to_string();
        if flow.id.0 != pos {
            push(who.clone(), format!("flow ids must be dense and ordered; expected id {pos}"));
        }
        if !(flow.weight.is_finite() && flow.weight >= 0.0) {
            push(who.clone(), "weight must be finite and nonnegative".into());
        }
        match flow.arrival {
            ArrivalProcess::Batch { count: 0 } => {
                push(who.clone(), "arrival mean rate must be positive".into())
            }
            ArrivalProcess::Bernoulli { prob } if !(prob > 0.0 && prob <= 1.0) => {
                push(who.clone(), "bernoulli arrival probability must lie in (0, 1]".into())
            }
            ArrivalProcess::Poisson { rate } if !(rate.is_finite() && rate > 0.0) => {
                push(who.clone(), "arrival mean rate must be positive".into())
            }
            _ => {}
        }

        let dd = &flow.deadline;
        if dd.support.is_empty() {
            push(who.clone(), "deadline distribution is empty".into());
        }
        let total: f64 = dd.support.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            push(who.clone(), format!("deadline probabilities sum to {total}, not 1"));
        }
        for &(d, p) in &dd.support {
            if d < 1 {
                push(who.clone(), "relative deadlines must be at least 1 slot".into());
            }
            if !(0.0..=1.0).contains(&p) {
                push(who.clone(), format!("deadline probability {p} outside [0, 1]"));
            }
        }

        if flow.route.is_empty() {
            push(who.clone(), "route must be nonempty".into());
            continue;
        }
        let mut known = true;
        for link in &flow.route {
            if link.0 >= spec.links.len() {
                push(who.clone(), format!("route references unknown {link}"));
                known = false;
            }
        }
        if !known {
            continue;
        }
        for pair in flow.route.windows(2) {
            let (a, b) = (&spec.links[pair[0].0], &spec.links[pair[1].0]);
            if a.head != b.tail {
                push(
                    who.clone(),
                    format!("route discontinuity between {} and {}", a.id, b.id),
                );
            }
        }
        let mut visited = vec![spec.links[flow.route[0].0].tail];
        for link in &flow.route {
            let head = spec.links[link.0].head;
            if visited.contains(&head) {
                push(who.clone(), format!("route revisits {head}"));
                break;
            }
            visited.push(head);
        }
    }

    if !violations.is_empty() {
        return Err(ValidationError { violations });
    }

    let mut out_links = vec![Vec::new(); n_nodes];
    for link in &spec.links {
        out_links[link.tail.0].push(link.id);
    }
    let routes = spec
        .flows
        .iter()
        .map(|f| {
            Route::new(
                f.route
                    .iter()
                    .map(|l| {
                        let link = &spec.links[l.0];
                        Hop {
                            link: link.id,
                            tail: link.tail,
                            head: link.head,
                            reliability: link.reliability,
                        }
                    })
                    .collect(),
            )
        })
        .collect();

    Ok(ValidatedSpec {
        spec: spec.clone(),
        out_links,
        routes,
    })
}

impl ValidatedSpec {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.spec.links
    }

    pub fn flows(&self) -> &[FlowSpec] {
        &self.spec.flows
    }

    pub fn num_nodes(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn num_flows(&self) -> usize {
        self.spec.flows.len()
    }

    pub fn budget(&self, node: NodeId) -> f64 {
        self.spec.nodes[node.0].budget
    }

    pub fn budgets(&self) -> Vec<f64> {
        self.spec.nodes.iter().map(|n| n.budget).collect()
    }

    /// Out-links of a node ("l ∈ v").
    pub fn out_links(&self, node: NodeId) -> &[LinkId] {
        &self.out_links[node.0]
    }

    /// Hop count L_f.
    pub fn hop_count(&self, flow: FlowId) -> usize {
        self.routes[flow.0].len()
    }

    /// Largest relative deadline over all flows.
    pub fn max_deadline(&self) -> usize {
        self.spec
            .flows
            .iter()
            .map(|f| f.deadline.max_deadline())
            .max()
            .unwrap_or(0)
    }

    /// The transmitting node of a link, i.e. the node whose price is charged.
    pub fn tail_node(&self, link: LinkId) -> Result<NodeId> {
        self.spec
            .links
            .get(link.0)
            .map(|l| l.tail)
            .ok_or(Error::UnknownLink(link))
    }

    pub fn route_links(&self, flow: FlowId) -> Result<&Route> {
        self.routes.get(flow.0).ok_or(Error::UnknownFlow(flow))
    }

    pub(crate) fn route(&self, flow: FlowId) -> &Route {
        &self.routes[flow.0]
    }

    /// Copy of the spec with one node budget replaced, revalidated.
    pub fn with_budget(&self, node: NodeId, budget: f64) -> Result<ValidatedSpec> {
        let mut spec = self.spec.clone();
        let entry = spec
            .nodes
            .get_mut(node.0)
            .ok_or(Error::UnknownNode(node))?;
        entry.budget = budget;
        Ok(validate_spec(&spec)?)
    }
}
