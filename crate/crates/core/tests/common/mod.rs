#![allow(dead_code)]

use deadline_core::net_model::{
    validate_spec, ArrivalProcess, DeadlineDistribution, FlowId, FlowSpec, LinkId, LinkSpec,
    NetworkSpec, NodeId, NodeSpec, ValidatedSpec,
};

/// One flow over a chain `0 -> 1 -> ... -> L`.
pub fn chain_network(
    reliabilities: &[f64],
    budgets: &[f64],
    arrival: ArrivalProcess,
    deadline: DeadlineDistribution,
) -> NetworkSpec {
    let hops = reliabilities.len();
    assert_eq!(budgets.len(), hops + 1);
    NetworkSpec {
        nodes: budgets
            .iter()
            .enumerate()
            .map(|(i, &budget)| NodeSpec {
                id: NodeId(i),
                name: None,
                budget,
            })
            .collect(),
        links: reliabilities
            .iter()
            .enumerate()
            .map(|(i, &reliability)| LinkSpec {
                id: LinkId(i),
                tail: NodeId(i),
                head: NodeId(i + 1),
                reliability,
            })
            .collect(),
        flows: vec![FlowSpec {
            id: FlowId(0),
            name: None,
            route: (0..hops).map(LinkId).collect(),
            weight: 1.0,
            arrival,
            deadline,
        }],
    }
}

pub fn chain(
    reliabilities: &[f64],
    budgets: &[f64],
    arrival: ArrivalProcess,
    deadline: usize,
) -> ValidatedSpec {
    validate_spec(&chain_network(
        reliabilities,
        budgets,
        arrival,
        DeadlineDistribution::fixed(deadline),
    ))
    .unwrap()
}

pub fn fig3() -> ValidatedSpec {
    deadline_core::experiment::fig3().spec
}

pub fn fig3_with_s1(budget: f64) -> ValidatedSpec {
    let spec = fig3();
    let s1 = spec.spec().resolve_node("s1").unwrap();
    spec.with_budget(s1, budget).unwrap()
}
