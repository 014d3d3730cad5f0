mod common;

use std::collections::HashMap;

use deadline_core::net_model::{ArrivalProcess, FlowId, NodeId, ValidatedSpec};
use deadline_core::packet_dp::{policy_from_table, PolicyTable, PriceVector, TieRule};
use deadline_core::policies::{BudgetEnforcement, PolicyBundle};
use deadline_core::price_learner::solve_tables;
use deadline_core::sim_engine::{metrics_summary, run, Simulator};
use deadline_core::Error;

fn zero_price_dual(spec: &ValidatedSpec, tie: TieRule) -> PolicyBundle {
    let tables = solve_tables(spec, &PriceVector::zeros(spec.num_nodes())).unwrap();
    PolicyBundle::dual(spec, tables.iter().map(|vt| policy_from_table(vt, tie)).collect()).unwrap()
}

fn trained_dual(spec: &ValidatedSpec) -> PolicyBundle {
    let out = deadline_core::experiment::TrainingConfig::default()
        .train(spec, PriceVector::zeros(spec.num_nodes()))
        .unwrap();
    PolicyBundle::dual(spec, out.policies).unwrap()
}

/// Arrivals = delivered + dropped + in flight; packets move at most one hop
/// per slot; nobody starts a slot unable to make its deadline.
fn check_invariants(spec: &ValidatedSpec, bundle: PolicyBundle, slots: u64) {
    let mut sim = Simulator::new(spec, bundle, 17).unwrap();
    let mut hops: HashMap<u64, usize> = HashMap::new();
    for _ in 0..slots {
        for p in sim.queues().iter().flatten() {
            assert!(p.is_feasible(spec.hop_count(p.flow)), "{p:?}");
            if let Some(&before) = hops.get(&p.id) {
                assert!(p.hop == before || p.hop == before + 1);
            }
            hops.insert(p.id, p.hop);
        }
        sim.step().unwrap();
        let m = sim.metrics();
        let live = sim.in_flight();
        for f in 0..spec.num_flows() {
            assert!(m.delivered[f] <= m.arrivals[f]);
            assert_eq!(m.arrivals[f], m.delivered[f] + m.dropped[f] + live[f]);
        }
    }
}

#[test]
fn conservation_and_hop_limits() {
    let spec = common::fig3_with_s1(50.0);
    check_invariants(&spec, PolicyBundle::greedy(), 300);
    check_invariants(&spec, PolicyBundle::edf(), 300);
    check_invariants(&spec, trained_dual(&spec), 300);
    let stochastic = common::chain(&[0.3, 0.8, 0.5], &[1.0, 1.0, 1.0, 1.0], ArrivalProcess::Poisson { rate: 2.5 }, 6);
    check_invariants(&stochastic, zero_price_dual(&stochastic, TieRule::Idle), 2000);
    check_invariants(&stochastic, PolicyBundle::edf(), 2000);
}

#[test]
fn greedy_matches_zero_price_dual() {
    for spec in [
        common::fig3_with_s1(50.0),
        common::chain(&[0.0, 0.4, 1.0], &[1.0; 4], ArrivalProcess::Bernoulli { prob: 0.7 }, 5),
    ] {
        let mut greedy = Simulator::new(&spec, PolicyBundle::greedy(), 3).unwrap().record_decisions(true);
        let mut dual = Simulator::new(&spec, zero_price_dual(&spec, TieRule::Attempt), 3)
            .unwrap()
            .record_decisions(true);
        for _ in 0..2000 {
            assert_eq!(greedy.step().unwrap(), dual.step().unwrap());
        }
        assert_eq!(greedy.metrics(), dual.metrics());
    }
}

/// Largest attempt count minus `M·W` over every window of every length.
fn worst_window_excess(attempts: &[u64], budget: f64) -> f64 {
    let mut level = 0.0;
    let mut lowest = 0.0f64;
    let mut worst = f64::NEG_INFINITY;
    for &a in attempts {
        level += a as f64 - budget;
        worst = worst.max(level - lowest);
        lowest = lowest.min(level);
    }
    worst
}

#[test]
fn window_excess_helper() {
    assert_eq!(worst_window_excess(&[0, 2, 0, 2], 1.0), 1.0);
    assert_eq!(worst_window_excess(&[1, 1, 1], 1.0), 0.0);
    assert_eq!(worst_window_excess(&[3, 0, 0, 3], 1.0), 2.0);
}

#[test]
fn edf_respects_budget_windows() {
    let mut spec = common::fig3_with_s1(37.5);
    let c = spec.spec().resolve_node("c").unwrap();
    spec = spec.with_budget(c, 62.3).unwrap();
    let mut sim = Simulator::new(&spec, PolicyBundle::edf(), 4).unwrap();
    let mut per_node = vec![Vec::new(); spec.num_nodes()];
    for _ in 0..20_000 {
        let ev = sim.step().unwrap();
        for (v, a) in ev.attempts.iter().enumerate() {
            per_node[v].push(*a);
        }
    }
    for (v, series) in per_node.iter().enumerate() {
        let m = spec.budget(NodeId(v));
        assert!(worst_window_excess(series, m) <= 1.0 + 1e-9, "node {v}");
    }
}

#[test]
fn half_reliable_hop_delivers_half() {
    let spec = common::fig3();
    let s1 = spec.spec().resolve_node("s1").unwrap();
    let mut sim = Simulator::new(&spec, PolicyBundle::greedy(), 8).unwrap().record_decisions(true);
    let (mut tries, mut wins) = (0u64, 0u64);
    for _ in 0..2000 {
        for d in sim.step().unwrap().decisions {
            if d.node == s1 && d.flow == FlowId(1) && d.hop == 2 && d.time_to_go == 1 {
                assert!(d.attempted);
                tries += 1;
                wins += u64::from(d.success);
            }
        }
    }
    let freq = wins as f64 / tries as f64;
    let sigma = (0.25 / tries as f64).sqrt();
    assert!(tries > 50_000);
    assert!((freq - 0.5).abs() <= 3.0 * sigma, "{freq}");
}

#[test]
fn zero_price_throughput_matches_closed_form() {
    let spec = common::chain(&[0.6, 0.9], &[1.0; 3], ArrivalProcess::Batch { count: 20 }, 4);
    let slots = 20_000;
    let m = run(&spec, zero_price_dual(&spec, TieRule::Idle), slots, 2).unwrap();
    let route = spec.route_links(FlowId(0)).unwrap();
    let p = deadline_core::packet_dp::delivery_probability(route, 4);
    let expected = 20.0 * p;
    let sigma = (20.0 * p * (1.0 - p) / slots as f64).sqrt();
    assert!((m.throughput(FlowId(0)) - expected).abs() <= 3.0 * sigma);
}

#[test]
fn tied_packets_decide_independently() {
    let spec = common::chain(&[1.0], &[1.0, 1.0], ArrivalProcess::Batch { count: 2 }, 1);
    let half = PolicyTable::from_rows(FlowId(0), vec![vec![0.0, 0.5]]);
    let bundle = PolicyBundle::dual(&spec, vec![half]).unwrap();
    let mut sim = Simulator::new(&spec, bundle, 21).unwrap().record_decisions(true);
    let n = 40_000;
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let ev = sim.step().unwrap();
        assert_eq!(ev.decisions.len(), 2);
        let a = f64::from(u8::from(ev.decisions[0].attempted));
        let b = f64::from(u8::from(ev.decisions[1].attempted));
        sa += a;
        sb += b;
        sab += a * b;
    }
    let n = n as f64;
    let (ma, mb) = (sa / n, sb / n);
    let corr = (sab / n - ma * mb) / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
    assert!((ma - 0.5).abs() < 0.02 && (mb - 0.5).abs() < 0.02);
    assert!(corr.abs() < 4.0 / n.sqrt(), "correlation {corr}");
}

#[test]
fn idle_is_silent_everywhere() {
    let spec = common::fig3();
    let m = run(&spec, PolicyBundle::idle(), 500, 1).unwrap();
    assert!(m.delivered.iter().all(|&d| d == 0));
    assert!(m.attempts.iter().all(|&a| a == 0));
}

#[test]
fn seeds_drive_reproducibility() {
    let spec = common::fig3_with_s1(60.0);
    let bundle = trained_dual(&spec);
    let a = run(&spec, bundle.clone(), 3000, 5).unwrap();
    let b = run(&spec, bundle.clone(), 3000, 5).unwrap();
    let c = run(&spec, bundle, 3000, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn summary_report() {
    let spec = common::fig3();
    let m = run(&spec, PolicyBundle::greedy(), 1000, 2).unwrap();
    let r = metrics_summary(&m, &spec).unwrap();
    let total: u64 = m.delivered.iter().sum();
    assert!((r.weighted_throughput - total as f64 / 1000.0).abs() < 1e-12);
    assert_eq!(r.slack.len(), 8);

    let mut heavy = spec.spec().clone();
    heavy.flows.truncate(1);
    heavy.flows[0].weight = 2.0;
    let heavy = deadline_core::net_model::validate_spec(&heavy).unwrap();
    let single = run(&heavy, PolicyBundle::greedy(), 1000, 2).unwrap();
    let r2 = metrics_summary(&single, &heavy).unwrap();
    assert_eq!(r2.weighted_throughput, 2.0 * single.throughput(FlowId(0)));

    let mut empty = m.clone();
    empty.slots = 0;
    assert!(matches!(metrics_summary(&empty, &spec), Err(Error::Precondition(_))));
}

#[test]
fn hard_cap_on_dual_bundle() {
    let spec = common::fig3_with_s1(30.0);
    let bundle = zero_price_dual(&spec, TieRule::Idle).with_enforcement(BudgetEnforcement::TokenBucket);
    let m = run(&spec, bundle, 2000, 1).unwrap();
    let s1 = spec.spec().resolve_node("s1").unwrap();
    assert!(m.usage(s1) <= 30.0 + 1.0 / 2000.0);
}
