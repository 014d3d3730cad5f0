use deadline_core::net_model::Route;
use deadline_core::oracle::{enumerate_best_value, monte_carlo_packet_reward};
use deadline_core::packet_dp::{
    delivery_probability, policy_from_table, solve_value_table, PolicyTable, PriceVector, TieRule,
    TIE_EPSILON,
};
use deadline_core::net_model::FlowId;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    reliabilities: Vec<f64>,
    prices: Vec<f64>,
    alpha: f64,
    deadline: usize,
}

impl Instance {
    fn route(&self) -> Route {
        Route::chain(&self.reliabilities)
    }

    fn prices(&self) -> PriceVector {
        PriceVector::new(self.prices.clone()).unwrap()
    }
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=3, 0.5f64..2.0).prop_flat_map(|(hops, alpha)| {
        (
            prop::collection::vec(0.0f64..=1.0, hops),
            prop::collection::vec(0.0..alpha, hops + 1),
            hops..=5,
        )
            .prop_map(move |(reliabilities, prices, deadline)| Instance {
                reliabilities,
                prices,
                alpha,
                deadline,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dp_matches_enumeration(inst in instance()) {
        let vt = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        let (best, _) = enumerate_best_value(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        prop_assert!((vt.source_value(inst.deadline) - best).abs() <= 1e-12);
    }

    #[test]
    fn values_grow_with_time_to_go(inst in instance()) {
        let vt = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        for i in 1..=vt.hop_count() + 1 {
            for s in 0..inst.deadline {
                prop_assert!(vt.value(i, s + 1) >= vt.value(i, s));
            }
        }
    }

    #[test]
    fn raising_a_price_never_helps(inst in instance(), node in 0usize..4, bump in 0.0f64..1.0) {
        let node = node % inst.prices.len();
        let base = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        let mut raised = inst.prices.clone();
        raised[node] += bump;
        let up = solve_value_table(&inst.route(), inst.alpha, &PriceVector::new(raised).unwrap(), inst.deadline).unwrap();
        for i in 1..=base.hop_count() + 1 {
            for s in 0..=inst.deadline {
                prop_assert!(up.value(i, s) <= base.value(i, s) + 1e-12);
            }
        }
    }

    #[test]
    fn zero_price_is_scaled_delivery(inst in instance()) {
        let zero = PriceVector::zeros(inst.prices.len());
        let vt = solve_value_table(&inst.route(), inst.alpha, &zero, inst.deadline).unwrap();
        for s in 0..=inst.deadline {
            let closed = inst.alpha * delivery_probability(&inst.route(), s);
            prop_assert!((vt.value(1, s) - closed).abs() <= 1e-12);
        }
    }

    #[test]
    fn values_bounded_by_weight(inst in instance()) {
        let vt = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        let hops = vt.hop_count();
        for i in 1..=hops + 1 {
            for s in 0..=inst.deadline {
                let v = vt.value(i, s);
                prop_assert!((0.0..=inst.alpha).contains(&v));
                if s + i <= hops {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
        for s in 0..=inst.deadline {
            prop_assert_eq!(vt.value(hops + 1, s), inst.alpha);
        }
        prop_assert_eq!(vt.evaluations(), hops * inst.deadline);
    }

    #[test]
    fn attempt_rule_restated(inst in instance()) {
        let vt = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        let pt = policy_from_table(&vt, TieRule::Idle);
        for i in 1..=vt.hop_count() {
            let p = inst.reliabilities[i - 1];
            let lambda = inst.prices[i - 1];
            for s in 0..=inst.deadline {
                let expected = if s + i <= vt.hop_count() {
                    0.0
                } else if p * (vt.value(i + 1, s - 1) - vt.value(i, s - 1)) > lambda + TIE_EPSILON {
                    1.0
                } else {
                    0.0
                };
                prop_assert_eq!(pt.phi(i, s), expected, "hop {} s {}", i, s);
            }
        }
    }

    #[test]
    fn tie_rule_only_touches_ties(inst in instance()) {
        let vt = solve_value_table(&inst.route(), inst.alpha, &inst.prices(), inst.deadline).unwrap();
        let idle = policy_from_table(&vt, TieRule::Idle);
        let attempt = policy_from_table(&vt, TieRule::Attempt);
        for i in 1..=vt.hop_count() {
            for s in 0..=inst.deadline {
                if idle.phi(i, s) != attempt.phi(i, s) {
                    prop_assert!(vt.is_feasible(i, s));
                    prop_assert!(vt.branch_margin(i, s).abs() <= TIE_EPSILON);
                }
            }
        }
    }
}

#[test]
fn deterministic_route_has_no_noise() {
    let route = Route::chain(&[1.0, 1.0]);
    let zero = PriceVector::zeros(3);
    let vt = solve_value_table(&route, 1.5, &zero, 4).unwrap();
    let pt = policy_from_table(&vt, TieRule::Attempt);
    let (mean, se) = monte_carlo_packet_reward(&pt, &route, 1.5, &zero, 1000, 3).unwrap();
    assert_eq!(mean, 1.5);
    assert_eq!(se, 0.0);
}

#[test]
fn idle_policy_earns_nothing() {
    let route = Route::chain(&[0.7]);
    let pt = PolicyTable::idle(FlowId(0), 1, 3);
    let (mean, se) = monte_carlo_packet_reward(&pt, &route, 1.0, &PriceVector::zeros(2), 500, 1).unwrap();
    assert_eq!((mean, se), (0.0, 0.0));
}

#[test]
fn single_link_reward_estimate() {
    let route = Route::chain(&[0.5]);
    let prices = PriceVector::new(vec![0.3, 0.0]).unwrap();
    let vt = solve_value_table(&route, 1.0, &prices, 2).unwrap();
    let pt = policy_from_table(&vt, TieRule::Idle);
    let (mean, se) = monte_carlo_packet_reward(&pt, &route, 1.0, &prices, 100_000, 11).unwrap();
    assert!((mean - 0.3).abs() <= 3.0 * se, "{mean} ± {se}");
}

#[test]
fn huge_prices_idle_everywhere() {
    let route = Route::chain(&[0.6, 0.9]);
    let prices = PriceVector::new(vec![10.0, 10.0, 0.0]).unwrap();
    let (best, policy) = enumerate_best_value(&route, 1.0, &prices, 4).unwrap();
    assert_eq!(best, 0.0);
    assert_eq!(policy.attempts(), 0);
}
