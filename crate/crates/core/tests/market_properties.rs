//! End-to-end properties on randomly generated, valid market instances.

use indexmap::IndexMap;
use proptest::prelude::*;

use p2p_market::report::{build_report, PipelineConfig, Stage};
use p2p_market::solution::{AssignmentGame, Provenance};
use p2p_market::{
    validate_instance, AssignmentMatrix, Buyer, GridTariff, MarketInstance, Scenario, ScenarioSet, Seller,
};

const TARIFF: GridTariff = GridTariff {
    buy_price: 0.05,
    sell_price: 0.17,
};

fn buyer_strategy(n_sellers: usize) -> impl Strategy<Value = (f64, f64, Vec<f64>)> {
    (0.5f64..6.0, 0.051f64..0.10, prop::collection::vec(1.0f64..1.6, n_sellers))
}

fn seller_strategy() -> impl Strategy<Value = (f64, f64, Vec<f64>)> {
    (0.05f64..0.165, 1.0f64..6.0, prop::collection::vec(0.0f64..=1.0, 3))
}

prop_compose! {
    fn instance()(n_sellers in 1usize..=4, n_buyers in 1usize..=4)
        (buyers in prop::collection::vec(buyer_strategy(n_sellers), n_buyers),
         sellers in prop::collection::vec(seller_strategy(), n_sellers),
         weights in prop::collection::vec(1u32..=5, 3))
        -> MarketInstance
    {
        let seller_ids: Vec<String> = (1..=sellers.len()).map(|j| format!("s{j}")).collect();
        let total: u32 = weights.iter().sum();
        let scenarios = (0..3)
            .map(|k| Scenario {
                probability: f64::from(weights[k]) / f64::from(total),
                generation: seller_ids
                    .iter()
                    .zip(&sellers)
                    .map(|(id, (_, rated, fractions))| (id.clone(), rated * fractions[k]))
                    .collect(),
            })
            .collect();
        MarketInstance {
            tariff: TARIFF,
            buyers: buyers
                .into_iter()
                .enumerate()
                .map(|(i, (demand, base, prefs))| Buyer {
                    id: format!("b{}", i + 1),
                    demand_kwh: demand,
                    base_price: base,
                    preferences: seller_ids.iter().cloned().zip(prefs).collect::<IndexMap<_, _>>(),
                })
                .collect(),
            sellers: seller_ids
                .iter()
                .zip(&sellers)
                .map(|(id, (ask, rated, _))| Seller {
                    id: id.clone(),
                    ask_price: *ask,
                    rated_power_kw: *rated,
                    source_type: "PV".into(),
                })
                .collect(),
            scenario_set: ScenarioSet::new(scenarios),
            slot_hours: 1.0,
        }
    }
}

fn game_of(inst: &MarketInstance) -> AssignmentGame {
    AssignmentGame::new(AssignmentMatrix::from_instance(inst).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_instances_are_valid(inst in instance()) {
        prop_assert!(validate_instance(&inst).is_empty(), "{:?}", validate_instance(&inst));
    }

    #[test]
    fn every_allocation_is_stable_and_priced_within_bid_and_ask(inst in instance()) {
        let report = build_report(&inst, &PipelineConfig::default()).unwrap();
        let game = game_of(&inst);
        prop_assert!(report.all_converged());
        for alloc in &report.allocations {
            let check = game.is_core_member(alloc, 1e-7).unwrap();
            prop_assert!(check.is_member(), "{}: {:?}", alloc.provenance, check.violations);
        }
        for m in &report.matches {
            for (prov, price) in &m.prices {
                prop_assert!(*price >= m.ask - 1e-9 && *price <= m.bid + 1e-9,
                    "{prov} price {price} outside [{}, {}]", m.ask, m.bid);
            }
        }
    }

    #[test]
    fn negotiation_lands_on_tau(inst in instance(), seed in any::<u64>()) {
        let cfg = PipelineConfig { seed, ..PipelineConfig::default() };
        let report = build_report(&inst, &cfg).unwrap();
        let tau = report.allocation(Provenance::Tau).unwrap();
        if let Some(neg) = report.allocation(Provenance::Negotiated) {
            for (id, x) in &tau.buyers {
                prop_assert!((neg.buyers[id] - x).abs() <= 1e-7);
            }
            for (id, x) in &tau.sellers {
                prop_assert!((neg.sellers[id] - x).abs() <= 1e-7);
            }
        } else {
            prop_assert!(report.matches.is_empty());
        }
    }

    #[test]
    fn seed_changes_nothing_but_the_path(inst in instance(), a in any::<u64>(), b in any::<u64>()) {
        let run = |seed| build_report(&inst, &PipelineConfig { seed, stage: Stage::Report, ..PipelineConfig::default() }).unwrap();
        let (ra, rb) = (run(a), run(b));
        prop_assert_eq!(ra.grand_value, rb.grand_value);
        prop_assert_eq!(ra.matches.len(), rb.matches.len());
        for (ma, mb) in ra.matches.iter().zip(&rb.matches) {
            prop_assert_eq!((&ma.buyer, &ma.seller, ma.value), (&mb.buyer, &mb.seller, mb.value));
            for p in [Provenance::Tau, Provenance::BuyerOptimal, Provenance::SellerOptimal] {
                prop_assert_eq!(ma.prices[&p], mb.prices[&p]);
            }
        }
        let (na, nb) = (ra.allocation(Provenance::Negotiated), rb.allocation(Provenance::Negotiated));
        if let (Some(na), Some(nb)) = (na, nb) {
            for (id, x) in &na.buyers {
                prop_assert!((nb.buyers[id] - x).abs() <= 2e-7);
            }
        }
    }

    #[test]
    fn replicating_an_agent_never_lowers_welfare(inst in instance(), copies in 1usize..=2) {
        let base = game_of(&inst).grand_value();
        let more_buyers = inst.replicate_buyer("b1", copies).unwrap();
        let more_sellers = inst.replicate_seller("s1", copies).unwrap();
        prop_assert!(validate_instance(&more_buyers).is_empty());
        prop_assert!(validate_instance(&more_sellers).is_empty());
        prop_assert!(game_of(&more_buyers).grand_value() >= base - 1e-12);
        prop_assert!(game_of(&more_sellers).grand_value() >= base - 1e-12);
    }

    #[test]
    fn instances_round_trip_through_json(inst in instance()) {
        let text = serde_json::to_string(&inst).unwrap();
        prop_assert_eq!(MarketInstance::from_json_str(&text).unwrap(), inst);
    }
}
