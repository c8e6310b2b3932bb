use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fleetdesign::bayesopt::{candidate_grid, gp_posterior};
use fleetdesign::env::{self, GridId, OrderSpec};
use fleetdesign::marl::Hyperparams;
use fleetdesign::reward::{self, DEFAULT_ELASTICITY};
use fleetdesign::{oracle, presets, CityParams, DriverClass, GpHyper, GpState, Policy, RewardDesign, Scenario};

fn small_city(width: usize, horizon: usize, yellow: usize, green: usize, seed: u64) -> Scenario {
    let p = CityParams {
        width,
        height: width,
        horizon,
        cbd: (1, 1, 1, 1),
        restricted: (0, 0, 1, 1),
        yellow,
        green,
        cbd_rate: 2.0,
        outer_rate: 0.5,
        turnstile_base: 10,
        layout_seed: seed,
        ..CityParams::default()
    };
    Scenario::build(presets::synthetic_city_config(&p)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_play_conserves_drivers_and_respects_restrictions(
        width in 3usize..6,
        horizon in 1usize..6,
        yellow in 1usize..12,
        green in 0usize..8,
        seed in any::<u64>(),
        toll in prop_oneof![Just(0.0), 0.5f64..8.0],
    ) {
        let scenario = small_city(width, horizon, yellow, green, seed);
        let design = RewardDesign::Toll { alpha: toll };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = env::reset(&scenario, seed);
        while !state.is_done(&scenario) {
            let mut actions = vec![None; state.drivers.len()];
            for (i, _, obs) in state.idle_observations() {
                let legal = scenario.legal_actions(obs.grid);
                actions[i] = Some(legal[rng.random_range(0..legal.len())]);
            }
            state.step(&scenario, &actions, &design, &mut rng).unwrap();
            for (class, count) in [(DriverClass::Yellow, yellow), (DriverClass::Green, green)] {
                let (idle, enroute) = state.census(class);
                prop_assert_eq!(idle + enroute, count);
            }
        }
        let stats = &state.stats;
        prop_assert_eq!(stats.green_restricted_pickups, 0);
        prop_assert!(stats.fulfilled <= stats.total_orders);
        prop_assert_eq!(stats.cbd_counts.len(), horizon);
        prop_assert_eq!(stats.occupancy.iter().sum::<usize>(), horizon * (yellow + green));
        if !stats.cbd_counts.is_empty() {
            let ptc = reward::compute_ptc(&stats.cbd_counts, yellow + green).unwrap();
            prop_assert!((0.0..=1.0).contains(&ptc));
        }
    }

    #[test]
    fn thinning_only_removes_cbd_bound_orders(
        n in 0usize..400,
        toll in 0.0f64..20.0,
        fare in 1.0f64..40.0,
        seed in any::<u64>(),
    ) {
        let cbd: BTreeSet<GridId> = [GridId(2)].into();
        let orders: Vec<OrderSpec> = (0..n)
            .map(|i| OrderSpec { origin: GridId(i % 3), destination: GridId((i / 3) % 3), appear_time: 1, fare, passengers: 1 })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kept, removed) = reward::thin_demand(orders, toll, &cbd, DEFAULT_ELASTICITY, &mut rng);
        prop_assert_eq!(kept.len() + removed.len(), n);
        prop_assert!(removed.iter().all(|o| reward::enters_cbd(o, &cbd)));
    }

    #[test]
    fn equilibrium_split_grows_with_the_charge(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let x = oracle::equilibrium_allocation(lo).unwrap();
        let y = oracle::equilibrium_allocation(hi).unwrap();
        prop_assert!(x.k <= y.k);
        prop_assert!((0.0..=1.0).contains(&x.orr) && (0.0..=1.0).contains(&x.osc));
    }

    #[test]
    fn posterior_is_symmetric_with_nonnegative_variance(
        points in prop::collection::vec((0.0f64..1.0, -1.0f64..1.0), 1..12),
        length in 0.05f64..0.5,
    ) {
        let mut state = GpState::new(GpHyper { length, sigma_f: 1.0, sigma_y: 0.01, delta: 0.1, dim: 1 });
        for (x, y) in points {
            state.push(x, y);
        }
        let grid = candidate_grid(0.0, 1.0, 33);
        let post = gp_posterior(&state, &grid).unwrap();
        for i in 0..grid.len() {
            prop_assert!(post.cov_at(i, i) >= 0.0);
            for j in 0..i {
                prop_assert!((post.cov_at(i, j) - post.cov_at(j, i)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn policy_checkpoint_round_trips_bit_exactly(seed in any::<u64>()) {
        let scenario = presets::service_charge_2x2();
        let policy = Policy::new(&scenario, &Hyperparams::two_by_two(), seed).unwrap();
        let text = policy.to_text();
        let back = Policy::from_text(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back, policy);
    }
}
