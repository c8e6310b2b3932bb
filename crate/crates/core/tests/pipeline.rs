use fleetdesign::ingest::{self, CityAssembly, GridSpec, TimeSpec, TripColumns, TurnstileColumns};
use fleetdesign::marl::{self, EvalConfig, EvalMode, Hyperparams};
use fleetdesign::{presets, ObjectiveConfig, Policy, RewardDesign, Scenario};

const TRIPS: &str = "\
pickup_datetime,dropoff_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude,fare
2014-05-01 16:59:00,2014-05-01 17:08:30,-73.978818,40.785048,-73.965570,40.800718,6.5
2014-05-01 16:59:00,2014-05-01 17:23:00,-73.960280,40.778892,-73.975542,40.751427,15.5
2014-05-02 17:05:00,2014-05-02 17:15:00,-73.978818,40.785048,-73.960280,40.778892,8.0
";

const TURNSTILE: &str = "\
turnstile_id,date,time,entries,exits,grid
\"(A002, R051, 02-00-00)\",05/01/2014,16:00:00,\"4,593,637\",\"1,564,283\",7
\"(A002, R051, 02-00-00)\",05/01/2014,20:00:00,\"4,594,523\",\"1,564,348\",7
";

#[test]
fn ingested_tables_assemble_into_a_trainable_scenario() {
    let (trips, rejected) = ingest::parse_trips(TRIPS.as_bytes(), &TripColumns::default()).unwrap();
    assert!(rejected.is_empty());
    let (counts, _) = ingest::parse_turnstile(TURNSTILE.as_bytes(), &TurnstileColumns::default()).unwrap();
    let time = TimeSpec::evening_peak();
    let grid = GridSpec { origin_lon: -74.0, origin_lat: 40.70, side_m: 1000.0, width: 4, height: 12 };
    let tensor = ingest::discretize(&ingest::filter_weekday_peak(trips, &time), &grid, &time).unwrap();
    assert_eq!(tensor.total(), 3);
    assert_eq!(tensor.days, 2);

    let assembly = CityAssembly { cbd: vec![7], restricted: vec![], yellow: 4, green: 0, demand_scale: 1.0 };
    let config = ingest::scenario_from_demand(&tensor, Some(counts), &assembly);
    let scenario = Scenario::build(config).unwrap();
    assert_eq!(scenario.horizon(), 80);

    let hyper = Hyperparams { episodes: 3, batch_size: 16, critic_hidden: vec![8], actor_hidden: vec![8], ..Hyperparams::default() };
    let design = RewardDesign::Toll { alpha: 2.5 };
    let eval = EvalConfig::new(2, 1, EvalMode::Stochastic, ObjectiveConfig { m: 1, ..ObjectiveConfig::toll() });
    let (policy, trace, report) = marl::train_and_evaluate(&scenario, &design, &hyper, 0, &eval).unwrap();
    assert_eq!(trace.len(), 3);
    assert!(report.objective.is_finite());

    // a reloaded checkpoint evaluates identically
    let reloaded = Policy::from_text(&policy.to_text()).unwrap();
    assert_eq!(marl::evaluate(&reloaded, &scenario, &design, &eval).unwrap(), report);
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let scenario = presets::two_driver();
    let hyper = Hyperparams { episodes: 50, actor_delay: 5, ..Hyperparams::two_driver() };
    let design = presets::example_deduction();
    let a = marl::train(&scenario, &design, &hyper, 11).unwrap();
    let b = marl::train(&scenario, &design, &hyper, 11).unwrap();
    assert_eq!(a, b);
    let c = marl::train(&scenario, &design, &hyper, 12).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn greedy_evaluation_of_the_same_policy_is_deterministic() {
    let scenario = presets::service_charge_2x2();
    let policy = Policy::new(&scenario, &Hyperparams::two_by_two(), 4).unwrap();
    let design = RewardDesign::ServiceCharge { alpha: 0.3 };
    let eval = EvalConfig::new(10, 2, EvalMode::Greedy, ObjectiveConfig::service_charge());
    let a = marl::evaluate_episodes(&policy, &scenario, &design, &eval).unwrap();
    let b = marl::evaluate_episodes(&policy, &scenario, &design, &eval).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|e| (0.0..=1.0).contains(&e.orr)));
}
