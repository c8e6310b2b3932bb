//! Built-in scenarios: the 2×2 worked examples and a synthetic city.
//!
//! 2×2 cells are numbered #1..#4 in reading order, i.e. cell indices 0..3
//! with #1 top-left and #4 bottom-right.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    DriverClass, FleetGroup, OrderConfig, OrderRate, OrderSource, Scenario, ScenarioConfig,
    TravelTimeConfig, DEFAULT_BOUNDARY_PENALTY,
};
use crate::ingest::{GridFlow, TurnstileCounts};
use crate::reward::RewardDesign;

/// Horizon of the 2×2 cases: a single reposition at `t = 0`, matched at `t = 1`.
pub const TWO_BY_TWO_HORIZON: usize = 1;

fn order(origin: usize, fare: f64, count: usize) -> OrderConfig {
    OrderConfig { origin, destination: origin, appear_time: 1, fare, passengers: 1, count }
}

fn two_by_two(orders: Vec<OrderConfig>, fleet: Vec<FleetGroup>) -> ScenarioConfig {
    ScenarioConfig {
        width: 2,
        height: 2,
        horizon: TWO_BY_TWO_HORIZON,
        cbd: vec![],
        restricted: vec![],
        travel_time: TravelTimeConfig::Manhattan,
        orders: OrderSource::Fixed { orders },
        fleet,
        boundary_penalty: DEFAULT_BOUNDARY_PENALTY,
        turnstile: None,
    }
}

/// Driver 1 in #3, driver 2 in #2; a $7 request in #4 and a $3 request in #1.
pub fn two_driver_config() -> ScenarioConfig {
    two_by_two(
        vec![order(3, 7.0, 1), order(0, 3.0, 1)],
        vec![
            FleetGroup { class: DriverClass::Yellow, count: 1, grid: Some(2) },
            FleetGroup { class: DriverClass::Yellow, count: 1, grid: Some(1) },
        ],
    )
}

pub fn two_driver() -> Scenario {
    Scenario::build(two_driver_config()).expect("preset is valid")
}

/// The $1.1 deduction on fares collected in #4.
pub fn example_deduction() -> RewardDesign {
    RewardDesign::FlatDeduction { alpha: 1.1, grids: vec![3] }
}

/// Fifty drivers each in #2 and #3; fifty $10 requests in #4 and twenty
/// $4.9 requests in #1.
pub fn service_charge_2x2_config() -> ScenarioConfig {
    two_by_two(
        vec![order(3, 10.0, 50), order(0, 4.9, 20)],
        vec![
            FleetGroup { class: DriverClass::Yellow, count: 50, grid: Some(1) },
            FleetGroup { class: DriverClass::Yellow, count: 50, grid: Some(2) },
        ],
    )
}

pub fn service_charge_2x2() -> Scenario {
    Scenario::build(service_charge_2x2_config()).expect("preset is valid")
}

/// Knobs of the synthetic congestion-pricing city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityParams {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    /// Inclusive `(row0, col0, row1, col1)` rectangle of tolled cells.
    pub cbd: (usize, usize, usize, usize),
    /// Inclusive rectangle where green drivers may not pick up.
    pub restricted: (usize, usize, usize, usize),
    pub yellow: usize,
    pub green: usize,
    /// Orders per step originating in each CBD cell.
    pub cbd_rate: f64,
    /// Orders per step originating in each non-CBD cell.
    pub outer_rate: f64,
    /// Share of non-CBD demand heading into the CBD.
    pub inbound_share: f64,
    pub base_fare: f64,
    pub fare_per_cell: f64,
    /// Baseline net entries (and exits) of each turnstile cell.
    pub turnstile_base: u64,
    /// Seed of the demand layout; episodes draw their own order counts.
    pub layout_seed: u64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            width: 10,
            height: 10,
            horizon: 12,
            cbd: (3, 3, 5, 5),
            restricted: (2, 2, 7, 7),
            yellow: 100,
            green: 50,
            cbd_rate: 0.9,
            outer_rate: 0.08,
            inbound_share: 0.5,
            base_fare: 5.0,
            fare_per_cell: 2.5,
            turnstile_base: 40,
            layout_seed: 2014,
        }
    }
}

fn rect(width: usize, r: (usize, usize, usize, usize)) -> Vec<usize> {
    let mut cells = Vec::new();
    for row in r.0..=r.2 {
        for col in r.1..=r.3 {
            cells.push(row * width + col);
        }
    }
    cells
}

/// Synthetic city: a hot CBD, a larger restricted core, Poisson demand, and
/// a turnstile baseline over the CBD and its ring of neighbours.
pub fn synthetic_city_config(p: &CityParams) -> ScenarioConfig {
    let cells = p.width * p.height;
    let cbd = rect(p.width, p.cbd);
    let restricted = rect(p.width, p.restricted);
    let mut layout = ChaCha8Rng::seed_from_u64(p.layout_seed);
    let dist = |a: usize, b: usize| {
        (a / p.width).abs_diff(b / p.width) + (a % p.width).abs_diff(b % p.width)
    };

    let mut rates = Vec::new();
    for origin in 0..cells {
        let in_cbd = cbd.contains(&origin);
        let total = if in_cbd { p.cbd_rate } else { p.outer_rate };
        // two destinations per origin; outside the CBD one of them is inbound
        let inbound = cbd[layout.random_range(0..cbd.len())];
        let mut other = layout.random_range(0..cells);
        while other == origin || cbd.contains(&other) {
            other = layout.random_range(0..cells);
        }
        let dests: Vec<(usize, f64)> = if in_cbd {
            vec![(other, 1.0)]
        } else {
            vec![(inbound, p.inbound_share), (other, 1.0 - p.inbound_share)]
        };
        for (destination, share) in dests {
            let fare = p.base_fare + p.fare_per_cell * dist(origin, destination) as f64;
            for t in 1..p.horizon {
                rates.push(OrderRate {
                    origin,
                    destination,
                    appear_time: t,
                    mean: total * share,
                    fare,
                    passengers: 1,
                });
            }
        }
    }

    let ring = rect(
        p.width,
        (p.cbd.0.saturating_sub(1), p.cbd.1.saturating_sub(1), (p.cbd.2 + 1).min(p.height - 1), (p.cbd.3 + 1).min(p.width - 1)),
    );
    let turnstile = TurnstileCounts {
        grids: ring
            .into_iter()
            .map(|grid| {
                let scale = if cbd.contains(&grid) { 2 } else { 1 };
                GridFlow { grid, net_entries: scale * p.turnstile_base, net_exits: scale * p.turnstile_base }
            })
            .collect(),
    };

    ScenarioConfig {
        width: p.width,
        height: p.height,
        horizon: p.horizon,
        cbd,
        restricted,
        travel_time: TravelTimeConfig::Manhattan,
        orders: OrderSource::Poisson { rates },
        fleet: vec![
            FleetGroup { class: DriverClass::Yellow, count: p.yellow, grid: None },
            FleetGroup { class: DriverClass::Green, count: p.green, grid: None },
        ],
        boundary_penalty: DEFAULT_BOUNDARY_PENALTY,
        turnstile: Some(turnstile),
    }
}

/// Default synthetic city with the given horizon.
pub fn synthetic_city(horizon: usize) -> Scenario {
    let p = CityParams { horizon, ..CityParams::default() };
    Scenario::build(synthetic_city_config(&p)).expect("preset is valid")
}

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 3] = ["two-driver", "service-charge-2x2", "synthetic-city"];

pub fn by_name(name: &str) -> Option<ScenarioConfig> {
    match name {
        "two-driver" => Some(two_driver_config()),
        "service-charge-2x2" => Some(service_charge_2x2_config()),
        "synthetic-city" => Some(synthetic_city_config(&CityParams::default())),
        _ => None,
    }
}
