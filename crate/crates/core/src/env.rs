//! Discrete-time grid-world fleet simulator.
//!
//! Cells are numbered row-major: `index = row * width + col`, row 0 on top.
//! At each tick every idle driver enters a neighbouring cell (or stays),
//! orders appearing at the next tick are matched uniformly at random among
//! the drivers that entered their cell, and matched drivers stay busy for the
//! trip's travel time. Unmatched orders expire at the end of their tick.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TurnstileCounts;
use crate::reward::{self, RewardDesign};

pub const NUM_ACTIONS: usize = 5;

/// Penalty for trying to leave the study area when the config does not override it.
pub const DEFAULT_BOUNDARY_PENALTY: f64 = -100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridId(pub usize);

/// Cell reached by `action` from `from` on a `width × height` row-major
/// grid; `None` when the move leaves the grid.
pub fn grid_neighbor(width: usize, height: usize, from: GridId, action: Action) -> Option<GridId> {
    let (dr, dc) = action.delta();
    let row = (from.0 / width) as isize + dr;
    let col = (from.0 % width) as isize + dc;
    if row < 0 || col < 0 || row >= height as isize || col >= width as isize {
        None
    } else {
        Some(GridId(row as usize * width + col as usize))
    }
}

/// Move into a neighbouring cell, or stay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stay,
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::Stay, Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Stay => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// What a driver sees: its cell and the clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub grid: GridId,
    pub time: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverClass {
    Yellow,
    /// May drop off anywhere but is never matched inside restricted cells.
    Green,
}

impl DriverClass {
    pub const ALL: [DriverClass; 2] = [DriverClass::Yellow, DriverClass::Green];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverStatus {
    Idle,
    Enroute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverState {
    pub class: DriverClass,
    /// Current cell; for an enroute driver, the trip's destination.
    pub location: GridId,
    pub status: DriverStatus,
    pub busy_until: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderSpec {
    pub origin: GridId,
    pub destination: GridId,
    pub appear_time: usize,
    pub fare: f64,
    #[serde(default = "one")]
    pub passengers: u32,
}

fn one() -> u32 {
    1
}

/// Poisson order rate for one `(origin, destination, tick)` triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRate {
    pub origin: usize,
    pub destination: usize,
    pub appear_time: usize,
    pub mean: f64,
    pub fare: f64,
    #[serde(default = "one")]
    pub passengers: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderSource {
    Fixed { orders: Vec<OrderConfig> },
    Poisson { rates: Vec<OrderRate> },
}

/// Order as written in a scenario file; `count` expands to identical copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderConfig {
    pub origin: usize,
    pub destination: usize,
    pub appear_time: usize,
    pub fare: f64,
    #[serde(default = "one")]
    pub passengers: u32,
    #[serde(default = "one_usize")]
    pub count: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetGroup {
    pub class: DriverClass,
    pub count: usize,
    /// Fixed starting cell; uniform random per episode when absent.
    #[serde(default)]
    pub grid: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TravelTimeConfig {
    /// Manhattan cell distance, at least one tick.
    #[default]
    Manhattan,
    /// Explicit symmetric table; missing pairs fall back to Manhattan distance.
    Table { entries: Vec<(usize, usize, usize)> },
}

/// Structured scenario description, as read from a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    #[serde(default)]
    pub cbd: Vec<usize>,
    #[serde(default)]
    pub restricted: Vec<usize>,
    #[serde(default)]
    pub travel_time: TravelTimeConfig,
    pub orders: OrderSource,
    pub fleet: Vec<FleetGroup>,
    #[serde(default = "default_penalty")]
    pub boundary_penalty: f64,
    /// Baseline subway flows used for crowdedness metrics.
    #[serde(default)]
    pub turnstile: Option<TurnstileCounts>,
}

fn default_penalty() -> f64 {
    DEFAULT_BOUNDARY_PENALTY
}

/// Validated, immutable world description.
#[derive(Clone, Debug)]
pub struct Scenario {
    config: ScenarioConfig,
    cbd: BTreeSet<GridId>,
    restricted: BTreeSet<GridId>,
    travel: HashMap<(usize, usize), usize>,
    fixed_orders: Vec<OrderSpec>,
}

impl Scenario {
    pub fn build(config: ScenarioConfig) -> Result<Scenario> {
        let cells = config.width * config.height;
        fn bad<T>(msg: String) -> Result<T> {
            Err(Error::InvalidScenario(msg))
        }
        if config.width == 0 || config.height == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if config.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !config.boundary_penalty.is_finite() {
            return bad("boundary penalty must be finite".into());
        }
        let cbd = cell_set("cbd", &config.cbd, cells)?;
        let restricted = cell_set("restricted", &config.restricted, cells)?;

        let mut travel = HashMap::new();
        if let TravelTimeConfig::Table { entries } = &config.travel_time {
            for &(a, b, steps) in entries {
                if a >= cells || b >= cells {
                    return bad(format!("travel-time entry ({a}, {b}) outside the grid"));
                }
                if steps == 0 {
                    return bad(format!("travel time for ({a}, {b}) must be positive"));
                }
                for key in [(a, b), (b, a)] {
                    if let Some(&prev) = travel.get(&key) {
                        if prev != steps {
                            return bad(format!("travel time for ({a}, {b}) is not symmetric"));
                        }
                    }
                    travel.insert(key, steps);
                }
            }
        }

        let check_order = |o: usize, d: usize, t: usize, fare: f64, pax: u32| -> Result<()> {
            if o >= cells || d >= cells {
                return bad(format!("order ({o} -> {d}) outside the grid"));
            }
            if t > config.horizon {
                return bad(format!("order appears at {t}, after the horizon {}", config.horizon));
            }
            if !(fare > 0.0 && fare.is_finite()) {
                return bad(format!("order fare must be positive, got {fare}"));
            }
            if pax == 0 {
                return bad("orders need at least one passenger".into());
            }
            Ok(())
        };
        let mut fixed_orders = Vec::new();
        match &config.orders {
            OrderSource::Fixed { orders } => {
                for o in orders {
                    check_order(o.origin, o.destination, o.appear_time, o.fare, o.passengers)?;
                    for _ in 0..o.count {
                        fixed_orders.push(OrderSpec {
                            origin: GridId(o.origin),
                            destination: GridId(o.destination),
                            appear_time: o.appear_time,
                            fare: o.fare,
                            passengers: o.passengers,
                        });
                    }
                }
            }
            OrderSource::Poisson { rates } => {
                for r in rates {
                    check_order(r.origin, r.destination, r.appear_time, r.fare, r.passengers)?;
                    if !(r.mean >= 0.0 && r.mean.is_finite()) {
                        return bad(format!("order rate must be nonnegative, got {}", r.mean));
                    }
                }
            }
        }

        for g in &config.fleet {
            if let Some(cell) = g.grid {
                if cell >= cells {
                    return bad(format!("fleet starting cell {cell} outside the grid"));
                }
            }
        }

        Ok(Scenario {
            config,
            cbd,
            restricted,
            travel,
            fixed_orders,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn num_cells(&self) -> usize {
        self.config.width * self.config.height
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn cbd(&self) -> &BTreeSet<GridId> {
        &self.cbd
    }

    pub fn restricted(&self) -> &BTreeSet<GridId> {
        &self.restricted
    }

    pub fn boundary_penalty(&self) -> f64 {
        self.config.boundary_penalty
    }

    pub fn turnstile(&self) -> Option<&TurnstileCounts> {
        self.config.turnstile.as_ref()
    }

    pub fn fleet_size(&self) -> usize {
        self.config.fleet.iter().map(|g| g.count).sum()
    }

    pub fn fleet_size_of(&self, class: DriverClass) -> usize {
        self.config
            .fleet
            .iter()
            .filter(|g| g.class == class)
            .map(|g| g.count)
            .sum()
    }

    /// Cell reached by `action` from `from`; `None` when the move leaves the grid.
    pub fn neighbor(&self, from: GridId, action: Action) -> Option<GridId> {
        grid_neighbor(self.config.width, self.config.height, from, action)
    }

    /// Actions that keep the driver on the grid.
    pub fn legal_actions(&self, from: GridId) -> Vec<Action> {
        Action::ALL
            .into_iter()
            .filter(|&a| self.neighbor(from, a).is_some())
            .collect()
    }

    pub fn travel_time(&self, from: GridId, to: GridId) -> usize {
        if let Some(&t) = self.travel.get(&(from.0, to.0)) {
            return t;
        }
        let w = self.config.width;
        let dr = (from.0 / w).abs_diff(to.0 / w);
        let dc = (from.0 % w).abs_diff(to.0 % w);
        (dr + dc).max(1)
    }

    /// Draw one episode's orders.
    pub fn realize_orders<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<OrderSpec> {
        match &self.config.orders {
            OrderSource::Fixed { .. } => self.fixed_orders.clone(),
            OrderSource::Poisson { rates } => {
                let mut out = Vec::new();
                for r in rates {
                    if r.mean <= 0.0 {
                        continue;
                    }
                    let n = Poisson::new(r.mean).map(|p| p.sample(rng) as usize).unwrap_or(0);
                    for _ in 0..n {
                        out.push(OrderSpec {
                            origin: GridId(r.origin),
                            destination: GridId(r.destination),
                            appear_time: r.appear_time,
                            fare: r.fare,
                            passengers: r.passengers,
                        });
                    }
                }
                out
            }
        }
    }
}

fn cell_set(name: &str, cells: &[usize], n: usize) -> Result<BTreeSet<GridId>> {
    let mut set = BTreeSet::new();
    for &c in cells {
        if c >= n {
            return Err(Error::InvalidScenario(format!("{name} cell {c} outside a grid of {n} cells")));
        }
        if !set.insert(GridId(c)) {
            return Err(Error::InvalidScenario(format!("{name} cell {c} listed twice")));
        }
    }
    Ok(set)
}

/// One agent transition, the replay-buffer unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub driver: usize,
    pub class: DriverClass,
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    /// Demand/supply ratio of the cell the driver entered.
    pub mean_action: f64,
    /// Mean action the driver would have faced under each action, counting
    /// itself as an extra entrant for the actions it did not take.
    pub mean_actions: [f64; NUM_ACTIONS],
    pub next_obs: Observation,
    /// `mean_actions` of the driver's next decision; zeros for terminal records.
    pub next_mean_actions: [f64; NUM_ACTIONS],
    pub terminal: bool,
}

/// Demand and supply per entered cell at one tick.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeanActionMap {
    pub time: usize,
    entries: HashMap<GridId, (usize, usize)>,
}

impl MeanActionMap {
    pub fn new(time: usize) -> Self {
        MeanActionMap { time, entries: HashMap::new() }
    }

    pub fn insert(&mut self, grid: GridId, demand: usize, supply: usize) {
        self.entries.insert(grid, (demand, supply));
    }

    pub fn demand(&self, grid: GridId) -> Option<usize> {
        self.entries.get(&grid).map(|e| e.0)
    }

    pub fn supply(&self, grid: GridId) -> Option<usize> {
        self.entries.get(&grid).map(|e| e.1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GridId, usize, usize)> + '_ {
        self.entries.iter().map(|(&g, &(d, s))| (g, d, s))
    }
}

/// Demand-to-supply ratio in `grid` at tick `t`.
pub fn mean_action(map: &MeanActionMap, grid: GridId, t: usize) -> Result<f64> {
    match map.entries.get(&grid) {
        Some(&(demand, supply)) if map.time == t && supply > 0 => Ok(demand as f64 / supply as f64),
        _ => Err(Error::NoEntrants { grid: grid.0, time: t }),
    }
}

/// Drivers eligible for pickup in a cell: green drivers are dropped in restricted cells.
pub fn eligible_drivers(occupants: &[(usize, DriverClass)], restricted: bool) -> Vec<usize> {
    occupants
        .iter()
        .filter(|(_, c)| !(restricted && *c == DriverClass::Green))
        .map(|(i, _)| *i)
        .collect()
}

/// Uniform one-to-one assignment of `min(drivers, orders)` pairs, drawn
/// without replacement. Returns `(driver, order)` pairs.
pub fn match_orders<R: Rng + ?Sized>(drivers: &[usize], orders: &[usize], rng: &mut R) -> Vec<(usize, usize)> {
    let k = drivers.len().min(orders.len());
    if k == 0 {
        return Vec::new();
    }
    let mut d = drivers.to_vec();
    let mut o = orders.to_vec();
    let (d_pick, _) = d.partial_shuffle(rng, k);
    let (o_pick, _) = o.partial_shuffle(rng, k);
    d_pick.iter().copied().zip(o_pick.iter().copied()).collect()
}

/// Per-episode bookkeeping for the system metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub total_orders: usize,
    pub fulfilled: usize,
    /// `(fare, withheld fraction)` per serviced order.
    pub serviced: Vec<(f64, f64)>,
    /// Orders that expired unmatched or were removed by demand thinning.
    pub unserviced: Vec<OrderSpec>,
    pub removed_by_toll: usize,
    /// Drivers located in the CBD after each tick.
    pub cbd_counts: Vec<usize>,
    /// Driver-ticks spent in each cell.
    pub occupancy: Vec<usize>,
    pub green_restricted_pickups: usize,
    pub cumulative_reward: Vec<f64>,
}

/// Mutable simulation state of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub time: usize,
    pub drivers: Vec<DriverState>,
    orders_at: HashMap<(usize, GridId), Vec<usize>>,
    orders: Vec<OrderSpec>,
    pub stats: EpisodeStats,
}

/// Everything one tick produces.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub records: Vec<ExperienceRecord>,
    pub mean_actions: MeanActionMap,
}

/// Fresh episode: every driver idle at `t = 0`, orders drawn from the
/// scenario's source, random placement seeded by `seed`.
pub fn reset(scenario: &Scenario, seed: u64) -> SimState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drivers = Vec::with_capacity(scenario.fleet_size());
    for group in &scenario.config.fleet {
        for _ in 0..group.count {
            let cell = group
                .grid
                .unwrap_or_else(|| rng.random_range(0..scenario.num_cells()));
            drivers.push(DriverState {
                class: group.class,
                location: GridId(cell),
                status: DriverStatus::Idle,
                busy_until: 0,
            });
        }
    }
    let orders = scenario.realize_orders(&mut rng);
    let mut state = SimState {
        time: 0,
        stats: EpisodeStats {
            cumulative_reward: vec![0.0; drivers.len()],
            occupancy: vec![0; scenario.num_cells()],
            ..EpisodeStats::default()
        },
        drivers,
        orders_at: HashMap::new(),
        orders: Vec::new(),
    };
    state.set_orders(orders, Vec::new());
    state
}

impl SimState {
    /// Replace the episode's orders, e.g. after demand thinning. Must be
    /// called before the first step.
    pub fn set_orders(&mut self, orders: Vec<OrderSpec>, removed: Vec<OrderSpec>) {
        self.orders_at.clear();
        self.stats.total_orders = orders.len();
        self.stats.removed_by_toll = removed.len();
        self.stats.unserviced = removed;
        for (i, o) in orders.iter().enumerate() {
            if o.appear_time == 0 {
                // nobody can be matched before the first move
                self.stats.unserviced.push(o.clone());
            } else {
                self.orders_at.entry((o.appear_time, o.origin)).or_default().push(i);
            }
        }
        self.orders = orders;
    }

    pub fn orders(&self) -> &[OrderSpec] {
        &self.orders
    }

    pub fn take_orders(&mut self) -> Vec<OrderSpec> {
        std::mem::take(&mut self.orders)
    }

    pub fn is_done(&self, scenario: &Scenario) -> bool {
        self.time >= scenario.horizon()
    }

    /// `(driver, class, observation)` for every idle driver.
    pub fn idle_observations(&self) -> Vec<(usize, DriverClass, Observation)> {
        self.drivers
            .iter()
            .enumerate()
            .filter(|(_, d)| d.status == DriverStatus::Idle)
            .map(|(i, d)| (i, d.class, Observation { grid: d.location, time: self.time }))
            .collect()
    }

    fn demand_at(&self, t: usize, grid: GridId) -> usize {
        self.orders_at.get(&(t, grid)).map_or(0, Vec::len)
    }

    /// Advance one tick. `actions[i]` must be `Some` exactly for idle drivers.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        scenario: &Scenario,
        actions: &[Option<Action>],
        design: &RewardDesign,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if actions.len() != self.drivers.len() {
            return Err(Error::DimensionMismatch { expected: self.drivers.len(), got: actions.len() });
        }
        for (i, (d, a)) in self.drivers.iter().zip(actions).enumerate() {
            match (d.status, a) {
                (DriverStatus::Idle, None) => return Err(Error::MissingAction(i)),
                (DriverStatus::Enroute, Some(_)) => return Err(Error::DriverNotIdle(i)),
                _ => {}
            }
        }

        let t = self.time;
        let next_t = t + 1;
        let toll = design.toll();

        // Moves.
        let mut entered: Vec<(usize, GridId, f64)> = Vec::new(); // (driver, cell, move reward)
        let mut supply: HashMap<GridId, Vec<(usize, DriverClass)>> = HashMap::new();
        for (i, a) in actions.iter().enumerate() {
            let Some(a) = *a else { continue };
            let from = self.drivers[i].location;
            let (to, mut r) = match scenario.neighbor(from, a) {
                Some(to) => (to, 0.0),
                None => (from, scenario.boundary_penalty()),
            };
            r += reward::toll_adjust(from, to, false, toll, scenario.cbd());
            entered.push((i, to, r));
            supply.entry(to).or_default().push((i, self.drivers[i].class));
        }

        let mut map = MeanActionMap::new(next_t);
        for (&g, occ) in &supply {
            map.insert(g, self.demand_at(next_t, g), occ.len());
        }

        // Matching.
        let mut matched: HashMap<usize, (usize, f64, f64)> = HashMap::new(); // driver -> (order, revenue, sc)
        let mut served = vec![false; self.orders.len()];
        let mut cells: Vec<_> = supply.keys().copied().collect();
        cells.sort();
        for g in cells {
            let Some(open) = self.orders_at.get(&(next_t, g)) else { continue };
            let occupants = &supply[&g];
            let eligible = eligible_drivers(occupants, scenario.restricted().contains(&g));
            let ds = open.len() as f64 / occupants.len() as f64;
            for (driver, order) in match_orders(&eligible, open, rng) {
                let o = &self.orders[order];
                let (revenue, sc) = design.driver_fare(o.fare, g, ds);
                served[order] = true;
                if self.drivers[driver].class == DriverClass::Green && scenario.restricted().contains(&g) {
                    self.stats.green_restricted_pickups += 1;
                }
                self.stats.serviced.push((o.fare, sc));
                matched.insert(driver, (order, revenue, sc));
            }
        }
        self.stats.fulfilled += matched.len();
        for (&(time, _), idx) in &self.orders_at {
            if time == next_t {
                for &i in idx {
                    if !served[i] {
                        self.stats.unserviced.push(self.orders[i].clone());
                    }
                }
            }
        }

        // Transitions and records.
        let mut records = Vec::with_capacity(entered.len());
        for &(i, cell, move_reward) in &entered {
            let from = self.drivers[i].location;
            let a = actions[i].expect("entered drivers have actions");
            let mut reward = move_reward;
            let next_obs = if let Some(&(order, revenue, _)) = matched.get(&i) {
                let dest = self.orders[order].destination;
                let arrive = next_t + scenario.travel_time(cell, dest);
                reward += revenue;
                let d = &mut self.drivers[i];
                d.status = DriverStatus::Enroute;
                d.location = dest;
                d.busy_until = arrive;
                Observation { grid: dest, time: arrive }
            } else {
                self.drivers[i].location = cell;
                Observation { grid: cell, time: next_t }
            };
            self.stats.cumulative_reward[i] += reward;

            let observed = map.demand(cell).unwrap_or(0) as f64 / map.supply(cell).unwrap_or(1) as f64;
            let mut alt = [0.0; NUM_ACTIONS];
            for b in Action::ALL {
                let g = scenario.neighbor(from, b).unwrap_or(from);
                alt[b.index()] = if g == cell {
                    observed
                } else {
                    let s = map.supply(g).unwrap_or(0) + 1;
                    self.demand_at(next_t, g) as f64 / s as f64
                };
            }
            records.push(ExperienceRecord {
                driver: i,
                class: self.drivers[i].class,
                obs: Observation { grid: from, time: t },
                action: a,
                reward,
                mean_action: observed,
                mean_actions: alt,
                next_obs,
                next_mean_actions: [0.0; NUM_ACTIONS],
                terminal: next_obs.time >= scenario.horizon(),
            });
        }

        // Clock.
        self.time = next_t;
        let mut in_cbd = 0;
        for d in &mut self.drivers {
            if d.status == DriverStatus::Enroute && d.busy_until <= next_t {
                d.status = DriverStatus::Idle;
            }
            if scenario.cbd().contains(&d.location) {
                in_cbd += 1;
            }
            self.stats.occupancy[d.location.0] += 1;
        }
        self.stats.cbd_counts.push(in_cbd);

        Ok(StepOutcome { records, mean_actions: map })
    }

    /// Drivers per status and class, for conservation checks.
    pub fn census(&self, class: DriverClass) -> (usize, usize) {
        self.drivers.iter().filter(|d| d.class == class).fold((0, 0), |(i, e), d| match d.status {
            DriverStatus::Idle => (i + 1, e),
            DriverStatus::Enroute => (i, e + 1),
        })
    }
}

#[derive(Serialize)]
struct TransitionRow {
    driver: usize,
    class: DriverClass,
    grid: usize,
    t: usize,
    action: Action,
    reward: f64,
    mean_action: f64,
    next_grid: usize,
    next_t: usize,
}

/// Row-per-transition CSV of an episode trace.
pub fn write_transitions_csv<W: std::io::Write>(records: &[ExperienceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(TransitionRow {
            driver: r.driver,
            class: r.class,
            grid: r.obs.grid.0,
            t: r.obs.time,
            action: r.action,
            reward: r.reward,
            mean_action: r.mean_action,
            next_grid: r.next_obs.grid.0,
            next_t: r.next_obs.time,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn stay_all(state: &SimState) -> Vec<Option<Action>> {
        state
            .drivers
            .iter()
            .map(|d| (d.status == DriverStatus::Idle).then_some(Action::Stay))
            .collect()
    }

    #[test]
    fn transitions_csv_has_one_row_per_record() {
        let s = presets::two_driver();
        let mut st = reset(&s, 0);
        let acts = vec![Some(Action::Right), Some(Action::Left)];
        let out = st.step(&s, &acts, &RewardDesign::None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        write_transitions_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "driver,class,grid,t,action,reward,mean_action,next_grid,next_t");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,yellow,2,0,right,7.0,1.0,3,"));
        assert!(lines[2].starts_with("1,yellow,1,0,left,3.0,1.0,0,"));
    }

    #[test]
    fn neighbor_layout_matches_2x2_numbering() {
        // #1 #2 / #3 #4 -> cells 0 1 / 2 3
        let s = presets::two_driver();
        assert_eq!(s.neighbor(GridId(2), Action::Right), Some(GridId(3)));
        assert_eq!(s.neighbor(GridId(2), Action::Up), Some(GridId(0)));
        assert_eq!(s.neighbor(GridId(1), Action::Left), Some(GridId(0)));
        assert_eq!(s.neighbor(GridId(1), Action::Down), Some(GridId(3)));
        assert_eq!(s.neighbor(GridId(1), Action::Up), None);
        assert_eq!(s.neighbor(GridId(2), Action::Left), None);
    }

    #[test]
    fn build_rejects_bad_configs() {
        let mut cfg = presets::two_driver_config();
        cfg.cbd = vec![4];
        assert!(matches!(Scenario::build(cfg), Err(Error::InvalidScenario(_))));
        let mut cfg = presets::two_driver_config();
        cfg.restricted = vec![1, 1];
        assert!(Scenario::build(cfg).is_err());
        let mut cfg = presets::two_driver_config();
        cfg.horizon = 0;
        assert!(Scenario::build(cfg).is_err());
    }

    #[test]
    fn degenerate_world() {
        let cfg = ScenarioConfig {
            width: 1,
            height: 1,
            horizon: 1,
            cbd: vec![],
            restricted: vec![],
            travel_time: TravelTimeConfig::Manhattan,
            orders: OrderSource::Fixed { orders: vec![] },
            fleet: vec![FleetGroup { class: DriverClass::Yellow, count: 1, grid: None }],
            boundary_penalty: DEFAULT_BOUNDARY_PENALTY,
            turnstile: None,
        };
        let s = Scenario::build(cfg).unwrap();
        assert_eq!(s.legal_actions(GridId(0)), vec![Action::Stay]);
        let state = reset(&s, 3);
        assert_eq!(state.drivers[0].location, GridId(0));
    }

    #[test]
    fn reset_places_fixed_fleet_and_is_deterministic() {
        let s = presets::service_charge_2x2();
        let a = reset(&s, 11);
        let b = reset(&s, 11);
        assert_eq!(a, b);
        assert_eq!(a.time, 0);
        assert_eq!(a.drivers.iter().filter(|d| d.location == GridId(1)).count(), 50);
        assert_eq!(a.drivers.iter().filter(|d| d.location == GridId(2)).count(), 50);
        assert!(a.drivers.iter().all(|d| d.status == DriverStatus::Idle));
        assert_eq!(a.orders().len(), 70);
    }

    fn two_driver_step(a1: Action, a2: Action) -> (SimState, StepOutcome) {
        let s = presets::two_driver();
        let mut state = reset(&s, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = state
            .step(&s, &[Some(a1), Some(a2)], &RewardDesign::None, &mut rng)
            .unwrap();
        (state, out)
    }

    #[test]
    fn split_drivers_each_take_their_order() {
        // driver 1 (cell #3) goes right into #4, driver 2 (cell #2) goes left into #1
        let (_, out) = two_driver_step(Action::Right, Action::Left);
        let r: Vec<_> = out.records.iter().map(|r| (r.reward, r.mean_action)).collect();
        assert_eq!(r, vec![(7.0, 1.0), (3.0, 1.0)]);
    }

    #[test]
    fn both_into_grid_four_split_one_order() {
        let (_, out) = two_driver_step(Action::Right, Action::Down);
        let mut rewards: Vec<_> = out.records.iter().map(|r| r.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![0.0, 7.0]);
        assert!(out.records.iter().all(|r| r.mean_action == 0.5));
        // the driver that went to #1 instead would have been alone there
        assert!(out.records.iter().all(|r| r.mean_actions[Action::Up.index()] == 1.0
            || r.mean_actions[Action::Left.index()] == 1.0));
    }

    #[test]
    fn empty_demand_leaves_everyone_idle() {
        let mut cfg = presets::two_driver_config();
        cfg.orders = OrderSource::Fixed { orders: vec![] };
        let s = Scenario::build(cfg).unwrap();
        let mut state = reset(&s, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = state.step(&s, &[Some(Action::Right), Some(Action::Left)], &RewardDesign::None, &mut rng).unwrap();
        assert!(out.records.iter().all(|r| r.reward == 0.0 && r.mean_action == 0.0));
        assert!(state.drivers.iter().all(|d| d.status == DriverStatus::Idle));
    }

    #[test]
    fn off_grid_move_is_penalised_and_stays() {
        let (state, out) = two_driver_step(Action::Left, Action::Up);
        assert_eq!(out.records[0].reward, DEFAULT_BOUNDARY_PENALTY);
        assert_eq!(state.drivers[0].location, GridId(2));
        assert_eq!(state.drivers[1].location, GridId(1));
    }

    #[test]
    fn step_rejects_actions_for_busy_drivers() {
        let s = presets::two_driver();
        let mut state = reset(&s, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        state.step(&s, &[Some(Action::Right), Some(Action::Left)], &RewardDesign::None, &mut rng).unwrap();
        assert!(state.drivers.iter().all(|d| d.status == DriverStatus::Enroute));
        let err = state.step(&s, &[Some(Action::Stay), None], &RewardDesign::None, &mut rng);
        assert!(matches!(err, Err(Error::DriverNotIdle(0))));
        let mut state = reset(&s, 0);
        let err = state.step(&s, &[Some(Action::Stay), None], &RewardDesign::None, &mut rng);
        assert!(matches!(err, Err(Error::MissingAction(1))));
    }

    #[test]
    fn matching_is_fair_between_two_drivers() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let wins = (0..trials)
            .filter(|_| match_orders(&[0, 1], &[0], &mut rng)[0].0 == 0)
            .count();
        assert!((wins as f64 / trials as f64 - 0.5).abs() < 0.02);
        assert!(match_orders(&[0, 1], &[], &mut rng).is_empty());
    }

    #[test]
    fn green_drivers_excluded_in_restricted_cells() {
        let occupants = [(0, DriverClass::Yellow), (1, DriverClass::Green), (2, DriverClass::Yellow)];
        let eligible = eligible_drivers(&occupants, true);
        assert_eq!(eligible, vec![0, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pairs = match_orders(&eligible, &[7, 8], &mut rng);
        pairs.sort();
        assert_eq!(pairs.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(eligible_drivers(&occupants, false).len(), 3);
    }

    #[test]
    fn mean_action_queries() {
        let mut map = MeanActionMap::new(1);
        map.insert(GridId(3), 1, 2);
        map.insert(GridId(0), 1, 1);
        map.insert(GridId(2), 0, 5);
        assert_eq!(mean_action(&map, GridId(3), 1).unwrap(), 0.5);
        assert_eq!(mean_action(&map, GridId(0), 1).unwrap(), 1.0);
        assert_eq!(mean_action(&map, GridId(2), 1).unwrap(), 0.0);
        assert!(mean_action(&map, GridId(1), 1).is_err());
        assert!(mean_action(&map, GridId(3), 0).is_err());
    }

    #[test]
    fn matched_driver_reappears_after_travel_time() {
        let s = presets::synthetic_city(3);
        let mut state = reset(&s, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut due: HashMap<usize, (usize, GridId)> = HashMap::new();
        while !state.is_done(&s) {
            let t = state.time;
            for (&i, &(at, grid)) in &due {
                if at == t {
                    assert_eq!(state.drivers[i].status, DriverStatus::Idle);
                    assert_eq!(state.drivers[i].location, grid);
                } else {
                    assert!(at > t);
                }
            }
            due.retain(|_, v| v.0 > t);
            let out = state.step(&s, &stay_all(&state), &RewardDesign::None, &mut rng).unwrap();
            for r in &out.records {
                if r.next_obs.time > t + 1 {
                    due.insert(r.driver, (r.next_obs.time, r.next_obs.grid));
                }
            }
            for class in DriverClass::ALL {
                let (idle, enroute) = state.census(class);
                assert_eq!(idle + enroute, s.fleet_size_of(class));
            }
        }
    }
}
