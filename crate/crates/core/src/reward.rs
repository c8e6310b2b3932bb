//! Reward-design schedules and system-level metrics.
//!
//! Everything here is a pure function of its inputs. The simulator calls
//! [`RewardDesign::driver_fare`] and [`toll_adjust`] inside transitions;
//! the metric functions turn an episode's bookkeeping into a
//! [`MetricsReport`].

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GridId, OrderSpec};
use crate::error::{Error, Result};
use crate::ingest::TurnstileCounts;

/// Demand falls by this fraction of the relative fare increase.
pub const DEFAULT_ELASTICITY: f64 = 0.22;

/// Upper-level reward modification handed to every driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardDesign {
    /// Drivers keep the full fare.
    None,
    /// Commission `alpha * (1 - ds)` on orders picked up where demand/supply `ds <= 1`.
    ServiceCharge { alpha: f64 },
    /// Charge of `alpha` whenever a vacant driver crosses into the CBD.
    Toll { alpha: f64 },
    /// Flat deduction of `alpha` currency units from every order picked up in `grids`.
    FlatDeduction { alpha: f64, grids: Vec<usize> },
}

/// Which composed objective applies to a design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `w * ORR + (1 - w) * (1 - OSC)`.
    ServiceCharge,
    /// `-(w * PTC + (1 - w) * ICS)`.
    Toll,
}

impl RewardDesign {
    pub fn alpha(&self) -> f64 {
        match self {
            RewardDesign::None => 0.0,
            RewardDesign::ServiceCharge { alpha }
            | RewardDesign::Toll { alpha }
            | RewardDesign::FlatDeduction { alpha, .. } => *alpha,
        }
    }

    /// Same design family with a different parameter. `None` is unaffected.
    pub fn with_alpha(&self, alpha: f64) -> RewardDesign {
        match self {
            RewardDesign::None => RewardDesign::None,
            RewardDesign::ServiceCharge { .. } => RewardDesign::ServiceCharge { alpha },
            RewardDesign::Toll { .. } => RewardDesign::Toll { alpha },
            RewardDesign::FlatDeduction { grids, .. } => RewardDesign::FlatDeduction {
                alpha,
                grids: grids.clone(),
            },
        }
    }

    pub fn objective_kind(&self) -> ObjectiveKind {
        match self {
            RewardDesign::Toll { .. } => ObjectiveKind::Toll,
            _ => ObjectiveKind::ServiceCharge,
        }
    }

    pub fn toll(&self) -> f64 {
        match self {
            RewardDesign::Toll { alpha } => *alpha,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "reward-design parameter must be finite and nonnegative, got {alpha}"
            )));
        }
        match self {
            RewardDesign::ServiceCharge { alpha } if *alpha > 1.0 => Err(Error::InvalidArgument(
                format!("service-charge alpha must lie in [0, 1], got {alpha}"),
            )),
            RewardDesign::Toll { alpha } if *alpha > 10.0 => Err(Error::InvalidArgument(format!(
                "toll must lie in [0, 10], got {alpha}"
            ))),
            _ => Ok(()),
        }
    }

    /// Driver revenue for an order picked up in `grid`, where the grid's
    /// demand-to-supply ratio at matching time is `ds`. Returns the revenue
    /// and the fraction of the fare withheld by the platform.
    pub fn driver_fare(&self, fare: f64, grid: GridId, ds: f64) -> (f64, f64) {
        match self {
            RewardDesign::ServiceCharge { alpha } => {
                let sc = service_charge(*alpha, ds);
                (driver_revenue(fare, sc), sc)
            }
            RewardDesign::FlatDeduction { alpha, grids } if grids.contains(&grid.0) => {
                let sc = (alpha / fare).min(1.0);
                (fare - alpha, sc)
            }
            _ => (fare, 0.0),
        }
    }
}

/// Piecewise-linear service charge: `alpha * (1 - ds)` when the grid is
/// oversupplied (`ds <= 1`), zero otherwise.
pub fn service_charge(alpha: f64, ds: f64) -> f64 {
    if ds <= 1.0 {
        alpha * (1.0 - ds.max(0.0))
    } else {
        0.0
    }
}

pub fn driver_revenue(fare: f64, sc: f64) -> f64 {
    fare * (1.0 - sc)
}

/// Reward delta for a vacant reposition from `from` into `to`.
///
/// Occupied trips are never charged to the driver; the toll reaches
/// passengers through [`thin_demand`] instead.
pub fn toll_adjust(from: GridId, to: GridId, occupied: bool, toll: f64, cbd: &BTreeSet<GridId>) -> f64 {
    if !occupied && toll > 0.0 && !cbd.contains(&from) && cbd.contains(&to) {
        -toll
    } else {
        0.0
    }
}

pub fn removal_probability(fare: f64, toll: f64, elasticity: f64) -> f64 {
    if toll <= 0.0 {
        return 0.0;
    }
    (elasticity * toll / fare).clamp(0.0, 1.0)
}

/// True when the trip starts outside the CBD and ends inside it.
pub fn enters_cbd(order: &OrderSpec, cbd: &BTreeSet<GridId>) -> bool {
    !cbd.contains(&order.origin) && cbd.contains(&order.destination)
}

/// Remove CBD-bound orders independently with probability
/// `min(1, elasticity * toll / fare)`. Returns `(surviving, removed)`.
pub fn thin_demand<R: Rng + ?Sized>(
    orders: Vec<OrderSpec>,
    toll: f64,
    cbd: &BTreeSet<GridId>,
    elasticity: f64,
    rng: &mut R,
) -> (Vec<OrderSpec>, Vec<OrderSpec>) {
    if toll <= 0.0 {
        return (orders, Vec::new());
    }
    let mut kept = Vec::with_capacity(orders.len());
    let mut removed = Vec::new();
    for order in orders {
        if enters_cbd(&order, cbd) {
            let p = removal_probability(order.fare, toll, elasticity);
            if rng.random::<f64>() < p {
                removed.push(order);
                continue;
            }
        }
        kept.push(order);
    }
    (kept, removed)
}

/// Order response rate.
pub fn compute_orr(fulfilled: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("ORR undefined for zero orders".into()));
    }
    if fulfilled > total {
        return Err(Error::InvalidArgument(format!(
            "fulfilled {fulfilled} exceeds total {total}"
        )));
    }
    Ok(fulfilled as f64 / total as f64)
}

/// Overall service charge from `(fare, sc fraction)` pairs of serviced orders.
/// An empty set yields 0.
pub fn compute_osc(serviced: &[(f64, f64)]) -> f64 {
    let (charged, total) = serviced
        .iter()
        .fold((0.0, 0.0), |(c, t), &(fare, sc)| (c + sc * fare, t + fare));
    if total > 0.0 {
        charged / total
    } else {
        0.0
    }
}

/// Time-averaged fraction of the fleet located inside the CBD.
pub fn compute_ptc(cbd_counts: &[usize], fleet: usize) -> Result<f64> {
    if cbd_counts.is_empty() {
        return Err(Error::InvalidArgument("PTC needs at least one time step".into()));
    }
    if fleet == 0 {
        return Err(Error::InvalidArgument("PTC undefined for an empty fleet".into()));
    }
    let mut acc = 0.0;
    for &c in cbd_counts {
        if c > fleet {
            return Err(Error::InvalidArgument(format!(
                "CBD count {c} exceeds fleet size {fleet}"
            )));
        }
        acc += c as f64 / fleet as f64;
    }
    Ok(acc / cbd_counts.len() as f64)
}

/// Denominator used for the exit half of subway crowdedness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitDenominator {
    #[default]
    NetExits,
    /// Divide exits by net entries as well (literal reading of the published formula).
    NetEntries,
}

/// Per-grid increase in subway crowdedness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCrowdedness {
    pub grid: usize,
    pub entry: f64,
    pub exit: f64,
    pub ics: f64,
}

/// Per-grid crowdedness for the `m` busiest grids (ranked by baseline
/// net entries + net exits, ties by grid index).
pub fn ics_by_grid(
    unserviced: &[OrderSpec],
    counts: &TurnstileCounts,
    m: usize,
    denominator: ExitDenominator,
) -> Result<Vec<GridCrowdedness>> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let mut ranked: Vec<_> = counts.grids.iter().collect();
    if m > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "m = {m} exceeds the {} grids with turnstile data",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| {
        (b.net_entries + b.net_exits)
            .cmp(&(a.net_entries + a.net_exits))
            .then(a.grid.cmp(&b.grid))
    });
    ranked
        .into_iter()
        .take(m)
        .map(|g| {
            let exit_base = match denominator {
                ExitDenominator::NetExits => g.net_exits,
                ExitDenominator::NetEntries => g.net_entries,
            };
            if g.net_entries == 0 || exit_base == 0 {
                return Err(Error::InvalidArgument(format!(
                    "grid {} has a zero turnstile baseline",
                    g.grid
                )));
            }
            let (from, to) = unserviced.iter().fold((0u64, 0u64), |(f, t), o| {
                let p = o.passengers as u64;
                (
                    f + if o.origin.0 == g.grid { p } else { 0 },
                    t + if o.destination.0 == g.grid { p } else { 0 },
                )
            });
            let entry = from as f64 / g.net_entries as f64;
            let exit = to as f64 / exit_base as f64;
            Ok(GridCrowdedness {
                grid: g.grid,
                entry,
                exit,
                ics: 0.5 * (entry + exit),
            })
        })
        .collect()
}

/// Increase in subway crowdedness averaged over the top-`m` grids.
pub fn compute_ics(
    unserviced: &[OrderSpec],
    counts: &TurnstileCounts,
    m: usize,
    denominator: ExitDenominator,
) -> Result<f64> {
    let per_grid = ics_by_grid(unserviced, counts, m, denominator)?;
    Ok(per_grid.iter().map(|g| g.ics).sum::<f64>() / m as f64)
}

/// Weights and constants of the upper-level objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub w: f64,
    pub m: usize,
    pub elasticity: f64,
    #[serde(default)]
    pub exit_denominator: ExitDenominator,
}

impl ObjectiveConfig {
    /// `w = 3/5`: the platform weighs response rate over commission.
    pub fn service_charge() -> Self {
        ObjectiveConfig {
            w: 0.6,
            m: 20,
            elasticity: DEFAULT_ELASTICITY,
            exit_denominator: ExitDenominator::NetExits,
        }
    }

    /// `w = 1/5`, balancing the magnitudes of PTC and ICS.
    pub fn toll() -> Self {
        ObjectiveConfig {
            w: 0.2,
            ..Self::service_charge()
        }
    }

    pub fn for_kind(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::ServiceCharge => Self::service_charge(),
            ObjectiveKind::Toll => Self::toll(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::InvalidArgument(format!("w must lie in [0, 1], got {}", self.w)));
        }
        if self.m == 0 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        Ok(())
    }
}

/// System metrics of one or more evaluated episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alpha: f64,
    pub orr: f64,
    pub osc: f64,
    pub ptc: f64,
    pub ics: f64,
    pub mean_reward: f64,
    pub objective: f64,
}

pub fn objective(orr: f64, osc: f64, ptc: f64, ics: f64, config: &ObjectiveConfig, kind: ObjectiveKind) -> f64 {
    let w = config.w;
    match kind {
        ObjectiveKind::ServiceCharge => w * orr + (1.0 - w) * (1.0 - osc),
        ObjectiveKind::Toll => -(w * ptc + (1.0 - w) * ics),
    }
}

impl MetricsReport {
    /// Recompute `objective` from the stored ratios.
    pub fn with_objective(mut self, config: &ObjectiveConfig, kind: ObjectiveKind) -> Self {
        self.objective = objective(self.orr, self.osc, self.ptc, self.ics, config, kind);
        self
    }
}
