//! Closed-form equilibrium of the 2×2 service-charge case.
//!
//! A hundred drivers split between #1 (twenty $4.9 requests) and #4 (fifty
//! $10 requests). With `k` drivers in #1 the per-driver returns are
//!
//! ```text
//! r1(k) = 4.9            if k ≤ 20
//!       = 20·4.9 / k     otherwise
//! r4(k) = 500·(1 − sc) / (100 − k),   sc = α·(1 − 50/(100 − k)) if 50/(100 − k) ≤ 1 else 0
//! ```
//!
//! and the equilibrium is the smallest integer `k` at which no driver gains
//! by switching grids.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{self, ObjectiveConfig, ObjectiveKind};

pub const DRIVERS: usize = 100;
pub const ORDERS_G1: usize = 20;
pub const ORDERS_G4: usize = 50;
pub const FARE_G1: f64 = 4.9;
pub const FARE_G4: f64 = 10.0;
pub const TOTAL_ORDERS: usize = ORDERS_G1 + ORDERS_G4;

const STABILITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub alpha: f64,
    /// Drivers in #1.
    pub k: usize,
    pub return_g1: f64,
    pub return_g4: f64,
    pub orr: f64,
    pub osc: f64,
    pub objective: f64,
}

/// Service-charge fraction in #4 when `n4` drivers are there.
fn sc_g4(alpha: f64, n4: usize) -> f64 {
    if n4 == 0 {
        return 0.0;
    }
    reward::service_charge(alpha, ORDERS_G4 as f64 / n4 as f64)
}

/// Expected return of a driver in #1 when `k` drivers are there.
pub fn return_g1(k: usize) -> f64 {
    if k <= ORDERS_G1 {
        FARE_G1
    } else {
        ORDERS_G1 as f64 * FARE_G1 / k as f64
    }
}

/// Expected return of a driver in #4 when `k` drivers are in #1.
pub fn return_g4(alpha: f64, k: usize) -> f64 {
    let n4 = DRIVERS - k;
    if n4 == 0 {
        return FARE_G4;
    }
    let served = ORDERS_G4.min(n4) as f64;
    served * FARE_G4 * (1.0 - sc_g4(alpha, n4)) / n4 as f64
}

fn is_stable(alpha: f64, k: usize) -> bool {
    // a #4 driver moving to #1 would make it k+1 there
    let stay4 = k == DRIVERS || return_g1(k + 1) <= return_g4(alpha, k) + STABILITY_TOL;
    // a #1 driver moving to #4 would leave k-1 there
    let stay1 = k == 0 || return_g4(alpha, k - 1) <= return_g1(k) + STABILITY_TOL;
    stay4 && stay1
}

/// Metrics of an arbitrary split with `k` drivers in #1.
pub fn allocation_metrics(alpha: f64, k: usize) -> AllocationResult {
    let n4 = DRIVERS - k;
    let served1 = ORDERS_G1.min(k);
    let served4 = ORDERS_G4.min(n4);
    let sc = sc_g4(alpha, n4);
    let fares = served1 as f64 * FARE_G1 + served4 as f64 * FARE_G4;
    let charged = served4 as f64 * FARE_G4 * sc;
    let orr = (served1 + served4) as f64 / TOTAL_ORDERS as f64;
    let osc = if fares > 0.0 { charged / fares } else { 0.0 };
    AllocationResult {
        alpha,
        k,
        return_g1: return_g1(k),
        return_g4: return_g4(alpha, k),
        orr,
        osc,
        objective: reward::objective(orr, osc, 0.0, 0.0, &ObjectiveConfig::service_charge(), ObjectiveKind::ServiceCharge),
    }
}

/// Smallest `k` admitting no profitable unilateral deviation.
pub fn equilibrium_allocation(alpha: f64) -> Result<AllocationResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = (0..=DRIVERS)
        .find(|&k| is_stable(alpha, k))
        .ok_or_else(|| Error::InvalidArgument(format!("no stable allocation at alpha {alpha}")))?;
    Ok(allocation_metrics(alpha, k))
}

/// The α at which a #4 driver is indifferent with `k` drivers already in
/// #1, i.e. the root of `r4(k) = 4.9`.
pub fn critical_alpha(k: usize) -> Result<f64> {
    if !(1..=ORDERS_G1).contains(&k) {
        return Err(Error::InvalidArgument(format!("k must be in 1..={ORDERS_G1}, got {k}")));
    }
    let n4 = (DRIVERS - k) as f64;
    let base = ORDERS_G4 as f64 * FARE_G4 / n4;
    let slope = 1.0 - ORDERS_G4 as f64 / n4;
    Ok((1.0 - FARE_G1 / base) / slope)
}

/// Binomial probability mass, computed in log space.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n || !(0.0..=1.0).contains(&p) {
        return 0.0;
    }
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln_choose = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
    (ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// The α values the 2×2 discussion singles out: no charge, and the critical
/// values for one and twenty drivers in #1.
pub fn values_of_interest() -> Result<Vec<AllocationResult>> {
    let mut alphas = vec![0.0];
    for k in [1, ORDERS_G1] {
        // rounded to two decimals as the discussion quotes them
        alphas.push((critical_alpha(k)? * 100.0).round() / 100.0);
    }
    alphas.into_iter().map(equilibrium_allocation).collect()
}

pub fn write_table<W: Write>(rows: &[AllocationResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_charge_leaves_grid_one_empty() {
        let r = equilibrium_allocation(0.0).unwrap();
        assert_eq!(r.k, 0);
        assert!((r.orr - 50.0 / 70.0).abs() < 1e-12);
        assert_eq!(r.osc, 0.0);
        assert!((r.objective - 0.83).abs() < 0.005);
    }

    #[test]
    fn first_critical_value() {
        let r = equilibrium_allocation(0.06).unwrap();
        assert_eq!(r.k, 1);
        assert!((r.orr - 51.0 / 70.0).abs() < 1e-12);
        assert!((r.osc - 0.03).abs() < 0.005);
        assert!((r.objective - 0.83).abs() < 0.005);
    }

    #[test]
    fn twenty_drivers_in_grid_one_at_optimum() {
        let r = equilibrium_allocation(0.58).unwrap();
        assert_eq!(r.k, 20);
        assert_eq!(r.orr, 1.0);
        assert!((r.osc - 0.18).abs() < 0.005);
        assert!((r.objective - 0.93).abs() < 0.005);
    }

    #[test]
    fn critical_alphas() {
        assert!((critical_alpha(1).unwrap() - 0.06).abs() < 0.005);
        assert!((critical_alpha(20).unwrap() - 0.58).abs() < 0.005);
        let mid = critical_alpha(10).unwrap();
        assert!(critical_alpha(1).unwrap() < mid && mid < critical_alpha(20).unwrap());
        for k in 1..20 {
            assert!(critical_alpha(k).unwrap() < critical_alpha(k + 1).unwrap());
        }
        assert!(critical_alpha(0).is_err());
        assert!(critical_alpha(21).is_err());
        // 5.05 × (1 − 0.49α) = 4.9 for the first driver
        assert!((critical_alpha(1).unwrap() - (1.0 - 4.9 / (500.0 / 99.0)) / (1.0 - 50.0 / 99.0)).abs() < 1e-15);
    }

    #[test]
    fn critical_alpha_is_indifference_point() {
        for k in 1..=20 {
            let a = critical_alpha(k).unwrap();
            assert!((return_g4(a, k) - FARE_G1).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibria_admit_no_profitable_deviation() {
        for i in 0..=100 {
            let alpha = i as f64 / 100.0;
            let r = equilibrium_allocation(alpha).unwrap();
            if r.k < DRIVERS {
                assert!(return_g1(r.k + 1) <= return_g4(alpha, r.k) + 1e-9);
            }
            if r.k > 0 {
                assert!(return_g4(alpha, r.k - 1) <= return_g1(r.k) + 1e-9);
            }
        }
        assert!(equilibrium_allocation(1.5).is_err());
    }

    #[test]
    fn objective_peaks_at_twenty() {
        let best = (1..=20)
            .map(|k| equilibrium_allocation(critical_alpha(k).unwrap().min(1.0)).unwrap())
            .max_by(|a, b| a.objective.total_cmp(&b.objective))
            .unwrap();
        assert_eq!(best.k, 20);
        assert!((best.objective - 0.93).abs() < 0.005);
    }

    #[test]
    fn binomial_values() {
        assert!((binomial_pmf(100, 21, 0.2) - 0.0946).abs() < 5e-4);
        assert_eq!(binomial_pmf(10, 0, 0.0), 1.0);
        assert_eq!(binomial_pmf(10, 3, 0.0), 0.0);
        let total: f64 = (0..=100).map(|k| binomial_pmf(100, k, 0.2)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // direct product for a small case
        assert!((binomial_pmf(5, 2, 0.3) - 10.0 * 0.09 * 0.343).abs() < 1e-14);
    }

    #[test]
    fn table_has_three_rows() {
        let rows = values_of_interest().unwrap();
        let ks: Vec<_> = rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 1, 20]);
        let mut buf = Vec::new();
        write_table(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("alpha,k,return_g1,return_g4,orr,osc,objective"));
    }
}
