//! Gaussian-process Bayesian optimization over a scalar design parameter.
//!
//! Exact GP regression with a squared-exponential kernel, an upper
//! confidence bound acquisition maximized over an even candidate grid, and
//! the budgeted loop with a consecutive-gap stopping rule.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const SIGMA_F_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length: f64,
    pub sigma_f: f64,
    pub sigma_y: f64,
    pub delta: f64,
    pub dim: usize,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper { length: 0.2, sigma_f: 1.0, sigma_y: 0.01, delta: 0.1, dim: 1 }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.sigma_f > 0.0
            && self.sigma_y >= 0.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.dim >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid GP hyperparameters {self:?}")))
        }
    }
}

/// Evaluated points plus the kernel hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpState {
    pub alphas: Vec<f64>,
    pub values: Vec<f64>,
    pub hyper: GpHyper,
}

impl GpState {
    pub fn new(hyper: GpHyper) -> Self {
        GpState { alphas: Vec::new(), values: Vec::new(), hyper }
    }

    pub fn push(&mut self, alpha: f64, value: f64) {
        self.alphas.push(alpha);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

/// Joint posterior over a set of candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub candidates: Vec<f64>,
    pub mean: Vec<f64>,
    /// Row-major `m × m` covariance.
    pub cov: Vec<f64>,
    /// Diagonal jitter that made the training matrix factorizable.
    pub jitter: f64,
}

impl Posterior {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.len() + j]
    }

    pub fn std(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.cov_at(i, i).max(0.0).sqrt()).collect()
    }

    /// Index and value of the largest mean, ties to the first.
    pub fn argmax_mean(&self) -> (usize, f64) {
        argmax(&self.mean)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "mean", "std"])?;
        for ((a, m), s) in self.candidates.iter().zip(&self.mean).zip(self.std()) {
            w.write_record([a.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

pub fn kernel(a: f64, b: f64, hyper: &GpHyper) -> f64 {
    let d = a - b;
    hyper.sigma_f * hyper.sigma_f * (-d * d / (2.0 * hyper.length * hyper.length)).exp()
}

/// Lower Cholesky factor of a row-major SPD matrix, or `None` if a pivot is
/// not positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Factor `a`, adding diagonal jitter from 1e-10 up to 1e-4 on failure.
pub fn cholesky_with_jitter(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    if let Some(l) = cholesky(a, n) {
        return Ok((l, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut b = a.to_vec();
        for i in 0..n {
            b[i * n + i] += jitter;
        }
        if let Some(l) = cholesky(&b, n) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitter: JITTER_MAX })
}

/// Solve `L x = b` in place.
fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Solve `Lᵀ x = b` in place.
fn back_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

/// Zero-mean GP posterior at `candidates` given the raw observations.
pub fn gp_posterior(state: &GpState, candidates: &[f64]) -> Result<Posterior> {
    state.hyper.validate()?;
    let n = state.len();
    if n == 0 {
        return Err(Error::InvalidArgument("posterior needs at least one observation".into()));
    }
    if state.values.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: state.values.len() });
    }
    let h = &state.hyper;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel(state.alphas[i], state.alphas[j], h);
        }
        k[i * n + i] += h.sigma_y * h.sigma_y;
    }
    let (l, jitter) = cholesky_with_jitter(&k, n)?;

    let mut weights = state.values.clone();
    forward_substitute(&l, n, &mut weights);
    back_substitute(&l, n, &mut weights);

    let m = candidates.len();
    // v[c] = L⁻¹ k(X, c)
    let mut v = Vec::with_capacity(m);
    let mut mean = Vec::with_capacity(m);
    for &c in candidates {
        let mut col: Vec<f64> = state.alphas.iter().map(|&a| kernel(a, c, h)).collect();
        mean.push(col.iter().zip(&weights).map(|(x, w)| x * w).sum());
        forward_substitute(&l, n, &mut col);
        v.push(col);
    }
    let mut cov = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let reduce: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let c = kernel(candidates[i], candidates[j], h) - reduce;
            cov[i * m + j] = c;
            cov[j * m + i] = c;
        }
        cov[i * m + i] = cov[i * m + i].max(0.0);
    }
    Ok(Posterior { candidates: candidates.to_vec(), mean, cov, jitter })
}

/// Exploration multiplier `sqrt(2 log(t^{d/2+2} π² / (3δ)))`.
pub fn ucb_beta(t: usize, dim: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    let exponent = dim as f64 / 2.0 + 2.0;
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    (2.0 * (exponent * t.ln() + (pi2 / (3.0 * delta)).ln())).max(0.0).sqrt()
}

pub fn ucb(posterior: &Posterior, t: usize, hyper: &GpHyper) -> Vec<f64> {
    let beta = ucb_beta(t, hyper.dim, hyper.delta);
    posterior.mean.iter().zip(posterior.std()).map(|(m, s)| m + beta * s).collect()
}

/// UCB argmax over the candidates; ties go to the first (smallest) α.
pub fn next_alpha(posterior: &Posterior, t: usize, hyper: &GpHyper) -> Result<f64> {
    if posterior.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let (i, _) = argmax(&ucb(posterior, t, hyper));
    Ok(posterior.candidates[i])
}

/// Whether the last `window` chosen α's are pairwise-consecutive within
/// `threshold`.
pub fn converged(history: &[f64], threshold: f64, window: usize) -> bool {
    if window < 2 || history.len() < window {
        return false;
    }
    history[history.len() - window..]
        .windows(2)
        .all(|p| (p[1] - p[0]).abs() < threshold)
}

pub fn candidate_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub lo: f64,
    pub hi: f64,
    /// Total evaluations, initial design included.
    pub budget: usize,
    /// Initial design size: both endpoints plus uniform random fill.
    pub b0: usize,
    pub candidates: usize,
    pub threshold: f64,
    pub window: usize,
    /// Kernel length as a fraction of the domain width.
    pub length_fraction: f64,
    /// Signal scale as a fraction of the observed value range.
    pub sigma_f_fraction: f64,
    pub sigma_y: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            lo: 0.0,
            hi: 1.0,
            budget: 20,
            b0: 5,
            candidates: 512,
            threshold: 0.05,
            window: 5,
            length_fraction: 0.2,
            sigma_f_fraction: 0.5,
            sigma_y: 0.01,
            delta: 0.1,
            seed: 0,
        }
    }
}

impl BoConfig {
    /// Toll search over `[0, 10]` with the coarser stopping threshold.
    pub fn toll() -> Self {
        BoConfig { hi: 10.0, threshold: 0.5, ..BoConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidArgument(format!("empty domain [{}, {}]", self.lo, self.hi)));
        }
        if self.b0 == 0 || self.budget < self.b0 {
            return Err(Error::InvalidArgument(format!(
                "need budget ≥ b0 ≥ 1, got budget {} and b0 {}",
                self.budget, self.b0
            )));
        }
        if self.candidates == 0 || self.window < 2 {
            return Err(Error::InvalidArgument("need candidates ≥ 1 and window ≥ 2".into()));
        }
        Ok(())
    }

    /// Hyperparameters refit to the observed values.
    pub fn hyper_for(&self, values: &[f64]) -> GpHyper {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = if values.is_empty() { 0.0 } else { max - min };
        GpHyper {
            length: self.length_fraction * (self.hi - self.lo),
            sigma_f: (self.sigma_f_fraction * range).max(SIGMA_F_FLOOR),
            sigma_y: self.sigma_y,
            delta: self.delta,
            dim: 1,
        }
    }

    fn initial_design(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut xs = vec![self.lo];
        if self.b0 >= 2 {
            xs.push(self.hi);
        }
        while xs.len() < self.b0 {
            xs.push(rng.random_range(self.lo..=self.hi));
        }
        xs
    }
}

/// One evaluation in a BO run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub value: f64,
    /// True for points of the initial design.
    pub initial: bool,
}

#[derive(Clone, Debug)]
pub struct BoOutcome {
    pub best_alpha: f64,
    /// Posterior mean at `best_alpha` (the observed value if no posterior
    /// was formed).
    pub best_value: f64,
    pub state: GpState,
    pub history: Vec<BoRecord>,
    /// Evaluation count at which the stopping rule fired.
    pub converged_at: Option<usize>,
    pub posterior: Option<Posterior>,
}

impl BoOutcome {
    pub fn write_history<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.history {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Posterior with the observed values centered on their mean; the offset is
/// added back so the returned mean is on the original scale.
pub fn centered_posterior(state: &GpState, candidates: &[f64]) -> Result<Posterior> {
    let offset = state.values.iter().sum::<f64>() / state.len().max(1) as f64;
    let centered = GpState {
        alphas: state.alphas.clone(),
        values: state.values.iter().map(|v| v - offset).collect(),
        hyper: state.hyper.clone(),
    };
    let mut p = gp_posterior(&centered, candidates)?;
    p.mean.iter_mut().for_each(|m| *m += offset);
    Ok(p)
}

/// Budgeted Bayesian optimization of a noisy scalar objective.
pub fn bo_loop<F>(mut evaluator: F, config: &BoConfig) -> Result<BoOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    config.validate()?;
    let grid = candidate_grid(config.lo, config.hi, config.candidates);
    let mut state = GpState::new(config.hyper_for(&[]));
    let mut history = Vec::new();
    let mut evaluate = |alpha: f64, initial: bool, state: &mut GpState, history: &mut Vec<BoRecord>| -> Result<()> {
        let value = evaluator(alpha).map_err(|e| Error::Evaluator { alpha, message: e.to_string() })?;
        if !value.is_finite() {
            return Err(Error::Evaluator { alpha, message: format!("non-finite objective {value}") });
        }
        state.push(alpha, value);
        history.push(BoRecord { iteration: history.len() + 1, alpha, value, initial });
        Ok(())
    };

    for alpha in config.initial_design() {
        evaluate(alpha, true, &mut state, &mut history)?;
    }

    let mut chosen = Vec::new();
    let mut converged_at = None;
    while state.len() < config.budget {
        state.hyper = config.hyper_for(&state.values);
        let posterior = centered_posterior(&state, &grid)?;
        let alpha = next_alpha(&posterior, state.len(), &state.hyper)?;
        evaluate(alpha, false, &mut state, &mut history)?;
        chosen.push(alpha);
        if converged(&chosen, config.threshold, config.window) {
            converged_at = Some(state.len());
            break;
        }
    }

    if state.len() == config.b0 {
        let (i, v) = argmax(&state.values);
        return Ok(BoOutcome {
            best_alpha: state.alphas[i],
            best_value: v,
            state,
            history,
            converged_at,
            posterior: None,
        });
    }
    state.hyper = config.hyper_for(&state.values);
    let posterior = centered_posterior(&state, &grid)?;
    let (i, v) = posterior.argmax_mean();
    Ok(BoOutcome {
        best_alpha: grid[i],
        best_value: v,
        state,
        history,
        converged_at,
        posterior: Some(posterior),
    })
}
