//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism over
//! integer orders, with the standard RDP to (ε, δ) conversion.

use crate::error::{Error, Result};

pub const DEFAULT_ORDERS: std::ops::RangeInclusive<u32> = 2..=256;

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// RDP at integer order `alpha` of one step of the sampled Gaussian mechanism
/// with sampling rate `q` and noise multiplier `sigma`.
///
/// For `q < 1` this is the exact binomial expansion
/// `ln(Σ_k C(α,k) (1-q)^(α-k) q^k exp(k(k-1)/(2σ²))) / (α-1)`, evaluated in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Validation(format!(
            "sampling rate {q} is outside [0, 1]"
        )));
    }
    if alpha < 2 {
        return Err(Error::Validation(format!(
            "Rényi order {alpha} must be at least 2"
        )));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InfinitePrivacyLoss { q });
    }
    let a = f64::from(alpha);
    if q == 1.0 {
        return Ok(a / (2.0 * sigma * sigma));
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut ln_binom = 0.0;
    let mut total = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            ln_binom += (f64::from(alpha - k + 1) / f64::from(k)).ln();
        }
        let kf = f64::from(k);
        let term = ln_binom + (a - kf) * ln_1mq + kf * ln_q + kf * (kf - 1.0) * inv_two_var;
        total = log_add_exp(total, term);
    }
    // The true value is >= 0; rounding can push the log-sum slightly below.
    Ok((total / (a - 1.0)).max(0.0))
}

/// ε(δ) and the minimizing order for `steps` identical steps.
pub fn epsilon_for_steps(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    orders: &[u32],
) -> Result<(f64, u32)> {
    if steps == 0 {
        return Ok((0.0, *orders.first().ok_or_else(empty_grid)?));
    }
    let totals = orders
        .iter()
        .map(|&a| Ok(steps as f64 * rdp_subsampled_gaussian(q, sigma, a)?))
        .collect::<Result<Vec<_>>>()?;
    convert(orders, &totals, delta)
}

fn empty_grid() -> Error {
    Error::Validation("empty Rényi order grid".into())
}

/// ε = min over α of RDP(α) + ln(1/δ)/(α-1).
pub fn convert(orders: &[u32], rdp: &[f64], delta: f64) -> Result<(f64, u32)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Validation(format!(
            "delta {delta} must be in (0, 1)"
        )));
    }
    if orders.is_empty() {
        return Err(empty_grid());
    }
    let ln_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        let eps = r + ln_inv_delta / f64::from(a - 1);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub q: f64,
    pub sigma: f64,
}

/// Append-only record of noisy steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    records: Vec<StepRecord>,
    orders: Vec<u32>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::with_orders(DEFAULT_ORDERS.collect())
    }

    pub fn with_orders(orders: Vec<u32>) -> Self {
        Self {
            records: Vec::new(),
            orders,
        }
    }

    pub fn record(&mut self, q: f64, sigma: f64) {
        self.records.push(StepRecord { q, sigma });
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    /// Runs of identical consecutive records as (record, count).
    fn runs(&self) -> Vec<(StepRecord, u64)> {
        let mut runs: Vec<(StepRecord, u64)> = Vec::new();
        for r in &self.records {
            match runs.last_mut() {
                Some((last, n)) if last == r => *n += 1,
                _ => runs.push((*r, 1)),
            }
        }
        runs
    }

    /// Total RDP per order over all recorded steps.
    pub fn rdp_totals(&self) -> Result<Vec<f64>> {
        let runs = self.runs();
        self.orders
            .iter()
            .map(|&a| {
                runs.iter().try_fold(0.0, |acc, (r, n)| {
                    Ok(acc + *n as f64 * rdp_subsampled_gaussian(r.q, r.sigma, a)?)
                })
            })
            .collect()
    }

    /// Spent ε at `delta` and the order achieving it.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, u32)> {
        if self.orders.is_empty() {
            return Err(empty_grid());
        }
        if self.records.is_empty() {
            return Ok((0.0, self.orders[0]));
        }
        convert(&self.orders, &self.rdp_totals()?, delta)
    }
}

/// Free-function form of [`PrivacyLedger::epsilon`].
pub fn epsilon_from_ledger(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, u32)> {
    ledger.epsilon(delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        assert_eq!(rdp_subsampled_gaussian(1.0, 1.0, 2).unwrap(), 1.0);
        assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, 8).unwrap(), 1.0);
    }

    #[test]
    fn zero_sampling_rate_is_free() {
        assert_eq!(rdp_subsampled_gaussian(0.0, 1.0, 32).unwrap(), 0.0);
        assert!(rdp_subsampled_gaussian(1e-12, 1.0, 32).unwrap() < 1e-20);
    }

    #[test]
    fn zero_noise_is_distinct_error() {
        assert!(matches!(
            rdp_subsampled_gaussian(0.1, 0.0, 2),
            Err(Error::InfinitePrivacyLoss { .. })
        ));
    }

    #[test]
    fn expansion_near_one_matches_closed_form() {
        // q -> 1 collapses the sum onto the k = alpha term.
        let near = rdp_subsampled_gaussian(1.0 - 1e-12, 1.3, 10).unwrap();
        let exact = rdp_subsampled_gaussian(1.0, 1.3, 10).unwrap();
        assert!((near - exact).abs() < 1e-9);
    }

    #[test]
    fn golden_order_32() {
        // compute_rdp(q=0.01, sigma=1.0, steps=1, orders=[32]) from an independent accountant.
        let r = rdp_subsampled_gaussian(0.01, 1.0, 32).unwrap();
        let golden = 11.246275937048072;
        assert!((r - golden).abs() / golden < 1e-6, "{r}");
    }

    #[test]
    fn empty_ledger_and_grid() {
        let l = PrivacyLedger::new();
        assert_eq!(l.epsilon(1e-5).unwrap().0, 0.0);
        let g = PrivacyLedger::with_orders(vec![]);
        assert!(g.epsilon(1e-5).is_err());
    }

    #[test]
    fn ledger_matches_uniform_steps() {
        let mut l = PrivacyLedger::new();
        for _ in 0..37 {
            l.record(0.05, 1.1);
        }
        let a = l.epsilon(1e-5).unwrap();
        let b = epsilon_for_steps(0.05, 1.1, 37, 1e-5, l.orders()).unwrap();
        assert_eq!(a, b);
    }
}
