//! Renyi-DP accounting for (Poisson-subsampled) Gaussian mechanisms:
//! per-step divergence bounds on a grid of orders, additive composition
//! across steps, and conversion to (eps, delta).
//!
//! All epsilons are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::PrivacyEvent;

/// Default order grid: integers 2..=64 plus 1.5, 96, 128.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.5];
    orders.extend((2..=64).map(f64::from));
    orders.push(96.0);
    orders.push(128.0);
    orders
}

/// eps(alpha) per order, composed additively across steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdpCurve {
    pub orders: Vec<f64>,
    pub eps: Vec<f64>,
    /// Set when any composed event had `sigma == 0`.
    pub infinite: bool,
}

impl RdpCurve {
    pub fn zero(orders: &[f64]) -> RdpCurve {
        RdpCurve {
            orders: orders.to_vec(),
            eps: vec![0.0; orders.len()],
            infinite: false,
        }
    }

    pub fn infinite(orders: &[f64]) -> RdpCurve {
        RdpCurve {
            orders: orders.to_vec(),
            eps: vec![f64::INFINITY; orders.len()],
            infinite: true,
        }
    }

    pub fn is_zero(&self) -> bool {
        !self.infinite && self.eps.iter().all(|&e| e == 0.0)
    }
}

/// RDP of the Gaussian mechanism with sensitivity 1: `alpha / (2 sigma^2)`.
pub fn gaussian_rdp(sigma: f64, alpha: f64) -> Result<f64> {
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(Error::InvalidAccountant(format!(
            "order {alpha} must be > 1"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidAccountant("sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha / (2.0 * sigma * sigma))
}

/// log(sum exp(terms)), stable.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

fn log_binomial(n: u64, k: u64) -> f64 {
    // ln C(n, k) via ln Gamma through the factorial sum; n <= 128 here so
    // a direct sum is exact enough.
    let mut acc = 0.0;
    for i in 0..k {
        acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    acc
}

/// RDP of the Poisson-subsampled Gaussian mechanism at integer order
/// `alpha`, via the exact binomial expansion of `E_Q[(P/Q)^alpha]`
/// evaluated in log space:
///
/// `eps(alpha) = log( sum_k C(alpha,k) (1-q)^(alpha-k) q^k
///                    exp(k (k-1) / (2 sigma^2)) ) / (alpha - 1)`
///
/// At `q == 1` this reduces to the pure Gaussian value exactly. Orders
/// that are not integers have no closed form here and report infinity,
/// which simply removes them from any downstream minimization.
pub fn subsampled_gaussian_rdp(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if q.is_nan() || q <= 0.0 || q > 1.0 {
        return Err(Error::InvalidAccountant(format!("q {q} must be in (0, 1]")));
    }
    if alpha.is_nan() || alpha <= 1.0 {
        return Err(Error::InvalidAccountant(format!(
            "order {alpha} must be > 1"
        )));
    }
    if sigma < 0.0 {
        return Err(Error::InvalidAccountant("sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    if q >= 1.0 {
        return gaussian_rdp(sigma, alpha);
    }
    if (alpha - alpha.round()).abs() > 1e-9 || alpha < 2.0 {
        return Ok(f64::INFINITY);
    }
    let a = alpha.round() as u64;
    let log_q = q.ln();
    let log_1q = (1.0 - q).ln();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let terms: Vec<f64> = (0..=a)
        .map(|k| {
            log_binomial(a, k)
                + (a - k) as f64 * log_1q
                + k as f64 * log_q
                + (k * (k.saturating_sub(1))) as f64 * inv_2s2
        })
        .collect();
    Ok(log_sum_exp(&terms) / (alpha - 1.0))
}

/// Per-step eps(alpha) for one privacy event.
fn event_rdp(event: &PrivacyEvent, alpha: f64) -> Result<f64> {
    subsampled_gaussian_rdp(event.sampling_rate, event.noise_multiplier, alpha)
}

/// Additive composition of per-step curves over the order grid.
pub fn compose(events: &[PrivacyEvent], orders: &[f64]) -> Result<RdpCurve> {
    if events.iter().any(|e| e.noise_multiplier == 0.0) {
        return Ok(RdpCurve::infinite(orders));
    }
    let mut eps = vec![0.0; orders.len()];
    for event in events {
        for (i, &alpha) in orders.iter().enumerate() {
            eps[i] += event_rdp(event, alpha)?;
        }
    }
    Ok(RdpCurve {
        orders: orders.to_vec(),
        eps,
        infinite: false,
    })
}

/// Convert an RDP curve to (eps, delta)-DP:
/// `eps = min_alpha [ eps(alpha) + log(1/delta) / (alpha - 1) ]`,
/// reporting the minimizing order. A zero curve converts to eps = 0.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, Option<f64>)> {
    if delta.is_nan() || delta <= 0.0 || delta >= 1.0 {
        return Err(Error::InvalidAccountant(format!(
            "delta {delta} must be in (0, 1)"
        )));
    }
    if curve.infinite {
        return Ok((f64::INFINITY, None));
    }
    if curve.is_zero() {
        return Ok((0.0, None));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    let mut best_order = None;
    for (&alpha, &e) in curve.orders.iter().zip(&curve.eps) {
        if !e.is_finite() {
            continue;
        }
        let candidate = e + log_inv_delta / (alpha - 1.0);
        if candidate < best {
            best = candidate;
            best_order = Some(alpha);
        }
    }
    Ok((best, best_order))
}

/// How a training step touched the data; determines the run's guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// Non-private optimizer on redacted data: contributes nothing.
    PlainOnRedacted,
    /// Non-private optimizer on raw data: destroys the guarantee.
    PlainOnRaw,
    /// DP optimizer on raw data: contributes one privacy event.
    DpOnRaw,
}

/// Composed spend of one training run at a target delta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub curve: RdpCurve,
    pub epsilon: f64,
    pub delta: f64,
    pub best_order: Option<f64>,
    pub dp_steps: usize,
    pub infinite: bool,
    pub zero: bool,
}

impl PrivacySpend {
    pub fn infinite(orders: &[f64], delta: f64) -> PrivacySpend {
        PrivacySpend {
            curve: RdpCurve::infinite(orders),
            epsilon: f64::INFINITY,
            delta,
            best_order: None,
            dp_steps: 0,
            infinite: true,
            zero: false,
        }
    }

    /// Spend of a realized run: any non-private step on raw data makes
    /// it infinite; otherwise the DP events compose (no events at all is
    /// the ideal zero guarantee).
    pub fn for_run(
        step_kinds: &[StepKind],
        events: &[PrivacyEvent],
        delta: f64,
        orders: &[f64],
    ) -> Result<PrivacySpend> {
        if step_kinds.contains(&StepKind::PlainOnRaw) {
            return Ok(PrivacySpend::infinite(orders, delta));
        }
        if events.iter().any(|e| !e.is_private()) {
            let mut spend = PrivacySpend::infinite(orders, delta);
            spend.dp_steps = events.len();
            return Ok(spend);
        }
        let curve = compose(events, orders)?;
        let (epsilon, best_order) = rdp_to_dp(&curve, delta)?;
        let zero = events.is_empty();
        Ok(PrivacySpend {
            infinite: curve.infinite,
            zero,
            epsilon: if zero { 0.0 } else { epsilon },
            delta,
            best_order,
            dp_steps: events.len(),
            curve,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(q: f64, sigma: f64) -> PrivacyEvent {
        PrivacyEvent {
            sampling_rate: q,
            noise_multiplier: sigma,
        }
    }

    #[test]
    fn gaussian_closed_form_values() {
        assert!((gaussian_rdp(1.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((gaussian_rdp(2.0, 2.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gaussian_vanishes_as_sigma_grows() {
        let mut prev = f64::INFINITY;
        for sigma in [1.0, 2.0, 4.0, 8.0, 100.0] {
            let e = gaussian_rdp(sigma, 8.0).unwrap();
            assert!(e < prev);
            prev = e;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn gaussian_sigma_zero_is_infinite() {
        assert!(gaussian_rdp(0.0, 2.0).unwrap().is_infinite());
    }

    #[test]
    fn gaussian_rejects_bad_order() {
        assert!(gaussian_rdp(1.0, 1.0).is_err());
        assert!(gaussian_rdp(1.0, 0.5).is_err());
    }

    #[test]
    fn subsampled_q1_equals_gaussian() {
        for alpha in [2.0, 3.0, 17.0, 64.0] {
            for sigma in [0.5, 1.0, 3.0] {
                let a = subsampled_gaussian_rdp(1.0, sigma, alpha).unwrap();
                let b = gaussian_rdp(sigma, alpha).unwrap();
                assert!((a - b).abs() < 1e-9, "alpha {alpha} sigma {sigma}");
            }
        }
    }

    #[test]
    fn subsampled_monotone_in_q() {
        let mut prev = 0.0;
        for i in 1..=100 {
            let q = i as f64 / 100.0;
            let e = subsampled_gaussian_rdp(q, 1.0, 4.0).unwrap();
            assert!(
                e >= prev - 1e-12,
                "eps not nondecreasing at q={q}: {e} < {prev}"
            );
            prev = e;
        }
    }

    #[test]
    fn subsampled_fractional_order_excluded() {
        assert!(subsampled_gaussian_rdp(0.1, 1.0, 1.5)
            .unwrap()
            .is_infinite());
    }

    #[test]
    fn subsampled_never_overflows_on_default_grid() {
        for &alpha in &default_orders() {
            let e = subsampled_gaussian_rdp(0.01, 1.0, alpha).unwrap();
            assert!(!e.is_nan());
        }
    }

    #[test]
    fn compose_additivity_on_closed_form() {
        let orders = default_orders();
        let k = 7;
        let events = vec![event(1.0, 2.0); k];
        let curve = compose(&events, &orders).unwrap();
        for (i, &alpha) in orders.iter().enumerate() {
            let expect = k as f64 * alpha / (2.0 * 4.0);
            assert!((curve.eps[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_empty_is_zero_curve() {
        let orders = default_orders();
        let curve = compose(&[], &orders).unwrap();
        assert!(curve.is_zero());
    }

    #[test]
    fn compose_is_order_invariant_and_splits() {
        let orders = default_orders();
        let a = vec![event(0.1, 1.0), event(0.2, 2.0)];
        let b = vec![event(1.0, 0.7)];
        let joined: Vec<PrivacyEvent> = a.iter().chain(&b).cloned().collect();
        let reversed: Vec<PrivacyEvent> = joined.iter().rev().cloned().collect();
        let c_joined = compose(&joined, &orders).unwrap();
        let c_rev = compose(&reversed, &orders).unwrap();
        let c_a = compose(&a, &orders).unwrap();
        let c_b = compose(&b, &orders).unwrap();
        // Order 1.5 is infinite for subsampled events; compare such
        // entries by equality rather than difference.
        let close = |a: f64, b: f64| a == b || (a - b).abs() < 1e-12;
        for i in 0..orders.len() {
            assert!(close(c_joined.eps[i], c_rev.eps[i]));
            assert!(close(c_joined.eps[i], c_a.eps[i] + c_b.eps[i]));
        }
    }

    #[test]
    fn compose_infinite_event_flags_curve() {
        let orders = default_orders();
        let curve = compose(&[event(1.0, 0.0)], &orders).unwrap();
        assert!(curve.infinite);
    }

    #[test]
    fn rdp_to_dp_zero_curve_is_zero() {
        let orders = default_orders();
        let (eps, _) = rdp_to_dp(&RdpCurve::zero(&orders), 1e-5).unwrap();
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn rdp_to_dp_never_exceeds_single_order_bound() {
        let orders = default_orders();
        let curve = compose(&[event(1.0, 1.0); 10], &orders).unwrap();
        let (eps, _) = rdp_to_dp(&curve, 1e-5).unwrap();
        let log_inv = (1e5f64).ln();
        for (&alpha, &e) in curve.orders.iter().zip(&curve.eps) {
            assert!(eps <= e + log_inv / (alpha - 1.0) + 1e-12);
        }
    }

    #[test]
    fn rdp_to_dp_monotone_in_delta() {
        let orders = default_orders();
        let curve = compose(&[event(1.0, 1.0); 5], &orders).unwrap();
        let (hi, _) = rdp_to_dp(&curve, 1e-7).unwrap();
        let (lo, _) = rdp_to_dp(&curve, 1e-3).unwrap();
        assert!(lo <= hi);
    }

    #[test]
    fn more_steps_cost_more_larger_sigma_costs_less() {
        let orders = default_orders();
        let short = compose(&[event(0.05, 1.0); 100], &orders).unwrap();
        let long = compose(&[event(0.05, 1.0); 200], &orders).unwrap();
        let (e_short, _) = rdp_to_dp(&short, 1e-5).unwrap();
        let (e_long, _) = rdp_to_dp(&long, 1e-5).unwrap();
        assert!(e_long >= e_short);

        let loud = compose(&[event(0.05, 2.0); 100], &orders).unwrap();
        let (e_loud, _) = rdp_to_dp(&loud, 1e-5).unwrap();
        assert!(e_loud <= e_short);
    }

    #[test]
    fn gaussian_curve_nondecreasing_in_order() {
        let orders = default_orders();
        let curve = compose(&[event(1.0, 1.3)], &orders).unwrap();
        for w in curve.eps.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(curve.eps.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn spend_plain_on_raw_is_infinite() {
        let orders = default_orders();
        let spend = PrivacySpend::for_run(
            &[StepKind::PlainOnRaw, StepKind::DpOnRaw],
            &[event(0.1, 1.0)],
            1e-5,
            &orders,
        )
        .unwrap();
        assert!(spend.infinite);
        assert!(spend.epsilon.is_infinite());
    }

    #[test]
    fn spend_redacted_only_is_zero() {
        let orders = default_orders();
        let spend =
            PrivacySpend::for_run(&[StepKind::PlainOnRedacted; 10], &[], 1e-5, &orders).unwrap();
        assert!(spend.zero);
        assert_eq!(spend.epsilon, 0.0);
        assert_eq!(spend.dp_steps, 0);
    }

    #[test]
    fn spend_fewer_dp_steps_smaller_epsilon() {
        let orders = default_orders();
        let few = PrivacySpend::for_run(
            &[StepKind::DpOnRaw; 50],
            &vec![event(0.05, 1.0); 50],
            1e-5,
            &orders,
        )
        .unwrap();
        let many = PrivacySpend::for_run(
            &[StepKind::DpOnRaw; 100],
            &vec![event(0.05, 1.0); 100],
            1e-5,
            &orders,
        )
        .unwrap();
        assert!(few.epsilon < many.epsilon);
    }

    #[test]
    fn spend_nonprivate_event_is_flagged_infinite() {
        let orders = default_orders();
        let spend =
            PrivacySpend::for_run(&[StepKind::DpOnRaw], &[event(0.1, 0.0)], 1e-5, &orders).unwrap();
        assert!(spend.infinite);
    }
}
