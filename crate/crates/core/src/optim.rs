//! AdamW and its differentially private variant: per-example clipping,
//! Gaussian noising of the clipped sum, then the standard decoupled-decay
//! update on the noisy mean.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(n_params: usize, config: AdamWConfig) -> AdamWState {
        AdamWState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            config,
        }
    }
}

/// Gradient privatization parameters. `noise_multiplier == 0` disables
/// noising; the step's privacy event is then flagged non-private.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Poisson sampling rate.
    pub sampling_rate: f64,
    pub seed: u64,
    /// Target delta when converting the accounted curve to (eps, delta).
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 0.05,
            seed: 0,
            delta: 1e-5,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::InvalidDpConfig("clip_norm must be > 0".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::InvalidDpConfig(
                "noise_multiplier must be >= 0".into(),
            ));
        }
        if self.sampling_rate.is_nan() || self.sampling_rate <= 0.0 || self.sampling_rate > 1.0 {
            return Err(Error::InvalidDpConfig(
                "sampling_rate must be in (0, 1]".into(),
            ));
        }
        if self.delta.is_nan() || self.delta <= 0.0 || self.delta >= 1.0 {
            return Err(Error::InvalidDpConfig("delta must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One noisy-gradient release: the accountant composes these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEvent {
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

impl PrivacyEvent {
    /// A `noise_multiplier == 0` event carries no privacy guarantee.
    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale `g` by `min(1, clip_norm / ||g||)`; direction is preserved and a
/// zero gradient stays zero.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= clip_norm || norm == 0.0 {
        return g.to_vec();
    }
    let scale = clip_norm / norm;
    g.iter().map(|x| x * scale).collect()
}

/// `(1/B) * (sum of clipped per-example grads + N(0, sigma^2 clip^2 I))`.
/// Noise coordinates are drawn from `noise_rng` in index order, so a given
/// generator state always produces the same output.
pub fn dp_aggregate<R: Rng>(
    per_example: &[Vec<f64>],
    cfg: &DpConfig,
    noise_rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let batch = per_example.len();
    if batch == 0 {
        return Err(Error::InvalidDpConfig(
            "empty per-example gradient set".into(),
        ));
    }
    let dim = per_example[0].len();
    let mut sum = vec![0.0; dim];
    for g in per_example {
        let clipped = clip(g, cfg.clip_norm);
        for (s, c) in sum.iter_mut().zip(&clipped) {
            *s += c;
        }
    }
    if cfg.noise_multiplier > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_multiplier * cfg.clip_norm).expect("valid std");
        for s in sum.iter_mut() {
            *s += normal.sample(noise_rng);
        }
    }
    let inv = 1.0 / batch as f64;
    for s in sum.iter_mut() {
        *s *= inv;
    }
    Ok(sum)
}

/// One AdamW step with bias correction and decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(params: &mut [f64], state: &mut AdamWState, grad: &[f64]) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidDpConfig(
            "parameter/gradient shape mismatch".into(),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let c = &state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grad[i];
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -=
            c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
    }
    Ok(())
}

/// DP-AdamW step: privatize the per-example gradients, apply AdamW to the
/// noisy mean, and emit the step's privacy event.
pub fn dp_adamw_step<R: Rng>(
    params: &mut [f64],
    state: &mut AdamWState,
    per_example: &[Vec<f64>],
    cfg: &DpConfig,
    noise_rng: &mut R,
) -> Result<PrivacyEvent> {
    let noisy = dp_aggregate(per_example, cfg, noise_rng)?;
    adamw_step(params, state, &noisy)?;
    Ok(PrivacyEvent {
        sampling_rate: cfg.sampling_rate,
        noise_multiplier: cfg.noise_multiplier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let g = vec![0.3, 0.4]; // norm 0.5
        assert_eq!(clip(&g, 1.0), g);
    }

    #[test]
    fn clip_halves_double_norm() {
        let g = vec![1.2, 1.6]; // norm 2.0
        let c = clip(&g, 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15);
        assert!((c[1] - 0.8).abs() < 1e-15);
        assert!((l2_norm(&c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_zero_stays_zero() {
        assert_eq!(clip(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn clip_never_increases_norm_and_is_homogeneous() {
        let mut rng = seeding::stream(1, "clip", 0);
        for _ in 0..50 {
            let g: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = rng.random_range(0.1..2.0);
            let clipped = clip(&g, c);
            assert!(l2_norm(&clipped) <= l2_norm(&g) + 1e-12);
            assert!(l2_norm(&clipped) <= c + 1e-12);
            // degree-1 homogeneity in (g, c) jointly
            let s = 3.0;
            let g_s: Vec<f64> = g.iter().map(|x| x * s).collect();
            let scaled = clip(&g_s, c * s);
            for (a, b) in scaled.iter().zip(&clipped) {
                assert!((a - b * s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_sigma_zero_is_exact_clipped_mean() {
        let grads = vec![vec![0.1, 0.2], vec![0.3, -0.2]];
        let cfg = DpConfig {
            noise_multiplier: 0.0,
            ..DpConfig::default()
        };
        let mut rng = seeding::stream(0, "noise", 0);
        let out = dp_aggregate(&grads, &cfg, &mut rng).unwrap();
        assert_eq!(out, vec![0.2, 0.0]);
    }

    #[test]
    fn aggregate_same_seed_identical() {
        let grads = vec![vec![0.5; 16]];
        let cfg = DpConfig::default();
        let a = dp_aggregate(&grads, &cfg, &mut seeding::stream(9, "noise", 0)).unwrap();
        let b = dp_aggregate(&grads, &cfg, &mut seeding::stream(9, "noise", 0)).unwrap();
        assert_eq!(a, b);
    }

    // Monte-Carlo oracle: with B=1, g=0, sigma=1, clip=1 the output is a
    // pure standard normal per coordinate.
    #[test]
    fn aggregate_noise_variance_within_two_percent() {
        let n = 100_000;
        let grads = vec![vec![0.0; 1]];
        let cfg = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            ..DpConfig::default()
        };
        let mut rng = seeding::stream(1234, "mc", 0);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = dp_aggregate(&grads, &cfg, &mut rng).unwrap()[0];
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "empirical variance {var}");
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut params = vec![1.0, -2.0];
        let mut state = AdamWState::new(
            2,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        adamw_step(&mut params, &mut state, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adamw_zero_grad_decay_shrinks_params() {
        let mut params = vec![1.0, -2.0];
        let cfg = AdamWConfig::default();
        let factor = 1.0 - cfg.learning_rate * cfg.weight_decay;
        let mut state = AdamWState::new(2, cfg);
        adamw_step(&mut params, &mut state, &[0.0, 0.0]).unwrap();
        assert!((params[0] - factor).abs() < 1e-15);
        assert!((params[1] + 2.0 * factor).abs() < 1e-15);
    }

    // Straight-line scalar oracle for the first AdamW step.
    #[test]
    fn adamw_first_step_matches_scalar_reference() {
        let g = 0.37;
        let cfg = AdamWConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut params = vec![0.5];
        let mut state = AdamWState::new(1, cfg.clone());
        adamw_step(&mut params, &mut state, &[g]).unwrap();

        // reference: m1 = (1-b1) g, v1 = (1-b2) g^2, bias-corrected.
        let m_hat = g;
        let v_hat = g * g;
        let expect = 0.5 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((params[0] - expect).abs() < 1e-15);
        // as eps -> 0 the update tends to -lr * sign(g)
        assert!((params[0] - (0.5 - cfg.learning_rate)).abs() < 1e-6);
    }

    #[test]
    fn adamw_rejects_nonfinite_grad() {
        let mut params = vec![0.0];
        let mut state = AdamWState::new(1, AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut params, &mut state, &[f64::NAN]),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn adamw_batch_order_invariant() {
        // The mean gradient commutes, so feeding the same mean from any
        // example order gives identical updates.
        let grads_a = [vec![0.1, 0.2], vec![-0.4, 0.3]];
        let grads_b = [grads_a[1].clone(), grads_a[0].clone()];
        let mean = |gs: &[Vec<f64>]| -> Vec<f64> {
            (0..2)
                .map(|i| gs.iter().map(|g| g[i]).sum::<f64>() / gs.len() as f64)
                .collect()
        };
        let mut pa = vec![1.0, 1.0];
        let mut pb = vec![1.0, 1.0];
        let mut sa = AdamWState::new(2, AdamWConfig::default());
        let mut sb = AdamWState::new(2, AdamWConfig::default());
        adamw_step(&mut pa, &mut sa, &mean(&grads_a)).unwrap();
        adamw_step(&mut pb, &mut sb, &mean(&grads_b)).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn dp_step_sigma_zero_reduces_to_adamw_on_clipped_mean() {
        let per_example = vec![vec![0.1, -0.1], vec![0.2, 0.3]];
        let cfg = DpConfig {
            noise_multiplier: 0.0,
            clip_norm: 10.0,
            ..DpConfig::default()
        };
        let mut p1 = vec![0.5, 0.5];
        let mut s1 = AdamWState::new(2, AdamWConfig::default());
        let event = dp_adamw_step(
            &mut p1,
            &mut s1,
            &per_example,
            &cfg,
            &mut seeding::stream(0, "n", 0),
        )
        .unwrap();
        assert!(!event.is_private());

        let mean = vec![0.15, 0.1];
        let mut p2 = vec![0.5, 0.5];
        let mut s2 = AdamWState::new(2, AdamWConfig::default());
        adamw_step(&mut p2, &mut s2, &mean).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn dp_trajectory_differs_from_plain_adamw_with_noise() {
        let per_example = vec![vec![0.1, -0.1], vec![0.2, 0.3]];
        let cfg = DpConfig {
            noise_multiplier: 1.0,
            ..DpConfig::default()
        };
        let mut noisy = vec![0.5, 0.5];
        let mut plain = vec![0.5, 0.5];
        let mut sn = AdamWState::new(2, AdamWConfig::default());
        let mut sp = AdamWState::new(2, AdamWConfig::default());
        let mut rng = seeding::stream(5, "traj", 0);
        let mut events = Vec::new();
        for _ in 0..10 {
            events.push(dp_adamw_step(&mut noisy, &mut sn, &per_example, &cfg, &mut rng).unwrap());
            let mean: Vec<f64> = (0..2)
                .map(|i| per_example.iter().map(|g| g[i]).sum::<f64>() / 2.0)
                .collect();
            adamw_step(&mut plain, &mut sp, &mean).unwrap();
        }
        assert_eq!(events.len(), 10);
        assert!(events.iter().all(|e| e.is_private()));
        assert!(noisy.iter().zip(&plain).any(|(a, b)| (a - b).abs() > 1e-6));
    }
}
