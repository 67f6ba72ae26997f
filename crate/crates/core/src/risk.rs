//! Per-step tail risk: Monte-Carlo P&L scenarios and a softplus-smoothed
//! Rockafellar–Uryasev CVaR.
//!
//! Everything is in loss orientation, `L = −PnL`:
//!
//! ```text
//! CVaR_α(L) = min_η  η + (1/α)·E[s_τ(L − η)]
//! ```
//!
//! where `α` is the tail fraction (0.05 averages the worst 5% of outcomes).

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::logistic;
use crate::noarb::softplus_tau;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("inner minimization did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("empty scenario batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarConfig {
    /// Fraction of worst outcomes averaged, in (0, 1).
    pub tail_fraction: f64,
    /// Softplus temperature; 0 selects the exact hinge in [`ru_objective`].
    pub tau_cvar: f64,
    pub n_scenarios: usize,
    /// Standard deviation of the perturbation added to the realized price move.
    pub price_noise_std: f64,
}

impl Default for CvarConfig {
    fn default() -> Self {
        Self {
            tail_fraction: 0.05,
            tau_cvar: 1e-3,
            n_scenarios: 64,
            price_noise_std: 0.0,
        }
    }
}

/// Per-scenario P&L.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    pub pnl: Vec<f64>,
}

impl ScenarioBatch {
    pub fn from_losses(losses: &[f64]) -> Self {
        Self {
            pnl: losses.iter().map(|l| -l).collect(),
        }
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.pnl.iter().map(|p| -p)
    }

    pub fn len(&self) -> usize {
        self.pnl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pnl.is_empty()
    }
}

/// Raw scenario draws, kept apart so the hedge term can be re-weighted with
/// common random numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDraws {
    /// Quote P&L from Poisson volumes.
    pub quote_pnl: Vec<f64>,
    /// Perturbed price move `ΔS̃`.
    pub price_move: Vec<f64>,
}

impl ScenarioDraws {
    /// `PnL_i = quote_i + hedge_term · ΔS̃_i`.
    pub fn batch(&self, hedge_term: f64) -> ScenarioBatch {
        ScenarioBatch {
            pnl: self
                .quote_pnl
                .iter()
                .zip(&self.price_move)
                .map(|(q, ds)| q + hedge_term * ds)
                .collect(),
        }
    }
}

/// Draws `n_scenarios` of Poisson volumes per bucket and a Gaussian price move.
///
/// `fills_mean[i]` is the expected volume of bucket `i` and `edges[i]` the
/// P&L per unit filled there.
pub fn draw_scenarios<R: Rng + ?Sized>(
    fills_mean: &[f64],
    edges: &[f64],
    delta_s: f64,
    cfg: &CvarConfig,
    rng: &mut R,
) -> ScenarioDraws {
    assert_eq!(fills_mean.len(), edges.len(), "fills/edges length mismatch");
    let mut quote_pnl = Vec::with_capacity(cfg.n_scenarios);
    let mut price_move = Vec::with_capacity(cfg.n_scenarios);
    let noise = Normal::new(0.0, cfg.price_noise_std.max(0.0)).expect("finite noise std");
    let buckets: Vec<(Poisson<f64>, f64)> = fills_mean
        .iter()
        .zip(edges)
        .filter(|(&lam, _)| lam > 0.0)
        .map(|(&lam, &edge)| (Poisson::new(lam).expect("positive finite intensity"), edge))
        .collect();
    for _ in 0..cfg.n_scenarios {
        let mut q = 0.0;
        for (dist, edge) in &buckets {
            q += dist.sample(rng) * edge;
        }
        quote_pnl.push(q);
        price_move.push(delta_s + noise.sample(rng));
    }
    ScenarioDraws {
        quote_pnl,
        price_move,
    }
}

pub fn sample_scenarios<R: Rng + ?Sized>(
    fills_mean: &[f64],
    edges: &[f64],
    hedge_term_base: f64,
    delta_s: f64,
    cfg: &CvarConfig,
    rng: &mut R,
) -> ScenarioBatch {
    draw_scenarios(fills_mean, edges, delta_s, cfg, rng).batch(hedge_term_base)
}

fn hinge(x: f64, tau: f64) -> f64 {
    if tau > 0.0 {
        softplus_tau(x, tau)
    } else {
        x.max(0.0)
    }
}

/// `η + (1/α)·mean_i s_τ(L_i − η)`.
pub fn ru_objective(eta: f64, batch: &ScenarioBatch, cfg: &CvarConfig) -> f64 {
    let mean = batch.losses().map(|l| hinge(l - eta, cfg.tau_cvar)).sum::<f64>() / batch.len() as f64;
    eta + mean / cfg.tail_fraction
}

/// First and second derivative of [`ru_objective`] in η.
pub fn ru_derivatives(eta: f64, batch: &ScenarioBatch, cfg: &CvarConfig) -> (f64, f64) {
    let n = batch.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for l in batch.losses() {
        let p = logistic((l - eta) / cfg.tau_cvar);
        s1 += p;
        s2 += p * (1.0 - p);
    }
    let a = cfg.tail_fraction;
    (1.0 - s1 / (a * n), s2 / (a * n * cfg.tau_cvar))
}

/// Loss quantile used to start the inner search: the `⌊(1−α)N⌋`-th order statistic.
fn upper_quantile(sorted_losses: &[f64], alpha: f64) -> f64 {
    let n = sorted_losses.len();
    let idx = (((1.0 - alpha) * n as f64).floor() as usize).min(n - 1);
    sorted_losses[idx]
}

const MAX_ETA_ITERS: usize = 100;

/// Unique minimizer of the smoothed RU objective.
///
/// Safeguarded Newton: steps that leave the sign bracket fall back to
/// bisection. Stops at `|h'(η)| < 1e-10` or when the bracket shrinks to a
/// few ulps.
pub fn solve_eta(batch: &ScenarioBatch, cfg: &CvarConfig) -> Result<f64, RiskError> {
    if batch.is_empty() {
        return Err(RiskError::EmptyBatch);
    }
    let tau = cfg.tau_cvar;
    let mut losses: Vec<f64> = batch.losses().collect();
    losses.sort_by(f64::total_cmp);
    let mut lo = losses[0] - 40.0 * tau;
    let mut hi = losses[losses.len() - 1] + 40.0 * tau;
    let mut eta = upper_quantile(&losses, cfg.tail_fraction);
    for _ in 0..MAX_ETA_ITERS {
        let (d1, d2) = ru_derivatives(eta, batch, cfg);
        if d1.abs() < 1e-10 {
            return Ok(eta);
        }
        if d1 > 0.0 {
            hi = eta;
        } else {
            lo = eta;
        }
        if hi - lo <= 4.0 * f64::EPSILON * eta.abs().max(1.0) {
            return Ok(eta);
        }
        let newton = eta - d1 / d2;
        eta = if d2 > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(RiskError::NoConvergence(MAX_ETA_ITERS))
}

/// Smoothed CVaR of the batch losses.
pub fn cvar_smoothed(batch: &ScenarioBatch, cfg: &CvarConfig) -> Result<f64, RiskError> {
    let eta = solve_eta(batch, cfg)?;
    Ok(ru_objective(eta, batch, cfg))
}

/// Smoothed CVaR together with its optimal threshold η*.
pub fn cvar_smoothed_with_eta(batch: &ScenarioBatch, cfg: &CvarConfig) -> Result<(f64, f64), RiskError> {
    let eta = solve_eta(batch, cfg)?;
    Ok((ru_objective(eta, batch, cfg), eta))
}

/// Exact CVaR of the empirical loss distribution: the mean of the worst
/// `αN` losses with fractional weight on the boundary sample.
pub fn empirical_cvar_exact(batch: &ScenarioBatch, alpha: f64) -> f64 {
    let mut losses: Vec<f64> = batch.losses().collect();
    losses.sort_by(|a, b| b.total_cmp(a));
    let mass = alpha * losses.len() as f64;
    let mut remaining = mass;
    let mut acc = 0.0;
    for l in losses {
        if remaining <= 0.0 {
            break;
        }
        let w = remaining.min(1.0);
        acc += w * l;
        remaining -= w;
    }
    acc / mass
}

/// Empirical VaR in loss orientation: the `⌈αN⌉`-th largest loss.
pub fn empirical_var(batch: &ScenarioBatch, alpha: f64) -> f64 {
    let mut losses: Vec<f64> = batch.losses().collect();
    losses.sort_by(|a, b| b.total_cmp(a));
    let idx = ((alpha * losses.len() as f64).ceil() as usize).clamp(1, losses.len()) - 1;
    losses[idx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::norm_pdf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(alpha: f64, tau: f64) -> CvarConfig {
        CvarConfig {
            tail_fraction: alpha,
            tau_cvar: tau,
            ..CvarConfig::default()
        }
    }

    fn four() -> ScenarioBatch {
        ScenarioBatch::from_losses(&[1.0, 2.0, 3.0, 4.0])
    }

    #[test]
    fn zero_fills_and_noise_give_pure_hedge_pnl() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CvarConfig {
            price_noise_std: 0.0,
            ..CvarConfig::default()
        };
        let b = sample_scenarios(&[0.0; 5], &[0.1; 5], 2.5, 0.3, &c, &mut rng);
        assert_eq!(b.len(), 64);
        assert!(b.pnl.iter().all(|&p| p == 2.5 * 0.3));
        let b = sample_scenarios(&[0.4; 5], &[0.0; 5], 1.0, 0.1, &c, &mut rng);
        assert!(b.pnl.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn scenario_mean_matches_expected_fill_pnl() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fills = [0.4, 0.1, 0.25, 0.8];
        let edges = [0.05, -0.02, 0.03, 0.01];
        let c = CvarConfig {
            n_scenarios: 100_000,
            price_noise_std: 0.2,
            ..CvarConfig::default()
        };
        let (hedge_term, ds) = (1.5, 0.04);
        let b = sample_scenarios(&fills, &edges, hedge_term, ds, &c, &mut rng);
        let expected: f64 = fills.iter().zip(&edges).map(|(l, e)| l * e).sum::<f64>() + hedge_term * ds;
        let var: f64 = fills.iter().zip(&edges).map(|(l, e)| l * e * e).sum::<f64>() + (hedge_term * 0.2f64).powi(2);
        let se = (var / c.n_scenarios as f64).sqrt();
        let mean = b.pnl.iter().sum::<f64>() / b.len() as f64;
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} ± {se}");
    }

    #[test]
    fn scenarios_are_seed_deterministic() {
        let c = CvarConfig {
            price_noise_std: 0.1,
            ..CvarConfig::default()
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_scenarios(&[0.3, 0.2], &[0.01, 0.02], 1.0, 0.0, &c, &mut rng)
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn ru_objective_hard_hinge_brute_force() {
        let c = cfg(0.5, 0.0);
        let b = four();
        let best = (0..=5000)
            .map(|i| ru_objective(i as f64 * 1e-3, &b, &c))
            .fold(f64::INFINITY, f64::min);
        assert!((best - 3.5).abs() < 1e-12);
        // coercive: linear growth beyond the largest loss
        assert!((ru_objective(1e6, &b, &c) - 1e6).abs() < 1e-6);
    }

    #[test]
    fn point_mass_cvar_is_the_loss() {
        let b = ScenarioBatch::from_losses(&[2.0; 10]);
        let c = cfg(0.05, 1e-6);
        let v = cvar_smoothed(&b, &c).unwrap();
        assert!((v - 2.0).abs() <= c.tau_cvar * 2f64.ln() / c.tail_fraction);
        let eta = solve_eta(&b, &c).unwrap();
        assert!((eta - 2.0).abs() < 50.0 * c.tau_cvar);
        assert!((ru_objective(-2.0, &ScenarioBatch::from_losses(&[-2.0; 3]), &cfg(0.3, 0.0)) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_eta_four_losses() {
        let b = four();
        let c = cfg(0.5, 1e-4);
        let eta = solve_eta(&b, &c).unwrap();
        assert!((eta - 3.0).abs() < 0.01, "eta = {eta}");
        assert!(ru_derivatives(eta, &b, &c).0.abs() < 1e-10);
        // brute-force scan of the smoothed objective agrees on the minimum value
        let scan = (0..=40_000)
            .map(|i| ru_objective(1.0 + i as f64 * 1e-4, &b, &c))
            .fold(f64::INFINITY, f64::min);
        assert!(ru_objective(eta, &b, &c) <= scan + 1e-12);
        assert!((cvar_smoothed(&b, &c).unwrap() - 3.5).abs() <= c.tau_cvar * 2f64.ln() / 0.5);
    }

    #[test]
    fn eta_moves_order_tau_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let losses: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
        let b = ScenarioBatch::from_losses(&losses);
        let e1 = solve_eta(&b, &cfg(0.05, 1e-3)).unwrap();
        let e2 = solve_eta(&b, &cfg(0.05, 2e-3)).unwrap();
        assert!((e1 - e2).abs() < 20.0 * 1e-3, "{e1} {e2}");
    }

    #[test]
    fn exact_cvar_cases() {
        assert!((empirical_cvar_exact(&four(), 0.5) - 3.5).abs() < 1e-15);
        assert!((empirical_cvar_exact(&four(), 1.0) - 2.5).abs() < 1e-15);
        assert!((empirical_cvar_exact(&four(), 0.999_999) - 2.5).abs() < 1e-5);
        assert_eq!(empirical_cvar_exact(&ScenarioBatch::from_losses(&[7.0]), 0.05), 7.0);
        // fractional boundary: α·N = 1.5 → (4 + 0.5·3)/1.5
        assert!((empirical_cvar_exact(&four(), 0.375) - 5.5 / 1.5).abs() < 1e-15);
        assert_eq!(empirical_var(&four(), 0.5), 3.0);
        assert_eq!(empirical_var(&four(), 0.05), 4.0);
    }

    #[test]
    fn standard_normal_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let losses: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let b = ScenarioBatch::from_losses(&losses);
        let c = cfg(0.05, 1e-3);
        // z_{0.95} = 1.6448536269514722
        let analytic = norm_pdf(1.644_853_626_951_472_2) / 0.05;
        assert!((analytic - 2.062_712_807_507_46).abs() < 1e-9);
        assert!((cvar_smoothed(&b, &c).unwrap() - analytic).abs() < 0.05);
    }

    #[test]
    fn smoothed_tracks_exact_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let n = rng.random_range(2..300);
            let scale = rng.random_range(0.01..10.0);
            let losses: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let b = ScenarioBatch::from_losses(&losses);
            for tau in [1e-2, 1e-3, 1e-4] {
                let c = cfg(rng.random_range(0.02..0.5), tau);
                let gap = cvar_smoothed(&b, &c).unwrap() - empirical_cvar_exact(&b, c.tail_fraction);
                let bound = tau * 2f64.ln() / c.tail_fraction;
                assert!(gap.abs() <= bound + 1e-12, "trial {trial}: {gap} > {bound}");
            }
        }
    }

    #[test]
    fn equivariance_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let losses: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..3.0)).collect();
        let b = ScenarioBatch::from_losses(&losses);
        let c = cfg(0.1, 1e-3);
        let base = cvar_smoothed(&b, &c).unwrap();
        let shifted = ScenarioBatch::from_losses(&losses.iter().map(|l| l + 1.25).collect::<Vec<_>>());
        assert!((cvar_smoothed(&shifted, &c).unwrap() - base - 1.25).abs() < 1e-10);
        assert!((empirical_cvar_exact(&shifted, 0.1) - empirical_cvar_exact(&b, 0.1) - 1.25).abs() < 1e-10);
        // homogeneity of the smoothed value requires scaling τ with the losses
        let lambda = 3.0;
        let scaled = ScenarioBatch::from_losses(&losses.iter().map(|l| l * lambda).collect::<Vec<_>>());
        let cs = cfg(0.1, 1e-3 * lambda);
        assert!((cvar_smoothed(&scaled, &cs).unwrap() / base - lambda).abs() < 1e-10);
        assert!((empirical_cvar_exact(&scaled, 0.1) / empirical_cvar_exact(&b, 0.1) - lambda).abs() < 1e-10);
    }

    #[test]
    fn derivative_is_monotone_in_eta() {
        let b = ScenarioBatch::from_losses(&[0.3, -1.0, 2.2, 0.9, 0.0, 1.4]);
        let c = cfg(0.2, 1e-2);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..2000 {
            let (d1, d2) = ru_derivatives(-2.0 + i as f64 * 3e-3, &b, &c);
            assert!(d1 >= prev && d2 >= 0.0);
            prev = d1;
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert_eq!(
            solve_eta(&ScenarioBatch { pnl: vec![] }, &CvarConfig::default()),
            Err(RiskError::EmptyBatch)
        );
    }
}
