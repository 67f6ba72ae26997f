//! Diagonal-Gaussian policy over raw actions and the squash to physical ranges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpCache, MlpParams};
use super::{AgentConfig, AgentError};
use crate::env::{Action, ActionBounds, N_ACTIONS, N_FEATURES};
use crate::math::{logistic, softplus};

/// `ln(2π)`.
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Maps raw `z` to an in-range action.
///
/// `α = α_max·σ(z₁)`, `hedge = σ(z₂)`, `ψ-scale = lo + (hi−lo)·σ(z₃)`,
/// `ρ-shift = ρ_max·tanh(z₄)`, `dual = softplus(z₅)`.
pub fn squash(z: &[f64; N_ACTIONS], b: &ActionBounds) -> Action {
    Action {
        alpha: b.alpha_max * logistic(z[0]),
        hedge: logistic(z[1]),
        psi_scale: b.psi_scale_min + (b.psi_scale_max - b.psi_scale_min) * logistic(z[2]),
        rho_shift: b.rho_max_shift * z[3].tanh(),
        dual: softplus(z[4]),
    }
}

/// Elementwise derivative of [`squash`].
pub fn squash_derivative(z: &[f64; N_ACTIONS], b: &ActionBounds) -> [f64; N_ACTIONS] {
    let ds = |x: f64| {
        let s = logistic(x);
        s * (1.0 - s)
    };
    let t = z[3].tanh();
    [
        b.alpha_max * ds(z[0]),
        ds(z[1]),
        (b.psi_scale_max - b.psi_scale_min) * ds(z[2]),
        b.rho_max_shift * (1.0 - t * t),
        logistic(z[4]),
    ]
}

/// Inverse of [`squash`] for actions strictly inside their ranges.
pub fn unsquash(a: &Action, b: &ActionBounds) -> [f64; N_ACTIONS] {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    [
        logit(a.alpha / b.alpha_max),
        logit(a.hedge),
        logit((a.psi_scale - b.psi_scale_min) / (b.psi_scale_max - b.psi_scale_min)),
        (a.rho_shift / b.rho_max_shift).atanh(),
        a.dual.exp_m1().ln(),
    ]
}

/// Diagonal-Gaussian log density of `z`.
pub fn log_prob(z: &[f64; N_ACTIONS], mu: &[f64; N_ACTIONS], logstd: &[f64; N_ACTIONS]) -> f64 {
    (0..N_ACTIONS)
        .map(|i| {
            let u = (z[i] - mu[i]) * (-logstd[i]).exp();
            -0.5 * u * u - logstd[i] - 0.5 * LOG_2PI
        })
        .sum()
}

/// `Σ ½·log(2πe) + log σ_i`.
pub fn entropy(logstd: &[f64; N_ACTIONS]) -> f64 {
    logstd.iter().map(|l| 0.5 * (LOG_2PI + 1.0) + l).sum()
}

/// Actor mean, actor log-std and critic networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor_mean: MlpParams,
    pub actor_logstd: MlpParams,
    pub critic: MlpParams,
    pub logstd_min: f64,
    pub logstd_max: f64,
}

/// Forward pass of all three networks at one state.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub mu: [f64; N_ACTIONS],
    /// Clamped log-std.
    pub logstd: [f64; N_ACTIONS],
    /// Heads whose raw log-std sits outside the clamp (zero gradient).
    pub logstd_clamped: [bool; N_ACTIONS],
    pub value: f64,
    pub(crate) mean_cache: MlpCache,
    pub(crate) logstd_cache: MlpCache,
    pub(crate) critic_cache: MlpCache,
}

impl PolicyEval {
    pub fn std(&self) -> [f64; N_ACTIONS] {
        self.logstd.map(f64::exp)
    }
}

impl PolicyParams {
    pub fn init<R: Rng + ?Sized>(cfg: &AgentConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let actor_mean = MlpParams::init(N_FEATURES, h, N_ACTIONS, 0.01, rng);
        let mut actor_logstd = MlpParams::init(N_FEATURES, h, N_ACTIONS, 0.01, rng);
        actor_logstd.output_bias_mut().fill(cfg.init_std.ln());
        let critic = MlpParams::init(N_FEATURES, h, 1, 1.0, rng);
        Self {
            actor_mean,
            actor_logstd,
            critic,
            logstd_min: cfg.logstd_min,
            logstd_max: cfg.logstd_max,
        }
    }

    pub fn evaluate(&self, features: &[f64]) -> Result<PolicyEval, AgentError> {
        let (mu, mean_cache) = self.actor_mean.forward(features)?;
        let (raw_ls, logstd_cache) = self.actor_logstd.forward(features)?;
        let (v, critic_cache) = self.critic.forward(features)?;
        let mut logstd = [0.0; N_ACTIONS];
        let mut clamped = [false; N_ACTIONS];
        for i in 0..N_ACTIONS {
            logstd[i] = raw_ls[i].clamp(self.logstd_min, self.logstd_max);
            clamped[i] = raw_ls[i] < self.logstd_min || raw_ls[i] > self.logstd_max;
        }
        Ok(PolicyEval {
            mu: mu.try_into().expect("actor head has N_ACTIONS outputs"),
            logstd,
            logstd_clamped: clamped,
            value: v[0],
            mean_cache,
            logstd_cache,
            critic_cache,
        })
    }

    /// Raw mean action at a state.
    pub fn mean_action(&self, features: &[f64]) -> Result<[f64; N_ACTIONS], AgentError> {
        let (mu, _) = self.actor_mean.forward(features)?;
        Ok(mu.try_into().expect("actor head has N_ACTIONS outputs"))
    }

    /// Draws `z ~ N(μ, σ²)`.
    pub fn sample<R: Rng + ?Sized>(&self, eval: &PolicyEval, rng: &mut R) -> [f64; N_ACTIONS] {
        let mut z = [0.0; N_ACTIONS];
        for i in 0..N_ACTIONS {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            z[i] = eval.mu[i] + eval.logstd[i].exp() * e;
        }
        z
    }

    pub fn n_params(&self) -> usize {
        self.actor_mean.theta.len() + self.actor_logstd.theta.len() + self.critic.theta.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bounds() -> ActionBounds {
        ActionBounds::default()
    }

    #[test]
    fn squash_at_zero() {
        let a = squash(&[0.0; 5], &bounds());
        assert_eq!(a.alpha, 0.025);
        assert_eq!(a.hedge, 0.5);
        assert_eq!(a.psi_scale, 1.0);
        assert_eq!(a.rho_shift, 0.0);
        assert!((a.dual - 2f64.ln()).abs() < 1e-16);
    }

    #[test]
    fn squash_saturates() {
        let a = squash(&[800.0, -800.0, 800.0, 800.0, -800.0], &bounds());
        assert_eq!(a.alpha, 0.05);
        assert_eq!(a.hedge, 0.0);
        assert_eq!(a.psi_scale, 1.5);
        assert_eq!(a.rho_shift, 0.2);
        assert_eq!(a.dual, 0.0);
    }

    #[test]
    fn squash_ranges_over_many_draws() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1_000_000 {
            let z: [f64; 5] = std::array::from_fn(|_| rng.random_range(-60.0..60.0));
            let a = squash(&z, &b);
            assert_eq!(a, a.clamped(&b));
        }
    }

    #[test]
    fn squash_monotone_and_derivative_matches_fd() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z: [f64; 5] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
            let zp = z.map(|x| x + 0.1);
            let (a, ap) = (squash(&z, &b).to_array(), squash(&zp, &b).to_array());
            let d = squash_derivative(&z, &b);
            for i in 0..5 {
                assert!(ap[i] >= a[i]);
                let h = 1e-6;
                let (mut u, mut l) = (z, z);
                u[i] += h;
                l[i] -= h;
                let fd = (squash(&u, &b).to_array()[i] - squash(&l, &b).to_array()[i]) / (2.0 * h);
                assert!((fd - d[i]).abs() < 1e-7 * d[i].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn unsquash_inverts_anchor() {
        let b = bounds();
        let anchor = Action {
            dual: 0.01,
            ..Action::ANCHOR
        };
        let back = squash(&unsquash(&anchor, &b), &b);
        for (x, y) in back.to_array().iter().zip(anchor.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_and_entropy_reference_values() {
        let mu = [0.1, -0.2, 0.3, 0.0, 1.0];
        let ls = [-1.0, -0.5, 0.0, -2.0, -0.3];
        let lp = log_prob(&mu, &mu, &ls);
        let expect = -ls.iter().sum::<f64>() - 2.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expect).abs() < 1e-12);
        let h = entropy(&[0.0; 5]);
        assert!((h - 2.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn logstd_is_clamped() {
        let cfg = AgentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyParams::init(&cfg, &mut rng);
        p.actor_logstd.output_bias_mut().copy_from_slice(&[5.0, -20.0, 0.0, -1.0, -1.5]);
        let e = p.evaluate(&[0.0; N_FEATURES]).unwrap();
        assert_eq!(e.logstd[0], cfg.logstd_max);
        assert_eq!(e.logstd[1], cfg.logstd_min);
        assert_eq!(e.logstd_clamped, [true, true, true, false, false]);
    }
}
