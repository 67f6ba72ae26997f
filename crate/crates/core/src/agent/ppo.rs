//! Generalized advantage estimation and the clipped PPO update.

use rand::seq::SliceRandom;
use rand::Rng;

use super::adam::Adam;
use super::policy::{entropy, log_prob, PolicyParams};
use super::{AgentConfig, AgentError};
use crate::env::N_ACTIONS;

/// On-policy rollout data, one entry per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub features: Vec<Vec<f64>>,
    pub raw_actions: Vec<[f64; N_ACTIONS]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Backward GAE recursion; returns `(advantages, advantages + values)`.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards/values length mismatch");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lam * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { *a - mean };
    }
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoHyper {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
}

impl From<&AgentConfig> for PpoHyper {
    fn from(c: &AgentConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
            epochs: c.epochs,
            minibatch: c.minibatch,
            max_grad_norm: c.max_grad_norm,
        }
    }
}

/// Minibatch loss terms; `loss = −surrogate + c_v·value_loss − c_H·entropy`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub loss: f64,
}

/// Gradients of the PPO loss for each network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub actor_mean: Vec<f64>,
    pub actor_logstd: Vec<f64>,
    pub critic: Vec<f64>,
}

impl PolicyGrads {
    fn zeros(p: &PolicyParams) -> Self {
        Self {
            actor_mean: vec![0.0; p.actor_mean.theta.len()],
            actor_logstd: vec![0.0; p.actor_logstd.theta.len()],
            critic: vec![0.0; p.critic.theta.len()],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.actor_mean
            .iter()
            .chain(&self.actor_logstd)
            .chain(&self.critic)
            .all(|g| g.is_finite())
    }
}

/// PPO loss over `idx` and its gradient with respect to every network.
pub fn ppo_loss_and_grad(
    policy: &PolicyParams,
    batch: &Trajectory,
    idx: &[usize],
    hyper: &PpoHyper,
) -> Result<(PpoStats, PolicyGrads), AgentError> {
    let mut grads = PolicyGrads::zeros(policy);
    let mut stats = PpoStats::default();
    let n = idx.len() as f64;
    for &i in idx {
        let e = policy.evaluate(&batch.features[i])?;
        let z = &batch.raw_actions[i];
        let adv = batch.advantages[i];
        let ratio = (log_prob(z, &e.mu, &e.logstd) - batch.log_probs[i]).exp();
        let surr = clipped_surrogate(ratio, adv, hyper.clip_eps);
        // the unclipped branch carries the gradient whenever it attains the min
        let active = ratio * adv <= ratio.clamp(1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * adv;
        let v_err = e.value - batch.returns[i];
        stats.surrogate += surr / n;
        stats.value_loss += v_err * v_err / n;
        stats.entropy += entropy(&e.logstd) / n;

        let coef = if active { -adv * ratio / n } else { 0.0 };
        let mut d_mu = [0.0; N_ACTIONS];
        let mut d_ls = [0.0; N_ACTIONS];
        for k in 0..N_ACTIONS {
            let inv_var = (-2.0 * e.logstd[k]).exp();
            let diff = z[k] - e.mu[k];
            d_mu[k] = coef * diff * inv_var;
            if !e.logstd_clamped[k] {
                d_ls[k] = coef * (diff * diff * inv_var - 1.0) - hyper.entropy_coef / n;
            }
        }
        policy.actor_mean.backward_into(&e.mean_cache, &d_mu, &mut grads.actor_mean);
        policy.actor_logstd.backward_into(&e.logstd_cache, &d_ls, &mut grads.actor_logstd);
        let d_v = [hyper.value_coef * 2.0 * v_err / n];
        policy.critic.backward_into(&e.critic_cache, &d_v, &mut grads.critic);
    }
    stats.loss = -stats.surrogate + hyper.value_coef * stats.value_loss - hyper.entropy_coef * stats.entropy;
    Ok((stats, grads))
}

fn clip_norm(groups: &mut [&mut Vec<f64>], max_norm: f64) {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Adam state for each network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOptim {
    pub actor_mean: Adam,
    pub actor_logstd: Adam,
    pub critic: Adam,
}

impl PolicyOptim {
    pub fn new(policy: &PolicyParams, cfg: &AgentConfig) -> Self {
        let mk = |n: usize| Adam::new(n, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Self {
            actor_mean: mk(policy.actor_mean.theta.len()),
            actor_logstd: mk(policy.actor_logstd.theta.len()),
            critic: mk(policy.critic.theta.len()),
        }
    }
}

/// `epochs` passes of shuffled minibatch Adam descent on the PPO loss.
///
/// The actor (mean and log-std) and the critic gradients are norm-clipped
/// separately. Returns the loss statistics of the last minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    optim: &mut PolicyOptim,
    batch: &Trajectory,
    hyper: &PpoHyper,
    rng: &mut R,
) -> Result<PpoStats, AgentError> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut last = PpoStats::default();
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        for idx in order.chunks(hyper.minibatch.max(1)) {
            let (stats, mut g) = ppo_loss_and_grad(policy, batch, idx, hyper)?;
            if !g.all_finite() || !stats.loss.is_finite() {
                return Err(AgentError::NonFiniteGradient);
            }
            clip_norm(&mut [&mut g.actor_mean, &mut g.actor_logstd], hyper.max_grad_norm);
            clip_norm(&mut [&mut g.critic], hyper.max_grad_norm);
            optim.actor_mean.step(&mut policy.actor_mean.theta, &g.actor_mean);
            optim.actor_logstd.step(&mut policy.actor_logstd.theta, &g.actor_logstd);
            optim.critic.step(&mut policy.critic.theta, &g.critic);
            last = stats;
        }
    }
    Ok(last)
}
