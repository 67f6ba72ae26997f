//! Gaussian actor-critic trained by warm-start regression and PPO.

mod adam;
mod mlp;
mod policy;
mod ppo;
mod train;

pub use adam::Adam;
pub use mlp::{MlpCache, MlpParams};
pub use policy::{
    entropy, log_prob, squash, squash_derivative, unsquash, PolicyEval, PolicyParams, LOG_2PI,
};
pub use ppo::{
    clipped_surrogate, gae, normalize_advantages, ppo_loss_and_grad, ppo_update, PolicyGrads, PolicyOptim,
    PpoHyper, PpoStats, Trajectory,
};
pub use train::{
    env_seed, replay, train, warm_start, warm_start_loss_and_grad, EpisodeRecord, Replay, Schedules, StepRecord,
    TrainOutput, WarmStartReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("input has {got} entries, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient during policy update")]
    NonFiniteGradient,
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    pub episodes: usize,
    pub logstd_min: f64,
    pub logstd_max: f64,
    /// Initial policy standard deviation on the raw action scale.
    pub init_std: f64,
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub warm_start_batch: usize,
    pub warm_start_rollout_len: usize,
    /// Early-stop threshold on exact-hinge BF + CAL at the policy mean.
    pub warm_start_arb_tol: f64,
    /// Early-stop threshold on the mean distance to the anchor.
    pub warm_start_anchor_tol: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            entropy_coef: 1e-3,
            epochs: 4,
            minibatch: 256,
            max_grad_norm: 1.0,
            episodes: 8,
            logstd_min: 1e-3f64.ln(),
            logstd_max: 0.5f64.ln(),
            init_std: 0.3,
            warm_start_steps: 800,
            warm_start_lr: 5e-3,
            warm_start_batch: 64,
            warm_start_rollout_len: 32,
            warm_start_arb_tol: 1e-6,
            warm_start_anchor_tol: 0.05,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.epochs == 0 || self.minibatch == 0 || self.episodes == 0 {
            return bad("hidden, epochs, minibatch and episodes must be positive");
        }
        if !(self.lr > 0.0 && self.warm_start_lr > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rates and adam_eps must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !((0.0..=1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.gae_lambda)) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.value_coef >= 0.0 && self.entropy_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("clip_eps and max_grad_norm must be positive, coefficients non-negative");
        }
        if !(self.logstd_min < self.logstd_max && self.init_std > 0.0) {
            return bad("logstd_min must be below logstd_max and init_std positive");
        }
        let init = self.init_std.ln();
        if init < self.logstd_min || init > self.logstd_max {
            return bad("init_std must lie inside the log-std range");
        }
        if self.warm_start_batch == 0 || self.warm_start_rollout_len == 0 {
            return bad("warm-start batch and rollout length must be positive");
        }
        Ok(())
    }
}
