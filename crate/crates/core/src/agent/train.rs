//! Warm-start regression and the episodic PPO training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::mlp::MlpParams;
use super::policy::{log_prob, squash, squash_derivative, PolicyParams};
use super::ppo::{gae, normalize_advantages, ppo_update, PolicyOptim, PpoHyper, Trajectory};
use super::{AgentConfig, AgentError};
use crate::env::{Action, ActionBounds, EnvConfig, MarketEnv, MarketState, PenaltyWeights, WeightCaps, N_ACTIONS};
use crate::risk::{empirical_cvar_exact, empirical_var, ScenarioBatch};

/// Linear annealing of the structural weights across episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub lambda_shape_max: f64,
    pub lambda_arb_max: f64,
    pub lambda_cvar: f64,
    pub episodes: usize,
}

impl Schedules {
    pub fn new(caps: &WeightCaps, episodes: usize) -> Self {
        Self {
            lambda_shape_max: caps.lambda_shape_max,
            lambda_arb_max: caps.lambda_arb_max,
            lambda_cvar: caps.lambda_cvar,
            episodes,
        }
    }

    /// Weights for the zero-based `episode`: 0 in the first, the caps in the last.
    pub fn weights(&self, episode: usize) -> PenaltyWeights {
        let frac = if self.episodes > 1 {
            (episode as f64 / (self.episodes - 1) as f64).min(1.0)
        } else {
            0.0
        };
        PenaltyWeights {
            shape: frac * self.lambda_shape_max,
            arb: frac * self.lambda_arb_max,
            cvar: self.lambda_cvar,
        }
    }
}

/// Mean over states of `‖squash(μ(s)) − a*‖²` and its gradient in the mean network.
pub fn warm_start_loss_and_grad(
    mean_net: &MlpParams,
    states: &[Vec<f64>],
    anchor: &Action,
    bounds: &ActionBounds,
) -> Result<(f64, Vec<f64>), AgentError> {
    let target = anchor.to_array();
    let n = states.len() as f64;
    let mut grad = vec![0.0; mean_net.theta.len()];
    let mut loss = 0.0;
    for s in states {
        let (mu, cache) = mean_net.forward(s)?;
        let z: [f64; N_ACTIONS] = mu.try_into().expect("actor head has N_ACTIONS outputs");
        let a = squash(&z, bounds).to_array();
        let d = squash_derivative(&z, bounds);
        let mut dz = [0.0; N_ACTIONS];
        for i in 0..N_ACTIONS {
            let r = a[i] - target[i];
            loss += r * r / n;
            dz[i] = 2.0 * r * d[i] / n;
        }
        mean_net.backward_into(&cache, &dz, &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Mean `‖squash(μ(s)) − a*‖₂` over the state pool.
    pub anchor_distance: f64,
    /// Exact-hinge BF + CAL of the mean action at the reset state.
    pub arb_at_mean: f64,
    pub converged: bool,
}

const WARM_START_CHECK_EVERY: usize = 25;

struct StatePool {
    reset: Vec<f64>,
    rollouts: Vec<Vec<f64>>,
}

impl StatePool {
    fn build(env: &MarketEnv, anchor: &Action, rollout_len: usize) -> Result<Self, AgentError> {
        let mut sim = env.clone();
        let reset = sim.reset().0.to_vec();
        let mut rollouts = Vec::with_capacity(2 * rollout_len);
        for _ in 0..2 {
            sim.reset();
            for _ in 0..rollout_len.min(sim.config().steps_per_episode) {
                let out = sim.step(anchor)?;
                rollouts.push(out.features.0.to_vec());
                if out.done {
                    break;
                }
            }
        }
        Ok(Self { reset, rollouts })
    }

    /// Half resets, half rollout states.
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                if self.rollouts.is_empty() || rng.random_bool(0.5) {
                    self.reset.clone()
                } else {
                    self.rollouts[rng.random_range(0..self.rollouts.len())].clone()
                }
            })
            .collect()
    }

    /// Pool average with the reset state carrying half the weight.
    fn average(&self, f: impl Fn(&[f64]) -> Result<f64, AgentError>) -> Result<f64, AgentError> {
        let r = f(&self.reset)?;
        if self.rollouts.is_empty() {
            return Ok(r);
        }
        let mut acc = 0.0;
        for s in &self.rollouts {
            acc += f(s)?;
        }
        Ok(0.5 * r + 0.5 * acc / self.rollouts.len() as f64)
    }
}

/// Regresses the squashed actor mean toward `anchor` with Adam.
///
/// Stops early once the mean action at the reset state is arbitrage-free to
/// `warm_start_arb_tol` and the mean distance to the anchor is below
/// `warm_start_anchor_tol`.
pub fn warm_start<R: Rng + ?Sized>(
    policy: &mut PolicyParams,
    env: &MarketEnv,
    anchor: &Action,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<WarmStartReport, AgentError> {
    let bounds = env.config().bounds;
    let pool = StatePool::build(env, anchor, cfg.warm_start_rollout_len)?;
    let pool_loss = |net: &MlpParams| {
        pool.average(|s| Ok(warm_start_loss_and_grad(net, &[s.to_vec()], anchor, &bounds)?.0))
    };
    let check = |net: &MlpParams| -> Result<(f64, f64), AgentError> {
        let target = anchor.to_array();
        let dist = pool.average(|s| {
            let (mu, _) = net.forward(s)?;
            let z: [f64; N_ACTIONS] = mu.try_into().expect("actor head has N_ACTIONS outputs");
            let a = squash(&z, &bounds).to_array();
            Ok(a.iter().zip(&target).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        })?;
        let (mu, _) = net.forward(&pool.reset)?;
        let z: [f64; N_ACTIONS] = mu.try_into().expect("actor head has N_ACTIONS outputs");
        let arb = env.evaluate_arb(&squash(&z, &bounds))?;
        Ok((dist, arb.bf_violation + arb.cal_violation))
    };
    let done = |dist: f64, arb: f64| arb <= cfg.warm_start_arb_tol && dist < cfg.warm_start_anchor_tol;

    let initial_loss = pool_loss(&policy.actor_mean)?;
    let (mut dist, mut arb) = check(&policy.actor_mean)?;
    let mut opt = Adam::new(
        policy.actor_mean.theta.len(),
        cfg.warm_start_lr,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let mut steps = 0;
    while steps < cfg.warm_start_steps && !done(dist, arb) {
        let batch = pool.sample(cfg.warm_start_batch, rng);
        let (_, g) = warm_start_loss_and_grad(&policy.actor_mean, &batch, anchor, &bounds)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(AgentError::NonFiniteGradient);
        }
        opt.step(&mut policy.actor_mean.theta, &g);
        steps += 1;
        if steps % WARM_START_CHECK_EVERY == 0 || steps == cfg.warm_start_steps {
            (dist, arb) = check(&policy.actor_mean)?;
        }
    }
    Ok(WarmStartReport {
        initial_loss,
        final_loss: pool_loss(&policy.actor_mean)?,
        steps,
        anchor_distance: dist,
        arb_at_mean: arb,
        converged: done(dist, arb),
    })
}

/// One logged environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// One-based episode number.
    pub episode: usize,
    pub t: usize,
    /// Spot at decision time.
    pub spot: f64,
    pub reward: f64,
    pub pnl_quote: f64,
    pub pnl_hedge: f64,
    /// Exact-hinge butterfly violation.
    pub bf: f64,
    /// Exact-hinge calendar violation.
    pub cal: f64,
    pub shape: f64,
    pub cvar: f64,
    pub alpha: f64,
    pub hedge: f64,
    pub psi_scale: f64,
    pub rho_shift: f64,
    pub dual: f64,
    /// P&L net of the shape and arbitrage charges actually applied.
    pub pnl_adj: f64,
    /// Mean policy standard deviation across heads.
    pub act_std: f64,
}

/// Per-episode aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub reward_sum: f64,
    pub pnl_raw: f64,
    pub pnl_adj: f64,
    pub bf_mean: f64,
    pub cal_mean: f64,
    pub shape_mean: f64,
    pub cvar_mean: f64,
    /// 5% quantile of per-step P&L.
    pub var5_steps: f64,
    /// Mean of the worst 5% of per-step P&L.
    pub cvar5_steps: f64,
    pub alpha_mean: f64,
    pub hedge_mean: f64,
    pub act_std: f64,
    pub lambda_shape: f64,
    pub lambda_arb: f64,
}

impl EpisodeRecord {
    fn from_steps(episode: usize, steps: &[StepRecord], w: &PenaltyWeights) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let sum = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>();
        let pnl = ScenarioBatch {
            pnl: steps.iter().map(|s| s.pnl_quote + s.pnl_hedge).collect(),
        };
        let (var5, cvar5) = if pnl.is_empty() {
            (0.0, 0.0)
        } else {
            (-empirical_var(&pnl, 0.05), -empirical_cvar_exact(&pnl, 0.05))
        };
        Self {
            episode,
            reward_sum: sum(|s| s.reward),
            pnl_raw: sum(|s| s.pnl_quote + s.pnl_hedge),
            pnl_adj: sum(|s| s.pnl_adj),
            bf_mean: mean(|s| s.bf),
            cal_mean: mean(|s| s.cal),
            shape_mean: mean(|s| s.shape),
            cvar_mean: mean(|s| s.cvar),
            var5_steps: var5,
            cvar5_steps: cvar5,
            alpha_mean: mean(|s| s.alpha),
            hedge_mean: mean(|s| s.hedge),
            act_std: mean(|s| s.act_std),
            lambda_shape: w.shape,
            lambda_arb: w.arb,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub policy: PolicyParams,
    pub warm_start: WarmStartReport,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

/// Warm-start followed by `episodes` rounds of rollout, GAE and PPO.
///
/// `on_episode` is called after each episode's update.
pub fn train(
    env_cfg: &EnvConfig,
    cfg: &AgentConfig,
    seed: u64,
    on_episode: &mut dyn FnMut(&EpisodeRecord),
) -> Result<TrainOutput, AgentError> {
    cfg.validate()?;
    env_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = PolicyParams::init(cfg, &mut rng);
    let mut env = MarketEnv::new(env_cfg.clone(), rng.random())?;
    let warm = warm_start(&mut policy, &env, &Action::ANCHOR, cfg, &mut rng)?;
    let mut optim = PolicyOptim::new(&policy, cfg);
    let hyper = PpoHyper::from(cfg);
    let schedules = Schedules::new(&env_cfg.weights, cfg.episodes);

    let mut all_steps = Vec::with_capacity(cfg.episodes * env_cfg.steps_per_episode);
    let mut episodes = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes {
        let w = schedules.weights(ep);
        env.set_weights(w);
        let mut features = env.reset();
        let mut traj = Trajectory::default();
        let mut ep_steps = Vec::with_capacity(env_cfg.steps_per_episode);
        loop {
            let f = features.0.to_vec();
            let e = policy.evaluate(&f)?;
            let z = policy.sample(&e, &mut rng);
            let action = squash(&z, &env_cfg.bounds);
            let spot = env.state().spot;
            let t = env.state().t;
            let out = env.step(&action)?;
            let b = out.breakdown;
            ep_steps.push(StepRecord {
                episode: ep + 1,
                t,
                spot,
                reward: out.reward,
                pnl_quote: b.pnl_quote,
                pnl_hedge: b.pnl_hedge,
                bf: b.bf_violation,
                cal: b.cal_violation,
                shape: b.shape,
                cvar: b.cvar_est,
                alpha: action.alpha,
                hedge: action.hedge,
                psi_scale: action.psi_scale,
                rho_shift: action.rho_shift,
                dual: action.dual,
                pnl_adj: b.pnl_raw() - b.lambda_shape * b.shape - b.lambda_eff * (b.bf + b.cal),
                act_std: e.std().iter().sum::<f64>() / N_ACTIONS as f64,
            });
            traj.log_probs.push(log_prob(&z, &e.mu, &e.logstd));
            traj.values.push(e.value);
            traj.features.push(f);
            traj.raw_actions.push(z);
            traj.rewards.push(out.reward);
            features = out.features;
            if out.done {
                break;
            }
        }
        let (mut adv, ret) = gae(&traj.rewards, &traj.values, 0.0, cfg.gamma, cfg.gae_lambda);
        normalize_advantages(&mut adv);
        traj.advantages = adv;
        traj.returns = ret;
        ppo_update(&mut policy, &mut optim, &traj, &hyper, &mut rng)?;

        let rec = EpisodeRecord::from_steps(ep + 1, &ep_steps, &w);
        on_episode(&rec);
        episodes.push(rec);
        all_steps.extend(ep_steps);
    }
    Ok(TrainOutput {
        policy,
        warm_start: warm,
        steps: all_steps,
        episodes,
    })
}

/// Environment seed that [`train`] draws for a run seed.
pub fn env_seed(cfg: &AgentConfig, seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _ = PolicyParams::init(cfg, &mut rng);
    rng.random()
}

/// Result of re-running the environment under logged actions.
#[derive(Debug, Clone)]
pub struct Replay {
    pub rewards: Vec<f64>,
    /// State at the start of the last step.
    pub last_state: MarketState,
    pub last_action: Action,
}

/// Re-runs the environment of a training run under its logged actions.
///
/// The environment draws are independent of the policy, so the same seed and
/// actions reproduce every reward and state exactly.
pub fn replay(env_cfg: &EnvConfig, cfg: &AgentConfig, seed: u64, actions: &[Action]) -> Result<Replay, AgentError> {
    let expected = cfg.episodes * env_cfg.steps_per_episode;
    if actions.is_empty() || actions.len() != expected {
        return Err(AgentError::ShapeMismatch {
            expected,
            got: actions.len(),
        });
    }
    let mut env = MarketEnv::new(env_cfg.clone(), env_seed(cfg, seed))?;
    let schedules = Schedules::new(&env_cfg.weights, cfg.episodes);
    let mut rewards = Vec::with_capacity(expected);
    let mut last = None;
    for (ep, chunk) in actions.chunks(env_cfg.steps_per_episode).enumerate() {
        env.set_weights(schedules.weights(ep));
        env.reset();
        for a in chunk {
            last = Some((env.state().clone(), *a));
            rewards.push(env.step(a)?.reward);
        }
    }
    let (last_state, last_action) = last.expect("at least one step");
    Ok(Replay {
        rewards,
        last_state,
        last_action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_env() -> EnvConfig {
        EnvConfig {
            steps_per_episode: 24,
            ..EnvConfig::default()
        }
    }

    fn short_agent() -> AgentConfig {
        AgentConfig {
            episodes: 3,
            minibatch: 16,
            hidden: 16,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedules::new(&WeightCaps::default(), 8);
        let first = s.weights(0);
        assert_eq!((first.shape, first.arb, first.cvar), (0.0, 0.0, 0.01));
        let last = s.weights(7);
        assert_eq!((last.shape, last.arb, last.cvar), (0.5, 0.05, 0.01));
        for e in 1..8 {
            assert!(s.weights(e).shape >= s.weights(e - 1).shape);
            assert!(s.weights(e).arb >= s.weights(e - 1).arb);
        }
    }

    #[test]
    fn zero_warm_start_steps_leave_policy_unchanged() {
        let cfg = AgentConfig {
            warm_start_steps: 0,
            ..short_agent()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::init(&cfg, &mut rng);
        let before = p.clone();
        let env = MarketEnv::new(short_env(), 1).unwrap();
        let rep = warm_start(&mut p, &env, &Action::ANCHOR, &cfg, &mut rng).unwrap();
        assert_eq!(rep.steps, 0);
        assert_eq!(p, before);
    }

    #[test]
    fn warm_start_reaches_anchor() {
        let cfg = AgentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::init(&cfg, &mut rng);
        let env = MarketEnv::new(EnvConfig::default(), 1).unwrap();
        let rep = warm_start(&mut p, &env, &Action::ANCHOR, &cfg, &mut rng).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep.final_loss * 10.0 <= rep.initial_loss, "{rep:?}");
        assert!(rep.anchor_distance < 0.05);
        assert!(rep.arb_at_mean <= 1e-6);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = |seed| train(&short_env(), &short_agent(), seed, &mut |_| {}).unwrap();
        let (a, b, c) = (run(0), run(0), run(1));
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.episodes, b.episodes);
        assert_ne!(a.steps, c.steps);
        assert_eq!(a.steps.len(), 3 * 24);
        assert_eq!(a.episodes.len(), 3);
        assert_eq!(a.episodes[0].lambda_shape, 0.0);
        assert_eq!(a.episodes[2].lambda_arb, 0.05);
    }

    #[test]
    fn replay_reproduces_logged_rewards() {
        let (env, agent) = (short_env(), short_agent());
        let run = train(&env, &agent, 7, &mut |_| {}).unwrap();
        let actions: Vec<Action> = run
            .steps
            .iter()
            .map(|s| Action {
                alpha: s.alpha,
                hedge: s.hedge,
                psi_scale: s.psi_scale,
                rho_shift: s.rho_shift,
                dual: s.dual,
            })
            .collect();
        let r = replay(&env, &agent, 7, &actions).unwrap();
        let logged: Vec<f64> = run.steps.iter().map(|s| s.reward).collect();
        assert_eq!(r.rewards, logged);
        assert_eq!(r.last_state.spot, run.steps.last().unwrap().spot);
        assert!(replay(&env, &agent, 7, &actions[1..]).is_err());
    }
}
