//! Flat run configuration, overrides and validation.

use std::path::Path;

use essvi_mm::agent::AgentConfig;
use essvi_mm::env::{
    ActionBounds, CvarSettings, EnvConfig, HestonParams, IntensityParams, WeightCaps,
};
use essvi_mm::noarb::PenaltyConfig;
use essvi_mm::surface::SurfaceCaps;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("--set {0}: expected key=value")]
    BadOverride(String),
    #[error("--set {key}: {message}")]
    Override { key: String, message: String },
    #[error("{location}: {key}: {message}")]
    Invalid {
        location: String,
        key: String,
        message: String,
    },
}

/// Every tunable of a run as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,

    pub spot0: f64,
    pub maturities: Vec<f64>,
    pub k_grid: Vec<f64>,
    pub steps_per_episode: usize,
    pub dt: f64,
    pub filter_rate: f64,

    pub mu: f64,
    pub kappa: f64,
    pub v_bar: f64,
    pub xi: f64,
    pub rho_sv: f64,
    pub v0: f64,

    pub lambda0: f64,
    pub beta: f64,
    pub kappa_k: f64,
    pub s0: f64,

    pub lambda_shape_max: f64,
    pub lambda_arb_max: f64,
    pub lambda_cvar: f64,

    pub alpha_max: f64,
    pub psi_scale_min: f64,
    pub psi_scale_max: f64,
    pub rho_max_shift: f64,

    pub eps_psi: f64,
    pub tau_max: f64,
    pub sigma_min: f64,
    pub t_min: f64,

    pub tau_arb: f64,
    pub eps_norm: f64,
    pub hard_hinge: bool,

    pub tail_fraction: f64,
    pub tau_cvar: f64,
    pub n_scenarios: usize,
    pub noise_scale: f64,

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
    pub init_std: f64,
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub warm_start_batch: usize,
    pub warm_start_rollout_len: usize,
    pub warm_start_arb_tol: f64,
    pub warm_start_anchor_tol: f64,

    /// Random interior states used by `diag sens`.
    pub diag_states: usize,
    pub wing_samples: usize,
    pub wing_k_eval: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self::from_configs(0, &EnvConfig::default(), &AgentConfig::default())
    }
}

impl RunSettings {
    pub fn from_configs(seed: u64, e: &EnvConfig, a: &AgentConfig) -> Self {
        Self {
            seed,
            spot0: e.spot0,
            maturities: e.maturities.clone(),
            k_grid: e.k_grid.clone(),
            steps_per_episode: e.steps_per_episode,
            dt: e.dt,
            filter_rate: e.filter_rate,
            mu: e.heston.mu,
            kappa: e.heston.kappa,
            v_bar: e.heston.v_bar,
            xi: e.heston.xi,
            rho_sv: e.heston.rho_sv,
            v0: e.heston.v0,
            lambda0: e.intensity.lambda0,
            beta: e.intensity.beta,
            kappa_k: e.intensity.kappa_k,
            s0: e.intensity.s0,
            lambda_shape_max: e.weights.lambda_shape_max,
            lambda_arb_max: e.weights.lambda_arb_max,
            lambda_cvar: e.weights.lambda_cvar,
            alpha_max: e.bounds.alpha_max,
            psi_scale_min: e.bounds.psi_scale_min,
            psi_scale_max: e.bounds.psi_scale_max,
            rho_max_shift: e.bounds.rho_max_shift,
            eps_psi: e.caps.eps_psi,
            tau_max: e.caps.tau_max,
            sigma_min: e.caps.sigma_min,
            t_min: e.caps.t_min,
            tau_arb: e.penalty.tau_arb,
            eps_norm: e.penalty.eps_norm,
            hard_hinge: e.penalty.hard_hinge,
            tail_fraction: e.cvar.tail_fraction,
            tau_cvar: e.cvar.tau_cvar,
            n_scenarios: e.cvar.n_scenarios,
            noise_scale: e.cvar.noise_scale,
            hidden: a.hidden,
            lr: a.lr,
            adam_beta1: a.adam_beta1,
            adam_beta2: a.adam_beta2,
            adam_eps: a.adam_eps,
            clip_eps: a.clip_eps,
            gamma: a.gamma,
            gae_lambda: a.gae_lambda,
            value_coef: a.value_coef,
            entropy_coef: a.entropy_coef,
            epochs: a.epochs,
            minibatch: a.minibatch,
            max_grad_norm: a.max_grad_norm,
            episodes: a.episodes,
            logstd_min: a.logstd_min,
            logstd_max: a.logstd_max,
            init_std: a.init_std,
            warm_start_steps: a.warm_start_steps,
            warm_start_lr: a.warm_start_lr,
            warm_start_batch: a.warm_start_batch,
            warm_start_rollout_len: a.warm_start_rollout_len,
            warm_start_arb_tol: a.warm_start_arb_tol,
            warm_start_anchor_tol: a.warm_start_anchor_tol,
            diag_states: 50,
            wing_samples: 1000,
            wing_k_eval: 50.0,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            spot0: self.spot0,
            maturities: self.maturities.clone(),
            k_grid: self.k_grid.clone(),
            steps_per_episode: self.steps_per_episode,
            dt: self.dt,
            heston: HestonParams {
                mu: self.mu,
                kappa: self.kappa,
                v_bar: self.v_bar,
                xi: self.xi,
                rho_sv: self.rho_sv,
                v0: self.v0,
            },
            intensity: IntensityParams {
                lambda0: self.lambda0,
                beta: self.beta,
                kappa_k: self.kappa_k,
                s0: self.s0,
            },
            weights: WeightCaps {
                lambda_shape_max: self.lambda_shape_max,
                lambda_arb_max: self.lambda_arb_max,
                lambda_cvar: self.lambda_cvar,
            },
            bounds: ActionBounds {
                alpha_max: self.alpha_max,
                psi_scale_min: self.psi_scale_min,
                psi_scale_max: self.psi_scale_max,
                rho_max_shift: self.rho_max_shift,
            },
            filter_rate: self.filter_rate,
            caps: SurfaceCaps {
                eps_psi: self.eps_psi,
                tau_max: self.tau_max,
                sigma_min: self.sigma_min,
                t_min: self.t_min,
            },
            penalty: PenaltyConfig {
                tau_arb: self.tau_arb,
                eps_norm: self.eps_norm,
                hard_hinge: self.hard_hinge,
            },
            cvar: CvarSettings {
                tail_fraction: self.tail_fraction,
                tau_cvar: self.tau_cvar,
                n_scenarios: self.n_scenarios,
                noise_scale: self.noise_scale,
            },
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            hidden: self.hidden,
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            clip_eps: self.clip_eps,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            epochs: self.epochs,
            minibatch: self.minibatch,
            max_grad_norm: self.max_grad_norm,
            episodes: self.episodes,
            logstd_min: self.logstd_min,
            logstd_max: self.logstd_max,
            init_std: self.init_std,
            warm_start_steps: self.warm_start_steps,
            warm_start_lr: self.warm_start_lr,
            warm_start_batch: self.warm_start_batch,
            warm_start_rollout_len: self.warm_start_rollout_len,
            warm_start_arb_tol: self.warm_start_arb_tol,
            warm_start_anchor_tol: self.warm_start_anchor_tol,
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("settings serialize");
        s.push('\n');
        s
    }

    /// First violated constraint as `(key, message)`.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let fail = |key: &'static str, msg: &str| Err((key, msg.to_string()));
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        let unit_open = |x: f64| x > 0.0 && x < 1.0;

        if !finite_pos(self.spot0) {
            return fail("spot0", "must be positive");
        }
        if self.maturities.len() < 2
            || self.maturities[0] <= 0.0
            || self.maturities.windows(2).any(|w| !(w[1] > w[0]))
            || self.maturities.iter().any(|t| !t.is_finite())
        {
            return fail("maturities", "need at least two positive, strictly increasing values");
        }
        if self.k_grid.len() < 3 || self.k_grid.windows(2).any(|w| !(w[1] > w[0])) || self.k_grid.iter().any(|k| !k.is_finite()) {
            return fail("k_grid", "need at least three strictly increasing values");
        }
        if self.steps_per_episode == 0 {
            return fail("steps_per_episode", "must be positive");
        }
        if !finite_pos(self.dt) {
            return fail("dt", "must be positive");
        }
        if !(self.filter_rate > 0.0 && self.filter_rate <= 1.0) {
            return fail("filter_rate", "must lie in (0, 1]");
        }
        if !self.mu.is_finite() {
            return fail("mu", "must be finite");
        }
        for (key, v) in [("kappa", self.kappa), ("v_bar", self.v_bar), ("xi", self.xi), ("v0", self.v0)] {
            if !finite_nonneg(v) {
                return fail(key, "must be finite and non-negative");
            }
        }
        if !(self.rho_sv.abs() <= 1.0) {
            return fail("rho_sv", "must lie in [-1, 1]");
        }
        for (key, v) in [
            ("lambda0", self.lambda0),
            ("beta", self.beta),
            ("s0", self.s0),
            ("lambda_shape_max", self.lambda_shape_max),
            ("lambda_arb_max", self.lambda_arb_max),
            ("lambda_cvar", self.lambda_cvar),
        ] {
            if !finite_nonneg(v) {
                return fail(key, "must be finite and non-negative");
            }
        }
        if !finite_pos(self.kappa_k) {
            return fail("kappa_k", "must be positive");
        }
        if !finite_pos(self.alpha_max) {
            return fail("alpha_max", "must be positive");
        }
        if !(self.psi_scale_min >= 0.0) {
            return fail("psi_scale_min", "must be non-negative");
        }
        if !(self.psi_scale_max > self.psi_scale_min && self.psi_scale_max.is_finite()) {
            return fail("psi_scale_max", "must exceed psi_scale_min");
        }
        if !(self.rho_max_shift >= 0.0 && self.rho_max_shift < 1.0) {
            return fail("rho_max_shift", "must lie in [0, 1)");
        }
        if !unit_open(self.eps_psi) {
            return fail("eps_psi", "must lie in (0, 1)");
        }
        if !(self.tau_max > 0.0 && self.tau_max < 2.0) {
            return fail("tau_max", "must lie in (0, 2)");
        }
        for (key, v) in [("sigma_min", self.sigma_min), ("t_min", self.t_min), ("eps_norm", self.eps_norm)] {
            if !finite_pos(v) {
                return fail(key, "must be positive");
            }
        }
        if !finite_pos(self.tau_arb) {
            return fail("tau_arb", "must be positive");
        }
        if !unit_open(self.tail_fraction) {
            return fail("tail_fraction", "must lie in (0, 1)");
        }
        if !finite_pos(self.tau_cvar) {
            return fail("tau_cvar", "must be positive");
        }
        if self.n_scenarios == 0 {
            return fail("n_scenarios", "must be positive");
        }
        if !finite_nonneg(self.noise_scale) {
            return fail("noise_scale", "must be finite and non-negative");
        }
        for (key, v) in [
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("episodes", self.episodes),
            ("warm_start_batch", self.warm_start_batch),
            ("warm_start_rollout_len", self.warm_start_rollout_len),
            ("wing_samples", self.wing_samples),
        ] {
            if v == 0 {
                return fail(key, "must be positive");
            }
        }
        for (key, v) in [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("clip_eps", self.clip_eps),
            ("max_grad_norm", self.max_grad_norm),
            ("warm_start_lr", self.warm_start_lr),
            ("init_std", self.init_std),
        ] {
            if !finite_pos(v) {
                return fail(key, "must be positive");
            }
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(key, "must lie in [0, 1)");
            }
        }
        for (key, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(key, "must lie in [0, 1]");
            }
        }
        for (key, v) in [
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
            ("warm_start_arb_tol", self.warm_start_arb_tol),
            ("warm_start_anchor_tol", self.warm_start_anchor_tol),
        ] {
            if !finite_nonneg(v) {
                return fail(key, "must be finite and non-negative");
            }
        }
        if !(self.logstd_min.is_finite() && self.logstd_max.is_finite() && self.logstd_min < self.logstd_max) {
            return fail("logstd_max", "must exceed logstd_min");
        }
        let init = self.init_std.ln();
        if init < self.logstd_min || init > self.logstd_max {
            return fail("init_std", "log must lie in [logstd_min, logstd_max]");
        }
        if !(self.wing_k_eval > 1.0 && self.wing_k_eval.is_finite()) {
            return fail("wing_k_eval", "must exceed 1");
        }
        if let Err(e) = self.env_config().validate() {
            return Err(("settings", e.to_string()));
        }
        Ok(())
    }
}

/// Source of a settings object, kept for error locations.
struct Source {
    path: String,
    text: Option<String>,
    overridden: Vec<String>,
}

impl Source {
    fn locate(&self, key: &str) -> String {
        if self.overridden.iter().any(|k| k == key) {
            return "--set".into();
        }
        let Some(text) = &self.text else {
            return "defaults".into();
        };
        let needle = format!("\"{key}\"");
        match text.lines().position(|l| l.contains(&needle)) {
            Some(i) => format!("{}:{}", self.path, i + 1),
            None => format!("{} (default value)", self.path),
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, Value), SettingsError> {
    let (key, value) = raw
        .split_once('=')
        .filter(|(k, _)| !k.trim().is_empty())
        .ok_or_else(|| SettingsError::BadOverride(raw.to_string()))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Loads a settings file (or the defaults), applies `--seed` and `--set`
/// overrides in order, and validates the result.
pub fn load(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunSettings, SettingsError> {
    let (base, mut source) = match config {
        Some(p) => {
            let path = p.display().to_string();
            let text = std::fs::read_to_string(p).map_err(|source| SettingsError::Io {
                path: path.clone(),
                source,
            })?;
            let parsed: RunSettings = serde_json::from_str(&text).map_err(|e| SettingsError::Parse {
                path: path.clone(),
                line: e.line(),
                column: e.column(),
                message: strip_position(&e.to_string()),
            })?;
            (
                parsed,
                Source {
                    path,
                    text: Some(text),
                    overridden: Vec::new(),
                },
            )
        }
        None => (
            RunSettings::default(),
            Source {
                path: "defaults".into(),
                text: None,
                overridden: Vec::new(),
            },
        ),
    };

    let mut settings = base;
    if !overrides.is_empty() {
        let Value::Object(mut map) = serde_json::to_value(&settings).expect("settings serialize") else {
            unreachable!("settings serialize to an object");
        };
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply_override(&mut map, &key, value)?;
            source.overridden.push(key);
        }
        settings = serde_json::from_value(Value::Object(map)).map_err(|e| SettingsError::Override {
            key: source.overridden.last().cloned().unwrap_or_default(),
            message: e.to_string(),
        })?;
    }
    if let Some(seed) = seed {
        settings.seed = seed;
        source.overridden.push("seed".into());
    }
    settings.check().map_err(|(key, message)| SettingsError::Invalid {
        location: source.locate(key),
        key: key.to_string(),
        message,
    })?;
    Ok(settings)
}

fn apply_override(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), SettingsError> {
    let Some(slot) = map.get(key) else {
        return Err(SettingsError::Override {
            key: key.into(),
            message: "unknown setting".into(),
        });
    };
    // check the single field now so the error names the right key
    let mut probe = map.clone();
    probe.insert(key.into(), value.clone());
    if let Err(e) = serde_json::from_value::<RunSettings>(Value::Object(probe)) {
        return Err(SettingsError::Override {
            key: key.into(),
            message: format!("{e} (was {slot})"),
        });
    }
    map.insert(key.into(), value);
    Ok(())
}

/// serde_json appends " at line L column C"; the location is reported separately.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}
