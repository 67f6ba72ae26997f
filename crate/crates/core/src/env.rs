//! Market-making environment.
//!
//! A Heston mid-price drives a grid of call buckets `(T_m, k_j)`. The agent
//! quotes around Black–Scholes mids taken from a deformed copy of its surface
//! estimate; fills arrive with intensities that fall in the quote's
//! mispricing against a latent true surface. The reward is expected P&L net
//! of shape, arbitrage and tail-risk penalties.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{logistic, nan_to_num};
use crate::noarb::{bf_penalty, cal_penalty, shape_penalty, NoArbError, PenaltyConfig, PriceLattice};
use crate::pricing::{bs_call, bs_greeks, BsQuoteInputs};
use crate::risk::{cvar_smoothed, draw_scenarios, CvarConfig, RiskError};
use crate::surface::{
    deform, psi_max, reparam, EssviSlice, EssviSurface, RawEssviSlice, SurfaceCaps, SurfaceError,
};

pub const N_FEATURES: usize = 15;
pub const N_ACTIONS: usize = 5;
/// Number of recent returns exposed as features.
const RETURN_LAGS: usize = 5;
/// Window of the realized-vol feature.
const RV_WINDOW: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("episode is over; call reset")]
    EpisodeDone,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    NoArb(#[from] NoArbError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub mu: f64,
    pub kappa: f64,
    pub v_bar: f64,
    pub xi: f64,
    pub rho_sv: f64,
    pub v0: f64,
}

impl Default for HestonParams {
    fn default() -> Self {
        Self {
            mu: 0.0,
            kappa: 3.0,
            v_bar: 0.04,
            xi: 0.5,
            rho_sv: -0.5,
            v0: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    /// Peak fill rate per bucket and step.
    pub lambda0: f64,
    /// Mispricing sensitivity.
    pub beta: f64,
    /// Moneyness decay of `w(k) = e^{−|k|/κ}`.
    pub kappa_k: f64,
    /// Base spread multiplier.
    pub s0: f64,
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self {
            lambda0: 0.8,
            beta: 35.0,
            kappa_k: 0.25,
            s0: 0.1,
        }
    }
}

/// Upper ends of the annealed penalty weights, plus the fixed CVaR weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCaps {
    pub lambda_shape_max: f64,
    pub lambda_arb_max: f64,
    pub lambda_cvar: f64,
}

impl Default for WeightCaps {
    fn default() -> Self {
        Self {
            lambda_shape_max: 0.5,
            lambda_arb_max: 0.05,
            lambda_cvar: 0.01,
        }
    }
}

/// Penalty weights in force for the current episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub shape: f64,
    pub arb: f64,
    pub cvar: f64,
}

impl PenaltyWeights {
    pub fn at_caps(caps: &WeightCaps) -> Self {
        Self {
            shape: caps.lambda_shape_max,
            arb: caps.lambda_arb_max,
            cvar: caps.lambda_cvar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub alpha_max: f64,
    pub psi_scale_min: f64,
    pub psi_scale_max: f64,
    pub rho_max_shift: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            alpha_max: 0.05,
            psi_scale_min: 0.5,
            psi_scale_max: 1.5,
            rho_max_shift: 0.2,
        }
    }
}

/// Tail-risk settings. The scenario price noise is `noise_scale·S·√v·√dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarSettings {
    pub tail_fraction: f64,
    pub tau_cvar: f64,
    pub n_scenarios: usize,
    pub noise_scale: f64,
}

impl Default for CvarSettings {
    fn default() -> Self {
        Self {
            tail_fraction: 0.05,
            tau_cvar: 1e-3,
            n_scenarios: 64,
            noise_scale: 0.5,
        }
    }
}

impl CvarSettings {
    pub fn to_config(&self, price_noise_std: f64) -> CvarConfig {
        CvarConfig {
            tail_fraction: self.tail_fraction,
            tau_cvar: self.tau_cvar,
            n_scenarios: self.n_scenarios,
            price_noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub spot0: f64,
    pub maturities: Vec<f64>,
    pub k_grid: Vec<f64>,
    pub steps_per_episode: usize,
    pub dt: f64,
    pub heston: HestonParams,
    pub intensity: IntensityParams,
    pub weights: WeightCaps,
    pub bounds: ActionBounds,
    pub filter_rate: f64,
    pub caps: SurfaceCaps,
    pub penalty: PenaltyConfig,
    pub cvar: CvarSettings,
}

/// `n` evenly spaced points on `[lo, hi]` with the midpoint pinned to 0 when
/// the grid is symmetric and odd.
pub fn symmetric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
        .collect();
    if n % 2 == 1 && lo == -hi {
        g[n / 2] = 0.0;
    }
    g
}

impl Default for EnvConfig {
    fn default() -> Self {
        let steps = 780;
        Self {
            spot0: 100.0,
            maturities: [7.0, 14.0, 21.0, 30.0, 60.0, 90.0].iter().map(|d| d / 252.0).collect(),
            k_grid: symmetric_grid(-0.35, 0.35, 21),
            steps_per_episode: steps,
            dt: 1.0 / (252.0 * steps as f64),
            heston: HestonParams::default(),
            intensity: IntensityParams::default(),
            weights: WeightCaps::default(),
            bounds: ActionBounds::default(),
            filter_rate: 0.1,
            caps: SurfaceCaps::default(),
            penalty: PenaltyConfig::default(),
            cvar: CvarSettings::default(),
        }
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.maturities.len() < 2 || !strictly_increasing(&self.maturities) || self.maturities[0] <= 0.0 {
            return bad("maturities must be at least two positive, strictly increasing values");
        }
        if self.k_grid.len() < 3 || !strictly_increasing(&self.k_grid) {
            return bad("k_grid must be at least three strictly increasing values");
        }
        if self.steps_per_episode == 0 {
            return bad("steps_per_episode must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.spot0 > 0.0 && self.spot0.is_finite()) {
            return bad("spot0 must be positive");
        }
        let h = &self.heston;
        if !(h.kappa >= 0.0 && h.v_bar >= 0.0 && h.xi >= 0.0 && h.v0 >= 0.0 && h.mu.is_finite()) {
            return bad("heston parameters must be finite and non-negative");
        }
        if !(h.rho_sv.abs() <= 1.0) {
            return bad("heston.rho_sv must lie in [-1, 1]");
        }
        let i = &self.intensity;
        if !(i.lambda0 >= 0.0 && i.beta >= 0.0 && i.kappa_k > 0.0 && i.s0 >= 0.0) {
            return bad("intensity parameters must be non-negative with kappa_k > 0");
        }
        let w = &self.weights;
        if !(w.lambda_shape_max >= 0.0 && w.lambda_arb_max >= 0.0 && w.lambda_cvar >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        let b = &self.bounds;
        if !(b.alpha_max > 0.0 && b.rho_max_shift >= 0.0 && b.rho_max_shift < 1.0) {
            return bad("alpha_max must be positive and rho_max_shift in [0, 1)");
        }
        if !(b.psi_scale_min >= 0.0 && b.psi_scale_max > b.psi_scale_min) {
            return bad("psi_scale range must satisfy 0 <= min < max");
        }
        if !(self.filter_rate > 0.0 && self.filter_rate <= 1.0) {
            return bad("filter_rate must lie in (0, 1]");
        }
        let c = &self.cvar;
        if !(c.tail_fraction > 0.0 && c.tail_fraction < 1.0) {
            return bad("cvar tail_fraction must lie in (0, 1)");
        }
        if !(c.tau_cvar > 0.0) || c.n_scenarios < 2 || !(c.noise_scale >= 0.0) {
            return bad("cvar needs tau_cvar > 0, n_scenarios >= 2, noise_scale >= 0");
        }
        if !(self.penalty.tau_arb > 0.0 && self.penalty.eps_norm > 0.0) {
            return bad("tau_arb and eps_norm must be positive");
        }
        Ok(())
    }

    /// Ground-truth surface held fixed over an episode.
    pub fn latent_surface(&self) -> Result<EssviSurface, EnvError> {
        let t_max = *self.maturities.last().expect("validated maturities");
        let rho = -0.4;
        let psi = 0.3 * psi_max(rho, self.caps.eps_psi);
        let slices = self
            .maturities
            .iter()
            .map(|&t| EssviSlice::new(self.heston.v0 * t * (1.0 + 0.1 * t / t_max), rho, psi, &self.caps))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EssviSurface::new(self.maturities.clone(), slices)?)
    }

    fn buckets(&self) -> usize {
        self.maturities.len() * self.k_grid.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub alpha: f64,
    pub hedge: f64,
    pub psi_scale: f64,
    pub rho_shift: f64,
    pub dual: f64,
}

impl Action {
    /// Conservative action used for warm-starting: tight spread, half hedge, no deformation.
    pub const ANCHOR: Action = Action {
        alpha: 0.01,
        hedge: 0.5,
        psi_scale: 1.0,
        rho_shift: 0.0,
        dual: 0.0,
    };

    pub fn to_array(&self) -> [f64; N_ACTIONS] {
        [self.alpha, self.hedge, self.psi_scale, self.rho_shift, self.dual]
    }

    pub fn from_array(a: [f64; N_ACTIONS]) -> Self {
        Self {
            alpha: a[0],
            hedge: a[1],
            psi_scale: a[2],
            rho_shift: a[3],
            dual: a[4],
        }
    }

    /// Clamps every entry into its range; NaN entries fall back to the anchor.
    pub fn clamped(&self, b: &ActionBounds) -> Self {
        let fix = |x: f64, anchor: f64| if x.is_nan() { anchor } else { x };
        let a = Self::ANCHOR;
        Self {
            alpha: fix(self.alpha, a.alpha).clamp(0.0, b.alpha_max),
            hedge: fix(self.hedge, a.hedge).clamp(0.0, 1.0),
            psi_scale: fix(self.psi_scale, a.psi_scale).clamp(b.psi_scale_min, b.psi_scale_max),
            rho_shift: fix(self.rho_shift, a.rho_shift).clamp(-b.rho_max_shift, b.rho_max_shift),
            dual: fix(self.dual, a.dual).max(0.0).min(f64::MAX),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub t: usize,
    pub spot: f64,
    pub var: f64,
    pub latent: EssviSurface,
    pub estimate: EssviSurface,
    pub prev_action: Action,
    /// Most recent log-returns, newest last, at most the realized-vol window.
    pub returns: VecDeque<f64>,
}

/// Initial state; deterministic given the config.
pub fn reset(cfg: &EnvConfig) -> Result<MarketState, EnvError> {
    cfg.validate()?;
    let latent = cfg.latent_surface()?;
    Ok(MarketState {
        t: 0,
        spot: cfg.spot0,
        var: cfg.heston.v0,
        estimate: latent.clone(),
        latent,
        prev_action: Action::ANCHOR,
        returns: VecDeque::with_capacity(RV_WINDOW),
    })
}

/// One Euler full-truncation step of the Heston dynamics.
pub fn heston_step<R: Rng + ?Sized>(spot: f64, var: f64, h: &HestonParams, dt: f64, rng: &mut R) -> (f64, f64) {
    let z_v: f64 = rng.sample(StandardNormal);
    let z_perp: f64 = rng.sample(StandardNormal);
    let z_s = h.rho_sv * z_v + (1.0 - h.rho_sv * h.rho_sv).sqrt() * z_perp;
    let vp = var.max(0.0);
    let sd = (vp * dt).sqrt();
    let var_next = (var + h.kappa * (h.v_bar - vp) * dt + h.xi * sd * z_v).max(0.0);
    let spot_next = spot * ((h.mu - 0.5 * vp) * dt + sd * z_s).exp();
    (spot_next, var_next)
}

/// Quotes on the `M×J` bucket grid, row-major by maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct QuoteGrid {
    pub sigma: Vec<Vec<f64>>,
    pub mid: Vec<Vec<f64>>,
    pub ask: Vec<Vec<f64>>,
    pub bid: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

/// Deformed surface used for quoting.
pub fn quoted_surface(state: &MarketState, action: &Action, cfg: &EnvConfig) -> EssviSurface {
    deform(&state.estimate, action.psi_scale, action.rho_shift, &cfg.caps)
}

fn bucket_inputs(spot: f64, maturity: f64, k: f64, vol: f64, caps: &SurfaceCaps) -> BsQuoteInputs {
    BsQuoteInputs::new(spot, spot * k.exp(), maturity, vol).clamped(caps)
}

/// Mid, ask and bid from the deformed estimate.
///
/// `half = α·S·σ̃·√T·s₀`, `ask = mid + half`, `bid = max(mid − half, 0)`.
pub fn quote_grid(state: &MarketState, action: &Action, cfg: &EnvConfig) -> QuoteGrid {
    let surface = quoted_surface(state, action, cfg);
    let (m_len, j_len) = (cfg.maturities.len(), cfg.k_grid.len());
    let mut q = QuoteGrid {
        sigma: vec![vec![0.0; j_len]; m_len],
        mid: vec![vec![0.0; j_len]; m_len],
        ask: vec![vec![0.0; j_len]; m_len],
        bid: vec![vec![0.0; j_len]; m_len],
        delta: vec![vec![0.0; j_len]; m_len],
    };
    for (m, &t) in cfg.maturities.iter().enumerate() {
        for (j, &k) in cfg.k_grid.iter().enumerate() {
            let sigma = surface.implied_vol(m, k, &cfg.caps);
            let inp = bucket_inputs(state.spot, t, k, sigma, &cfg.caps);
            let mid = bs_call(&inp);
            let half = action.alpha * state.spot * sigma * inp.maturity.sqrt() * cfg.intensity.s0;
            q.sigma[m][j] = sigma;
            q.mid[m][j] = mid;
            q.ask[m][j] = mid + half;
            q.bid[m][j] = (mid - half).max(0.0);
            q.delta[m][j] = bs_greeks(&inp).delta;
        }
    }
    q
}

/// Fair prices `C*` from the latent surface on the bucket grid.
pub fn true_prices(state: &MarketState, cfg: &EnvConfig) -> Vec<Vec<f64>> {
    cfg.maturities
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            cfg.k_grid
                .iter()
                .map(|&k| {
                    let sigma = state.latent.implied_vol(m, k, &cfg.caps);
                    bs_call(&bucket_inputs(state.spot, t, k, sigma, &cfg.caps))
                })
                .collect()
        })
        .collect()
}

/// `e^{−|k|/κ}`.
pub fn moneyness_weight(k: f64, p: &IntensityParams) -> f64 {
    (-k.abs() / p.kappa_k).exp()
}

/// `λ_buy = λ₀·w(k)·(1 − σ(β(ask − C*)))` and `λ_sell = λ₀·w(k)·(1 − σ(β(C* − bid)))`,
/// evaluated as `σ(−x)` to keep precision far from the fair price.
pub fn intensities(
    ask: &[Vec<f64>],
    bid: &[Vec<f64>],
    true_prices: &[Vec<f64>],
    k_grid: &[f64],
    p: &IntensityParams,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut buy = Vec::with_capacity(ask.len());
    let mut sell = Vec::with_capacity(ask.len());
    for ((a_row, b_row), c_row) in ask.iter().zip(bid).zip(true_prices) {
        let mut br = Vec::with_capacity(k_grid.len());
        let mut sr = Vec::with_capacity(k_grid.len());
        for (j, &k) in k_grid.iter().enumerate() {
            let base = p.lambda0 * moneyness_weight(k, p);
            br.push(base * logistic(-p.beta * (a_row[j] - c_row[j])));
            sr.push(base * logistic(-p.beta * (c_row[j] - b_row[j])));
        }
        buy.push(br);
        sell.push(sr);
    }
    (buy, sell)
}

/// Quote P&L from expected fills and the resulting net option delta.
///
/// Customers buy at the ask and sell at the bid, so the desk's option
/// position changes by `v_sell − v_buy` per bucket.
pub fn expected_pnl_and_delta(
    lam_buy: &[Vec<f64>],
    lam_sell: &[Vec<f64>],
    ask: &[Vec<f64>],
    bid: &[Vec<f64>],
    true_prices: &[Vec<f64>],
    greeks_delta: &[Vec<f64>],
) -> (f64, f64) {
    let mut pnl = 0.0;
    let mut net = 0.0;
    for m in 0..lam_buy.len() {
        for j in 0..lam_buy[m].len() {
            let (vb, vs) = (lam_buy[m][j], lam_sell[m][j]);
            pnl += vb * (ask[m][j] - true_prices[m][j]) + vs * (true_prices[m][j] - bid[m][j]);
            net += (vs - vb) * greeks_delta[m][j];
        }
    }
    (pnl, net)
}

pub fn hedge_pnl(hedge: f64, net_delta: f64, spot_move: f64) -> f64 {
    hedge * net_delta * spot_move
}

/// Moves each raw slice parameter a fraction `rate` toward the latent one.
pub fn filter_update(
    estimate: &EssviSurface,
    latent: &EssviSurface,
    rate: f64,
    caps: &SurfaceCaps,
) -> Result<EssviSurface, EnvError> {
    if rate >= 1.0 {
        return Ok(latent.clone());
    }
    let slices = estimate
        .slices()
        .iter()
        .zip(latent.slices())
        .map(|(e, l)| {
            let (re, rl) = (e.to_raw(caps), l.to_raw(caps));
            let mix = |a: f64, b: f64| a + rate * (b - a);
            reparam(
                &RawEssviSlice {
                    log_theta: mix(re.log_theta, rl.log_theta),
                    rho_raw: mix(re.rho_raw, rl.rho_raw),
                    psi_raw: mix(re.psi_raw, rl.psi_raw),
                },
                caps,
            )
        })
        .collect();
    Ok(EssviSurface::new(estimate.maturities().to_vec(), slices)?)
}

/// Evenly spaced strike lattice `[S·e^{k_min}, S·e^{k_max}]` priced from `surface`.
pub fn penalty_lattice(spot: f64, surface: &EssviSurface, cfg: &EnvConfig) -> Result<PriceLattice, EnvError> {
    let (k_lo, k_hi) = (cfg.k_grid[0], cfg.k_grid[cfg.k_grid.len() - 1]);
    let strikes = PriceLattice::even_strikes(spot * k_lo.exp(), spot * k_hi.exp(), cfg.k_grid.len());
    let mats = surface.maturities().to_vec();
    let prices = mats
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            strikes
                .iter()
                .map(|&strike| {
                    let sigma = surface.implied_vol(m, (strike / spot).ln(), &cfg.caps);
                    bs_call(&BsQuoteInputs::new(spot, strike, t, sigma).clamped(&cfg.caps))
                })
                .collect()
        })
        .collect();
    Ok(PriceLattice::new(strikes, mats, prices)?)
}

/// Arbitrage penalties of a quoted surface: the smoothed values priced into
/// the reward and the exact-hinge violations reported in logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbPenalties {
    pub bf: f64,
    pub cal: f64,
    pub bf_violation: f64,
    pub cal_violation: f64,
}

pub fn arb_penalties(spot: f64, surface: &EssviSurface, cfg: &EnvConfig) -> Result<ArbPenalties, EnvError> {
    let lat = penalty_lattice(spot, surface, cfg)?;
    let soft = PenaltyConfig {
        hard_hinge: false,
        ..cfg.penalty
    };
    let hard = PenaltyConfig {
        hard_hinge: true,
        ..cfg.penalty
    };
    Ok(ArbPenalties {
        bf: bf_penalty(&lat, &soft)?.total,
        cal: cal_penalty(&lat, &soft)?.total,
        bf_violation: bf_penalty(&lat, &hard)?.total,
        cal_violation: cal_penalty(&lat, &hard)?.total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub pnl_quote: f64,
    pub pnl_hedge: f64,
    /// Softplus butterfly penalty, as priced into the reward.
    pub bf: f64,
    /// Softplus calendar penalty, as priced into the reward.
    pub cal: f64,
    /// Exact-hinge butterfly violation.
    pub bf_violation: f64,
    /// Exact-hinge calendar violation.
    pub cal_violation: f64,
    pub shape: f64,
    pub cvar_est: f64,
    pub lambda_shape: f64,
    pub lambda_arb: f64,
    pub lambda_eff: f64,
    pub lambda_cvar: f64,
    pub reward: f64,
}

impl RewardBreakdown {
    /// `pnl_quote + pnl_hedge − λ_shape·shape − λ_eff·(bf + cal) − λ_cvar·cvar`.
    pub fn compose(&self) -> f64 {
        self.pnl_quote + self.pnl_hedge
            - self.lambda_shape * self.shape
            - self.lambda_eff * (self.bf + self.cal)
            - self.lambda_cvar * self.cvar_est
    }

    pub fn pnl_raw(&self) -> f64 {
        self.pnl_quote + self.pnl_hedge
    }
}

/// Fixed-length state featurization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Normalized recent returns, realized vol, time, surface summaries and the previous action.
pub fn features(state: &MarketState, cfg: &EnvConfig) -> FeatureVector {
    let mut f = [0.0; N_FEATURES];
    let ret_scale = (cfg.heston.v_bar.max(1e-12) * cfg.dt).sqrt();
    for (i, r) in state.returns.iter().rev().take(RETURN_LAGS).enumerate() {
        f[i] = r / ret_scale;
    }
    f[5] = if state.returns.is_empty() {
        state.var.max(0.0).sqrt()
    } else {
        let ss: f64 = state.returns.iter().map(|r| r * r).sum();
        (ss / (state.returns.len() as f64 * cfg.dt)).sqrt()
    };
    f[6] = state.t as f64 / cfg.steps_per_episode as f64;
    let n = state.estimate.len() as f64;
    let s = state.estimate.slices();
    f[7] = s.iter().map(|x| x.theta()).sum::<f64>() / n;
    f[8] = s.iter().map(|x| x.rho()).sum::<f64>() / n;
    f[9] = s.iter().map(|x| x.psi()).sum::<f64>() / n;
    f[10..15].copy_from_slice(&state.prev_action.to_array());
    FeatureVector(f.map(nan_to_num))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub features: FeatureVector,
    pub done: bool,
    /// Spot after the step.
    pub spot: f64,
}

/// One environment transition. The action is re-clamped into range first.
pub fn step<R: Rng + ?Sized>(
    state: &mut MarketState,
    action: &Action,
    weights: &PenaltyWeights,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<StepOutcome, EnvError> {
    if state.t >= cfg.steps_per_episode {
        return Err(EnvError::EpisodeDone);
    }
    let action = action.clamped(&cfg.bounds);
    let quotes = quote_grid(state, &action, cfg);
    let c_star = true_prices(state, cfg);
    let (lam_buy, lam_sell) = intensities(&quotes.ask, &quotes.bid, &c_star, &cfg.k_grid, &cfg.intensity);
    let (pnl_quote, net_delta) =
        expected_pnl_and_delta(&lam_buy, &lam_sell, &quotes.ask, &quotes.bid, &c_star, &quotes.delta);

    let spot = state.spot;
    let (spot_next, var_next) = heston_step(spot, state.var, &cfg.heston, cfg.dt, rng);
    let delta_s = spot_next - spot;
    let pnl_hedge = hedge_pnl(action.hedge, net_delta, delta_s);

    let quoted = quoted_surface(state, &action, cfg);
    let arb = arb_penalties(spot, &quoted, cfg)?;
    let shape = shape_penalty(&quoted)?;

    let mut fills = Vec::with_capacity(2 * cfg.buckets());
    let mut edges = Vec::with_capacity(2 * cfg.buckets());
    for m in 0..cfg.maturities.len() {
        for j in 0..cfg.k_grid.len() {
            fills.push(lam_buy[m][j]);
            edges.push(quotes.ask[m][j] - c_star[m][j]);
            fills.push(lam_sell[m][j]);
            edges.push(c_star[m][j] - quotes.bid[m][j]);
        }
    }
    let noise_std = cfg.cvar.noise_scale * spot * state.var.max(0.0).sqrt() * cfg.dt.sqrt();
    let cvar_cfg = cfg.cvar.to_config(noise_std);
    let draws = draw_scenarios(&fills, &edges, delta_s, &cvar_cfg, rng);
    let cvar_est = cvar_smoothed(&draws.batch(action.hedge * net_delta), &cvar_cfg)?;

    let mut breakdown = RewardBreakdown {
        pnl_quote,
        pnl_hedge,
        bf: arb.bf,
        cal: arb.cal,
        bf_violation: arb.bf_violation,
        cal_violation: arb.cal_violation,
        shape,
        cvar_est,
        lambda_shape: weights.shape,
        lambda_arb: weights.arb,
        lambda_eff: weights.arb + action.dual,
        lambda_cvar: weights.cvar,
        reward: 0.0,
    };
    breakdown.reward = breakdown.compose();

    state.estimate = filter_update(&state.estimate, &state.latent, cfg.filter_rate, &cfg.caps)?;
    if state.returns.len() == RV_WINDOW {
        state.returns.pop_front();
    }
    state.returns.push_back((spot_next / spot).ln());
    state.spot = spot_next;
    state.var = var_next;
    state.prev_action = action;
    state.t += 1;

    Ok(StepOutcome {
        reward: breakdown.reward,
        breakdown,
        features: features(state, cfg),
        done: state.t >= cfg.steps_per_episode,
        spot: spot_next,
    })
}

/// Environment instance owning its config, state and random stream.
#[derive(Debug, Clone)]
pub struct MarketEnv {
    cfg: EnvConfig,
    state: MarketState,
    weights: PenaltyWeights,
    rng: ChaCha8Rng,
}

impl MarketEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        let state = reset(&cfg)?;
        Ok(Self {
            weights: PenaltyWeights::at_caps(&cfg.weights),
            cfg,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Restores the initial state. The random stream continues.
    pub fn reset(&mut self) -> FeatureVector {
        self.state = reset(&self.cfg).expect("config validated at construction");
        self.features()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &MarketState {
        &self.state
    }

    pub fn weights(&self) -> PenaltyWeights {
        self.weights
    }

    pub fn set_weights(&mut self, weights: PenaltyWeights) {
        self.weights = weights;
    }

    pub fn features(&self) -> FeatureVector {
        features(&self.state, &self.cfg)
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        step(&mut self.state, action, &self.weights, &self.cfg, &mut self.rng)
    }

    /// Arbitrage penalties the given action would produce in the current state.
    pub fn evaluate_arb(&self, action: &Action) -> Result<ArbPenalties, EnvError> {
        let a = action.clamped(&self.cfg.bounds);
        arb_penalties(self.state.spot, &quoted_surface(&self.state, &a, &self.cfg), &self.cfg)
    }
}
