//! Executable checks of the closed-form sensitivities and the convergence
//! properties of the penalties, the wing cap and the CVaR estimator.
//!
//! Every check returns a report with the raw numbers and a pass flag; none of
//! them panic on a failed property.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::env::{
    intensities, moneyness_weight, quote_grid, quoted_surface, true_prices, Action, EnvConfig, EnvError,
    MarketState, QuoteGrid,
};
use crate::math::logistic;
use crate::noarb::{bf_penalty, cal_penalty, PenaltyConfig, PriceLattice};
use crate::pricing::{bs_call, bs_greeks, BsGreeks, BsQuoteInputs};
use crate::risk::{cvar_smoothed_with_eta, draw_scenarios, CvarConfig, ScenarioDraws};
use crate::surface::{
    action_partials, reparam, total_variance, ActionPartials, EssviSlice, EssviSurface,
    RawEssviSlice, SurfaceCaps, SurfaceError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid diagnostic input: {0}")]
    InvalidInput(String),
}

/// Relative FD step for action channels.
pub const FD_REL_STEP: f64 = 1e-5;
/// Relative tolerance for quote and intensity sensitivities.
pub const QUOTE_TOL: f64 = 1e-4;
/// Relative tolerance for Greek chains.
pub const GREEK_TOL: f64 = 1e-3;
/// Bound on the FD value of a sensitivity that is structurally zero.
pub const ZERO_TOL: f64 = 1e-8;

/// Action used by the sensitivity diagnostics: interior in every coordinate.
pub const PROBE_ACTION: Action = Action {
    alpha: 0.01,
    hedge: 0.5,
    psi_scale: 1.1,
    rho_shift: 0.05,
    dual: 0.1,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensRow {
    pub maturity: f64,
    pub k: f64,
    pub quantity: &'static str,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensRow>,
    pub pass: bool,
}

impl SensitivityReport {
    pub fn failures(&self) -> impl Iterator<Item = &SensRow> {
        self.rows.iter().filter(|r| !r.ok)
    }

    fn from_rows(rows: Vec<SensRow>) -> Self {
        let pass = rows.iter().all(|r| r.ok);
        Self { rows, pass }
    }
}

/// Central difference with its rounding-noise allowance `4ε·max(|f|, m)/(2h)`.
///
/// `magnitude` is the size of the terms that cancel inside `f`; a call price
/// is a difference of terms of the order of the spot.
fn central(f: impl Fn(f64) -> f64, x: f64, magnitude: f64) -> (f64, f64) {
    let h = FD_REL_STEP * x.abs().max(1.0);
    let (up, dn) = (f(x + h), f(x - h));
    let noise = 4.0 * f64::EPSILON * up.abs().max(dn.abs()).max(magnitude) / (2.0 * h);
    ((up - dn) / (2.0 * h), noise)
}

fn compare(maturity: f64, k: f64, quantity: &'static str, analytic: f64, fd: (f64, f64), tol: f64) -> SensRow {
    let (fd, noise) = fd;
    let scale = analytic.abs().max(fd.abs());
    let rel_err = if scale > 0.0 { (analytic - fd).abs() / scale } else { 0.0 };
    // exact zeros are structural claims; anything else is compared relatively
    let ok = if analytic == 0.0 {
        fd.abs() <= ZERO_TOL.max(noise)
    } else {
        (analytic - fd).abs() <= tol * scale + noise
    };
    SensRow {
        maturity,
        k,
        quantity,
        analytic,
        fd,
        rel_err,
        ok,
    }
}

fn with_alpha(a: &Action, alpha: f64) -> Action {
    Action { alpha, ..*a }
}

fn with_psi(a: &Action, psi_scale: f64) -> Action {
    Action { psi_scale, ..*a }
}

fn with_rho(a: &Action, rho_shift: f64) -> Action {
    Action { rho_shift, ..*a }
}

fn check_interior(action: &Action, cfg: &EnvConfig) -> Result<(), DiagError> {
    let b = &cfg.bounds;
    let h = |x: f64| FD_REL_STEP * x.abs().max(1.0);
    let inside = |x: f64, lo: f64, hi: f64| x - h(x) > lo && x + h(x) < hi;
    if inside(action.alpha, 0.0, b.alpha_max)
        && inside(action.psi_scale, b.psi_scale_min, b.psi_scale_max)
        && inside(action.rho_shift, -b.rho_max_shift, b.rho_max_shift)
    {
        Ok(())
    } else {
        Err(DiagError::InvalidInput(format!("action {action:?} is not interior")))
    }
}

/// Per-bucket action partials of the deformed total variance.
fn bucket_partials(state: &MarketState, action: &Action, cfg: &EnvConfig) -> Result<Vec<Vec<ActionPartials>>, DiagError> {
    let mut out = Vec::with_capacity(cfg.maturities.len());
    for slice in state.estimate.slices() {
        let row = cfg
            .k_grid
            .iter()
            .map(|&k| action_partials(slice, action.psi_scale, action.rho_shift, k, &cfg.caps))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(row);
    }
    Ok(out)
}

fn bucket_greeks(state: &MarketState, action: &Action, cfg: &EnvConfig) -> Vec<Vec<BsGreeks>> {
    let surface = quoted_surface(state, action, cfg);
    cfg.maturities
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            cfg.k_grid
                .iter()
                .map(|&k| {
                    let sigma = surface.implied_vol(m, k, &cfg.caps);
                    bs_greeks(&BsQuoteInputs::new(state.spot, state.spot * k.exp(), t, sigma).clamped(&cfg.caps))
                })
                .collect()
        })
        .collect()
}

/// Quote, intensity and Greek sensitivities to the action, analytic against
/// central finite differences of the full quoting pipeline.
pub fn quote_sensitivities(state: &MarketState, action: &Action, cfg: &EnvConfig) -> Result<SensitivityReport, DiagError> {
    check_interior(action, cfg)?;
    let partials = bucket_partials(state, action, cfg)?;
    let base = quote_grid(state, action, cfg);
    let greeks = bucket_greeks(state, action, cfg);
    let c_star = true_prices(state, cfg);
    let p = &cfg.intensity;

    let q_alpha = |f: &dyn Fn(&QuoteGrid) -> f64| central(|x| f(&quote_grid(state, &with_alpha(action, x), cfg)), action.alpha, state.spot);
    let lam_alpha = |m: usize, j: usize, sell: bool| {
        central(
            |x| {
                let q = quote_grid(state, &with_alpha(action, x), cfg);
                let (b, s) = intensities(&q.ask, &q.bid, &c_star, &cfg.k_grid, p);
                if sell {
                    s[m][j]
                } else {
                    b[m][j]
                }
            },
            action.alpha,
            0.0,
        )
    };

    let mut rows = Vec::new();
    for (m, &t) in cfg.maturities.iter().enumerate() {
        for (j, &k) in cfg.k_grid.iter().enumerate() {
            let sigma = base.sigma[m][j];
            let inp = BsQuoteInputs::new(state.spot, state.spot * k.exp(), t, sigma).clamped(&cfg.caps);
            let rate = state.spot * sigma * inp.maturity.sqrt() * p.s0;
            let half = action.alpha * rate;
            let h = FD_REL_STEP * action.alpha.abs().max(1.0);
            let floored = |x: f64| base.mid[m][j] - x * rate <= 0.0;
            if floored(action.alpha - h) != floored(action.alpha + h) {
                return Err(DiagError::Surface(SurfaceError::ClampActive("bid floor")));
            }
            let bid_rate = if floored(action.alpha) { 0.0 } else { -rate };
            let bid_live = base.mid[m][j] - half > 0.0;

            rows.push(compare(t, k, "d_mid/d_alpha", 0.0, q_alpha(&|q| q.mid[m][j]), QUOTE_TOL));
            rows.push(compare(t, k, "d_ask/d_alpha", rate, q_alpha(&|q| q.ask[m][j]), QUOTE_TOL));
            rows.push(compare(t, k, "d_bid/d_alpha", bid_rate, q_alpha(&|q| q.bid[m][j]), QUOTE_TOL));

            let base_w = p.lambda0 * moneyness_weight(k, p);
            // σ' evaluated at the small branch to avoid 1 − σ cancellation
            let sb = logistic(-p.beta * (base.ask[m][j] - c_star[m][j]));
            let ss = logistic(-p.beta * (c_star[m][j] - base.bid[m][j]));
            let d_buy = -base_w * p.beta * sb * (1.0 - sb) * rate;
            let d_sell = if bid_live {
                -base_w * p.beta * ss * (1.0 - ss) * rate
            } else {
                0.0
            };
            rows.push(compare(t, k, "d_lambda_buy/d_alpha", d_buy, lam_alpha(m, j, false), QUOTE_TOL));
            rows.push(compare(t, k, "d_lambda_sell/d_alpha", d_sell, lam_alpha(m, j, true), QUOTE_TOL));

            // dσ̃/dp = ∂w̃/∂p / (2σ̃T)
            let dsig = |dw: f64| dw / (2.0 * sigma * inp.maturity);
            let g = &greeks[m][j];
            let pa = &partials[m][j];
            let channels: [(&str, &str, &str, f64, Box<dyn Fn(f64) -> Action>, f64); 2] = [
                (
                    "d_mid/d_psiscale",
                    "d_delta/d_psiscale",
                    "d_vega/d_psiscale",
                    pa.dw_dpsi_scale,
                    Box::new(|x| with_psi(action, x)),
                    action.psi_scale,
                ),
                (
                    "d_mid/d_rhoshift",
                    "d_delta/d_rhoshift",
                    "d_vega/d_rhoshift",
                    pa.dw_drho_shift,
                    Box::new(|x| with_rho(action, x)),
                    action.rho_shift,
                ),
            ];
            for (n_mid, n_delta, n_vega, dw, perturb, x0) in channels {
                let ds = dsig(dw);
                let fd_mid = central(|x| quote_grid(state, &perturb(x), cfg).mid[m][j], x0, state.spot);
                let fd_delta = central(|x| bucket_greeks(state, &perturb(x), cfg)[m][j].delta, x0, 0.0);
                let fd_vega = central(|x| bucket_greeks(state, &perturb(x), cfg)[m][j].vega, x0, 0.0);
                rows.push(compare(t, k, n_mid, g.vega * ds, fd_mid, QUOTE_TOL));
                rows.push(compare(t, k, n_delta, g.vanna * ds, fd_delta, GREEK_TOL));
                rows.push(compare(t, k, n_vega, g.volga * ds, fd_vega, GREEK_TOL));
            }
        }
    }
    Ok(SensitivityReport::from_rows(rows))
}

/// The Delta and Vega rows of [`quote_sensitivities`].
pub fn greek_sensitivity_check(state: &MarketState, action: &Action, cfg: &EnvConfig) -> Result<SensitivityReport, DiagError> {
    let full = quote_sensitivities(state, action, cfg)?;
    Ok(SensitivityReport::from_rows(
        full.rows
            .into_iter()
            .filter(|r| r.quantity.starts_with("d_delta") || r.quantity.starts_with("d_vega"))
            .collect(),
    ))
}

/// Largest ATM mid/Greek sensitivity to the shape controls, analytic and FD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtmInvariance {
    pub max_analytic: f64,
    pub max_fd: f64,
    pub pass: bool,
}

/// Checks first-order invariance of the `k = 0` column. Requires `k = 0` on the grid.
pub fn atm_invariance(report: &SensitivityReport, spot: f64) -> Option<AtmInvariance> {
    let atm: Vec<&SensRow> = report
        .rows
        .iter()
        .filter(|r| r.k == 0.0 && (r.quantity.ends_with("psiscale") || r.quantity.ends_with("rhoshift")))
        .collect();
    if atm.is_empty() {
        return None;
    }
    let max_analytic = atm.iter().map(|r| r.analytic.abs()).fold(0.0, f64::max);
    let max_fd = atm.iter().map(|r| r.fd.abs()).fold(0.0, f64::max);
    Some(AtmInvariance {
        max_analytic,
        max_fd,
        pass: max_analytic < ZERO_TOL && max_fd < 1e-6 * spot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityRow {
    pub maturity: f64,
    pub k: f64,
    pub alpha: f64,
    pub lambda_buy: f64,
    pub lambda_sell: f64,
    pub bid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub rows: Vec<MonotonicityRow>,
    /// Bucket/step pairs where an intensity failed to fall strictly.
    pub violations: usize,
    pub pass: bool,
}

/// Strict decrease of both intensities along increasing half-spreads.
///
/// The sell side is only asserted where the bid stays above its zero floor.
pub fn intensity_monotonicity_check(
    state: &MarketState,
    action: &Action,
    cfg: &EnvConfig,
    alphas: &[f64],
) -> Result<MonotonicityReport, DiagError> {
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagError::InvalidInput("alphas must be strictly increasing".into()));
    }
    let c_star = true_prices(state, cfg);
    let mut rows = Vec::new();
    let mut grids = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let q = quote_grid(state, &with_alpha(action, alpha), cfg);
        let (b, s) = intensities(&q.ask, &q.bid, &c_star, &cfg.k_grid, &cfg.intensity);
        for (m, &t) in cfg.maturities.iter().enumerate() {
            for (j, &k) in cfg.k_grid.iter().enumerate() {
                rows.push(MonotonicityRow {
                    maturity: t,
                    k,
                    alpha,
                    lambda_buy: b[m][j],
                    lambda_sell: s[m][j],
                    bid: q.bid[m][j],
                });
            }
        }
        grids.push((b, s, q.bid));
    }
    let mut violations = 0;
    for w in grids.windows(2) {
        let ((b1, s1, _), (b2, s2, bid2)) = (&w[0], &w[1]);
        for m in 0..b1.len() {
            for j in 0..b1[m].len() {
                if b2[m][j] >= b1[m][j] {
                    violations += 1;
                }
                if bid2[m][j] > 0.0 && s2[m][j] >= s1[m][j] {
                    violations += 1;
                }
            }
        }
    }
    Ok(MonotonicityReport {
        rows,
        violations,
        pass: violations == 0,
    })
}

/// A random state with a perturbed estimate and an interior action.
pub fn random_interior_state<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<(MarketState, Action), DiagError> {
    let mut state = crate::env::reset(cfg)?;
    state.spot = cfg.spot0 * rng.random_range(0.85..1.15);
    state.var = rng.random_range(0.01..0.09);
    let rho = rng.random_range(-0.6..0.2);
    let psi_frac = rng.random_range(0.15..0.5);
    let slices = state
        .latent
        .slices()
        .iter()
        .map(|s| {
            let psi = psi_frac * crate::surface::psi_max(rho, cfg.caps.eps_psi);
            EssviSlice::new(s.theta() * rng.random_range(0.9..1.1), rho, psi, &cfg.caps)
        })
        .collect::<Result<Vec<_>, _>>()?;
    state.estimate = EssviSurface::new(cfg.maturities.clone(), slices)?;
    let b = &cfg.bounds;
    let action = Action {
        alpha: b.alpha_max * rng.random_range(0.05..0.9),
        hedge: rng.random_range(0.0..1.0),
        psi_scale: b.psi_scale_min + (b.psi_scale_max - b.psi_scale_min) * rng.random_range(0.2..0.8),
        rho_shift: b.rho_max_shift * rng.random_range(-0.8..0.8),
        dual: rng.random_range(0.0..1.0),
    };
    Ok((state, action))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignJacobianReport {
    pub states: usize,
    /// Draws discarded because a clamp switched inside the FD stencil.
    pub redrawn: usize,
    pub violations: usize,
    pub pass: bool,
}

/// Signs of the spread Jacobian on random interior states: `∂ask/∂α > 0`,
/// `∂bid/∂α < 0` above the floor, both intensities falling in α, and no
/// direct effect of the dual on quotes.
///
/// Draws where a clamp switches inside the FD stencil are not interior and
/// are replaced.
pub fn sign_jacobian_check<R: Rng + ?Sized>(cfg: &EnvConfig, n_states: usize, rng: &mut R) -> Result<SignJacobianReport, DiagError> {
    let mut violations = 0;
    let mut redrawn = 0;
    let mut done = 0;
    while done < n_states {
        if redrawn > 20 * n_states.max(1) {
            return Err(DiagError::InvalidInput("too few interior states".into()));
        }
        let (state, action) = random_interior_state(cfg, rng)?;
        let rep = match quote_sensitivities(&state, &action, cfg) {
            Ok(r) => r,
            Err(DiagError::Surface(SurfaceError::ClampActive(_))) => {
                redrawn += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        done += 1;
        for r in &rep.rows {
            let bad = match r.quantity {
                "d_ask/d_alpha" => r.analytic <= 0.0 || r.fd <= 0.0,
                "d_bid/d_alpha" => r.analytic > 0.0 || r.fd > 0.0,
                "d_lambda_buy/d_alpha" => r.analytic >= 0.0 || r.fd >= 0.0,
                "d_lambda_sell/d_alpha" => r.analytic > 0.0 || r.fd > 0.0,
                _ => false,
            };
            violations += usize::from(bad);
        }
        let q0 = quote_grid(&state, &action, cfg);
        let q1 = quote_grid(
            &state,
            &Action {
                dual: action.dual + 1.0,
                ..action
            },
            cfg,
        );
        if q0 != q1 {
            violations += 1;
        }
    }
    Ok(SignJacobianReport {
        states: n_states,
        redrawn,
        violations,
        pass: violations == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryReport {
    /// Largest `|∂w/∂ψ-scale(k) − ∂w/∂ψ-scale(−k)|`.
    pub psi_even_err: f64,
    /// Largest `|∂w/∂ρ-shift(k) + ∂w/∂ρ-shift(−k)|`.
    pub rho_odd_err: f64,
    pub pass: bool,
}

/// On a `ρ = 0` slice the ψ-scale sensitivity is even in `k` and the ρ-shift
/// sensitivity is odd.
pub fn zero_skew_symmetry(theta: f64, psi: f64, ks: &[f64], caps: &SurfaceCaps) -> Result<SymmetryReport, DiagError> {
    let slice = EssviSlice::new(theta, 0.0, psi, caps)?;
    let (mut even, mut odd) = (0.0f64, 0.0f64);
    for &k in ks {
        let p = action_partials(&slice, 1.0, 0.0, k, caps)?;
        let n = action_partials(&slice, 1.0, 0.0, -k, caps)?;
        even = even.max((p.dw_dpsi_scale - n.dw_dpsi_scale).abs());
        odd = odd.max((p.dw_drho_shift + n.dw_drho_shift).abs());
    }
    Ok(SymmetryReport {
        psi_even_err: even,
        rho_odd_err: odd,
        pass: even <= 1e-10 && odd <= 1e-10,
    })
}

/// Flat-vol lattice family for the grid-consistency experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub spot: f64,
    pub vol: f64,
    pub strike_lo: f64,
    pub strike_hi: f64,
    /// Strike steps, coarse to fine.
    pub strike_steps: Vec<f64>,
    /// Maturities of the butterfly lattices.
    pub bf_maturities: Vec<f64>,
    /// Size of the single-strike dent, as a fraction of the row level.
    pub dent_fraction: f64,
    pub cal_t_lo: f64,
    pub cal_t_hi: f64,
    /// Maturity steps, coarse to fine.
    pub maturity_steps: Vec<f64>,
    /// Maturity whose row is swapped with the next one in the calendar test.
    pub swap_maturity: f64,
    /// Calendar strike step.
    pub cal_strike_step: f64,
    pub tau_arb: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            spot: 100.0,
            vol: 0.2,
            strike_lo: 70.0,
            strike_hi: 130.0,
            strike_steps: vec![1.0, 0.5, 0.25],
            bf_maturities: vec![0.25, 0.5, 1.0],
            dent_fraction: 0.01,
            cal_t_lo: 0.25,
            cal_t_hi: 1.0,
            maturity_steps: vec![0.25, 0.125, 0.0625],
            swap_maturity: 0.5,
            cal_strike_step: 1.0,
            tau_arb: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BfLevel {
    pub strike_step: f64,
    pub bf_clean: f64,
    pub floor: f64,
    pub bf_dent: f64,
    pub dent_detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalLevel {
    pub maturity_step: f64,
    pub cal_clean_hard: f64,
    pub cal_clean_soft: f64,
    pub soft_bound: f64,
    /// Hard-hinge CAL of the swapped pair alone.
    pub cal_swap_pair: f64,
    /// `cal_swap_pair / ΔT`.
    pub swap_per_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridReport {
    pub bf: Vec<BfLevel>,
    /// `bf(ΔK)/bf(ΔK/2)` on clean lattices; `None` where both sit at the floor.
    pub bf_ratios: Vec<Option<f64>>,
    pub cal: Vec<CalLevel>,
    /// Lower constant `c` with `cal_swap_pair ≥ c·ΔT` at every level.
    pub cal_rate_constant: f64,
    pub bf_rate_ok: bool,
    pub bf_detect_ok: bool,
    pub cal_clean_ok: bool,
    pub cal_rate_ok: bool,
    pub pass: bool,
}

fn flat_price(spot: f64, vol: f64) -> impl Fn(f64, f64) -> f64 {
    move |t, k| bs_call(&BsQuoteInputs::new(spot, k, t, vol))
}

fn n_points(lo: f64, hi: f64, step: f64) -> usize {
    ((hi - lo) / step).round() as usize + 1
}

/// Butterfly and calendar surrogates on clean and violated flat-vol lattices
/// under successive refinement.
pub fn grid_consistency_experiment(spec: &GridSpec) -> Result<GridReport, DiagError> {
    if spec.strike_steps.len() < 3 || spec.maturity_steps.len() < 3 {
        return Err(DiagError::InvalidInput("need at least three refinement levels".into()));
    }
    let hard = PenaltyConfig::hard();
    let soft = PenaltyConfig {
        tau_arb: spec.tau_arb,
        ..PenaltyConfig::default()
    };
    let price = flat_price(spec.spot, spec.vol);
    let lattice_err = |e: crate::noarb::NoArbError| DiagError::Env(EnvError::NoArb(e));

    let mut bf = Vec::new();
    for &dk in &spec.strike_steps {
        let strikes = PriceLattice::even_strikes(spec.strike_lo, spec.strike_hi, n_points(spec.strike_lo, spec.strike_hi, dk));
        let clean = PriceLattice::from_fn(strikes.clone(), spec.bf_maturities.clone(), &price).map_err(lattice_err)?;
        let floor = clean.bf_floor(hard.eps_norm);
        let bf_clean = bf_penalty(&clean, &hard).map_err(lattice_err)?.total;
        let mut dented = clean.clone();
        let atm = strikes
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - spec.spot).abs().total_cmp(&(b.1 - spec.spot).abs()))
            .map(|(j, _)| j)
            .expect("non-empty strikes");
        for m in 0..spec.bf_maturities.len() {
            let level = clean.level(m, hard.eps_norm);
            dented.prices_mut()[m][atm] += spec.dent_fraction * level;
        }
        let bf_dent = bf_penalty(&dented, &hard).map_err(lattice_err)?.total;
        bf.push(BfLevel {
            strike_step: dk,
            bf_clean,
            floor,
            bf_dent,
            dent_detected: bf_dent > 10.0 * floor,
        });
    }
    let bf_ratios: Vec<Option<f64>> = bf
        .windows(2)
        .map(|w| {
            let at_floor = |l: &BfLevel| l.bf_clean <= 10.0 * l.floor;
            if at_floor(&w[0]) && at_floor(&w[1]) {
                None
            } else {
                Some(w[0].bf_clean / w[1].bf_clean)
            }
        })
        .collect();
    let bf_rate_ok = bf_ratios.iter().all(|r| r.is_none_or(|x| (2.5..=6.0).contains(&x)));
    let bf_detect_ok = bf.iter().all(|l| l.dent_detected);

    let mut cal = Vec::new();
    let strikes = PriceLattice::even_strikes(
        spec.strike_lo,
        spec.strike_hi,
        n_points(spec.strike_lo, spec.strike_hi, spec.cal_strike_step),
    );
    for &dt in &spec.maturity_steps {
        let n_t = n_points(spec.cal_t_lo, spec.cal_t_hi, dt);
        let mats: Vec<f64> = (0..n_t).map(|i| spec.cal_t_lo + dt * i as f64).collect();
        let clean = PriceLattice::from_fn(strikes.clone(), mats.clone(), &price).map_err(lattice_err)?;
        let cal_clean_hard = cal_penalty(&clean, &hard).map_err(lattice_err)?.total;
        let soft_pen = cal_penalty(&clean, &soft).map_err(lattice_err)?;
        let min_level = (0..n_t - 1)
            .map(|m| {
                let rows = &clean.prices()[m..m + 2];
                rows.iter().flatten().map(|c| c.abs()).sum::<f64>() / (2 * strikes.len()) as f64 + soft.eps_norm
            })
            .fold(f64::INFINITY, f64::min);
        let swap = mats
            .iter()
            .position(|t| (t - spec.swap_maturity).abs() < 1e-9)
            .filter(|&i| i + 1 < n_t)
            .ok_or_else(|| DiagError::InvalidInput("swap maturity not on every grid".into()))?;
        let mut swapped = clean.clone();
        swapped.prices_mut().swap(swap, swap + 1);
        let pair = cal_penalty(&swapped, &hard).map_err(lattice_err)?.parts[swap];
        cal.push(CalLevel {
            maturity_step: dt,
            cal_clean_hard,
            cal_clean_soft: soft_pen.total,
            soft_bound: soft.tau_arb * std::f64::consts::LN_2 / min_level,
            cal_swap_pair: pair,
            swap_per_dt: pair / dt,
        });
    }
    let cal_clean_ok = cal
        .iter()
        .all(|l| l.cal_clean_hard == 0.0 && l.cal_clean_soft <= l.soft_bound);
    // half the coarsest per-ΔT slope must bound every refinement from below
    let cal_rate_constant = 0.5 * cal[0].swap_per_dt;
    let cal_rate_ok = cal_rate_constant > 0.0 && cal.iter().all(|l| l.swap_per_dt >= cal_rate_constant);
    Ok(GridReport {
        pass: bf_rate_ok && bf_detect_ok && cal_clean_ok && cal_rate_ok,
        bf,
        bf_ratios,
        cal,
        cal_rate_constant,
        bf_rate_ok,
        bf_detect_ok,
        cal_clean_ok,
        cal_rate_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WingReport {
    pub samples: usize,
    pub k_eval: f64,
    pub max_slope: f64,
    pub bound: f64,
    /// Slope stays under Lee's barrier of 2.
    pub lee_ok: bool,
    pub pass: bool,
}

/// Largest `w(±k_eval)/k_eval` over random capped slices with `θ ≤ 2`.
///
/// Half the samples push ψ toward its upper bound so that the wing cap binds.
pub fn wing_bound_sweep<R: Rng + ?Sized>(n_samples: usize, k_eval: f64, caps: &SurfaceCaps, rng: &mut R) -> WingReport {
    let mut max_slope = 0.0f64;
    for i in 0..n_samples {
        let raw = RawEssviSlice {
            log_theta: rng.random_range(-9.0..2f64.ln()),
            rho_raw: rng.random_range(-4.0..4.0),
            psi_raw: if i % 2 == 0 {
                rng.random_range(-6.0..6.0)
            } else {
                rng.random_range(4.0..40.0)
            },
        };
        let s = reparam(&raw, caps);
        let slope = total_variance(&s, k_eval).max(total_variance(&s, -k_eval)) / k_eval;
        max_slope = max_slope.max(slope);
    }
    let bound = caps.tau_max + 0.05;
    WingReport {
        samples: n_samples,
        k_eval,
        max_slope,
        bound,
        lee_ok: max_slope < 2.0,
        pass: max_slope <= bound && max_slope < 2.0,
    }
}

/// Synthetic scenario setup for the CVaR hedge-gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvarGradSpec {
    pub fills_mean: Vec<f64>,
    pub edges: Vec<f64>,
    pub net_delta: f64,
    pub hedge: f64,
    pub delta_s: f64,
    pub noise_std: f64,
    pub n_scenarios: usize,
    pub tail_fraction: f64,
    pub tau_cvar: f64,
    /// Independent repetitions for the variance comparison.
    pub repetitions: usize,
    pub fd_step: f64,
}

impl Default for CvarGradSpec {
    fn default() -> Self {
        Self {
            fills_mean: (0..12).map(|i| 0.1 + 0.05 * i as f64).collect(),
            edges: (0..12).map(|i| if i % 2 == 0 { 0.02 } else { 0.01 }).collect(),
            net_delta: 4.0,
            hedge: 0.5,
            delta_s: 0.02,
            noise_std: 0.05,
            n_scenarios: 10_000,
            tail_fraction: 0.05,
            tau_cvar: 1e-3,
            repetitions: 12,
            fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvarGradReport {
    /// Danskin pathwise gradient in the hedge ratio.
    pub pathwise: f64,
    /// Common-random-numbers central difference.
    pub fd_crn: f64,
    pub rel_err: f64,
    pub var_crn: f64,
    pub var_independent: f64,
    /// Pathwise gradient with `ς = 0` and `ΔS = 0`.
    pub inert_gradient: f64,
    /// Pathwise gradients at `τ = 1e-2` and `τ = 1e-3`.
    pub tau_coarse: f64,
    pub tau_fine: f64,
    pub pass: bool,
}

fn cvar_cfg(spec: &CvarGradSpec, tau: f64, noise_std: f64) -> CvarConfig {
    CvarConfig {
        tail_fraction: spec.tail_fraction,
        tau_cvar: tau,
        n_scenarios: spec.n_scenarios,
        price_noise_std: noise_std,
    }
}

fn cvar_at(draws: &ScenarioDraws, spec: &CvarGradSpec, hedge: f64, cfg: &CvarConfig) -> Result<(f64, f64), DiagError> {
    cvar_smoothed_with_eta(&draws.batch(hedge * spec.net_delta), cfg).map_err(|e| DiagError::Env(EnvError::Risk(e)))
}

/// `(1/(αN))·Σ σ((L_i − η*)/τ)·∂L_i/∂h` with `∂L_i/∂h = −Δnet·ΔS̃_i`.
fn pathwise(draws: &ScenarioDraws, spec: &CvarGradSpec, cfg: &CvarConfig) -> Result<f64, DiagError> {
    let (_, eta) = cvar_at(draws, spec, spec.hedge, cfg)?;
    let batch = draws.batch(spec.hedge * spec.net_delta);
    let n = batch.len() as f64;
    let g: f64 = batch
        .losses()
        .zip(&draws.price_move)
        .map(|(l, ds)| logistic((l - eta) / cfg.tau_cvar) * (-spec.net_delta * ds))
        .sum();
    Ok(g / (cfg.tail_fraction * n))
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Pathwise hedge gradient of the smoothed CVaR against finite differences.
pub fn cvar_gradient_check<R: Rng + ?Sized>(spec: &CvarGradSpec, rng: &mut R) -> Result<CvarGradReport, DiagError> {
    if spec.noise_std <= 0.0 || spec.repetitions < 2 {
        return Err(DiagError::InvalidInput("need noise_std > 0 and at least two repetitions".into()));
    }
    let cfg = cvar_cfg(spec, spec.tau_cvar, spec.noise_std);
    let h = spec.fd_step;
    let draws = draw_scenarios(&spec.fills_mean, &spec.edges, spec.delta_s, &cfg, rng);
    let path = pathwise(&draws, spec, &cfg)?;
    let fd_crn = (cvar_at(&draws, spec, spec.hedge + h, &cfg)?.0 - cvar_at(&draws, spec, spec.hedge - h, &cfg)?.0) / (2.0 * h);
    let rel_err = (path - fd_crn).abs() / path.abs().max(fd_crn.abs()).max(1e-300);

    let mut crn = Vec::with_capacity(spec.repetitions);
    let mut indep = Vec::with_capacity(spec.repetitions);
    for _ in 0..spec.repetitions {
        let d = draw_scenarios(&spec.fills_mean, &spec.edges, spec.delta_s, &cfg, rng);
        crn.push((cvar_at(&d, spec, spec.hedge + h, &cfg)?.0 - cvar_at(&d, spec, spec.hedge - h, &cfg)?.0) / (2.0 * h));
        let d_up = draw_scenarios(&spec.fills_mean, &spec.edges, spec.delta_s, &cfg, rng);
        let d_dn = draw_scenarios(&spec.fills_mean, &spec.edges, spec.delta_s, &cfg, rng);
        indep.push((cvar_at(&d_up, spec, spec.hedge + h, &cfg)?.0 - cvar_at(&d_dn, spec, spec.hedge - h, &cfg)?.0) / (2.0 * h));
    }
    let (var_crn, var_independent) = (variance(&crn), variance(&indep));

    let inert_spec = CvarGradSpec {
        delta_s: 0.0,
        ..spec.clone()
    };
    let inert_cfg = cvar_cfg(spec, spec.tau_cvar, 0.0);
    let inert_draws = draw_scenarios(&spec.fills_mean, &spec.edges, 0.0, &inert_cfg, rng);
    let inert_gradient = pathwise(&inert_draws, &inert_spec, &inert_cfg)?;

    let coarse_cfg = cvar_cfg(spec, 1e-2, spec.noise_std);
    let fine_cfg = cvar_cfg(spec, 1e-3, spec.noise_std);
    let tau_coarse = pathwise(&draws, spec, &coarse_cfg)?;
    let tau_fine = pathwise(&draws, spec, &fine_cfg)?;

    Ok(CvarGradReport {
        pathwise: path,
        fd_crn,
        rel_err,
        var_crn,
        var_independent,
        inert_gradient,
        tau_coarse,
        tau_fine,
        pass: rel_err < 1e-2 && var_independent >= 10.0 * var_crn && inert_gradient == 0.0,
    })
}
