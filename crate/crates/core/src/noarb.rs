//! Lattice surrogates for static no-arbitrage.
//!
//! Butterfly (`BF`) penalizes negative second differences of call prices in
//! strike; calendar (`CAL`) penalizes prices that fall with maturity; `Shape`
//! penalizes roughness of the eSSVI parameters across maturities. Hinges are
//! either exact or softplus-smoothed with temperature `τ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{logistic, softplus};
use crate::surface::EssviSurface;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoArbError {
    #[error("lattice too small: need at least {needed} {axis}, got {got}")]
    GridTooSmall {
        axis: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
}

/// `s_τ(x) = τ·log(1 + e^{x/τ})`.
pub fn softplus_tau(x: f64, tau: f64) -> f64 {
    tau * softplus(x / tau)
}

/// Derivative of [`softplus_tau`] in `x`: `logistic(x/τ)`.
pub fn softplus_tau_grad(x: f64, tau: f64) -> f64 {
    logistic(x / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub tau_arb: f64,
    pub eps_norm: f64,
    /// Exact `max(x, 0)` instead of softplus.
    pub hard_hinge: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            tau_arb: 1e-3,
            eps_norm: 1e-8,
            hard_hinge: false,
        }
    }
}

impl PenaltyConfig {
    pub fn hard() -> Self {
        Self {
            hard_hinge: true,
            ..Self::default()
        }
    }

    pub fn hinge(&self, x: f64) -> f64 {
        if self.hard_hinge {
            x.max(0.0)
        } else {
            softplus_tau(x, self.tau_arb)
        }
    }
}

/// Call prices on an evenly spaced strike grid × maturity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceLattice {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    /// `prices[m][j]` is the call at maturity `m`, strike `j`.
    prices: Vec<Vec<f64>>,
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] > w[0]) && xs.iter().all(|x| x.is_finite())
}

impl PriceLattice {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>, prices: Vec<Vec<f64>>) -> Result<Self, NoArbError> {
        if !strictly_increasing(&strikes) || strikes.first().is_some_and(|&k| k <= 0.0) {
            return Err(NoArbError::InvalidLattice("strikes must be positive and increasing".into()));
        }
        if !strictly_increasing(&maturities) {
            return Err(NoArbError::InvalidLattice("maturities must be increasing".into()));
        }
        if strikes.len() >= 2 {
            let dk = strikes[1] - strikes[0];
            let uneven = strikes
                .windows(2)
                .any(|w| ((w[1] - w[0]) - dk).abs() > 1e-9 * dk.abs().max(strikes[0]));
            if uneven {
                return Err(NoArbError::InvalidLattice("strikes are not evenly spaced".into()));
            }
        }
        if prices.len() != maturities.len() || prices.iter().any(|row| row.len() != strikes.len()) {
            return Err(NoArbError::InvalidLattice("price matrix shape does not match the axes".into()));
        }
        Ok(Self {
            strikes,
            maturities,
            prices,
        })
    }

    /// Evenly spaced strikes `lo, lo+Δ, …, hi` with `n` points.
    pub fn even_strikes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        let step = (hi - lo) / (n - 1) as f64;
        (0..n).map(|j| lo + step * j as f64).collect()
    }

    /// Builds a lattice by evaluating `price(maturity, strike)` on every node.
    pub fn from_fn(
        strikes: Vec<f64>,
        maturities: Vec<f64>,
        mut price: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self, NoArbError> {
        let prices = maturities
            .iter()
            .map(|&t| strikes.iter().map(|&k| price(t, k)).collect())
            .collect();
        Self::new(strikes, maturities, prices)
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn prices(&self) -> &[Vec<f64>] {
        &self.prices
    }

    pub fn prices_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.prices
    }

    pub fn strike_step(&self) -> f64 {
        self.strikes[1] - self.strikes[0]
    }

    /// `mean_K |C_m(K)| + eps_norm`.
    pub fn level(&self, m: usize, eps_norm: f64) -> f64 {
        let row = &self.prices[m];
        row.iter().map(|c| c.abs()).sum::<f64>() / row.len() as f64 + eps_norm
    }

    /// Bound on the normalized second difference attributable to rounding alone.
    pub fn bf_floor(&self, eps_norm: f64) -> f64 {
        let dk = self.strike_step();
        (0..self.maturities.len())
            .map(|m| {
                let max_c = self.prices[m].iter().fold(0.0f64, |a, c| a.max(c.abs()));
                16.0 * f64::EPSILON * max_c / (dk * dk * self.level(m, eps_norm))
            })
            .fold(0.0, f64::max)
    }
}

/// Aggregate penalty with its per-maturity (BF) or per-pair (CAL) parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub total: f64,
    pub parts: Vec<f64>,
}

/// Butterfly surrogate: mean over maturities of the mean hinge of
/// `−Δ²_K C / ΔK²` over interior strikes, normalized by `C̄_m`.
pub fn bf_penalty(lat: &PriceLattice, cfg: &PenaltyConfig) -> Result<Penalty, NoArbError> {
    let n = lat.strikes.len();
    if n < 3 {
        return Err(NoArbError::GridTooSmall {
            axis: "strikes",
            needed: 3,
            got: n,
        });
    }
    if lat.maturities.is_empty() {
        return Err(NoArbError::GridTooSmall {
            axis: "maturities",
            needed: 1,
            got: 0,
        });
    }
    let dk2 = lat.strike_step().powi(2);
    let parts: Vec<f64> = lat
        .prices
        .iter()
        .enumerate()
        .map(|(m, row)| {
            let level = lat.level(m, cfg.eps_norm);
            let sum: f64 = row
                .windows(3)
                .map(|c| cfg.hinge(-(c[0] - 2.0 * c[1] + c[2]) / dk2))
                .sum();
            sum / (n - 2) as f64 / level
        })
        .collect();
    let total = parts.iter().sum::<f64>() / parts.len() as f64;
    Ok(Penalty { total, parts })
}

/// Calendar surrogate: mean over adjacent maturity pairs of the mean hinge of
/// `C_m(K) − C_{m+1}(K)`, normalized by the pair's mean absolute price.
pub fn cal_penalty(lat: &PriceLattice, cfg: &PenaltyConfig) -> Result<Penalty, NoArbError> {
    let m = lat.maturities.len();
    if m < 2 {
        return Err(NoArbError::GridTooSmall {
            axis: "maturities",
            needed: 2,
            got: m,
        });
    }
    let n = lat.strikes.len() as f64;
    let parts: Vec<f64> = lat
        .prices
        .windows(2)
        .map(|pair| {
            let (near, far) = (&pair[0], &pair[1]);
            let level = near.iter().chain(far).map(|c| c.abs()).sum::<f64>() / (2.0 * n) + cfg.eps_norm;
            let sum: f64 = near.iter().zip(far).map(|(a, b)| cfg.hinge(a - b)).sum();
            sum / n / level
        })
        .collect();
    let total = parts.iter().sum::<f64>() / parts.len() as f64;
    Ok(Penalty { total, parts })
}

/// Mean over adjacent maturities of `Δθ² + Δρ² + Δψ²`.
pub fn shape_penalty(surface: &EssviSurface) -> Result<f64, NoArbError> {
    let s = surface.slices();
    if s.len() < 2 {
        return Err(NoArbError::GridTooSmall {
            axis: "maturities",
            needed: 2,
            got: s.len(),
        });
    }
    let sum: f64 = s
        .windows(2)
        .map(|w| {
            (w[1].theta() - w[0].theta()).powi(2)
                + (w[1].rho() - w[0].rho()).powi(2)
                + (w[1].psi() - w[0].psi()).powi(2)
        })
        .sum();
    Ok(sum / (s.len() - 1) as f64)
}
