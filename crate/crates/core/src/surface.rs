//! eSSVI total-variance layer.
//!
//! Each maturity slice carries `(θ, ρ, ψ)` with `φ = ψ/√θ` and total variance
//!
//! ```text
//! w(k) = θ/2 · (1 + ρφk + √((φk + ρ)² + 1 − ρ²))
//! ```
//!
//! Slices are kept admissible by construction: `|ρ| < 1`,
//! `0 ≤ ψ < 2/(1+|ρ|) − ε_ψ` and the wing cap `ψ√θ ≤ τ_max`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::logistic;

/// Margin kept between a shifted ρ and ±1.
pub const RHO_CLAMP_MARGIN: f64 = 1e-4;
/// Margin kept below `ψ_max(ρ̃)` when a deformation scales ψ.
pub const PSI_REPROJECT_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("inadmissible slice: {0}")]
    Inadmissible(String),
    #[error("maturities must be positive and strictly increasing")]
    BadMaturities,
    #[error("{maturities} maturities but {slices} slices")]
    LengthMismatch { maturities: usize, slices: usize },
    #[error("evaluation point sits on a clamp or cap boundary ({0})")]
    ClampActive(&'static str),
}

/// Margins, caps and numerical floors shared by the surface and pricing layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCaps {
    /// Margin below the butterfly bound `2/(1+|ρ|)`.
    pub eps_psi: f64,
    /// Wing cap on `θφ = ψ√θ`.
    pub tau_max: f64,
    pub sigma_min: f64,
    pub t_min: f64,
}

impl Default for SurfaceCaps {
    fn default() -> Self {
        Self {
            eps_psi: 1e-3,
            tau_max: 1.0,
            sigma_min: 1e-4,
            t_min: 1e-4,
        }
    }
}

/// Upper bound for ψ at a given ρ: `2/(1+|ρ|) − ε_ψ`.
pub fn psi_max(rho: f64, eps_psi: f64) -> f64 {
    2.0 / (1.0 + rho.abs()) - eps_psi
}

/// Unconstrained coordinates of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawEssviSlice {
    pub log_theta: f64,
    pub rho_raw: f64,
    pub psi_raw: f64,
}

/// An admissible eSSVI slice. Construct through [`reparam`] or [`EssviSlice::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssviSlice {
    theta: f64,
    rho: f64,
    psi: f64,
    phi: f64,
}

impl EssviSlice {
    /// Validates `(θ, ρ, ψ)` against the butterfly bound and the wing cap.
    pub fn new(theta: f64, rho: f64, psi: f64, caps: &SurfaceCaps) -> Result<Self, SurfaceError> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(SurfaceError::Inadmissible(format!("theta = {theta}")));
        }
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(SurfaceError::Inadmissible(format!("rho = {rho}")));
        }
        if !(psi.is_finite() && psi >= 0.0 && psi < psi_max(rho, caps.eps_psi)) {
            return Err(SurfaceError::Inadmissible(format!("psi = {psi} at rho = {rho}")));
        }
        if psi * theta.sqrt() > caps.tau_max {
            return Err(SurfaceError::Inadmissible(format!(
                "psi*sqrt(theta) = {} exceeds tau_max = {}",
                psi * theta.sqrt(),
                caps.tau_max
            )));
        }
        Ok(Self::from_parts(theta, rho, psi))
    }

    fn from_parts(theta: f64, rho: f64, psi: f64) -> Self {
        Self {
            theta,
            rho,
            psi,
            phi: psi / theta.sqrt(),
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Inverse of [`reparam`] for slices whose wing cap is inactive.
    ///
    /// ψ at exactly 0 has no finite preimage; the logistic argument is clamped
    /// to ±40.
    pub fn to_raw(&self, caps: &SurfaceCaps) -> RawEssviSlice {
        let u = (self.psi / psi_max(self.rho, caps.eps_psi)).clamp(1e-17, 1.0 - 1e-16);
        RawEssviSlice {
            log_theta: self.theta.ln(),
            rho_raw: self.rho.atanh(),
            psi_raw: (u / (1.0 - u)).ln().clamp(-40.0, 40.0),
        }
    }

    pub fn is_admissible(&self, caps: &SurfaceCaps) -> bool {
        EssviSlice::new(self.theta, self.rho, self.psi, caps).is_ok()
    }
}

/// Maps unconstrained coordinates to an admissible slice, then applies the wing cap.
pub fn reparam(raw: &RawEssviSlice, caps: &SurfaceCaps) -> EssviSlice {
    let theta = raw.log_theta.exp();
    let rho = raw.rho_raw.tanh();
    // tanh saturates to exactly ±1 for |x| > ~19
    let rho = rho.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
    let bound = psi_max(rho, caps.eps_psi);
    // logistic rounds to exactly 1 for large arguments; keep ψ strictly inside
    let psi = (bound * logistic(raw.psi_raw)).min(bound.next_down());
    apply_wing_cap(EssviSlice::from_parts(theta, rho, psi), caps)
}

/// Projects ψ so that `ψ√θ ≤ τ_max`. Slices under the cap are returned unchanged.
pub fn apply_wing_cap(slice: EssviSlice, caps: &SurfaceCaps) -> EssviSlice {
    let sqrt_theta = slice.theta.sqrt();
    if slice.psi * sqrt_theta <= caps.tau_max {
        return slice;
    }
    EssviSlice::from_parts(slice.theta, slice.rho, caps.tau_max / sqrt_theta)
}

#[inline]
fn g(k: f64, rho: f64, phi: f64) -> f64 {
    let a = phi * k + rho;
    (a * a + (1.0 - rho * rho)).sqrt()
}

/// eSSVI total implied variance at log-moneyness `k`.
pub fn total_variance(slice: &EssviSlice, k: f64) -> f64 {
    let (theta, rho, phi) = (slice.theta, slice.rho, slice.phi);
    0.5 * theta * (1.0 + rho * phi * k + g(k, rho, phi))
}

/// `max(√(w / max(T, T_min)), σ_min)`.
pub fn implied_vol(w: f64, maturity: f64, caps: &SurfaceCaps) -> f64 {
    (w.max(0.0) / maturity.max(caps.t_min)).sqrt().max(caps.sigma_min)
}

/// Closed-form partials of `w(k)` with respect to `(θ, ρ, φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssviPartials {
    pub dw_dtheta: f64,
    pub dw_drho: f64,
    pub dw_dphi: f64,
}

pub fn essvi_partials(slice: &EssviSlice, k: f64) -> EssviPartials {
    let (theta, rho, phi) = (slice.theta, slice.rho, slice.phi);
    let gk = g(k, rho, phi);
    let phik = phi * k;
    EssviPartials {
        dw_dtheta: 0.5 * (1.0 + rho * phik + gk),
        dw_drho: 0.5 * theta * phik * (1.0 + 1.0 / gk),
        dw_dphi: 0.5 * theta * (rho * k + (phik + rho) * k / gk),
    }
}

/// Sensitivities of the deformed total variance to the two shape controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionPartials {
    pub dw_drho_shift: f64,
    pub dw_dpsi_scale: f64,
}

/// Parameters of `base` after shifting ρ and scaling ψ, before any clamp.
fn deformed_unclamped(base: &EssviSlice, psi_scale: f64, rho_shift: f64) -> (f64, f64) {
    (base.rho + rho_shift, base.psi * psi_scale)
}

/// Chain-rule partials of `w̃(k)` in `(ρ-shift, ψ-scale)` at the deformed slice.
///
/// Fails with [`SurfaceError::ClampActive`] when any of the deformation clamps
/// or the wing cap binds at the evaluation point.
pub fn action_partials(
    base: &EssviSlice,
    psi_scale: f64,
    rho_shift: f64,
    k: f64,
    caps: &SurfaceCaps,
) -> Result<ActionPartials, SurfaceError> {
    let (rho_t, psi_t) = deformed_unclamped(base, psi_scale, rho_shift);
    if rho_t.abs() >= 1.0 - RHO_CLAMP_MARGIN {
        return Err(SurfaceError::ClampActive("rho clamp"));
    }
    if psi_t >= psi_max(rho_t, caps.eps_psi) - PSI_REPROJECT_MARGIN {
        return Err(SurfaceError::ClampActive("psi bound"));
    }
    if psi_t * base.theta.sqrt() >= caps.tau_max {
        return Err(SurfaceError::ClampActive("wing cap"));
    }
    let deformed = EssviSlice::from_parts(base.theta, rho_t, psi_t);
    let p = essvi_partials(&deformed, k);
    Ok(ActionPartials {
        dw_drho_shift: p.dw_drho,
        dw_dpsi_scale: p.dw_dphi * base.phi,
    })
}

/// Applies `(ψ-scale, ρ-shift)` to one slice with the clamping rules of [`deform`].
pub fn deform_slice(slice: &EssviSlice, psi_scale: f64, rho_shift: f64, caps: &SurfaceCaps) -> EssviSlice {
    let (rho_t, psi_t) = deformed_unclamped(slice, psi_scale, rho_shift);
    let rho_t = rho_t.clamp(-1.0 + RHO_CLAMP_MARGIN, 1.0 - RHO_CLAMP_MARGIN);
    let psi_t = psi_t
        .max(0.0)
        .min(psi_max(rho_t, caps.eps_psi) - PSI_REPROJECT_MARGIN);
    apply_wing_cap(EssviSlice::from_parts(slice.theta, rho_t, psi_t), caps)
}

/// A maturity grid with one admissible slice per maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssviSurface {
    maturities: Vec<f64>,
    slices: Vec<EssviSlice>,
}

impl EssviSurface {
    pub fn new(maturities: Vec<f64>, slices: Vec<EssviSlice>) -> Result<Self, SurfaceError> {
        if maturities.len() != slices.len() {
            return Err(SurfaceError::LengthMismatch {
                maturities: maturities.len(),
                slices: slices.len(),
            });
        }
        if maturities.is_empty()
            || maturities[0] <= 0.0
            || maturities.windows(2).any(|w| w[1] <= w[0])
            || maturities.iter().any(|t| !t.is_finite())
        {
            return Err(SurfaceError::BadMaturities);
        }
        Ok(Self { maturities, slices })
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn slices(&self) -> &[EssviSlice] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Implied vol of slice `m` at log-moneyness `k`.
    pub fn implied_vol(&self, m: usize, k: f64, caps: &SurfaceCaps) -> f64 {
        implied_vol(total_variance(&self.slices[m], k), self.maturities[m], caps)
    }

    pub(crate) fn with_slices(&self, slices: Vec<EssviSlice>) -> Self {
        debug_assert_eq!(slices.len(), self.maturities.len());
        Self {
            maturities: self.maturities.clone(),
            slices,
        }
    }
}

/// Structured deformation of the quoted surface.
///
/// Per slice: θ is unchanged, `ρ̃ = clamp(ρ + ρ-shift, ±(1−ε_ρ))`,
/// `ψ̃ = min(ψ·ψ-scale, ψ_max(ρ̃) − ε_num)`, then the wing cap.
pub fn deform(surface: &EssviSurface, psi_scale: f64, rho_shift: f64, caps: &SurfaceCaps) -> EssviSurface {
    surface.with_slices(
        surface
            .slices
            .iter()
            .map(|s| deform_slice(s, psi_scale, rho_shift, caps))
            .collect(),
    )
}
