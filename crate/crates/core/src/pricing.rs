//! Black–Scholes calls and Greeks at zero rate and carry.

use serde::{Deserialize, Serialize};

use crate::surface::SurfaceCaps;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, `½·erfc(−x/√2)`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsQuoteInputs {
    pub spot: f64,
    pub strike: f64,
    pub maturity: f64,
    pub vol: f64,
}

impl BsQuoteInputs {
    pub fn new(spot: f64, strike: f64, maturity: f64, vol: f64) -> Self {
        Self {
            spot,
            strike,
            maturity,
            vol,
        }
    }

    /// Floors maturity at `T_min` and vol at `σ_min`.
    pub fn clamped(self, caps: &SurfaceCaps) -> Self {
        Self {
            maturity: self.maturity.max(caps.t_min),
            vol: self.vol.max(caps.sigma_min),
            ..self
        }
    }

    /// `(d₊, d₋)`.
    pub fn d_plus_minus(&self) -> (f64, f64) {
        let sd = self.vol * self.maturity.sqrt();
        let d_plus = ((self.spot / self.strike).ln() + 0.5 * sd * sd) / sd;
        (d_plus, d_plus - sd)
    }
}

/// `S·Φ(d₊) − K·Φ(d₋)`.
pub fn bs_call(inp: &BsQuoteInputs) -> f64 {
    let (dp, dm) = inp.d_plus_minus();
    let c = inp.spot * norm_cdf(dp) - inp.strike * norm_cdf(dm);
    // rounding can leave c a few ulps outside the no-arbitrage bounds
    c.clamp((inp.spot - inp.strike).max(0.0), inp.spot)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsGreeks {
    pub delta: f64,
    pub vega: f64,
    /// ∂²C/∂S∂σ
    pub vanna: f64,
    /// ∂²C/∂σ²
    pub volga: f64,
}

pub fn bs_greeks(inp: &BsQuoteInputs) -> BsGreeks {
    let (dp, dm) = inp.d_plus_minus();
    let pdf = norm_pdf(dp);
    let vega = inp.spot * inp.maturity.sqrt() * pdf;
    BsGreeks {
        delta: norm_cdf(dp),
        vega,
        vanna: -pdf * dm / inp.vol,
        volga: vega * dp * dm / inp.vol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// erf via the all-positive series `2/√π·e^{−z²}·Σ 2ⁿz^{2n+1}/(2n+1)!!`.
    fn erf_series(z: f64) -> f64 {
        let mut term = z;
        let mut sum = z;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= 2.0 * z * z / (2.0 * n + 1.0);
            sum += term;
        }
        2.0 / std::f64::consts::PI.sqrt() * (-z * z).exp() * sum
    }

    fn cdf_oracle(x: f64) -> f64 {
        0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
    }

    /// Composite Simpson over the standard-normal driver of the terminal price.
    fn call_by_quadrature(s: f64, k: f64, t: f64, sigma: f64) -> f64 {
        let sd = sigma * t.sqrt();
        let z_star = ((k / s).ln() + 0.5 * sd * sd) / sd;
        let (a, b) = (z_star, z_star.max(0.0) + 14.0);
        let n = 40_000;
        let h = (b - a) / n as f64;
        let f = |z: f64| (s * (-0.5 * sd * sd + sd * z).exp() - k).max(0.0) * norm_pdf(z);
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn cdf_reference_points() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_pdf(0.0) - 0.398_942_3).abs() < 1e-7);
        assert!((norm_cdf(1.959_964) - 0.975).abs() < 1e-7);
        assert!((cdf_oracle(1.959_964) - 0.975).abs() < 1e-7);
        for x in [-7.5, -3.1, -1.0, -0.2, 0.4, 1.7, 2.9, 5.5] {
            assert!((norm_cdf(x) - cdf_oracle(x)).abs() < 1e-12, "x = {x}");
            assert!((norm_cdf(-x) - (1.0 - norm_cdf(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn atm_call_against_two_oracles() {
        let inp = BsQuoteInputs::new(100.0, 100.0, 1.0, 0.2);
        let c = bs_call(&inp);
        // closed form with the series erf
        let oracle = 100.0 * cdf_oracle(0.1) - 100.0 * cdf_oracle(-0.1);
        let quad = call_by_quadrature(100.0, 100.0, 1.0, 0.2);
        assert!((oracle - quad).abs() < 1e-6);
        assert!((c - oracle).abs() < 1e-10);
        assert!((c - 7.965_567_455).abs() < 1e-8);
    }

    #[test]
    fn call_limits() {
        let deep = bs_call(&BsQuoteInputs::new(100.0, 50.0, 1.0, 1e-4));
        assert!((deep - 50.0).abs() < 1e-12);
        let worthless = bs_call(&BsQuoteInputs::new(100.0, 1e6, 1.0, 0.2));
        assert!(worthless.abs() < 1e-12);
    }

    #[test]
    fn atm_greeks_reference() {
        let g = bs_greeks(&BsQuoteInputs::new(100.0, 100.0, 1.0, 0.2));
        assert!((g.delta - cdf_oracle(0.1)).abs() < 1e-12);
        assert!((g.delta - 0.539_827_837_277_029).abs() < 1e-12);
        assert!((g.vega - 39.695_254_747_701_18).abs() < 1e-9);
        assert!(g.delta > 0.5);
    }

    #[test]
    fn clamping_floors_inputs() {
        let caps = SurfaceCaps::default();
        let c = BsQuoteInputs::new(100.0, 90.0, 0.0, 0.0).clamped(&caps);
        assert_eq!(c.maturity, caps.t_min);
        assert_eq!(c.vol, caps.sigma_min);
        assert!(bs_call(&c).is_finite());
    }

    fn inputs() -> impl Strategy<Value = BsQuoteInputs> {
        (50.0f64..150.0, 0.6f64..1.5, 0.02f64..2.0, 0.05f64..0.8)
            .prop_map(|(s, m, t, v)| BsQuoteInputs::new(s, s * m, t, v))
    }

    proptest! {
        #[test]
        fn call_bounds(inp in inputs()) {
            let c = bs_call(&inp);
            prop_assert!(c >= (inp.spot - inp.strike).max(0.0));
            prop_assert!(c <= inp.spot);
        }

        #[test]
        fn greeks_match_fd(inp in inputs()) {
            let g = bs_greeks(&inp);
            prop_assert!(g.vega >= 0.0);
            let hs = 1e-4 * inp.spot * inp.vol * inp.maturity.sqrt();
            let hv = 1e-4 * inp.vol;
            let with = |s: f64, v: f64| BsQuoteInputs { spot: s, vol: v, ..inp };
            let fd_delta = (bs_call(&with(inp.spot + hs, inp.vol)) - bs_call(&with(inp.spot - hs, inp.vol))) / (2.0 * hs);
            let fd_vega = (bs_call(&with(inp.spot, inp.vol + hv)) - bs_call(&with(inp.spot, inp.vol - hv))) / (2.0 * hv);
            let fd_vanna = (bs_greeks(&with(inp.spot, inp.vol + hv)).delta - bs_greeks(&with(inp.spot, inp.vol - hv)).delta) / (2.0 * hv);
            let fd_volga = (bs_greeks(&with(inp.spot, inp.vol + hv)).vega - bs_greeks(&with(inp.spot, inp.vol - hv)).vega) / (2.0 * hv);
            // absolute floors sized to the FD rounding noise of each channel
            prop_assert!(rel_err(g.delta, fd_delta) < 1e-5 || (g.delta - fd_delta).abs() < 1e-9);
            prop_assert!(rel_err(g.vega, fd_vega) < 1e-5 || (g.vega - fd_vega).abs() < 1e-7);
            prop_assert!(rel_err(g.vanna, fd_vanna) < 1e-5 || (g.vanna - fd_vanna).abs() < 1e-8);
            prop_assert!(rel_err(g.volga, fd_volga) < 1e-5 || (g.volga - fd_volga).abs() < 1e-6);
        }

        #[test]
        fn convex_in_strike(s in 80.0f64..120.0, t in 0.02f64..2.0, v in 0.05f64..0.8, m in 0.6f64..1.5) {
            let h = 0.5;
            let c = |k: f64| bs_call(&BsQuoteInputs::new(s, k, t, v));
            let k = s * m;
            prop_assert!(c(k - h) - 2.0 * c(k) + c(k + h) >= -1e-10);
        }

        #[test]
        fn non_decreasing_in_maturity(s in 80.0f64..120.0, t in 0.02f64..2.0, v in 0.05f64..0.8, m in 0.6f64..1.5) {
            let c = |t: f64| bs_call(&BsQuoteInputs::new(s, s * m, t, v));
            prop_assert!(c(t * 1.01) - c(t) >= -1e-12);
        }
    }
}
