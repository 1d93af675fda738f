//! Equity index option prices by contour Fourier inversion.
//!
//! Prices are computed in log-forward coordinates: with `k = ln(F/K)` the
//! call is
//!
//! ```text
//! C = (P(0,T)/pi) * Int_0^inf Re[ M(xi) exp(C + v0 D) * (-K exp(-i xi k) / (xi^2 - i xi)) ] d xi_r
//! ```
//!
//! along `Im xi = contour_offset > 1`, where `M = 1 + h0 + v0 h1 + v0^2 h2`
//! is the first-order multiplier (identically one at order zero). Puts
//! follow from parity.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::correction::{equity_corrections, CorrectionGroups};
use crate::error::{Error, Result};
use crate::kernel::{equity_cf_terms, HestonParams};
use crate::quadrature::{GaussLegendre, QuadratureConfig};

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptionKind {
    Call,
    Put,
}

impl std::str::FromStr for OptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "call" | "c" => Ok(OptionKind::Call),
            "put" | "p" => Ok(OptionKind::Put),
            other => Err(Error::InvalidParameter(format!("unknown option kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptionKind::Call => "call",
            OptionKind::Put => "put",
        })
    }
}

/// European option on the index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquityOption {
    pub strike: f64,
    pub expiry_tau: f64,
    pub kind: OptionKind,
}

impl EquityOption {
    pub fn call(strike: f64, expiry_tau: f64) -> Self {
        EquityOption { strike, expiry_tau, kind: OptionKind::Call }
    }

    pub fn put(strike: f64, expiry_tau: f64) -> Self {
        EquityOption { strike, expiry_tau, kind: OptionKind::Put }
    }

    fn validate(&self) -> Result<()> {
        if self.strike > 0.0 && self.expiry_tau > 0.0 && self.strike.is_finite() && self.expiry_tau.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "option needs positive strike and expiry, got K={} tau={}",
                self.strike, self.expiry_tau
            )))
        }
    }
}

/// Piecewise-constant short-rate (or yield) curve.
///
/// `rates[i]` applies on `[knots[i-1], knots[i])` with `knots[-1] = 0`; the
/// last rate extends flat beyond the final knot.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    knots: Vec<f64>,
    rates: Vec<f64>,
}

impl RateCurve {
    pub fn flat(rate: f64) -> Self {
        RateCurve { knots: Vec::new(), rates: vec![rate] }
    }

    pub fn piecewise(knots: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != knots.len() + 1 {
            return Err(Error::InvalidParameter("piecewise curve needs one more rate than knots".into()));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) || knots.first().is_some_and(|&k| k <= 0.0) {
            return Err(Error::InvalidParameter("curve knots must be positive and increasing".into()));
        }
        Ok(RateCurve { knots, rates })
    }

    /// Integral of the rate from 0 to `tau`.
    pub fn integral(&self, tau: f64) -> f64 {
        let mut acc = 0.0;
        let mut start = 0.0;
        for (i, &k) in self.knots.iter().enumerate() {
            if tau <= k {
                return acc + self.rates[i] * (tau - start);
            }
            acc += self.rates[i] * (k - start);
            start = k;
        }
        acc + self.rates[self.rates.len() - 1] * (tau - start)
    }

    pub fn discount(&self, tau: f64) -> f64 {
        (-self.integral(tau)).exp()
    }
}

/// Spot and carry curves; only discount and forward factors depend on them.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityMarket {
    pub spot: f64,
    pub rates: RateCurve,
    pub dividends: RateCurve,
}

impl EquityMarket {
    pub fn flat(spot: f64, r: f64, q: f64) -> Self {
        EquityMarket { spot, rates: RateCurve::flat(r), dividends: RateCurve::flat(q) }
    }

    pub fn discount(&self, tau: f64) -> f64 {
        self.rates.discount(tau)
    }

    pub fn forward(&self, tau: f64) -> f64 {
        self.spot * (self.rates.integral(tau) - self.dividends.integral(tau)).exp()
    }
}

/// Closed-form transform `Int (e^x - K)^+ e^{i xi x} dx = -K^{1+i xi} / (xi^2 - i xi)`.
pub fn call_payoff_transform(strike: f64, xi: Complex64) -> Result<Complex64> {
    if xi.im <= 1.0 {
        return Err(Error::ContourViolation(format!("call transform needs Im xi > 1, got {}", xi.im)));
    }
    if !(strike > 0.0) {
        return Err(Error::InvalidParameter(format!("strike must be positive, got {strike}")));
    }
    let k = strike.ln();
    Ok(-((1.0 + I * xi) * k).exp() / (xi * xi - I * xi))
}

/// One maturity's worth of equity quotes sharing kernel evaluations.
#[derive(Debug, Clone, Copy)]
pub struct EquitySlice {
    pub expiry_tau: f64,
    pub forward: f64,
    pub discount: f64,
}

impl EquitySlice {
    pub fn from_market(market: &EquityMarket, expiry_tau: f64) -> Self {
        EquitySlice { expiry_tau, forward: market.forward(expiry_tau), discount: market.discount(expiry_tau) }
    }

    /// Call prices for all strikes; `cg = None` gives order-zero prices.
    pub fn call_prices(
        &self,
        strikes: &[f64],
        p: &HestonParams,
        cg: Option<&CorrectionGroups>,
        q: &QuadratureConfig,
    ) -> Result<Vec<f64>> {
        q.validate()?;
        p.validate()?;
        if q.contour_offset <= 1.0 {
            return Err(Error::ContourViolation(format!(
                "call inversion needs contour offset > 1, got {}",
                q.contour_offset
            )));
        }
        if !(self.forward > 0.0 && self.discount > 0.0 && self.expiry_tau > 0.0) {
            return Err(Error::InvalidParameter("slice needs positive forward, discount and expiry".into()));
        }
        if let Some(&k) = strikes.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidParameter(format!("strike must be positive, got {k}")));
        }
        let cg = cg.filter(|c| !c.is_zero());
        let tau = self.expiry_tau;
        let log_moneyness: Vec<f64> = strikes.iter().map(|k| (self.forward / k).ln()).collect();
        let scale = self.discount / std::f64::consts::PI;
        let tol = q.tolerance * self.forward * self.discount;
        let gl = GaussLegendre::new(q.nodes);

        // The stop test sees the order-zero integrand only, inflated by a cubic
        // envelope that bounds the correction multiplier. The panel set then
        // does not depend on the groups, so first-order prices are exactly
        // linear in them and reduce to order zero bit for bit.
        let node_value = |xi_r: f64| -> Result<(Complex64, f64)> {
            let xi = Complex64::new(xi_r, q.contour_offset);
            let k = equity_cf_terms(tau, xi, p)?;
            let base = (k.c + p.v0 * k.d).exp() / (xi * xi - I * xi);
            let bound = base.norm() * (1.0 + xi.norm()).powi(3);
            let value = match cg {
                Some(cg) => base * equity_corrections(tau, xi, p, cg)?.multiplier(p.v0),
                None => base,
            };
            Ok((-value, bound))
        };

        let mut sums = vec![0.0; strikes.len()];
        for (count, (a, b)) in q.panels().enumerate() {
            let nodes: Vec<(f64, f64)> = gl.mapped(a, b).collect();
            let values = nodes.par_iter().map(|&(x, _)| node_value(x)).collect::<Result<Vec<_>>>()?;
            let mut converged = true;
            for (j, (&km, &strike)) in log_moneyness.iter().zip(strikes).enumerate() {
                let mut panel = 0.0;
                let mut panel_abs = 0.0;
                for (&(x, w), (val, bound)) in nodes.iter().zip(&values) {
                    let xi = Complex64::new(x, q.contour_offset);
                    let phase = strike * (-I * xi * km).exp();
                    panel += w * (val * phase).re;
                    panel_abs += w * bound * phase.norm();
                }
                sums[j] += panel;
                if scale * panel_abs >= tol {
                    converged = false;
                }
            }
            if converged && count + 1 >= q.min_panels {
                return Ok(sums.into_iter().map(|s| scale * s).collect());
            }
        }
        Err(Error::QuadratureDivergence { truncation: q.truncation })
    }

    /// Prices of mixed calls and puts; puts via parity.
    pub fn prices(
        &self,
        options: &[(f64, OptionKind)],
        p: &HestonParams,
        cg: Option<&CorrectionGroups>,
        q: &QuadratureConfig,
    ) -> Result<Vec<f64>> {
        let strikes: Vec<f64> = options.iter().map(|o| o.0).collect();
        let calls = self.call_prices(&strikes, p, cg, q)?;
        Ok(options
            .iter()
            .zip(calls)
            .map(|(&(k, kind), c)| match kind {
                OptionKind::Call => c,
                OptionKind::Put => c - self.discount * (self.forward - k),
            })
            .collect())
    }
}

fn price_in_market(
    market: &EquityMarket,
    option: &EquityOption,
    p: &HestonParams,
    cg: Option<&CorrectionGroups>,
    q: &QuadratureConfig,
) -> Result<f64> {
    option.validate()?;
    if !(market.spot > 0.0) {
        return Err(Error::InvalidParameter(format!("spot must be positive, got {}", market.spot)));
    }
    let slice = EquitySlice::from_market(market, option.expiry_tau);
    Ok(slice.prices(&[(option.strike, option.kind)], p, cg, q)?[0])
}

/// Order-zero (effective Heston) price with flat rates `p.r`, `p.q`.
pub fn price_order0(spot: f64, option: &EquityOption, p: &HestonParams, q: &QuadratureConfig) -> Result<f64> {
    price_in_market(&EquityMarket::flat(spot, p.r, p.q), option, p, None, q)
}

/// First-order price including the fast and slow corrections.
pub fn price_first_order(
    spot: f64,
    option: &EquityOption,
    p: &HestonParams,
    cg: &CorrectionGroups,
    q: &QuadratureConfig,
) -> Result<f64> {
    price_in_market(&EquityMarket::flat(spot, p.r, p.q), option, p, Some(cg), q)
}

/// Price against arbitrary piecewise-constant carry curves.
pub fn price_with_market(
    market: &EquityMarket,
    option: &EquityOption,
    p: &HestonParams,
    cg: Option<&CorrectionGroups>,
    q: &QuadratureConfig,
) -> Result<f64> {
    price_in_market(market, option, p, cg, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> HestonParams {
        HestonParams::illustrative(0.04)
    }

    #[test]
    fn transform_rejects_bad_contour() {
        assert!(matches!(call_payoff_transform(100.0, Complex64::new(1.0, 1.0)), Err(Error::ContourViolation(_))));
    }

    #[test]
    fn transform_strike_scaling() {
        let xi = Complex64::new(0.7, 1.5);
        let a = call_payoff_transform(50.0, xi).unwrap();
        let b = call_payoff_transform(100.0, xi).unwrap();
        let factor = (Complex64::new(2.0f64.ln(), 0.0) * (1.0 + I * xi)).exp();
        assert!((b - a * factor).norm() < 1e-14 * b.norm());
    }

    #[test]
    fn parity_holds() {
        let p = HestonParams { r: 0.03, q: 0.01, ..params() };
        let q = QuadratureConfig::equity();
        for &k in &[1600.0, 2000.0, 2400.0] {
            let c = price_order0(2000.0, &EquityOption::call(k, 0.5), &p, &q).unwrap();
            let put = price_order0(2000.0, &EquityOption::put(k, 0.5), &p, &q).unwrap();
            let parity = 2000.0 * (-0.01f64 * 0.5).exp() - k * (-0.03f64 * 0.5).exp();
            assert!((c - put - parity).abs() < 1e-8 * 2000.0);
        }
    }

    #[test]
    fn curve_integral_is_piecewise_linear() {
        let c = RateCurve::piecewise(vec![0.5, 1.0], vec![0.01, 0.02, 0.03]).unwrap();
        assert!((c.integral(0.25) - 0.0025).abs() < 1e-15);
        assert!((c.integral(0.75) - (0.005 + 0.005)).abs() < 1e-15);
        assert!((c.integral(2.0) - (0.005 + 0.01 + 0.03)).abs() < 1e-15);
        assert!(RateCurve::piecewise(vec![1.0, 0.5], vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_groups_reproduce_order_zero_exactly() {
        let p = params();
        let q = QuadratureConfig::equity();
        let opt = EquityOption::call(2100.0, 0.3);
        let a = price_order0(2000.0, &opt, &p, &q).unwrap();
        let b = price_first_order(2000.0, &opt, &p, &CorrectionGroups::zero(), &q).unwrap();
        assert_eq!(a, b);
    }
}
