//! Black prices and implied volatilities on a forward.

use crate::error::{Bound, Error, Result};
use crate::faddeeva::norm_cdf;
use crate::spx::OptionKind;

pub const VOL_LOWER: f64 = 1e-6;
pub const VOL_UPPER: f64 = 5.0;
const MAX_ITERATIONS: usize = 100;
/// Stop once the Newton step in vol falls below this.
const VOL_TOLERANCE: f64 = 1e-13;

/// A market quote expressed as a Black implied volatility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolQuote {
    pub forward: f64,
    pub strike: f64,
    pub expiry_tau: f64,
    pub implied_vol: f64,
    pub kind: OptionKind,
}

fn undiscounted(forward: f64, strike: f64, total_sd: f64, kind: OptionKind) -> f64 {
    let intrinsic_call = (forward - strike).max(0.0);
    let call = if total_sd <= 0.0 {
        intrinsic_call
    } else {
        let d1 = (forward / strike).ln() / total_sd + 0.5 * total_sd;
        let d2 = d1 - total_sd;
        forward * norm_cdf(d1) - strike * norm_cdf(d2)
    };
    match kind {
        OptionKind::Call => call,
        OptionKind::Put => call - forward + strike,
    }
}

/// Discounted Black price.
pub fn black_price(forward: f64, strike: f64, tau: f64, vol: f64, discount: f64, kind: OptionKind) -> f64 {
    let sd = vol * tau.max(0.0).sqrt();
    // price the out-of-the-money side and convert, to avoid cancellation
    let otm = if forward >= strike { OptionKind::Put } else { OptionKind::Call };
    let v = undiscounted(forward, strike, sd, otm);
    let v = match (otm, kind) {
        (a, b) if a == b => v,
        (OptionKind::Put, OptionKind::Call) => v + forward - strike,
        _ => v - forward + strike,
    };
    discount * v.max(0.0)
}

/// Black vega (derivative of the discounted price in vol).
pub fn black_vega(forward: f64, strike: f64, tau: f64, vol: f64, discount: f64) -> f64 {
    let sd = vol * tau.sqrt();
    if sd <= 0.0 {
        return 0.0;
    }
    let d1 = (forward / strike).ln() / sd + 0.5 * sd;
    discount * forward * (-0.5 * d1 * d1).exp() / (2.0 * std::f64::consts::PI).sqrt() * tau.sqrt()
}

/// Implied Black volatility by bracketed, safeguarded Newton iteration.
pub fn implied_vol(price: f64, forward: f64, strike: f64, tau: f64, discount: f64, kind: OptionKind) -> Result<f64> {
    if !(forward > 0.0 && strike > 0.0 && tau > 0.0 && discount > 0.0) || !price.is_finite() {
        return Err(Error::InvalidParameter("implied vol needs positive forward, strike, expiry and discount".into()));
    }
    let (lower, upper) = match kind {
        OptionKind::Call => ((forward - strike).max(0.0), forward),
        OptionKind::Put => ((strike - forward).max(0.0), strike),
    };
    let (lower, upper) = (discount * lower, discount * upper);
    if price <= lower {
        return Err(Error::OutOfBounds { price, bound: Bound::Lower, limit: lower });
    }
    if price >= upper {
        return Err(Error::OutOfBounds { price, bound: Bound::Upper, limit: upper });
    }
    let f = |vol: f64| black_price(forward, strike, tau, vol, discount, kind) - price;
    let (mut lo, mut hi) = (VOL_LOWER, VOL_UPPER);
    let f_lo = f(lo);
    if f_lo > 0.0 {
        return Err(Error::OutOfBounds { price, bound: Bound::Lower, limit: price + f_lo });
    }
    let f_hi = f(hi);
    if f_hi < 0.0 {
        return Err(Error::OutOfBounds { price, bound: Bound::Upper, limit: price + f_hi });
    }
    if f_lo == 0.0 {
        return Ok(lo);
    }
    // start from the Brenner-Subrahmanyam guess, clipped into the bracket
    let mut vol = ((2.0 * std::f64::consts::PI / tau).sqrt() * price / (discount * forward)).clamp(0.05, 1.0);
    // a price tolerance would leave vol errors of tol / vega on low-vega
    // quotes, so convergence is judged on the Newton step instead
    for _ in 0..MAX_ITERATIONS {
        let diff = f(vol);
        if diff == 0.0 {
            return Ok(vol);
        }
        if diff > 0.0 {
            hi = vol;
        } else {
            lo = vol;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(vol);
        }
        let vega = black_vega(forward, strike, tau, vol, discount);
        let step = diff / vega;
        let newton = vol - step;
        if vega > 0.0 && step.abs() <= VOL_TOLERANCE * vol.max(1.0) {
            return Ok(newton.clamp(lo, hi));
        }
        vol = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(vol)
}
