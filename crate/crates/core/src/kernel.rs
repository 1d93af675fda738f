//! Closed-form transform exponents for the effective Heston model.
//!
//! The equity exponents C, D give `E[exp(-i xi X_T)] = exp(C + v D)` for the
//! log-forward displacement X, and the CIR exponents A, B give the exponential
//! moment `E[exp(u V_T)] = exp(A + v B)`. Both come with analytic derivatives
//! in the effective vol-of-vol and correlation, which the correction systems
//! consume as source terms.

use num_complex::Complex64;

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Frequencies with modulus below this return the analytic zero limit.
pub const FREQUENCY_FLOOR: f64 = 1e-12;

/// Moduli below this in a denominator or log argument are reported as degenerate.
pub const DEGENERACY_FLOOR: f64 = 1e-13;

/// Base model parameters at a frozen slow-scale state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HestonParams {
    pub kappa: f64,
    pub m: f64,
    pub eta_bar: f64,
    pub rho_bar: f64,
    pub v0: f64,
    pub r: f64,
    pub q: f64,
}

impl HestonParams {
    pub fn new(kappa: f64, m: f64, eta_bar: f64, rho_bar: f64, v0: f64, r: f64, q: f64) -> Result<Self> {
        let p = HestonParams { kappa, m, eta_bar, rho_bar, v0, r, q };
        p.validate()?;
        Ok(p)
    }

    /// The illustrative parameter set used throughout the tests and fixtures.
    pub fn illustrative(v0: f64) -> Self {
        HestonParams { kappa: 15.0, m: 0.04, eta_bar: 2.0, rho_bar: -0.5, v0, r: 0.0, q: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.kappa, self.m, self.eta_bar, self.rho_bar, self.v0, self.r, self.q];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite Heston parameter".into()));
        }
        if self.kappa <= 0.0 || self.m <= 0.0 || self.eta_bar <= 0.0 {
            return Err(Error::InvalidParameter("kappa, m and eta_bar must be positive".into()));
        }
        if self.v0 < 0.0 {
            return Err(Error::InvalidParameter("v0 must be nonnegative".into()));
        }
        if self.rho_bar <= -1.0 || self.rho_bar >= 1.0 {
            return Err(Error::InvalidParameter("rho_bar must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    /// True when the effective parameters violate the Feller condition.
    pub fn feller_violated(&self) -> bool {
        self.eta_bar * self.eta_bar > 2.0 * self.kappa * self.m
    }

    pub fn with_eta_bar(mut self, eta_bar: f64) -> Self {
        self.eta_bar = eta_bar;
        self
    }

    pub fn with_rho_bar(mut self, rho_bar: f64) -> Self {
        self.rho_bar = rho_bar;
        self
    }

    pub fn with_v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }
}

/// Equity exponents and their sensitivities at one (tau, xi).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquityCfTerms {
    pub c: Complex64,
    pub d: Complex64,
    pub dc_deta: Complex64,
    pub dd_deta: Complex64,
    pub dc_drho: Complex64,
    pub dd_drho: Complex64,
}

/// CIR exponents and their vol-of-vol sensitivities at one (tau, u).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CirTransformTerms {
    pub a: Complex64,
    pub b: Complex64,
    pub da_deta: Complex64,
    pub db_deta: Complex64,
}

/// `ln(1 + z)` without cancellation for small `z`.
pub(crate) fn ln_1p(z: Complex64) -> Complex64 {
    let u = Complex64::new(1.0, 0.0) + z;
    if u == Complex64::new(1.0, 0.0) {
        z
    } else {
        u.ln() * z / (u - 1.0)
    }
}

fn degenerate(xi: Complex64, what: &'static str) -> Error {
    Error::DegenerateFrequency { re: xi.re, im: xi.im, what }
}

/// Heston exponents C, D with derivatives in eta_bar and rho_bar.
///
/// Uses the form with `exp(-d tau)`, which is algebraically equal to the
/// textbook expression but never overflows and keeps the log argument away
/// from the branch cut for typical parameters. When the argument can wind
/// around the origin the phase is followed along a tau grid.
pub fn equity_cf_terms(tau: f64, xi: Complex64, p: &HestonParams) -> Result<EquityCfTerms> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be nonnegative, got {tau}")));
    }
    if xi.norm() < FREQUENCY_FLOOR || tau == 0.0 {
        return Ok(EquityCfTerms::default());
    }
    let (kappa, eta, rho) = (p.kappa, p.eta_bar, p.rho_bar);
    let eta2 = eta * eta;
    let km = kappa * p.m;

    let s = xi * xi - I * xi;
    let beta = kappa + I * rho * eta * xi;
    let d = (beta * beta + eta2 * s).sqrt();
    let b = beta + d;
    if b.norm() < DEGENERACY_FLOOR {
        return Err(degenerate(xi, "beta + d"));
    }
    if d.norm() < DEGENERACY_FLOOR {
        return Err(degenerate(xi, "d"));
    }
    // g = (beta - d)/(beta + d) written without the cancellation in beta - d.
    let g = -eta2 * s / (b * b);
    let one_minus_g = 2.0 * d / b;
    let e = (-d * tau).exp();
    let n = 1.0 - e;
    let mm = 1.0 - g * e;
    if mm.norm() < DEGENERACY_FLOOR {
        return Err(degenerate(xi, "1 - g exp(-d tau)"));
    }
    let ratio = n / mm;
    let dd = -s * ratio / b;

    // log((1 - g e)/(1 - g)) = log(1 + q n), followed continuously in tau.
    let qq = g / one_minus_g;
    let log_term = continuous_log1p(qq, d, tau);
    let lam = log_term / eta2;
    let cc = km * (-s * tau / b - 2.0 * lam);

    let sens = |beta_t: Complex64, eta2_t: f64| {
        let d_t = (beta * beta_t + 0.5 * eta2_t * s) / d;
        let b_t = beta_t + d_t;
        let g_t = g * (eta2_t / eta2 - 2.0 * b_t / b);
        let e_t = -tau * d_t * e;
        let n_t = -e_t;
        let m_t = -(g_t * e + g * e_t);
        let ratio_t = (n_t * mm - n * m_t) / (mm * mm);
        let dd_t = -s * (ratio_t / b - ratio * b_t / (b * b));
        let log_t = m_t / mm + g_t / one_minus_g;
        let lam_t = log_t / eta2 - lam * eta2_t / eta2;
        let cc_t = km * (s * tau * b_t / (b * b) - 2.0 * lam_t);
        (cc_t, dd_t)
    };
    let (dc_deta, dd_deta) = sens(I * rho * xi, 2.0 * eta);
    let (dc_drho, dd_drho) = sens(I * eta * xi, 0.0);

    Ok(EquityCfTerms { c: cc, d: dd, dc_deta, dd_deta, dc_drho, dd_drho })
}

/// `ln(1 + q (1 - exp(-d t)))` at `t = tau`, continuous in t from t = 0.
///
/// The curve `1 + q(1 - exp(-d t))` stays inside a disc centred at `1 + q`
/// of radius `|q|`, which misses the negative real axis whenever
/// `Re q > -1/2`; then the principal branch is already continuous. Otherwise
/// the phase is accumulated over a grid fine enough that each increment
/// is far below pi.
fn continuous_log1p(q: Complex64, d: Complex64, tau: f64) -> Complex64 {
    let path = |t: f64| q * (1.0 - (-d * t).exp());
    let principal = ln_1p(path(tau));
    if q.re > -0.5 {
        return principal;
    }
    let turns = (d.im.abs() * tau / std::f64::consts::PI).ceil() as usize;
    let steps = (64 * (turns + 1)).min(1 << 16);
    let h = tau / steps as f64;
    let mut prev = Complex64::new(1.0, 0.0);
    let mut phase = 0.0;
    for k in 1..=steps {
        let cur = 1.0 + path(k as f64 * h);
        phase += (cur / prev).arg();
        prev = cur;
    }
    let winding = ((phase - principal.im) / (2.0 * std::f64::consts::PI)).round();
    principal + I * (2.0 * std::f64::consts::PI * winding)
}

/// CIR exponents A, B of `E[exp(u V_T)] = exp(A + v B)` with eta_bar derivatives.
///
/// `u` is the exponential-moment variable, so `B(0) = u`. Pricing along a
/// Laplace contour `exp(nu w)` in the payoff corresponds to `u = -nu`.
pub fn cir_transform_terms(tau: f64, u: Complex64, p: &HestonParams) -> Result<CirTransformTerms> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!("tau must be nonnegative, got {tau}")));
    }
    if u.norm() < FREQUENCY_FLOOR {
        return Ok(CirTransformTerms::default());
    }
    let (kappa, eta) = (p.kappa, p.eta_bar);
    let eta2 = eta * eta;
    let km = kappa * p.m;
    let decay = (-kappa * tau).exp();
    let c1 = -(-kappa * tau).exp_m1() / (2.0 * kappa);
    let c = eta2 * c1;
    let l = 1.0 - u * c;
    if l.norm() < DEGENERACY_FLOOR {
        return Err(degenerate(u, "1 - u c"));
    }
    let log_l = ln_1p(-u * c);
    let b = u * decay / l;
    let a = -(2.0 * km / eta2) * log_l;
    let c_eta = 2.0 * eta * c1;
    let db_deta = u * u * decay * c_eta / (l * l);
    let da_deta = (4.0 * km / (eta2 * eta)) * log_l + (2.0 * km / eta2) * u * c_eta / l;
    Ok(CirTransformTerms { a, b, da_deta, db_deta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> HestonParams {
        HestonParams::illustrative(0.04)
    }

    fn rk4_riccati(tau: f64, xi: Complex64, p: &HestonParams, n: usize) -> (Complex64, Complex64) {
        let beta = p.kappa + I * p.rho_bar * p.eta_bar * xi;
        let src = 0.5 * (-xi * xi + I * xi);
        let eta2 = p.eta_bar * p.eta_bar;
        let f = |d: Complex64| src - beta * d + 0.5 * eta2 * d * d;
        let (mut c, mut d) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        let h = tau / n as f64;
        for _ in 0..n {
            let k1 = f(d);
            let k2 = f(d + 0.5 * h * k1);
            let k3 = f(d + 0.5 * h * k2);
            let k4 = f(d + h * k3);
            let c1 = d;
            let c2 = d + 0.5 * h * k1;
            let c3 = d + 0.5 * h * k2;
            let c4 = d + h * k3;
            c += p.kappa * p.m * h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
            d += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        (c, d)
    }

    #[test]
    fn zero_maturity_and_zero_frequency_vanish() {
        let p = params();
        let t = equity_cf_terms(0.0, Complex64::new(3.0, 1.5), &p).unwrap();
        assert_eq!(t, EquityCfTerms::default());
        let t = equity_cf_terms(1.0, Complex64::new(0.0, 0.0), &p).unwrap();
        assert_eq!(t, EquityCfTerms::default());
        let u = Complex64::new(-1.0, 2.0);
        let t = cir_transform_terms(0.0, u, &p).unwrap();
        assert_eq!(t.a, Complex64::new(0.0, 0.0));
        assert_eq!(t.b, u);
        let t = cir_transform_terms(2.0, Complex64::new(0.0, 0.0), &p).unwrap();
        assert_eq!(t, CirTransformTerms::default());
    }

    #[test]
    fn equity_terms_solve_riccati() {
        let p = params();
        let xi = Complex64::new(1.0, 1.5);
        let t = equity_cf_terms(0.5, xi, &p).unwrap();
        let (c, d) = rk4_riccati(0.5, xi, &p, 20_000);
        assert!((t.c - c).norm() < 1e-10 * (1.0 + c.norm()));
        assert!((t.d - d).norm() < 1e-10 * (1.0 + d.norm()));
    }

    #[test]
    fn frequency_near_zero_matches_limit() {
        let p = params();
        let t = equity_cf_terms(1.0, Complex64::new(1e-9, 0.0), &p).unwrap();
        assert!(t.c.norm() < 1e-7 && t.d.norm() < 1e-7);
        // xi = i is a martingale frequency: E[exp(X)] = 1 exactly.
        let t = equity_cf_terms(1.0, Complex64::new(0.0, 1.0), &p).unwrap();
        assert!(t.c.norm() < 1e-12 && t.d.norm() < 1e-12);
    }

    #[test]
    fn small_vol_of_vol_is_stable() {
        let p = params().with_eta_bar(1e-9);
        let xi = Complex64::new(2.0, 1.5);
        let t = equity_cf_terms(0.5, xi, &p).unwrap();
        // deterministic variance limit: D -> -s (1 - e^{-kappa tau})/kappa
        let s = xi * xi - I * xi;
        let expected_d = -0.5 * s * (1.0 - (-p.kappa * 0.5).exp()) / p.kappa;
        assert!((t.d - expected_d).norm() < 1e-9, "{} vs {}", t.d, expected_d);
        let c = cir_transform_terms(0.5, Complex64::new(-1.0, 2.0), &p).unwrap();
        let decay = (-p.kappa * 0.5).exp();
        assert_relative_eq!(c.b.re, -decay, epsilon = 1e-10);
        assert_relative_eq!(c.a.re, -p.m * (1.0 - decay), epsilon = 1e-10);
    }

    #[test]
    fn cir_conjugate_symmetry() {
        let p = params();
        let u = Complex64::new(-0.7, 3.1);
        let a = cir_transform_terms(0.4, u, &p).unwrap();
        let b = cir_transform_terms(0.4, u.conj(), &p).unwrap();
        assert_relative_eq!(a.a.re, b.a.re, epsilon = 1e-15);
        assert_relative_eq!(a.a.im, -b.a.im, epsilon = 1e-15);
        assert_relative_eq!(a.b.im, -b.b.im, epsilon = 1e-15);
    }

    #[test]
    fn winding_fallback_agrees_with_direct_tracking() {
        // Strongly negative q forces the tracked branch.
        let q = Complex64::new(-3.0, 0.4);
        let d = Complex64::new(0.3, 9.0);
        for &tau in &[0.2, 1.0, 3.0] {
            let tracked = continuous_log1p(q, d, tau);
            let mut phase = 0.0;
            let mut prev = Complex64::new(1.0, 0.0);
            for k in 1..=200_000 {
                let t = tau * k as f64 / 200_000.0;
                let cur = 1.0 + q * (1.0 - (-d * t).exp());
                phase += (cur / prev).arg();
                prev = cur;
            }
            assert!((tracked.im - phase).abs() < 1e-9, "tau={tau}: {} vs {phase}", tracked.im);
        }
    }

    #[test]
    fn rejects_negative_maturity() {
        assert!(equity_cf_terms(-1.0, Complex64::new(1.0, 1.5), &params()).is_err());
        assert!(cir_transform_terms(-1.0, Complex64::new(1.0, 0.0), &params()).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(HestonParams::new(15.0, 0.04, 2.0, -0.5, 0.04, 0.0, 0.0).is_ok());
        assert!(HestonParams::new(15.0, 0.04, 2.0, 1.0, 0.04, 0.0, 0.0).is_err());
        assert!(HestonParams::new(0.0, 0.04, 2.0, 0.0, 0.04, 0.0, 0.0).is_err());
        assert!(HestonParams::new(1.0, 0.04, 2.0, 0.0, -0.1, 0.0, 0.0).is_err());
        assert!(params().feller_violated());
    }
}
