//! VIX futures and options priced as variance derivatives.
//!
//! The index is the affine map `VIX^2 = m (1 - theta) + theta V` with
//! `theta = (1 - exp(-kappa tau0)) / (kappa tau0)`. Payoffs are transformed
//! with the Laplace-type kernel `exp(nu v)`, `Re nu < 0`, and the price is
//!
//! ```text
//! P = (1/pi) Re Int_ray M(nu) G(nu) phi_hat(nu) d nu / i,   G(nu) = E[exp(-nu V_T)]
//! ```
//!
//! where the ray leaves `nu_r` at angle `contour_angle`. The vertical line
//! (angle pi/2) is the textbook choice; tilting into `Re nu < nu_r` keeps the
//! integrand analytic (it is singular only on `[0, inf)` and on
//! `(-inf, -1/c]`) and turns the oscillation `exp(nu v_K)` into exponential
//! decay.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::correction::{solve_hv_system, CorrectionGroups};
use crate::error::{Error, Result};
use crate::faddeeva::faddeeva_w;
use crate::kernel::{cir_transform_terms, HestonParams, FREQUENCY_FLOOR};
use crate::quadrature::{GaussLegendre, QuadratureConfig};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Horizon of the VIX variance swap, in years.
pub const TAU0: f64 = 30.0 / 360.0;

/// Parameters of the affine map between VIX^2 and spot variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VixMapping {
    pub theta: f64,
    pub m: f64,
    pub kappa: f64,
}

impl VixMapping {
    pub fn new(kappa: f64, m: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite() && m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidParameter(format!("VIX mapping needs kappa, m > 0, got {kappa}, {m}")));
        }
        let x = kappa * TAU0;
        Ok(VixMapping { theta: -(-x).exp_m1() / x, m, kappa })
    }

    pub fn from_params(p: &HestonParams) -> Result<Self> {
        Self::new(p.kappa, p.m)
    }

    /// `m (1 - theta)`, the squared VIX at zero spot variance.
    pub fn floor(&self) -> f64 {
        self.m * (1.0 - self.theta)
    }

    /// Smallest attainable VIX level.
    pub fn min_vix(&self) -> f64 {
        self.floor().sqrt()
    }

    /// `m (1 - theta) / theta`, the variance shift inside the square root.
    fn shift(&self) -> f64 {
        self.floor() / self.theta
    }
}

/// `sqrt(m (1 - theta) + theta v)`.
pub fn vix_from_variance(v: f64, map: &VixMapping) -> f64 {
    (map.floor() + map.theta * v.max(0.0)).sqrt()
}

/// Inverse of [`vix_from_variance`].
pub fn variance_from_vix(vix: f64, map: &VixMapping) -> Result<f64> {
    let floor = map.floor();
    // allow rounding at the floor itself
    if !(vix.is_finite() && vix * vix >= floor * (1.0 - 4.0 * f64::EPSILON)) {
        return Err(Error::InfeasibleVix { vix, floor: floor.sqrt() });
    }
    Ok(((vix * vix - floor) / map.theta).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VixKind {
    Future,
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VixInstrument {
    pub kind: VixKind,
    /// Strike in volatility units; `None` for futures.
    pub strike: Option<f64>,
    pub expiry_tau: f64,
}

impl VixInstrument {
    pub fn future(expiry_tau: f64) -> Self {
        VixInstrument { kind: VixKind::Future, strike: None, expiry_tau }
    }

    pub fn call(strike: f64, expiry_tau: f64) -> Self {
        VixInstrument { kind: VixKind::Call, strike: Some(strike), expiry_tau }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.expiry_tau >= 0.0 && self.expiry_tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("expiry must be nonnegative, got {}", self.expiry_tau)));
        }
        match (self.kind, self.strike) {
            (VixKind::Future, None) => Ok(()),
            (VixKind::Call, Some(k)) if k > 0.0 && k.is_finite() => Ok(()),
            (VixKind::Call, Some(k)) => Err(Error::InvalidParameter(format!("VIX strike must be positive, got {k}"))),
            (VixKind::Call, None) => Err(Error::InvalidParameter("VIX call needs a strike".into())),
            (VixKind::Future, Some(_)) => Err(Error::InvalidParameter("VIX future takes no strike".into())),
        }
    }
}

/// Transform `Int_0^inf exp(nu v) payoff(vix(v)) dv`, defined for `Re nu < 0`.
///
/// With `p = -nu`, `a = m(1-theta)/theta`, `v_K = K^2/theta - a` and
/// `z_K = K sqrt(p/theta)`:
/// future `sqrt(theta) [sqrt(a)/p + (sqrt(pi)/2) p^{-3/2} w(i sqrt(p a))]`,
/// call (`K >= sqrt(m(1-theta))`) `sqrt(theta) (sqrt(pi)/2) p^{-3/2} exp(-p v_K) w(i z_K)`,
/// call below the floor: future minus `K/p`.
pub fn vix_payoff_transform(inst: &VixInstrument, nu: Complex64, map: &VixMapping) -> Result<Complex64> {
    inst.validate()?;
    if nu.re > 0.0 {
        return Err(Error::ContourViolation(format!("VIX transform needs Re nu <= 0, got {}", nu.re)));
    }
    if nu.norm() < FREQUENCY_FLOOR {
        return Err(Error::DegenerateFrequency { re: nu.re, im: nu.im, what: "VIX payoff transform" });
    }
    let p = -nu;
    match inst.strike {
        None => Ok(future_transform(p, map)),
        Some(k) if k < map.min_vix() => Ok(future_transform(p, map) - k / p),
        Some(k) => Ok(call_transform(p, k, map)),
    }
}

fn future_transform(p: Complex64, map: &VixMapping) -> Complex64 {
    let a = map.shift();
    let w = faddeeva_w(I * (p * a).sqrt());
    map.theta.sqrt() * (a.sqrt() / p + 0.5 * PI.sqrt() * p.powf(-1.5) * w)
}

fn call_transform(p: Complex64, strike: f64, map: &VixMapping) -> Complex64 {
    let v_k = (strike * strike - map.floor()) / map.theta;
    let z = strike * (p / map.theta).sqrt();
    map.theta.sqrt() * 0.5 * PI.sqrt() * p.powf(-1.5) * (-p * v_k).exp() * faddeeva_w(I * z)
}

/// Prices for one expiry, sharing transform kernels across strikes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VixSlice {
    pub expiry_tau: f64,
    pub discount: f64,
}

impl VixSlice {
    pub fn new(expiry_tau: f64, r: f64) -> Self {
        VixSlice { expiry_tau, discount: (-r * expiry_tau).exp() }
    }

    /// Undiscounted `E[(VIX_T - K)^+]` for every strike.
    pub fn call_expectations(
        &self,
        strikes: &[f64],
        p: &HestonParams,
        cg: Option<&CorrectionGroups>,
        q: &QuadratureConfig,
    ) -> Result<Vec<f64>> {
        p.validate()?;
        if let Some(&k) = strikes.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidParameter(format!("VIX strike must be positive, got {k}")));
        }
        let map = VixMapping::from_params(p)?;
        let k_min = map.min_vix();
        // below the floor the payoff is linear: E[(X - K)^+] = E[(X - K_min)^+] + K_min - K
        let effective: Vec<f64> = strikes.iter().map(|&k| k.max(k_min)).collect();
        let values = self.expectations_above_floor(&effective, p, cg, q, &map)?;
        Ok(strikes.iter().zip(values).map(|(&k, c)| c + (k_min - k).max(0.0)).collect())
    }

    /// Undiscounted future `E[VIX_T]`.
    pub fn future(&self, p: &HestonParams, cg: Option<&CorrectionGroups>, q: &QuadratureConfig) -> Result<f64> {
        let k_min = VixMapping::from_params(p)?.min_vix();
        Ok(self.call_expectations(&[k_min], p, cg, q)?[0] + k_min)
    }

    /// Market prices: futures undiscounted, calls discounted.
    pub fn prices(
        &self,
        instruments: &[VixInstrument],
        p: &HestonParams,
        cg: Option<&CorrectionGroups>,
        q: &QuadratureConfig,
    ) -> Result<Vec<f64>> {
        let map = VixMapping::from_params(p)?;
        let k_min = map.min_vix();
        for inst in instruments {
            inst.validate()?;
        }
        let strikes: Vec<f64> = instruments.iter().map(|i| i.strike.unwrap_or(k_min)).collect();
        let values = self.call_expectations(&strikes, p, cg, q)?;
        Ok(instruments
            .iter()
            .zip(values)
            .map(|(inst, c)| match inst.kind {
                VixKind::Future => c + k_min,
                VixKind::Call => self.discount * c,
            })
            .collect())
    }

    fn expectations_above_floor(
        &self,
        strikes: &[f64],
        p: &HestonParams,
        cg: Option<&CorrectionGroups>,
        q: &QuadratureConfig,
        map: &VixMapping,
    ) -> Result<Vec<f64>> {
        let tau = self.expiry_tau;
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("expiry must be nonnegative, got {tau}")));
        }
        if tau == 0.0 {
            let x = vix_from_variance(p.v0, map);
            return Ok(strikes.iter().map(|&k| (x - k).max(0.0)).collect());
        }
        let mean = p.v0 * (-p.kappa * tau).exp() - p.m * (-p.kappa * tau).exp_m1();
        let level = vix_from_variance(mean, map);
        let v_k_max = strikes.iter().map(|&k| (k * k - map.floor()) / map.theta).fold(0.0, f64::max);
        let contour = Contour::new(q, tau, p, v_k_max)?;
        let cg = cg.filter(|c| !c.is_zero());
        let value = |nu: Complex64, factor: Complex64| -> Result<(Complex64, Vec<Complex64>)> {
            let k = cir_transform_terms(tau, -nu, p)?;
            let mut g = (k.a + p.v0 * k.b).exp();
            if let Some(cg) = cg {
                g *= solve_hv_system(tau, -nu, p, cg)?.multiplier(p.v0);
            }
            let phi = strikes.iter().map(|&k| call_transform(-nu, k, map)).collect();
            Ok((g * factor / I, phi))
        };
        let sums = contour.integrate(q, strikes.len(), level, value)?;
        Ok(sums.into_iter().map(|s| s / PI).collect())
    }
}

/// Inversion contour: a vertical segment `nu_r + i s`, `0 <= s <= height`,
/// followed by the ray `nu_r + i height + t e^{i angle}`.
///
/// Along the vertical segment `Re B` stays below its value at `s = 0`; once
/// `height >= 1/c` it is negative everywhere on the ray, so tilting cannot
/// amplify `exp(v0 B)` even when `c` is tiny (short expiries, small vol-of-vol).
struct Contour {
    offset: f64,
    height: f64,
    vertical_width: f64,
    direction: Option<Complex64>,
}

impl Contour {
    fn new(q: &QuadratureConfig, tau: f64, p: &HestonParams, v_k_max: f64) -> Result<Self> {
        q.validate()?;
        let offset = q.contour_offset;
        // G(nu) = E[exp(-nu V)] is finite for Re nu > -1/c
        let c = p.eta_bar * p.eta_bar * (-(-p.kappa * tau).exp_m1()) / (2.0 * p.kappa);
        if !(offset < 0.0 && offset * c > -1.0) {
            return Err(Error::ContourViolation(format!(
                "VIX contour offset must lie in (-1/c, 0) = ({}, 0), got {offset}",
                -1.0 / c
            )));
        }
        let angle = q.contour_angle;
        if !(0.5 * PI..PI).contains(&angle) {
            return Err(Error::ContourViolation(format!("VIX contour angle must lie in [pi/2, pi), got {angle}")));
        }
        let direction = Complex64::from_polar(1.0, angle);
        if angle == 0.5 * PI {
            return Ok(Contour { offset, height: 0.0, vertical_width: 0.0, direction: Some(direction) });
        }
        // beyond s* the factor |exp(v0 B)| <= exp(-GAUSSIAN_CUT), which makes the rest negligible
        const GAUSSIAN_CUT: f64 = 40.0;
        let v_t = p.v0 * (-p.kappa * tau).exp();
        let mut height = 1.0 / c;
        let mut direction = Some(direction);
        if v_t > GAUSSIAN_CUT * c {
            let cut = (GAUSSIAN_CUT / (c * (v_t - GAUSSIAN_CUT * c))).sqrt();
            if cut < height {
                height = cut;
                direction = None;
            }
        }
        // oscillation rate of exp(-nu v_K) exp(v0 B) along the segment
        let rate = v_k_max + v_t;
        let vertical_width = (3.0 * PI / rate.max(1e-12)).min(4.0 * q.panel_width);
        Ok(Contour { offset, height, vertical_width, direction })
    }

    /// Sums of `Re[f(nu) phi_j(nu)]` weighted by the contour measure.
    fn integrate(
        &self,
        q: &QuadratureConfig,
        count: usize,
        level: f64,
        value: impl Fn(Complex64, Complex64) -> Result<(Complex64, Vec<Complex64>)> + Sync,
    ) -> Result<Vec<f64>> {
        let gl = GaussLegendre::new(q.nodes);
        let mut sums = vec![0.0; count];
        let panel_sums = |a: f64, b: f64, point: &(dyn Fn(f64) -> (Complex64, Complex64) + Sync)| {
            let nodes: Vec<(f64, f64)> = gl.mapped(a, b).collect();
            let values = nodes
                .par_iter()
                .map(|&(t, _)| {
                    let (nu, factor) = point(t);
                    value(nu, factor)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = vec![(0.0, 0.0); count];
            for (j, slot) in out.iter_mut().enumerate() {
                for (&(_, w), (g, phi)) in nodes.iter().zip(&values) {
                    let term = w * (g * phi[j]).re;
                    if !term.is_finite() {
                        return Err(Error::QuadratureFailure(format!("non-finite VIX integrand on panel [{a}, {b}]")));
                    }
                    slot.0 += term;
                    slot.1 += term.abs();
                }
            }
            Ok(out)
        };

        if self.height > 0.0 {
            let vertical = |s: f64| (Complex64::new(self.offset, s), Complex64::new(0.0, 1.0));
            // panels no wider than half the distance to the payoff singularity at nu = 0
            let mut a = 0.0;
            while a < self.height {
                let width = (0.5 * self.offset.hypot(a)).min(self.vertical_width);
                let b = if a + 1.05 * width >= self.height { self.height } else { a + width };
                for (sum, (part, _)) in sums.iter_mut().zip(panel_sums(a, b, &vertical)?) {
                    *sum += part;
                }
                a = b;
            }
        }
        let Some(direction) = self.direction else {
            return Ok(sums);
        };
        let start = Complex64::new(self.offset, self.height);
        let ray = |t: f64| (start + t * direction, direction);
        let tol = q.tolerance * level * PI;
        // last panel contribution and Aitken-extrapolated total, per payoff
        let mut tails = vec![TailExtrapolation::default(); count];
        let mut done = vec![false; count];
        for (panel, (a, b)) in q.panels().enumerate() {
            let parts = panel_sums(a, b, &ray)?;
            for j in 0..count {
                if done[j] {
                    continue;
                }
                let (part, part_abs) = parts[j];
                sums[j] += part;
                let estimate = tails[j].push(sums[j], part);
                if panel + 1 < q.min_panels {
                    continue;
                }
                if part_abs * b / (b - a) < tol {
                    done[j] = true;
                } else if let Some(total) = estimate.filter(|_| tails[j].settled(tol)) {
                    sums[j] = total;
                    done[j] = true;
                }
            }
            if done.iter().all(|&d| d) {
                return Ok(sums);
            }
        }
        Err(Error::QuadratureDivergence { truncation: q.truncation })
    }
}

/// Tail extrapolation for integrands with power-law decay.
///
/// On geometric panels the panel sums of `t^{-alpha}` shrink by a constant
/// ratio, so Aitken's formula sums the tail. Logarithmic and `1/t` corrections
/// make those extrapolated totals converge only geometrically, so a second
/// Aitken pass is applied to them.
#[derive(Debug, Clone, Copy)]
struct TailExtrapolation {
    last_part: f64,
    totals: [f64; 3],
    estimates: [f64; 2],
}

impl Default for TailExtrapolation {
    fn default() -> Self {
        TailExtrapolation { last_part: f64::NAN, totals: [f64::NAN; 3], estimates: [f64::NAN; 2] }
    }
}

impl TailExtrapolation {
    fn push(&mut self, sum: f64, part: f64) -> Option<f64> {
        let ratio = part / self.last_part;
        self.last_part = part;
        let total = if ratio > 0.0 && ratio < 1.0 { sum + part * ratio / (1.0 - ratio) } else { f64::NAN };
        self.totals = [self.totals[1], self.totals[2], total];
        let [t0, t1, t2] = self.totals;
        let (d1, d2) = (t1 - t0, t2 - t1);
        let second = if d2 == 0.0 {
            t2
        } else if (d2 / d1) > 0.0 && (d2 / d1) < 1.0 {
            t2 - d2 * d2 / (d2 - d1)
        } else {
            f64::NAN
        };
        self.estimates = [self.estimates[1], second];
        second.is_finite().then_some(second)
    }

    /// Two consecutive second-level estimates agree within `tol`.
    fn settled(&self, tol: f64) -> bool {
        (self.estimates[1] - self.estimates[0]).abs() < tol
    }
}

/// Order-zero price: futures undiscounted, calls discounted at `p.r`.
pub fn price_vix_order0(inst: &VixInstrument, p: &HestonParams, q: &QuadratureConfig) -> Result<f64> {
    Ok(VixSlice::new(inst.expiry_tau, p.r).prices(&[*inst], p, None, q)?[0])
}

/// First-order price with the `(V3^eps, V1^delta)` multiplier.
pub fn price_vix_first_order(
    inst: &VixInstrument,
    p: &HestonParams,
    cg: &CorrectionGroups,
    q: &QuadratureConfig,
) -> Result<f64> {
    Ok(VixSlice::new(inst.expiry_tau, p.r).prices(&[*inst], p, Some(cg), q)?[0])
}

/// Order-zero inversion integral over the full two-sided contour, evaluated
/// without using conjugate symmetry.
///
/// The real part is the undiscounted expectation and the imaginary part is a
/// quadrature residual that should vanish.
pub fn vix_contour_diagnostic(inst: &VixInstrument, p: &HestonParams, q: &QuadratureConfig) -> Result<Complex64> {
    inst.validate()?;
    p.validate()?;
    let tau = inst.expiry_tau;
    let map = VixMapping::from_params(p)?;
    let v_k = inst.strike.map_or(0.0, |k| ((k * k - map.floor()) / map.theta).max(0.0));
    let contour = Contour::new(q, tau, p, v_k)?;
    let f = |nu: Complex64| -> Result<Complex64> {
        let k = cir_transform_terms(tau, -nu, p)?;
        Ok((k.a + p.v0 * k.b).exp() * vix_payoff_transform(inst, nu, &map)?)
    };
    let value = |nu: Complex64, factor: Complex64| -> Result<(Complex64, Vec<Complex64>)> {
        let upper = f(nu)? * factor / I;
        let lower = f(nu.conj())? * factor.conj() / I;
        Ok((Complex64::new(1.0, 0.0), vec![upper, -I * upper, lower, -I * lower]))
    };
    let s = contour.integrate(q, 4, vix_from_variance(p.v0, &map), value)?;
    // the lower half is traversed towards the real axis
    let (upper, lower) = (Complex64::new(s[0], s[1]), Complex64::new(s[2], s[3]));
    Ok((upper - lower) / (2.0 * PI))
}
