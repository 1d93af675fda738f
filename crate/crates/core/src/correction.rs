//! Linear ODE systems for the first-order correction multipliers.
//!
//! Equity prices pick up a multiplier `1 + h0 + v h1 + v^2 h2` on the Heston
//! integrand with `h0 = f0 + g0`, `h1 = f1 + g1`, `h2 = g2`; VIX prices pick
//! up the analogous multiplier from the h system driven by the CIR exponents.
//! The equity systems are integrated with an exponential collocation scheme
//! that treats the stiff homogeneous part exactly through its closed-form
//! propagator; the VIX system uses classical RK4 on a graded grid. Both
//! evaluate the closed-form kernel at every stage time.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel::{cir_transform_terms, equity_cf_terms, CirTransformTerms, EquityCfTerms, HestonParams};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// First-order group parameters. The two VIX parameters are views of the
/// shared equity entries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorrectionGroups {
    pub v12_eps: f64,
    pub v21_eps: f64,
    pub v03_eps: f64,
    pub v10_eta_delta: f64,
    pub v01_eta_delta: f64,
    pub v10_rho_delta: f64,
    pub v01_rho_delta: f64,
}

impl CorrectionGroups {
    pub const NAMES: [&'static str; 7] =
        ["v12_eps", "v21_eps", "v03_eps", "v10_eta_delta", "v01_eta_delta", "v10_rho_delta", "v01_rho_delta"];

    pub fn zero() -> Self {
        Self::default()
    }

    /// Fast VIX parameter, identical to the equity `v03_eps`.
    pub fn vix_v3_eps(&self) -> f64 {
        self.v03_eps
    }

    /// Slow VIX parameter, identical to the equity `v01_eta_delta`.
    pub fn vix_v1_delta(&self) -> f64 {
        self.v01_eta_delta
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.v12_eps,
            self.v21_eps,
            self.v03_eps,
            self.v10_eta_delta,
            self.v01_eta_delta,
            self.v10_rho_delta,
            self.v01_rho_delta,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        CorrectionGroups {
            v12_eps: a[0],
            v21_eps: a[1],
            v03_eps: a[2],
            v10_eta_delta: a[3],
            v01_eta_delta: a[4],
            v10_rho_delta: a[5],
            v01_rho_delta: a[6],
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_array(self.to_array().map(|x| k * x))
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|&x| x == 0.0)
    }

    fn fast_zero(&self) -> bool {
        self.v12_eps == 0.0 && self.v21_eps == 0.0 && self.v03_eps == 0.0
    }

    fn slow_zero(&self) -> bool {
        self.v10_eta_delta == 0.0 && self.v01_eta_delta == 0.0 && self.v10_rho_delta == 0.0 && self.v01_rho_delta == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("non-finite correction group parameter".into()))
        }
    }
}

/// Which right-hand side to use for the slow equity system.
///
/// `Derived` follows from applying the slow operator to the Heston
/// transform, including the `D`-weighted mixed-derivative terms and the
/// `2 kappa m g2` drift feed. `AsPrinted` is the variant without those
/// terms; it is kept so the PDE-residual test can show which one solves the
/// transformed slow-scale equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlowSystemForm {
    #[default]
    Derived,
    AsPrinted,
}

/// Equity correction functions at one (tau, xi).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EquityCorrections {
    pub f0: Complex64,
    pub f1: Complex64,
    pub g0: Complex64,
    pub g1: Complex64,
    pub g2: Complex64,
}

impl EquityCorrections {
    /// `1 + h0 + v h1 + v^2 h2`.
    pub fn multiplier(&self, v: f64) -> Complex64 {
        1.0 + self.f0 + self.g0 + v * (self.f1 + self.g1) + v * v * self.g2
    }
}

/// VIX correction functions at one (tau, nu).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VixCorrections {
    pub h0: Complex64,
    pub h1: Complex64,
    pub h2: Complex64,
}

impl VixCorrections {
    pub fn multiplier(&self, v: f64) -> Complex64 {
        1.0 + self.h0 + v * self.h1 + v * v * self.h2
    }
}

/// Baseline RK4 step count for a maturity.
pub fn default_steps(tau: f64) -> usize {
    ((tau * 512.0).ceil() as usize).max(64)
}

/// Hard cap on the number of RK4 steps per solve.
const MAX_STEPS: usize = 1 << 20;

#[cfg(test)]
/// Uniform grid of `steps` intervals, refined so that `|rate| h <= 16 / steps`.
///
/// With the default 64-step floor this keeps `|lambda h| <= 1/4`, well inside
/// the RK4 stability region even when the decay rate grows with frequency.
fn uniform_grid(tau: f64, steps: usize, rate: f64) -> Vec<f64> {
    let stiff = (rate * tau * steps as f64 / 16.0).ceil() as usize;
    let n = steps.max(stiff).clamp(1, MAX_STEPS);
    let h = tau / n as f64;
    (0..=n).map(|k| if k == n { tau } else { k as f64 * h }).collect()
}

/// Graded grid: steps grow with the local decay rate `rate(t)`, capped at `tau / steps`.
fn graded_grid(tau: f64, steps: usize, rate: impl Fn(f64) -> f64) -> Vec<f64> {
    let h_max = tau / steps as f64;
    let scale = 16.0 / steps as f64;
    let mut grid = vec![0.0];
    let mut t = 0.0;
    while t < tau && grid.len() <= MAX_STEPS {
        let mut h = (scale / rate(t).max(1e-300)).min(h_max);
        // the rate may grow across the step; check the far end once
        h = h.min(scale / rate(t + h).max(1e-300)).max(tau * 1e-15);
        t = if t + h >= tau * (1.0 - 1e-12) { tau } else { t + h };
        grid.push(t);
    }
    grid
}

fn rk4<const N: usize, K>(
    grid: &[f64],
    coeff: impl Fn(f64) -> Result<K>,
    rhs: impl Fn(&K, &[Complex64; N]) -> [Complex64; N],
) -> Result<[Complex64; N]> {
    let mut y = [ZERO; N];
    if grid.len() < 2 {
        return Ok(y);
    }
    let axpy = |y: &[Complex64; N], k: &[Complex64; N], s: f64| {
        let mut out = *y;
        for i in 0..N {
            out[i] += s * k[i];
        }
        out
    };
    let mut c_start = coeff(grid[0])?;
    for w in grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        let c_mid = coeff(t + 0.5 * h)?;
        let c_end = coeff(w[1])?;
        let k1 = rhs(&c_start, &y);
        let k2 = rhs(&c_mid, &axpy(&y, &k1, 0.5 * h));
        let k3 = rhs(&c_mid, &axpy(&y, &k2, 0.5 * h));
        let k4 = rhs(&c_end, &axpy(&y, &k3, h));
        for i in 0..N {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        c_start = c_end;
    }
    Ok(y)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("tau must be nonnegative, got {tau}")))
    }
}

/// Inhomogeneous terms of the equity systems at one stage time.
struct EquitySources {
    /// Source of the f1 equation.
    fast: Complex64,
    /// Source of the g2 equation.
    slow2: Complex64,
    /// Source of the g1 equation, excluding the g2 feed.
    slow1: Complex64,
    /// Coefficient of g2 in the g1 equation.
    feed: f64,
}

fn equity_sources(
    k: &EquityCfTerms,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    form: SlowSystemForm,
) -> EquitySources {
    let eta2 = p.eta_bar * p.eta_bar;
    let km = p.kappa * p.m;
    let d = k.d;
    let fast = -I * xi * cg.v12_eps * d * d - xi * xi * cg.v21_eps * d + cg.v03_eps * d * d * d;
    let (ve10, ve01) = (cg.v10_eta_delta, cg.v01_eta_delta);
    let (vr10, vr01) = (cg.v10_rho_delta, cg.v01_rho_delta);
    let (slow2, slow1, feed) = match form {
        SlowSystemForm::Derived => {
            let s1 = (ve01 * d - I * xi * ve10) * k.dd_deta + (vr01 * d - I * xi * vr10) * k.dd_drho;
            let s0 = -I * xi * ve10 * k.dc_deta - I * xi * vr10 * k.dc_drho
                + ve01 * (k.dd_deta + d * k.dc_deta)
                + vr01 * (k.dd_drho + d * k.dc_drho);
            (s1, s0, 2.0 * km + eta2)
        }
        SlowSystemForm::AsPrinted => {
            let s1 = (ve01 - I * xi * ve10) * k.dd_deta + (vr01 - I * xi * vr10) * k.dd_drho;
            let s0 = (ve01 - I * xi * ve10) * k.dc_deta
                + (vr01 - I * xi * vr10) * k.dc_drho
                + ve01 * k.dd_deta
                + vr01 * k.dd_drho;
            (s1, s0, eta2)
        }
    };
    EquitySources { fast, slow2, slow1, feed }
}

/// Right-hand side of the combined equity system `[f0, f1, g0, g1, g2]`.
#[cfg(test)]
fn equity_rhs(
    k: &EquityCfTerms,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    form: SlowSystemForm,
    y: &[Complex64; 5],
) -> [Complex64; 5] {
    let km = p.kappa * p.m;
    let beta = p.kappa + I * p.rho_bar * p.eta_bar * xi;
    let lin = p.eta_bar * p.eta_bar * k.d - beta;
    let s = equity_sources(k, xi, p, cg, form);
    [km * y[1], lin * y[1] + s.fast, km * y[3], lin * y[3] + s.feed * y[4] + s.slow1, 2.0 * lin * y[4] + s.slow2]
}

/// Collocation nodes on [0, 1] (Gauss-Lobatto, four points) with the
/// monomial coefficients of their Lagrange basis: `L_j(x) = sum_n a[n][j] x^n`.
struct Lobatto {
    c: [f64; 4],
    a: [[f64; 4]; 4],
}

fn lobatto() -> &'static Lobatto {
    static NODES: std::sync::OnceLock<Lobatto> = std::sync::OnceLock::new();
    NODES.get_or_init(|| {
        let r = 0.5 / 5f64.sqrt();
        let c = [0.0, 0.5 - r, 0.5 + r, 1.0];
        // invert the Vandermonde matrix v[i][n] = c_i^n by Gauss-Jordan
        let mut v = [[0.0; 8]; 4];
        for (i, (row, ci)) in v.iter_mut().zip(c).enumerate() {
            for (n, e) in row[..4].iter_mut().enumerate() {
                *e = ci.powi(n as i32);
            }
            row[4 + i] = 1.0;
        }
        for col in 0..4 {
            let piv = (col..4).max_by(|&x, &y| v[x][col].abs().total_cmp(&v[y][col].abs())).unwrap();
            v.swap(col, piv);
            let scale = v[col][col];
            for e in v[col].iter_mut() {
                *e /= scale;
            }
            let pivot_row = v[col];
            for (r, row) in v.iter_mut().enumerate() {
                if r != col {
                    let f = row[col];
                    for (e, p) in row.iter_mut().zip(pivot_row) {
                        *e -= f * p;
                    }
                }
            }
        }
        // inverse rows are monomial degrees, columns are nodes
        let mut a = [[0.0; 4]; 4];
        for n in 0..4 {
            for j in 0..4 {
                a[n][j] = v[n][4 + j];
            }
        }
        Lobatto { c, a }
    })
}

const FACT: [f64; 4] = [1.0, 1.0, 2.0, 6.0];
const INV_FACT: [f64; 5] = [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0];

/// `Int_0^theta exp(-z (theta - x)) x^n dx` for n = 0..3, with `Re z >= 0`.
fn exp_moments(theta: f64, z: Complex64) -> [Complex64; 4] {
    let w = z * theta;
    let mut m = [ZERO; 4];
    if w.norm_sqr() <= 1.0 {
        // M_n = n! theta^(n+1) phi_(n+1)(-w) with phi_k(x) = sum_j x^j / (j+k)!;
        // phi_4 by series, then phi_k = 1/k! + x phi_(k+1) downwards
        let x = -w;
        let mut term = Complex64::new(1.0 / 24.0, 0.0);
        let mut phi = term;
        for j in 1..24 {
            term *= x / (j + 4) as f64;
            phi += term;
            if term.l1_norm() < 1e-17 * phi.l1_norm() {
                break;
            }
        }
        let mut phis = [ZERO; 4];
        phis[3] = phi;
        for k in (0..3).rev() {
            phis[k] = INV_FACT[k + 1] + x * phis[k + 1];
        }
        let mut scale = theta;
        for n in 0..4 {
            m[n] = FACT[n] * scale * phis[n];
            scale *= theta;
        }
    } else {
        m[0] = (1.0 - (-w).exp()) / z;
        for n in 1..4 {
            m[n] = (theta.powi(n as i32) - n as f64 * m[n - 1]) / z;
        }
    }
    m
}

/// `w[i][j] = Int_0^{c_{i+1}} exp(-z (c_{i+1} - x)) L_j(x) dx`.
fn collocation_weights(z: Complex64) -> [[Complex64; 4]; 3] {
    let lob = lobatto();
    let mut w = [[ZERO; 4]; 3];
    for (i, row) in w.iter_mut().enumerate() {
        let m = exp_moments(lob.c[i + 1], z);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (0..4).map(|n| lob.a[n][j] * m[n]).sum();
        }
    }
    w
}

/// Advances `y' = lam(t) y + N(t)` over one step whose homogeneous propagator
/// from s to t is `exp(-z (t - s) / h) rho(s) / rho(t)`. `q[j] = rho N` at the
/// nodes; returns y at the three later nodes.
fn collocation_step(
    y0: Complex64,
    decay: &[Complex64; 3],
    rho: &[Complex64; 4],
    q: &[Complex64; 4],
    w: &[[Complex64; 4]; 3],
    h: f64,
) -> [Complex64; 3] {
    let mut out = [ZERO; 3];
    for i in 0..3 {
        let integral: Complex64 = (0..4).map(|j| w[i][j] * q[j]).sum();
        out[i] = (decay[i] * rho[0] * y0 + h * integral) / rho[i + 1];
    }
    out
}

/// Grid for the equity systems: fine in the initial layer of width `1/|d|`,
/// growing geometrically as `exp(-d t)` dies out, never wider than `8 tau / steps`.
fn layer_grid(tau: f64, steps: usize, rate: f64, decay: f64) -> Vec<f64> {
    let alpha = 6.0 / steps as f64;
    let h_max = 8.0 * tau / steps as f64;
    let mut grid = vec![0.0];
    let mut t = 0.0;
    while t < tau && grid.len() <= MAX_STEPS {
        let grow = (0.25 * decay * t).min(700.0).exp();
        let h = (alpha * grow / rate).min(h_max).max(tau * 1e-15);
        t = if t + h >= tau * (1.0 - 1e-12) { tau } else { t + h };
        grid.push(t);
    }
    grid
}

/// Exponential collocation for the equity systems.
///
/// With `R(t) = 1 - g exp(-d t)` the homogeneous solution of
/// `y' = (eta^2 D - beta) y` is `exp(-d (t - s)) R(s)^2 / R(t)^2`, so the stiff
/// part is exact and only the smooth sources are interpolated.
fn equity_collocation(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    form: SlowSystemForm,
    steps: usize,
) -> Result<[Complex64; 5]> {
    let eta2 = p.eta_bar * p.eta_bar;
    let km = p.kappa * p.m;
    let beta = p.kappa + I * p.rho_bar * p.eta_bar * xi;
    let s = xi * xi - I * xi;
    let d = (beta * beta + eta2 * s).sqrt();
    let b = beta + d;
    let g = -eta2 * s / (b * b);
    let r_at = |t: f64| 1.0 - g * (-d * t).exp();

    let grid = layer_grid(tau, steps.max(1), beta.norm().max(d.norm()), d.re.max(0.0));
    let lob = lobatto();
    let w0 = collocation_weights(ZERO);
    let one = [Complex64::new(1.0, 0.0); 4];
    let unit = [Complex64::new(1.0, 0.0); 3];

    let mut y = [ZERO; 5];
    let mut k_start = equity_cf_terms(grid[0], xi, p)?;
    let mut r_start = r_at(grid[0]);
    for win in grid.windows(2) {
        let (t0, h) = (win[0], win[1] - win[0]);
        let mut terms = [k_start; 4];
        let mut r1 = [r_start; 4];
        for j in 1..4 {
            let t = if j == 3 { win[1] } else { t0 + lob.c[j] * h };
            terms[j] = equity_cf_terms(t, xi, p)?;
            r1[j] = r_at(t);
        }
        let rho1 = r1.map(|r| r * r);
        let rho2 = rho1.map(|r| r * r);
        let src: Vec<EquitySources> = terms.iter().map(|k| equity_sources(k, xi, p, cg, form)).collect();
        let z1 = d * h;
        let w1 = collocation_weights(z1);
        let w2 = collocation_weights(2.0 * z1);
        let decay1: [Complex64; 3] = std::array::from_fn(|i| (-z1 * lob.c[i + 1]).exp());
        let decay2 = decay1.map(|e| e * e);

        // fast chain: f1 then f0
        let q: [Complex64; 4] = std::array::from_fn(|j| rho1[j] * src[j].fast);
        let f1 = collocation_step(y[1], &decay1, &rho1, &q, &w1, h);
        let f1_nodes = [y[1], f1[0], f1[1], f1[2]];
        let q: [Complex64; 4] = std::array::from_fn(|j| km * f1_nodes[j]);
        let f0 = collocation_step(y[0], &unit, &one, &q, &w0, h);

        // slow chain: g2, g1, g0
        let q: [Complex64; 4] = std::array::from_fn(|j| rho2[j] * src[j].slow2);
        let g2 = collocation_step(y[4], &decay2, &rho2, &q, &w2, h);
        let g2_nodes = [y[4], g2[0], g2[1], g2[2]];
        let q: [Complex64; 4] = std::array::from_fn(|j| rho1[j] * (src[j].feed * g2_nodes[j] + src[j].slow1));
        let g1 = collocation_step(y[3], &decay1, &rho1, &q, &w1, h);
        let g1_nodes = [y[3], g1[0], g1[1], g1[2]];
        let q: [Complex64; 4] = std::array::from_fn(|j| km * g1_nodes[j]);
        let g0 = collocation_step(y[2], &unit, &one, &q, &w0, h);

        y = [f0[2], f1[2], g0[2], g1[2], g2[2]];
        k_start = terms[3];
        r_start = r1[3];
    }
    Ok(y)
}

/// Solves the fast and slow equity systems together.
pub fn equity_corrections(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
) -> Result<EquityCorrections> {
    equity_corrections_with(tau, xi, p, cg, SlowSystemForm::Derived, default_steps(tau))
}

pub fn equity_corrections_with(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    form: SlowSystemForm,
    steps: usize,
) -> Result<EquityCorrections> {
    check_tau(tau)?;
    if cg.is_zero() {
        return Ok(EquityCorrections::default());
    }
    let y = equity_collocation(tau, xi, p, cg, form, steps)?;
    Ok(EquityCorrections { f0: y[0], f1: y[1], g0: y[2], g1: y[3], g2: y[4] })
}

/// Fast equity system; returns `(f0, f1)`.
pub fn solve_f_system(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
) -> Result<(Complex64, Complex64)> {
    let fast = CorrectionGroups { v12_eps: cg.v12_eps, v21_eps: cg.v21_eps, v03_eps: cg.v03_eps, ..Default::default() };
    if fast.fast_zero() {
        check_tau(tau)?;
        return Ok((ZERO, ZERO));
    }
    let e = equity_corrections(tau, xi, p, &fast)?;
    Ok((e.f0, e.f1))
}

/// Slow equity system; returns `(g0, g1, g2)`.
pub fn solve_g_system(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
) -> Result<(Complex64, Complex64, Complex64)> {
    solve_g_system_with(tau, xi, p, cg, SlowSystemForm::Derived, default_steps(tau))
}

pub fn solve_g_system_with(
    tau: f64,
    xi: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    form: SlowSystemForm,
    steps: usize,
) -> Result<(Complex64, Complex64, Complex64)> {
    let slow = CorrectionGroups { v12_eps: 0.0, v21_eps: 0.0, v03_eps: 0.0, ..*cg };
    if slow.slow_zero() {
        check_tau(tau)?;
        return Ok((ZERO, ZERO, ZERO));
    }
    let e = equity_corrections_with(tau, xi, p, &slow, form, steps)?;
    Ok((e.g0, e.g1, e.g2))
}

fn vix_rhs(k: &CirTransformTerms, p: &HestonParams, v3: f64, v1: f64, y: &[Complex64; 3]) -> [Complex64; 3] {
    let eta2 = p.eta_bar * p.eta_bar;
    let km = p.kappa * p.m;
    let b = k.b;
    let lin = -p.kappa + eta2 * b;
    let h2 = 2.0 * lin * y[2] + v1 * b * k.db_deta;
    let h1 = lin * y[1] + (2.0 * km + eta2) * y[2] + v3 * b * b * b + v1 * (k.db_deta + b * k.da_deta);
    let h0 = km * y[1];
    [h0, h1, h2]
}

/// VIX system at exponential-moment frequency `u` (the pricer passes `u = -nu`).
pub fn solve_hv_system(tau: f64, u: Complex64, p: &HestonParams, cg: &CorrectionGroups) -> Result<VixCorrections> {
    solve_hv_system_with(tau, u, p, cg, default_steps(tau))
}

pub fn solve_hv_system_with(
    tau: f64,
    u: Complex64,
    p: &HestonParams,
    cg: &CorrectionGroups,
    steps: usize,
) -> Result<VixCorrections> {
    check_tau(tau)?;
    let (v3, v1) = (cg.vix_v3_eps(), cg.vix_v1_delta());
    if v3 == 0.0 && v1 == 0.0 {
        return Ok(VixCorrections::default());
    }
    // rate of the h2 equation: 2 |eta^2 B(t) - kappa|, large only in an initial layer
    let (kappa, eta2) = (p.kappa, p.eta_bar * p.eta_bar);
    let rate = |t: f64| {
        let c = eta2 * (-(-kappa * t).exp_m1()) / (2.0 * kappa);
        let b = u * (-kappa * t).exp() / (1.0 - u * c);
        2.0 * (eta2 * b - kappa).norm()
    };
    let grid = graded_grid(tau, steps.max(1), rate);
    let y = rk4(&grid, |t| cir_transform_terms(t, u, p), |k, y| vix_rhs(k, p, v3, v1, y))?;
    Ok(VixCorrections { h0: y[0], h1: y[1], h2: y[2] })
}
