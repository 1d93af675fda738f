//! Monte Carlo reference engine.
//!
//! Plain Heston paths validate the order-zero pricers. Full multiscale paths
//! over (S, V, Y, Z) validate the first-order formulas, with the group
//! parameters computed from a concrete model specification by solving the
//! fast-factor Poisson equations with quadrature.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::correction::CorrectionGroups;
use crate::error::{Error, Result};
use crate::kernel::HestonParams;
use crate::quadrature::{GaussLegendre, QuadratureConfig};
use crate::spx::{price_first_order, price_order0, EquityOption};
use crate::vix::{price_vix_first_order, price_vix_order0, vix_from_variance, VixInstrument, VixMapping};

/// Minimum time steps per year for any simulation.
pub const MIN_STEPS_PER_YEAR: f64 = 250.0;
/// The fast factor needs at least this many steps per unit of `epsilon` per year.
pub const FAST_STEPS_FACTOR: f64 = 50.0;

pub type Curve = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Surface = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Simulation size and seeding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Total number of paths; even when `antithetic` is set.
    pub paths: usize,
    pub steps_per_year: f64,
    pub seed: u64,
    pub antithetic: bool,
}

impl McConfig {
    pub fn new(paths: usize, steps_per_year: f64, seed: u64) -> Self {
        McConfig { paths, steps_per_year, seed, antithetic: true }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if self.paths < 2 || (self.antithetic && !self.paths.is_multiple_of(2)) {
            return Err(Error::InvalidParameter(format!(
                "need at least two paths, and an even count with antithetics; got {}",
                self.paths
            )));
        }
        if !(self.steps_per_year >= MIN_STEPS_PER_YEAR) {
            return Err(Error::InvalidParameter(format!(
                "need at least {MIN_STEPS_PER_YEAR} steps per year, got {}",
                self.steps_per_year
            )));
        }
        Ok(())
    }

    fn grid(&self, horizon: f64) -> (usize, f64) {
        let n = (horizon * self.steps_per_year - 1e-9).ceil().max(1.0) as usize;
        (n, horizon / n as f64)
    }
}

/// Sample mean of a payoff with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over independent samples divided by the
    /// square root of their count. Antithetic pairs count as one sample.
    pub standard_error: f64,
    pub paths: usize,
    pub steps_per_year: f64,
    pub seed: u64,
}

impl McEstimate {
    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn contains(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.standard_error
    }
}

/// Terminal state of one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalState {
    pub spot: f64,
    /// Truncated variance `max(V_T, 0)`.
    pub variance: f64,
}

impl TerminalState {
    /// VIX level implied by the terminal variance.
    pub fn vix(&self, map: &VixMapping) -> f64 {
        vix_from_variance(self.variance, map)
    }
}

/// Terminal states in path order; antithetic partners are adjacent.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub states: Vec<TerminalState>,
    pub config: McConfig,
}

impl PathSet {
    /// Estimates `E[f(state)]`.
    pub fn estimate(&self, f: impl Fn(&TerminalState) -> f64 + Sync) -> McEstimate {
        let per_path: Vec<f64> = self.states.iter().map(f).collect();
        self.summarize(&per_path)
    }

    /// Estimates `E[f(state)]` with a control: the per-path sample is
    /// `f(path) - f(control path) + control_mean`, an unbiased estimator
    /// whenever `control_mean` is the exact control expectation.
    pub fn estimate_with_control(
        &self,
        control: &PathSet,
        control_mean: f64,
        f: impl Fn(&TerminalState) -> f64 + Sync,
    ) -> Result<McEstimate> {
        if control.states.len() != self.states.len() || control.config != self.config {
            return Err(Error::InvalidParameter("control paths do not match the simulated paths".into()));
        }
        let per_path: Vec<f64> =
            self.states.iter().zip(&control.states).map(|(a, b)| f(a) - f(b) + control_mean).collect();
        Ok(self.summarize(&per_path))
    }

    fn summarize(&self, per_path: &[f64]) -> McEstimate {
        let samples: Vec<f64> = if self.config.antithetic {
            per_path.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect()
        } else {
            per_path.to_vec()
        };
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        McEstimate {
            mean,
            standard_error: (var / n).sqrt(),
            paths: per_path.len(),
            steps_per_year: self.config.steps_per_year,
            seed: self.config.seed,
        }
    }
}

/// Independent generator for path pair `index`.
fn substream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Simulates path groups in parallel; each group owns its own substream, so
/// results do not depend on scheduling.
fn run_groups<const N: usize>(
    cfg: &McConfig,
    path: impl Fn(&mut ChaCha8Rng) -> [TerminalState; N] + Sync,
) -> Vec<[TerminalState; N]> {
    let groups = if cfg.antithetic { cfg.paths / 2 } else { cfg.paths };
    (0..groups).into_par_iter().map(|i| path(&mut substream(cfg.seed, i))).collect()
}

/// Flattens antithetic pairs `[first, second]` at offset `at` of each group.
fn collect_paths<const N: usize>(groups: &[[TerminalState; N]], at: usize, cfg: &McConfig) -> PathSet {
    let states = if cfg.antithetic {
        groups.iter().flat_map(|g| [g[at], g[at + 1]]).collect()
    } else {
        groups.iter().map(|g| g[at]).collect()
    };
    PathSet { states, config: *cfg }
}

/// Heston paths with constant vol-of-vol `p.eta_bar` and correlation
/// `p.rho_bar`, by Euler full truncation.
///
/// The log-price is advanced exactly given the variance frozen over each
/// step; the truncated variance `max(V, 0)` drives both drift and diffusion.
pub fn simulate_heston(p: &HestonParams, spot: f64, horizon: f64, cfg: &McConfig) -> Result<PathSet> {
    // a zero vol-of-vol is allowed here: the variance then follows its mean ODE
    p.with_eta_bar(p.eta_bar.max(f64::MIN_POSITIVE)).validate()?;
    if p.eta_bar < 0.0 {
        return Err(Error::InvalidParameter(format!("eta_bar must be nonnegative, got {}", p.eta_bar)));
    }
    cfg.validate(horizon)?;
    if !(spot > 0.0) {
        return Err(Error::InvalidParameter(format!("spot must be positive, got {spot}")));
    }
    let (n, dt) = cfg.grid(horizon);
    let sdt = dt.sqrt();
    let rho_c = (1.0 - p.rho_bar * p.rho_bar).sqrt();
    let p = *p;
    let groups = run_groups(cfg, move |rng| {
        let mut x = [spot.ln(); 2];
        let mut v = [p.v0; 2];
        for _ in 0..n {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let vp = v[k].max(0.0);
                let sv = vp.sqrt();
                x[k] += (p.r - p.q - 0.5 * vp) * dt + sv * sdt * sign * z1;
                v[k] += p.kappa * (p.m - vp) * dt + p.eta_bar * sv * sdt * sign * (p.rho_bar * z1 + rho_c * z2);
            }
        }
        [0, 1].map(|k| TerminalState { spot: x[k].exp(), variance: v[k].max(0.0) })
    });
    Ok(collect_paths(&groups, 0, cfg))
}

/// Gaussian invariant law of the fast factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLaw {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianLaw {
    pub fn pdf(&self, y: f64) -> f64 {
        let u = (y - self.mean) / self.sd;
        (-0.5 * u * u).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Concrete multiscale model: vol-of-vol `eta(y, z)`, fast factor with
/// coefficients `alpha, beta` and Gaussian invariant law, slow factor with
/// coefficients `c, g`, and correlations of `(W^S, W^V, W^Y, W^Z)`.
#[derive(Clone)]
pub struct SvvSpec {
    pub eta: Surface,
    pub alpha: Curve,
    pub beta: Curve,
    pub fast_law: GaussianLaw,
    pub c: Curve,
    pub g: Curve,
    pub correlation: [[f64; 4]; 4],
    pub epsilon: f64,
    pub delta: f64,
    cholesky: [[f64; 4]; 4],
}

impl fmt::Debug for SvvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SvvSpec")
            .field("fast_law", &self.fast_law)
            .field("correlation", &self.correlation)
            .field("epsilon", &self.epsilon)
            .field("delta", &self.delta)
            .finish_non_exhaustive()
    }
}

/// Index of each Brownian motion in the correlation matrix.
pub const S: usize = 0;
pub const V: usize = 1;
pub const Y: usize = 2;
pub const Z: usize = 3;

impl SvvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        eta: Surface,
        alpha: Curve,
        beta: Curve,
        fast_law: GaussianLaw,
        c: Curve,
        g: Curve,
        correlation: [[f64; 4]; 4],
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && delta > 0.0 && epsilon.is_finite() && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("scales must be positive, got eps {epsilon}, delta {delta}")));
        }
        if !(fast_law.sd > 0.0 && fast_law.mean.is_finite()) {
            return Err(Error::InvalidParameter("invariant law needs a positive standard deviation".into()));
        }
        let cholesky = cholesky(&correlation)?;
        let spec = SvvSpec { eta, alpha, beta, fast_law, c, g, correlation, epsilon, delta, cholesky };
        spec.check_invariant_law()?;
        Ok(spec)
    }

    /// Reference specification: OU fast factor `alpha = -y`, `beta = sqrt 2`
    /// with standard normal invariant law; slow factor `c = 1 - z`, `g = 1`;
    /// `eta = z (1 + tanh(y) / 4)`.
    pub fn reference(epsilon: f64, delta: f64) -> Result<Self> {
        let mut rho = [[0.0; 4]; 4];
        for (i, row) in rho.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut set = |i: usize, j: usize, x: f64| {
            rho[i][j] = x;
            rho[j][i] = x;
        };
        set(S, V, -0.5);
        set(S, Y, -0.2);
        set(V, Y, 0.2);
        set(S, Z, -0.2);
        set(V, Z, 0.2);
        SvvSpec::new(
            Arc::new(|y: f64, z: f64| z * (1.0 + 0.25 * y.tanh())),
            Arc::new(|y: f64| -y),
            Arc::new(|_| std::f64::consts::SQRT_2),
            GaussianLaw { mean: 0.0, sd: 1.0 },
            Arc::new(|z: f64| 1.0 - z),
            Arc::new(|_| 1.0),
            rho,
            epsilon,
            delta,
        )
    }

    /// Same functions and correlations at other scales.
    pub fn with_scales(&self, epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && delta > 0.0) {
            return Err(Error::InvalidParameter(format!("scales must be positive, got eps {epsilon}, delta {delta}")));
        }
        Ok(SvvSpec { epsilon, delta, ..self.clone() })
    }

    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.correlation[i][j]
    }

    /// Zero probability flux `alpha pi = (beta^2 pi)' / 2` at a few points.
    fn check_invariant_law(&self) -> Result<()> {
        let law = self.fast_law;
        for k in -3..=3 {
            let y = law.mean + k as f64 * law.sd;
            let h = 1e-4 * law.sd;
            let b2 = |y: f64| (self.beta)(y).powi(2);
            let db2 = (b2(y + h) - b2(y - h)) / (2.0 * h);
            let expected = 0.5 * db2 - 0.5 * b2(y) * (y - law.mean) / (law.sd * law.sd);
            let got = (self.alpha)(y);
            if (got - expected).abs() > 1e-6 * (1.0 + expected.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "fast drift {got} at y = {y} is not stationary for the stated invariant law (expected {expected})"
                )));
            }
        }
        Ok(())
    }
}

fn cholesky(a: &[[f64; 4]; 4]) -> Result<[[f64; 4]; 4]> {
    for (i, row) in a.iter().enumerate() {
        if row[i] != 1.0 {
            return Err(Error::InvalidParameter(format!("correlation diagonal entry {i} is {}", row[i])));
        }
        for (j, &aij) in row.iter().enumerate() {
            if aij != a[j][i] || aij.abs() > 1.0 {
                return Err(Error::InvalidParameter(format!("correlation entry ({i}, {j}) is invalid")));
            }
        }
    }
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 1e-12) {
                    return Err(Error::InvalidParameter("correlation matrix is not positive-definite".into()));
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Initial state of the fast and slow factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorState {
    pub fast: f64,
    pub slow: f64,
}

/// Full multiscale paths by correlated Euler steps over (S, V, Y, Z).
///
/// `p` supplies `kappa, m, v0, r, q`; its `eta_bar` and `rho_bar` are unused.
/// Y and Z run on the variance clock exactly as written in their SDEs.
pub fn simulate_svv(
    spec: &SvvSpec,
    p: &HestonParams,
    spot: f64,
    start: FactorState,
    horizon: f64,
    cfg: &McConfig,
) -> Result<PathSet> {
    let groups = svv_groups(spec, p, spot, start, horizon, cfg, None)?;
    Ok(collect_paths(&groups, 0, cfg))
}

/// Multiscale paths together with Heston control paths driven by the same
/// `W^S` and `W^V` increments.
///
/// The control has constant vol-of-vol `control_eta` and correlation
/// `rho_SV`, so its exact price is an order-zero price with those values.
pub fn simulate_svv_with_control(
    spec: &SvvSpec,
    p: &HestonParams,
    spot: f64,
    start: FactorState,
    horizon: f64,
    control_eta: f64,
    cfg: &McConfig,
) -> Result<(PathSet, PathSet)> {
    if !(control_eta > 0.0) {
        return Err(Error::InvalidParameter(format!("control vol-of-vol must be positive, got {control_eta}")));
    }
    let groups = svv_groups(spec, p, spot, start, horizon, cfg, Some(control_eta))?;
    Ok((collect_paths(&groups, 0, cfg), collect_paths(&groups, 2, cfg)))
}

fn svv_groups(
    spec: &SvvSpec,
    p: &HestonParams,
    spot: f64,
    start: FactorState,
    horizon: f64,
    cfg: &McConfig,
    control_eta: Option<f64>,
) -> Result<Vec<[TerminalState; 4]>> {
    p.validate()?;
    cfg.validate(horizon)?;
    let required = FAST_STEPS_FACTOR / spec.epsilon;
    if cfg.steps_per_year < required {
        return Err(Error::UnresolvedFastScale { steps_per_year: cfg.steps_per_year, required });
    }
    if !(spot > 0.0) {
        return Err(Error::InvalidParameter(format!("spot must be positive, got {spot}")));
    }
    let (n, dt) = cfg.grid(horizon);
    let sdt = dt.sqrt();
    let l = spec.cholesky;
    let (eps, del) = (spec.epsilon, spec.delta);
    let spec = spec.clone();
    let p = *p;
    Ok(run_groups(cfg, move |rng| {
        let mut x = [spot.ln(); 4];
        let mut v = [p.v0; 4];
        let mut y = [start.fast; 2];
        let mut z = [start.slow; 2];
        for _ in 0..n {
            let xi: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let dw: [f64; 4] = std::array::from_fn(|i| sdt * (0..=i).map(|k| l[i][k] * xi[k]).sum::<f64>());
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let vp = v[k].max(0.0);
                let sv = vp.sqrt();
                let (yk, zk) = (y[k], z[k]);
                let eta = (spec.eta)(yk, zk);
                x[k] += (p.r - p.q - 0.5 * vp) * dt + sv * sign * dw[S];
                v[k] += p.kappa * (p.m - vp) * dt + eta * sv * sign * dw[V];
                y[k] += vp / eps * (spec.alpha)(yk) * dt + (vp / eps).sqrt() * (spec.beta)(yk) * sign * dw[Y];
                z[k] += vp * del * (spec.c)(zk) * dt + (del * vp).sqrt() * (spec.g)(zk) * sign * dw[Z];
            }
            if let Some(eta) = control_eta {
                for (k, sign) in [(2, 1.0), (3, -1.0)] {
                    let vp = v[k].max(0.0);
                    let sv = vp.sqrt();
                    x[k] += (p.r - p.q - 0.5 * vp) * dt + sv * sign * dw[S];
                    v[k] += p.kappa * (p.m - vp) * dt + eta * sv * sign * dw[V];
                }
            }
        }
        std::array::from_fn(|k| TerminalState { spot: x[k].exp(), variance: v[k].max(0.0) })
    }))
}

/// Discretization of the fast-factor averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonMethod {
    /// Uniform trapezoid grid with the Poisson derivative from a cumulative
    /// integral of the source against the invariant density.
    Trapezoid,
    /// Gauss-Hermite averages of the integrated-by-parts form, with inner
    /// integrals by Gauss-Legendre.
    GaussHermite,
}

/// Averages of the Poisson solutions entering the group parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonAverages {
    /// `<eta>`
    pub eta_mean: f64,
    /// `<eta^2>`
    pub eta_sq_mean: f64,
    /// `<beta phi'>`, `<eta beta phi'>`, `<beta psi'>`, `<eta beta psi'>`
    pub beta_phi: f64,
    pub eta_beta_phi: f64,
    pub beta_psi: f64,
    pub eta_beta_psi: f64,
}

/// Group parameters implied by a specification at slow level `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecGroups {
    pub eta_bar: f64,
    pub rho_bar: f64,
    pub groups: CorrectionGroups,
    pub averages: PoissonAverages,
}

impl SpecGroups {
    /// Effective Heston parameters with the averaged vol-of-vol and correlation.
    pub fn heston(&self, base: &HestonParams) -> HestonParams {
        HestonParams { eta_bar: self.eta_bar, rho_bar: self.rho_bar, ..*base }
    }
}

/// Truncation of the fast-factor integrals in standard deviations.
const TAIL_SDS: f64 = 10.0;
const TRAPEZOID_INTERVALS: usize = 40_000;
const HERMITE_NODES: usize = 160;

/// Group parameters from the fast-factor Poisson equations, by trapezoid.
pub fn group_params_from_spec(spec: &SvvSpec, z: f64) -> Result<SpecGroups> {
    group_params_with(spec, z, PoissonMethod::Trapezoid)
}

pub fn group_params_with(spec: &SvvSpec, z: f64, method: PoissonMethod) -> Result<SpecGroups> {
    let tail = erfc_bound(TAIL_SDS / std::f64::consts::SQRT_2);
    if tail > 1e-10 {
        return Err(Error::QuadratureFailure(format!("tail mass {tail:e} beyond truncation")));
    }
    let avg = poisson_averages(spec, z, method)?;
    if !(avg.eta_sq_mean > 0.0 && avg.eta_mean > 0.0) {
        return Err(Error::InvalidParameter(format!("vol-of-vol must be positive on average at z = {z}")));
    }
    let eta_bar = avg.eta_sq_mean.sqrt();
    let rho_sv = spec.rho(S, V);
    let rho_bar = rho_sv * avg.eta_mean / eta_bar;

    // z-derivatives of the averages from a five-point stencil of eta
    let h = 1e-3 * (1.0 + z.abs());
    let deta = |y: f64| {
        let e = |dz: f64| (spec.eta)(y, z + dz);
        (e(-2.0 * h) - 8.0 * e(-h) + 8.0 * e(h) - e(2.0 * h)) / (12.0 * h)
    };
    let d_eta_mean = average(spec, method, deta);
    let d_eta_sq_mean = average(spec, method, |y| 2.0 * (spec.eta)(y, z) * deta(y));
    let eta_bar_dz = d_eta_sq_mean / (2.0 * eta_bar);
    let rho_bar_dz = rho_sv * (d_eta_mean / eta_bar - avg.eta_mean * eta_bar_dz / (eta_bar * eta_bar));

    let se = spec.epsilon.sqrt();
    let sd = spec.delta.sqrt();
    let gz = (spec.g)(z);
    let groups = CorrectionGroups {
        v12_eps: -se * spec.rho(S, Y) / 2.0 * avg.beta_phi - se * rho_sv * spec.rho(V, Y) * avg.eta_beta_psi,
        v21_eps: -se * rho_sv * spec.rho(S, Y) * avg.beta_psi,
        v03_eps: -se * spec.rho(V, Y) / 2.0 * avg.eta_beta_phi,
        v10_eta_delta: sd * spec.rho(S, Z) * gz * eta_bar_dz,
        v01_eta_delta: sd * spec.rho(V, Z) * gz * avg.eta_mean * eta_bar_dz,
        v10_rho_delta: sd * spec.rho(S, Z) * gz * rho_bar_dz,
        v01_rho_delta: sd * spec.rho(V, Z) * gz * avg.eta_mean * rho_bar_dz,
    };
    groups.validate()?;
    Ok(SpecGroups { eta_bar, rho_bar, groups, averages: avg })
}

/// `<f>` under the invariant law.
fn average(spec: &SvvSpec, method: PoissonMethod, f: impl Fn(f64) -> f64) -> f64 {
    let law = spec.fast_law;
    match method {
        PoissonMethod::Trapezoid => {
            let (a, h) = trapezoid_grid(law);
            (0..=TRAPEZOID_INTERVALS)
                .map(|j| {
                    let y = a + j as f64 * h;
                    let w = if j == 0 || j == TRAPEZOID_INTERVALS { 0.5 } else { 1.0 };
                    w * f(y) * law.pdf(y)
                })
                .sum::<f64>()
                * h
        }
        PoissonMethod::GaussHermite => hermite().iter().map(|&(t, w)| w * f(law.mean + law.sd * t)).sum(),
    }
}

fn trapezoid_grid(law: GaussianLaw) -> (f64, f64) {
    let a = law.mean - TAIL_SDS * law.sd;
    (a, 2.0 * TAIL_SDS * law.sd / TRAPEZOID_INTERVALS as f64)
}

fn poisson_averages(spec: &SvvSpec, z: f64, method: PoissonMethod) -> Result<PoissonAverages> {
    let eta = |y: f64| (spec.eta)(y, z);
    let eta_mean = average(spec, method, eta);
    let eta_sq_mean = average(spec, method, |y| eta(y).powi(2));
    let src_phi = |y: f64| eta(y).powi(2) - eta_sq_mean;
    let src_psi = |y: f64| eta(y) - eta_mean;
    // <beta chi' w> for L0 chi = F, where chi' = 2 / (beta^2 pi) int_{-inf}^y F pi
    let weighted = |src: &dyn Fn(f64) -> f64, w: &dyn Fn(f64) -> f64| -> f64 {
        match method {
            PoissonMethod::Trapezoid => {
                // pi cancels: <beta chi' w> = int 2 w / beta * I(y) dy
                let law = spec.fast_law;
                let (a, h) = trapezoid_grid(law);
                let mut cum = 0.0;
                let mut prev = src(a) * law.pdf(a);
                let mut total = 0.0;
                for j in 1..=TRAPEZOID_INTERVALS {
                    let y = a + j as f64 * h;
                    let cur = src(y) * law.pdf(y);
                    cum += 0.5 * h * (prev + cur);
                    prev = cur;
                    let wt = if j == TRAPEZOID_INTERVALS { 0.5 } else { 1.0 };
                    total += wt * 2.0 * w(y) / (spec.beta)(y) * cum;
                }
                total * h
            }
            PoissonMethod::GaussHermite => {
                // by parts: int h I dy = -<H F> with H(y) = int_mean^y 2 w / beta
                let law = spec.fast_law;
                let gl = legendre32();
                -hermite()
                    .iter()
                    .map(|&(t, wt)| {
                        let y = law.mean + law.sd * t;
                        let big_h = gl.integrate(law.mean, y, |u| 2.0 * w(u) / (spec.beta)(u));
                        wt * big_h * src(y)
                    })
                    .sum::<f64>()
            }
        }
    };
    let one = |_: f64| 1.0;
    let avg = PoissonAverages {
        eta_mean,
        eta_sq_mean,
        beta_phi: weighted(&src_phi, &one),
        eta_beta_phi: weighted(&src_phi, &eta),
        beta_psi: weighted(&src_psi, &one),
        eta_beta_psi: weighted(&src_psi, &eta),
    };
    let all = [avg.eta_mean, avg.eta_sq_mean, avg.beta_phi, avg.eta_beta_phi, avg.beta_psi, avg.eta_beta_psi];
    if all.iter().all(|x| x.is_finite()) {
        Ok(avg)
    } else {
        Err(Error::QuadratureFailure(format!("non-finite fast-factor average at z = {z}")))
    }
}

fn legendre32() -> &'static GaussLegendre {
    static RULE: std::sync::OnceLock<GaussLegendre> = std::sync::OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(32))
}

/// Probabilists' Gauss-Hermite nodes and weights (weights sum to one).
fn hermite() -> &'static [(f64, f64)] {
    static RULE: std::sync::OnceLock<Vec<(f64, f64)>> = std::sync::OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(HERMITE_NODES))
}

/// Newton iteration on orthonormal Hermite polynomials, mapped from the
/// weight `exp(-t^2)` to the standard normal density.
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let norm = std::f64::consts::PI.sqrt();
    x.iter().zip(&w).map(|(&t, &wt)| (std::f64::consts::SQRT_2 * t, wt / norm)).collect()
}

/// Upper bound on `erfc(x)` for `x > 0` from the Mills ratio.
fn erfc_bound(x: f64) -> f64 {
    (-x * x).exp() / (x * std::f64::consts::PI.sqrt())
}

/// One `(epsilon, delta)` row of the accuracy study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub delta: f64,
    pub instrument: StudyInstrument,
    pub mc: McEstimate,
    pub order0: f64,
    pub first_order: f64,
}

impl ConvergenceRow {
    pub fn gap(&self) -> f64 {
        (self.mc.mean - self.first_order).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyInstrument {
    SpxCall,
    VixCall,
}

impl fmt::Display for StudyInstrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyInstrument::SpxCall => "spx_call",
            StudyInstrument::VixCall => "vix_call",
        })
    }
}

/// Setup of the accuracy-order experiment.
#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub spec: SvvSpec,
    /// `kappa, m, v0, r, q`; the averaged parameters come from the spec.
    pub params: HestonParams,
    pub spot: f64,
    pub start: FactorState,
    pub expiry: f64,
    /// `(epsilon, delta)` pairs, typically halving.
    pub scales: Vec<(f64, f64)>,
    pub mc: McConfig,
    /// Use Heston control paths sharing the equity and variance noise.
    pub control: bool,
}

impl ConvergenceStudy {
    /// Reference experiment: ATM SPX and VIX calls at 0.5 years with
    /// `(epsilon, delta)` halving from 0.02 to 0.01.
    ///
    /// A high variance level keeps the fast clock `V / epsilon` well
    /// separated from the maturity. Starting the fast factor one standard
    /// deviation off its mean gives an order-epsilon gap large enough to
    /// resolve by simulation.
    pub fn reference(paths: usize, seed: u64) -> Result<Self> {
        Ok(ConvergenceStudy {
            spec: SvvSpec::reference(0.02, 0.02)?,
            params: HestonParams { kappa: 2.0, m: 0.36, eta_bar: 1.0, rho_bar: -0.5, v0: 0.36, r: 0.0, q: 0.0 },
            spot: 100.0,
            start: FactorState { fast: 1.0, slow: 1.0 },
            expiry: 0.5,
            scales: vec![(0.02, 0.02), (0.01, 0.01)],
            mc: McConfig::new(paths, FAST_STEPS_FACTOR / 0.01, seed),
            control: true,
        })
    }

    /// Runs every scale pair; all pairs share the step size and the seed.
    pub fn run(&self) -> Result<Vec<ConvergenceRow>> {
        let z0 = self.start.slow;
        let base = group_params_from_spec(&self.spec, z0)?;
        let heston = base.heston(&self.params);
        let spx = EquityOption::call(self.spot * ((self.params.r - self.params.q) * self.expiry).exp(), self.expiry);
        let map = VixMapping::from_params(&heston)?;
        let vix_strike = price_vix_order0(&VixInstrument::future(self.expiry), &heston, &QuadratureConfig::vix())?;
        let vix = VixInstrument::call(vix_strike, self.expiry);
        let spx0 = price_order0(self.spot, &spx, &heston, &QuadratureConfig::equity())?;
        let vix0 = price_vix_order0(&vix, &heston, &QuadratureConfig::vix())?;
        let disc = (-self.params.r * self.expiry).exp();
        // the control is Heston at the averaged vol-of-vol with the raw equity-variance correlation
        let control = HestonParams { rho_bar: self.spec.rho(S, V), ..heston };
        let spx_control = price_order0(self.spot, &spx, &control, &QuadratureConfig::equity())?;
        let vix_control = price_vix_order0(&vix, &control, &QuadratureConfig::vix())?;
        let spx_payoff = |s: &TerminalState| disc * (s.spot - spx.strike).max(0.0);
        let vix_payoff = |s: &TerminalState| disc * (s.vix(&map) - vix_strike).max(0.0);
        let mut rows = Vec::new();
        for &(eps, del) in &self.scales {
            let spec = self.spec.with_scales(eps, del)?;
            let sg = group_params_from_spec(&spec, z0)?;
            let (spx_mc, vix_mc) = if self.control {
                let (paths, ctrl) = simulate_svv_with_control(
                    &spec,
                    &self.params,
                    self.spot,
                    self.start,
                    self.expiry,
                    heston.eta_bar,
                    &self.mc,
                )?;
                (
                    paths.estimate_with_control(&ctrl, spx_control, spx_payoff)?,
                    paths.estimate_with_control(&ctrl, vix_control, vix_payoff)?,
                )
            } else {
                let paths = simulate_svv(&spec, &self.params, self.spot, self.start, self.expiry, &self.mc)?;
                (paths.estimate(spx_payoff), paths.estimate(vix_payoff))
            };
            let spx1 = price_first_order(self.spot, &spx, &heston, &sg.groups, &QuadratureConfig::equity())?;
            let vix1 = price_vix_first_order(&vix, &heston, &sg.groups, &QuadratureConfig::vix())?;
            rows.push(ConvergenceRow {
                epsilon: eps,
                delta: del,
                instrument: StudyInstrument::SpxCall,
                mc: spx_mc,
                order0: spx0,
                first_order: spx1,
            });
            rows.push(ConvergenceRow {
                epsilon: eps,
                delta: del,
                instrument: StudyInstrument::VixCall,
                mc: vix_mc,
                order0: vix0,
                first_order: vix1,
            });
        }
        Ok(rows)
    }
}

/// Plain-text table of the study with the gap ratio between consecutive
/// scale pairs of the same instrument.
pub fn convergence_report(rows: &[ConvergenceRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<9} {:>8} {:>8} {:>14} {:>12} {:>14} {:>14} {:>12} {:>8}",
        "instr", "eps", "delta", "mc_price", "mc_se", "order0", "first_order", "gap", "ratio"
    );
    for (i, r) in rows.iter().enumerate() {
        let prev = rows[..i].iter().rev().find(|p| p.instrument == r.instrument);
        let ratio = prev.map_or("-".to_string(), |p| format!("{:.3}", p.gap() / r.gap()));
        let _ = writeln!(
            out,
            "{:<9} {:>8} {:>8} {:>14.8} {:>12.3e} {:>14.8} {:>14.8} {:>12.3e} {:>8}",
            r.instrument.to_string(),
            r.epsilon,
            r.delta,
            r.mc.mean,
            r.mc.standard_error,
            r.order0,
            r.first_order,
            r.gap(),
            ratio
        );
    }
    out
}
