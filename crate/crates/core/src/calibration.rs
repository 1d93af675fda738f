//! Joint calibration of the effective Heston parameters and the first-order
//! group parameters to SPX and VIX implied-volatility surfaces.
//!
//! The objective is the count-weighted mean of squared implied-vol residuals,
//! `(M_S sum_S r^2 + M_V sum_V r^2) / (M_S + M_V)`, minimised by a
//! deterministic Nelder-Mead simplex in logistic coordinates that keep every
//! parameter inside its box. Stage one fits the Heston parameters with the
//! corrections at zero; stage two frees everything from that point.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::correction::CorrectionGroups;
use crate::error::{Error, Result};
use crate::implied_vol::{implied_vol, VolQuote};
use crate::kernel::HestonParams;
use crate::keyvalue::{format_pairs, KeyValues};
use crate::market_data::Underlying;
use crate::quadrature::QuadratureConfig;
use crate::spx::{EquitySlice, OptionKind};
use crate::vix::{variance_from_vix, VixMapping, VixSlice};

/// Which parameters a calibration run frees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationStage {
    /// Effective Heston parameters only, corrections pinned at zero.
    HestonOnly,
    /// Heston-only first, then all parameters including the corrections.
    Full,
}

impl std::str::FromStr for CalibrationStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "heston" | "heston-only" | "heston_only" => Ok(CalibrationStage::HestonOnly),
            "full" => Ok(CalibrationStage::Full),
            other => Err(Error::InvalidParameter(format!("unknown stage '{other}'"))),
        }
    }
}

impl std::fmt::Display for CalibrationStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CalibrationStage::HestonOnly => "heston",
            CalibrationStage::Full => "full",
        })
    }
}

/// Open boxes `(low, high)` for each calibrated quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub kappa: (f64, f64),
    pub m: (f64, f64),
    pub eta_bar: (f64, f64),
    pub rho_bar: (f64, f64),
    pub v0: (f64, f64),
    /// Shared box for all seven group parameters.
    pub correction: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            kappa: (0.05, 60.0),
            m: (1e-4, 0.5),
            eta_bar: (0.01, 6.0),
            rho_bar: (-0.999, 0.999),
            v0: (1e-5, 1.0),
            correction: (-0.2, 0.2),
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        let boxes = [
            ("kappa", self.kappa),
            ("m", self.m),
            ("eta_bar", self.eta_bar),
            ("rho_bar", self.rho_bar),
            ("v0", self.v0),
            ("correction", self.correction),
        ];
        for (name, (lo, hi)) in boxes {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} bounds must satisfy low < high, got ({lo}, {hi})"
                )));
            }
        }
        for (name, lo) in [("kappa", self.kappa.0), ("m", self.m.0), ("eta_bar", self.eta_bar.0), ("v0", self.v0.0)] {
            if lo < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} lower bound must be nonnegative")));
            }
        }
        if self.rho_bar.0 < -0.999 || self.rho_bar.1 > 0.999 {
            return Err(Error::InvalidParameter("rho_bar bounds must lie within (-0.999, 0.999)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    /// Simplex iterations per stage.
    pub max_iterations: usize,
    /// Optional tighter budget for the second stage.
    pub stage2_max_iterations: Option<usize>,
    /// Stop when the simplex objective spread falls below this.
    pub tolerance: f64,
    pub bounds: ParamBounds,
    pub stage: CalibrationStage,
    /// Calibrate v0 instead of pinning it to the spot VIX.
    pub free_v0: bool,
    /// Residual charged for a quote whose model price cannot be inverted.
    pub penalty: f64,
    /// Overrides for the SPX and VIX weights (default: the quote counts).
    pub spx_weight: Option<f64>,
    pub vix_weight: Option<f64>,
    /// Stage-one starting point; v0 is used only when `free_v0`.
    pub initial: HestonParams,
    pub equity_quadrature: QuadratureConfig,
    pub vix_quadrature: QuadratureConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            max_iterations: 2000,
            stage2_max_iterations: None,
            tolerance: 1e-14,
            bounds: ParamBounds::default(),
            stage: CalibrationStage::Full,
            free_v0: false,
            penalty: 1.0,
            spx_weight: None,
            vix_weight: None,
            initial: HestonParams { kappa: 5.0, m: 0.04, eta_bar: 1.0, rho_bar: -0.5, v0: 0.04, r: 0.0, q: 0.0 },
            equity_quadrature: QuadratureConfig::equity(),
            vix_quadrature: QuadratureConfig::vix(),
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be positive".into()));
        }
        if !(self.tolerance >= 0.0) || !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::InvalidParameter("tolerance must be nonnegative and penalty positive".into()));
        }
        for w in [self.spx_weight, self.vix_weight].into_iter().flatten() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!("weights must be nonnegative, got {w}")));
            }
        }
        self.equity_quadrature.validate()?;
        self.vix_quadrature.validate()
    }

    /// Reads a key-value config; absent keys keep their defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = CalibrationConfig::default();
        if let Some(v) = kv.take("max_iterations")? {
            cfg.max_iterations = v;
        }
        cfg.stage2_max_iterations = kv.take("stage2_max_iterations")?;
        if let Some(v) = kv.take("tolerance")? {
            cfg.tolerance = v;
        }
        if let Some(v) = kv.take("stage")? {
            cfg.stage = v;
        }
        if let Some(v) = kv.take("free_v0")? {
            cfg.free_v0 = v;
        }
        if let Some(v) = kv.take("penalty")? {
            cfg.penalty = v;
        }
        cfg.spx_weight = kv.take("spx_weight")?;
        cfg.vix_weight = kv.take("vix_weight")?;
        let b = &mut cfg.bounds;
        for (name, slot) in [
            ("kappa", &mut b.kappa),
            ("m", &mut b.m),
            ("eta_bar", &mut b.eta_bar),
            ("rho_bar", &mut b.rho_bar),
            ("v0", &mut b.v0),
            ("correction", &mut b.correction),
        ] {
            if let Some(v) = kv.take(&format!("{name}_min"))? {
                slot.0 = v;
            }
            if let Some(v) = kv.take(&format!("{name}_max"))? {
                slot.1 = v;
            }
        }
        let init = &mut cfg.initial;
        for (name, slot) in [
            ("kappa", &mut init.kappa),
            ("m", &mut init.m),
            ("eta_bar", &mut init.eta_bar),
            ("rho_bar", &mut init.rho_bar),
            ("v0", &mut init.v0),
        ] {
            if let Some(v) = kv.take(&format!("init_{name}"))? {
                *slot = v;
            }
        }
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Market implied vols to fit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationData {
    /// SPX option vols; `forward` is the market forward of each expiry.
    pub spx: Vec<VolQuote>,
    /// VIX option vols, quoted Black-on-future against the market VIX future.
    pub vix: Vec<VolQuote>,
    /// Spot VIX level (decimal) used to pin v0.
    pub spot_vix: Option<f64>,
}

/// Full parameter vector of the first-order model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub params: HestonParams,
    pub groups: CorrectionGroups,
}

/// Model-versus-market comparison for one quote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuoteResidual {
    pub underlying: Underlying,
    pub expiry_tau: f64,
    pub strike: f64,
    pub kind: OptionKind,
    pub market_vol: f64,
    /// `None` when the model price could not be inverted.
    pub model_vol: Option<f64>,
    /// `model - market`, or the penalty.
    pub residual: f64,
}

/// Objective value with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// SPX residuals first, then VIX, each in input order.
    pub residuals: Vec<QuoteResidual>,
    /// Parameters actually priced (v0 pinned when configured).
    pub theta: Theta,
}

/// Weights `(w_S, w_V)` and counts `(M_S, M_V)` of the objective.
fn weights(data: &CalibrationData, cfg: &CalibrationConfig) -> (f64, f64, f64, f64) {
    let (ms, mv) = (data.spx.len() as f64, data.vix.len() as f64);
    (cfg.spx_weight.unwrap_or(ms), cfg.vix_weight.unwrap_or(mv), ms, mv)
}

/// `(w_S sum_S r^2 + w_V sum_V r^2) / (M_S + M_V)`, summed in index order.
pub fn weighted_objective(residuals: &[QuoteResidual], w_spx: f64, w_vix: f64) -> f64 {
    let (mut ss, mut sv, mut ms, mut mv) = (0.0, 0.0, 0.0, 0.0);
    for r in residuals {
        match r.underlying {
            Underlying::Spx => {
                ss += r.residual * r.residual;
                ms += 1.0;
            }
            Underlying::Vix => {
                sv += r.residual * r.residual;
                mv += 1.0;
            }
        }
    }
    if ms + mv == 0.0 {
        return 0.0;
    }
    (w_spx * ss + w_vix * sv) / (ms + mv)
}

/// v0 implied by the spot VIX at the current `(kappa, m)`.
pub fn pinned_v0(spot_vix: f64, kappa: f64, m: f64) -> Result<f64> {
    variance_from_vix(spot_vix, &VixMapping::new(kappa, m)?)
}

fn resolve_theta(theta: &Theta, data: &CalibrationData, cfg: &CalibrationConfig) -> Result<Theta> {
    let mut t = *theta;
    if !cfg.free_v0 {
        let vix = data.spot_vix.ok_or_else(|| Error::InvalidParameter("spot VIX is required to pin v0".into()))?;
        t.params.v0 = pinned_v0(vix, t.params.kappa, t.params.m)?;
    }
    t.params.validate()?;
    t.groups.validate()?;
    Ok(t)
}

/// Groups quote indices by a slice key, in first-appearance order.
fn slices<K: Ord + Copy>(quotes: &[VolQuote], key: impl Fn(&VolQuote) -> K) -> Vec<Vec<usize>> {
    let mut order: Vec<K> = Vec::new();
    let mut map: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, q) in quotes.iter().enumerate() {
        let k = key(q);
        map.entry(k).or_insert_with(|| {
            order.push(k);
            Vec::new()
        });
        map.get_mut(&k).unwrap().push(i);
    }
    order.into_iter().map(|k| map.remove(&k).unwrap()).collect()
}

fn inverted(price: f64, forward: f64, q: &VolQuote) -> Option<f64> {
    implied_vol(price, forward, q.strike, q.expiry_tau, 1.0, q.kind).ok()
}

fn residual(underlying: Underlying, q: &VolQuote, model: Option<f64>, penalty: f64) -> QuoteResidual {
    QuoteResidual {
        underlying,
        expiry_tau: q.expiry_tau,
        strike: q.strike,
        kind: q.kind,
        market_vol: q.implied_vol,
        model_vol: model,
        residual: model.map_or(penalty, |m| m - q.implied_vol),
    }
}

/// Model vols of one slice, keyed by quote index.
type SliceVols = Vec<(usize, Option<f64>)>;

fn spx_model_vols(data: &CalibrationData, t: &Theta, cfg: &CalibrationConfig) -> Result<Vec<Option<f64>>> {
    let groups = slices(&data.spx, |q| (q.expiry_tau.to_bits(), q.forward.to_bits()));
    let cg = (!t.groups.is_zero()).then_some(&t.groups);
    let per_slice: Vec<Result<SliceVols>> = groups
        .par_iter()
        .map(|idx| {
            let first = &data.spx[idx[0]];
            let slice = EquitySlice { expiry_tau: first.expiry_tau, forward: first.forward, discount: 1.0 };
            let options: Vec<(f64, OptionKind)> = idx.iter().map(|&i| (data.spx[i].strike, data.spx[i].kind)).collect();
            let prices = slice
                .prices(&options, &t.params, cg, &cfg.equity_quadrature)
                .map_err(|e| Error::PricingFailure { index: idx[0], source: Box::new(e) })?;
            Ok(idx.iter().zip(prices).map(|(&i, p)| (i, inverted(p, first.forward, &data.spx[i]))).collect())
        })
        .collect();
    let mut out = vec![None; data.spx.len()];
    for s in per_slice {
        for (i, v) in s? {
            out[i] = v;
        }
    }
    Ok(out)
}

fn vix_model_vols(data: &CalibrationData, t: &Theta, cfg: &CalibrationConfig) -> Result<Vec<Option<f64>>> {
    let groups = slices(&data.vix, |q| q.expiry_tau.to_bits());
    let cg = (!t.groups.is_zero()).then_some(&t.groups);
    let offset = data.spx.len();
    let per_slice: Vec<Result<SliceVols>> = groups
        .par_iter()
        .map(|idx| {
            let tau = data.vix[idx[0]].expiry_tau;
            let slice = VixSlice::new(tau, 0.0);
            let k_min = VixMapping::from_params(&t.params)
                .map_err(|e| Error::PricingFailure { index: offset + idx[0], source: Box::new(e) })?
                .min_vix();
            // the model future comes along as the call struck at the floor
            let mut strikes: Vec<f64> = idx.iter().map(|&i| data.vix[i].strike).collect();
            strikes.push(k_min);
            let values = slice
                .call_expectations(&strikes, &t.params, cg, &cfg.vix_quadrature)
                .map_err(|e| Error::PricingFailure { index: offset + idx[0], source: Box::new(e) })?;
            let future = values[idx.len()] + k_min;
            Ok(idx
                .iter()
                .zip(&values)
                .map(|(&i, &call)| {
                    let q = &data.vix[i];
                    let price = match q.kind {
                        OptionKind::Call => call,
                        OptionKind::Put => call - (future - q.strike),
                    };
                    (i, inverted(price, future, q))
                })
                .collect())
        })
        .collect();
    let mut out = vec![None; data.vix.len()];
    for s in per_slice {
        for (i, v) in s? {
            out[i] = v;
        }
    }
    Ok(out)
}

/// Surfaces generated by the model itself at `theta`: SPX points are
/// `(tau, forward, strike, kind)`, VIX calls `(tau, strike)`. VIX forwards
/// are the model futures.
pub fn synthetic_data(
    theta: &Theta,
    spot_vix: f64,
    spx: &[(f64, f64, f64, OptionKind)],
    vix: &[(f64, f64)],
    cfg: &CalibrationConfig,
) -> Result<CalibrationData> {
    let quote = |tau, forward, strike, kind| VolQuote { forward, strike, expiry_tau: tau, implied_vol: 0.0, kind };
    let mut data = CalibrationData {
        spx: spx.iter().map(|&(t, f, k, kind)| quote(t, f, k, kind)).collect(),
        vix: vix.iter().map(|&(t, k)| quote(t, 0.0, k, OptionKind::Call)).collect(),
        spot_vix: Some(spot_vix),
    };
    let t = resolve_theta(theta, &data, cfg)?;
    let cg = (!t.groups.is_zero()).then_some(&t.groups);
    for q in &mut data.vix {
        q.forward = VixSlice::new(q.expiry_tau, 0.0).future(&t.params, cg, &cfg.vix_quadrature)?;
    }
    let eval = objective(&t, &data, cfg)?;
    let quotes = data.spx.iter_mut().chain(data.vix.iter_mut());
    for (q, r) in quotes.zip(&eval.residuals) {
        q.implied_vol = r
            .model_vol
            .ok_or_else(|| Error::InvalidParameter(format!("model price at strike {} has no implied vol", q.strike)))?;
    }
    Ok(data)
}

/// Objective at `theta`, with v0 pinned to the spot VIX unless `free_v0`.
pub fn objective(theta: &Theta, data: &CalibrationData, cfg: &CalibrationConfig) -> Result<Evaluation> {
    if data.spx.is_empty() && data.vix.is_empty() {
        return Err(Error::InvalidParameter("calibration needs at least one quote".into()));
    }
    let t = resolve_theta(theta, data, cfg)?;
    let spx = spx_model_vols(data, &t, cfg)?;
    let vix = vix_model_vols(data, &t, cfg)?;
    let residuals: Vec<QuoteResidual> = data
        .spx
        .iter()
        .zip(spx)
        .map(|(q, m)| residual(Underlying::Spx, q, m, cfg.penalty))
        .chain(data.vix.iter().zip(vix).map(|(q, m)| residual(Underlying::Vix, q, m, cfg.penalty)))
        .collect();
    let (ws, wv, _, _) = weights(data, cfg);
    Ok(Evaluation { value: weighted_objective(&residuals, ws, wv), residuals, theta: t })
}

/// Outcome of one simplex run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: CalibrationStage,
    pub theta: Theta,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective after each iteration; never increases.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub params: HestonParams,
    pub groups: CorrectionGroups,
    pub objective: f64,
    pub residuals: Vec<QuoteResidual>,
    pub iterations: usize,
    pub stages: Vec<StageReport>,
    /// Every stage met its tolerance within the iteration budget.
    pub converged: bool,
    /// Effective parameters violate `eta_bar^2 <= 2 kappa m`.
    pub feller_warning: bool,
    pub spx_weight: f64,
    pub vix_weight: f64,
}

impl CalibrationResult {
    /// The objective rebuilt from the stored residuals.
    pub fn recompute_objective(&self) -> f64 {
        weighted_objective(&self.residuals, self.spx_weight, self.vix_weight)
    }

    pub fn to_key_values(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("kappa", self.params.kappa.to_string()),
            ("m", self.params.m.to_string()),
            ("eta_bar", self.params.eta_bar.to_string()),
            ("rho_bar", self.params.rho_bar.to_string()),
            ("v0", self.params.v0.to_string()),
        ];
        pairs.extend(CorrectionGroups::NAMES.iter().zip(self.groups.to_array()).map(|(&k, v)| (k, v.to_string())));
        pairs.push(("objective", self.objective.to_string()));
        pairs.push(("iterations", self.iterations.to_string()));
        pairs.push(("converged", self.converged.to_string()));
        pairs.push(("feller_warning", self.feller_warning.to_string()));
        let mut out = format_pairs(pairs);
        for (i, s) in self.stages.iter().enumerate() {
            let _ = writeln!(out, "stage{}_objective = {}", i + 1, s.objective);
            let _ = writeln!(out, "stage{}_iterations = {}", i + 1, s.iterations);
            let _ = writeln!(out, "stage{}_converged = {}", i + 1, s.converged);
        }
        out
    }

    /// Per-quote residual table.
    pub fn write_residuals<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "underlying,expiry_tau,strike,type,market_vol,model_vol,residual")?;
        for r in &self.residuals {
            let model = r.model_vol.map_or(String::new(), |v| v.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.underlying, r.expiry_tau, r.strike, r.kind, r.market_vol, model, r.residual
            )?;
        }
        Ok(())
    }
}

/// Box `(lo, hi)` mapped onto the real line by a logistic.
#[derive(Debug, Clone, Copy)]
struct Logistic(f64, f64);

impl Logistic {
    fn to_box(self, u: f64) -> f64 {
        // clamped so the image stays strictly inside the open box
        self.0 + (self.1 - self.0) / (1.0 + (-u.clamp(-30.0, 30.0)).exp())
    }

    fn to_unbounded(self, x: f64) -> f64 {
        let span = self.1 - self.0;
        let frac = ((x - self.0) / span).clamp(1e-9, 1.0 - 1e-9);
        (frac / (1.0 - frac)).ln()
    }
}

/// Coordinates freed in a stage and their boxes.
struct Layout {
    free_v0: bool,
    corrections: bool,
    boxes: Vec<Logistic>,
}

impl Layout {
    fn new(cfg: &CalibrationConfig, corrections: bool) -> Self {
        let b = &cfg.bounds;
        let mut boxes = vec![b.kappa, b.m, b.eta_bar, b.rho_bar];
        if cfg.free_v0 {
            boxes.push(b.v0);
        }
        if corrections {
            boxes.extend([b.correction; 7]);
        }
        Layout { free_v0: cfg.free_v0, corrections, boxes: boxes.into_iter().map(|(l, h)| Logistic(l, h)).collect() }
    }

    fn encode(&self, t: &Theta) -> Vec<f64> {
        let p = &t.params;
        let mut x = vec![p.kappa, p.m, p.eta_bar, p.rho_bar];
        if self.free_v0 {
            x.push(p.v0);
        }
        if self.corrections {
            x.extend(t.groups.to_array());
        }
        x.iter().zip(&self.boxes).map(|(&v, b)| b.to_unbounded(v)).collect()
    }

    fn decode(&self, u: &[f64], base: &Theta) -> Theta {
        let x: Vec<f64> = u.iter().zip(&self.boxes).map(|(&v, b)| b.to_box(v)).collect();
        let mut t = *base;
        t.params.kappa = x[0];
        t.params.m = x[1];
        t.params.eta_bar = x[2];
        t.params.rho_bar = x[3];
        let mut k = 4;
        if self.free_v0 {
            t.params.v0 = x[k];
            k += 1;
        }
        if self.corrections {
            t.groups = CorrectionGroups::from_array(std::array::from_fn(|i| x[k + i]));
        }
        t
    }
}

/// Result of a Nelder-Mead minimisation.
#[derive(Debug, Clone)]
struct SimplexOutcome {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Deterministic Nelder-Mead with dimension-adaptive coefficients and
/// restarts around the incumbent. `f` may return infinity to reject a point.
fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_iterations: usize,
    tolerance: f64,
) -> SimplexOutcome {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut evaluations);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    const RESTARTS: usize = 3;

    for restart in 0..=RESTARTS {
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best_f)];
        for i in 0..n {
            let mut x = best_x.clone();
            x[i] += step;
            let v = eval(&x, &mut evaluations);
            simplex.push((x, v));
        }
        let start_f = best_f;
        converged = false;
        while iterations < max_iterations {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread_f = simplex[n].1 - simplex[0].1;
            let spread_x = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (spread_f.is_finite() && spread_f <= tolerance) || spread_x <= 1e-12 {
                converged = true;
                break;
            }
            iterations += 1;
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / nf).collect();
            let worst = simplex[n].clone();
            let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (worst.0[j] - centroid[j])).collect() };
            let xr = along(-alpha);
            let fr = eval(&xr, &mut evaluations);
            if fr < simplex[0].1 {
                let xe = along(-alpha * gamma);
                let fe = eval(&xe, &mut evaluations);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst.1 {
                    let xc = along(-alpha * rho);
                    let fc = eval(&xc, &mut evaluations);
                    (xc, fc)
                } else {
                    let xc = along(rho);
                    let fc = eval(&xc, &mut evaluations);
                    (xc, fc)
                };
                if fc < fr.min(worst.1) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for entry in simplex.iter_mut().skip(1) {
                        let x: Vec<f64> = (0..n).map(|j| x_best[j] + sigma * (entry.0[j] - x_best[j])).collect();
                        let v = eval(&x, &mut evaluations);
                        *entry = (x, v);
                    }
                }
            }
            let incumbent = simplex.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            if incumbent.1 < best_f {
                best_f = incumbent.1;
                best_x = incumbent.0.clone();
            }
            trace.push(best_f);
        }
        // a restart that gains nothing confirms the minimum
        let gained = start_f - best_f;
        if !converged || iterations >= max_iterations || (restart > 0 && gained <= tolerance) {
            break;
        }
    }
    SimplexOutcome { x: best_x, f: best_f, iterations, evaluations, converged, trace }
}

fn run_stage(
    stage: CalibrationStage,
    start: &Theta,
    data: &CalibrationData,
    cfg: &CalibrationConfig,
) -> Result<StageReport> {
    let layout = Layout::new(cfg, stage == CalibrationStage::Full);
    let u0 = layout.encode(start);
    let first = layout.decode(&u0, start);
    let initial = objective(&first, data, cfg)?.value;
    let out = nelder_mead(
        |u| objective(&layout.decode(u, start), data, cfg).map_or(f64::INFINITY, |e| e.value),
        &u0,
        0.25,
        match stage {
            CalibrationStage::Full => cfg.stage2_max_iterations.unwrap_or(cfg.max_iterations),
            CalibrationStage::HestonOnly => cfg.max_iterations,
        },
        cfg.tolerance,
    );
    let theta = resolve_theta(&layout.decode(&out.x, start), data, cfg)?;
    Ok(StageReport {
        stage,
        theta,
        initial_objective: initial,
        objective: out.f,
        iterations: out.iterations,
        evaluations: out.evaluations,
        converged: out.converged,
        trace: out.trace,
    })
}

/// Two-stage calibration. Non-convergence is reported through the flags,
/// with the best point found still returned.
pub fn calibrate(data: &CalibrationData, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    cfg.validate()?;
    let start = Theta { params: cfg.initial, groups: CorrectionGroups::zero() };
    let mut stages = vec![run_stage(CalibrationStage::HestonOnly, &start, data, cfg)?];
    if cfg.stage == CalibrationStage::Full {
        let from = Theta { groups: CorrectionGroups::zero(), ..stages[0].theta };
        stages.push(run_stage(CalibrationStage::Full, &from, data, cfg)?);
    }
    // the re-encoded stage-two start can sit a rounding error above stage one
    let best = stages.iter().min_by(|a, b| a.objective.total_cmp(&b.objective)).unwrap();
    let eval = objective(&best.theta, data, cfg)?;
    let (ws, wv, _, _) = weights(data, cfg);
    Ok(CalibrationResult {
        params: eval.theta.params,
        groups: eval.theta.groups,
        objective: eval.value,
        residuals: eval.residuals,
        iterations: stages.iter().map(|s| s.iterations).sum(),
        converged: stages.iter().all(|s| s.converged),
        feller_warning: eval.theta.params.feller_violated(),
        stages,
        spx_weight: ws,
        vix_weight: wv,
    })
}
