//! Gauss-Legendre rules and the panel schedules used by the Fourier pricers.

use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the n-point rule by Newton iteration on the Legendre recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// Inversion-integral settings shared by the equity and VIX pricers.
///
/// `contour_offset` is the fixed imaginary part of the equity frequency or
/// the fixed real part of the VIX frequency. Panels start at `panel_width`
/// and grow geometrically up to `max_panel_width`; integration stops once a
/// panel's tail estimate falls below `tolerance` (scaled by the pricer) or
/// fails with a divergence error at `truncation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub contour_offset: f64,
    /// Angle of the integration ray in the complex plane (VIX only);
    /// pi/2 is the vertical line.
    pub contour_angle: f64,
    pub panel_width: f64,
    pub growth: f64,
    pub max_panel_width: f64,
    pub truncation: f64,
    /// Gauss-Legendre nodes per panel.
    pub nodes: usize,
    pub min_panels: usize,
    pub tolerance: f64,
}

impl QuadratureConfig {
    pub fn equity() -> Self {
        QuadratureConfig {
            contour_offset: 1.5,
            contour_angle: std::f64::consts::FRAC_PI_2,
            panel_width: 0.5,
            growth: 1.5,
            max_panel_width: 10.0,
            truncation: 2000.0,
            nodes: 16,
            min_panels: 4,
            tolerance: 1e-12,
        }
    }

    pub fn vix() -> Self {
        QuadratureConfig {
            contour_offset: -0.5,
            contour_angle: 0.75 * std::f64::consts::PI,
            panel_width: 0.5,
            growth: 1.5,
            max_panel_width: f64::INFINITY,
            truncation: 1e20,
            nodes: 16,
            min_panels: 4,
            tolerance: 1e-12,
        }
    }

    /// Same schedule with twice the nodes per panel.
    pub fn refined(mut self) -> Self {
        self.nodes *= 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("quadrature config: {m}")));
        if !(self.panel_width > 0.0 && self.max_panel_width >= self.panel_width) {
            return bad("panel widths must be positive and ordered");
        }
        if !(self.growth >= 1.0) || !(self.truncation > 0.0) || !(self.tolerance > 0.0) {
            return bad("growth >= 1, truncation > 0 and tolerance > 0 required");
        }
        if self.nodes < 4 || self.nodes * self.min_panels.max(1) < 64 {
            return bad("at least 64 nodes required over the minimum panel count");
        }
        Ok(())
    }

    /// Panel endpoints in order, capped at the truncation.
    pub fn panels(&self) -> impl Iterator<Item = (f64, f64)> {
        let cfg = *self;
        let mut a = 0.0;
        let mut width = cfg.panel_width;
        std::iter::from_fn(move || {
            if a >= cfg.truncation {
                return None;
            }
            let b = (a + width).min(cfg.truncation);
            let out = (a, b);
            a = b;
            width = (width * cfg.growth).min(cfg.max_panel_width);
            Some(out)
        })
    }
}
