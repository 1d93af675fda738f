//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]
// Reference values keep every digit of their high-precision source.
#![allow(clippy::excessive_precision)]

use num_complex::Complex64;
use svv_core::{CorrectionGroups, HestonParams};

pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Adaptive Dormand-Prince 5(4) integration of `y' = f(t, y)` from 0 to `tau`.
pub fn rk45<F>(f: F, y0: Vec<Complex64>, tau: f64, tol: f64) -> Vec<Complex64>
where
    F: Fn(f64, &[Complex64]) -> Vec<Complex64>,
{
    const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const B4: [f64; 7] =
        [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];
    let n = y0.len();
    let mut y = y0;
    let mut t = 0.0;
    let mut h = tau / 1000.0;
    while t < tau {
        if t + h > tau {
            h = tau - t;
        }
        let mut k: Vec<Vec<Complex64>> = Vec::with_capacity(7);
        for s in 0..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate() {
                for i in 0..n {
                    ys[i] += h * A[s][j] * kj[i];
                }
            }
            k.push(f(t + C[s] * h, &ys));
        }
        let mut y5 = y.clone();
        let mut err: f64 = 0.0;
        for i in 0..n {
            let mut d5 = Complex64::new(0.0, 0.0);
            let mut d4 = Complex64::new(0.0, 0.0);
            for s in 0..7 {
                d5 += B5[s] * k[s][i];
                d4 += B4[s] * k[s][i];
            }
            y5[i] += h * d5;
            let scale = tol * (1.0 + y[i].norm().max(y5[i].norm()));
            err = err.max((h * (d5 - d4)).norm() / scale);
        }
        if err <= 1.0 {
            t += h;
            y = y5;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    y
}

/// Reference equity state `[C, D, C_eta, D_eta, C_rho, D_rho, f0, f1, g0, g1, g2]`
/// from the raw Riccati and variational equations.
pub fn equity_reference(tau: f64, xi: Complex64, p: &HestonParams, cg: &CorrectionGroups) -> Vec<Complex64> {
    let (kappa, eta, rho) = (p.kappa, p.eta_bar, p.rho_bar);
    let km = kappa * p.m;
    let eta2 = eta * eta;
    let beta = kappa + I * rho * eta * xi;
    let beta_eta = I * rho * xi;
    let beta_rho = I * eta * xi;
    let src = 0.5 * (-xi * xi + I * xi);
    let rhs = move |_t: f64, y: &[Complex64]| {
        let d = y[1];
        let (de, dr) = (y[3], y[5]);
        let ce = y[2];
        let cr = y[4];
        let dd = src - beta * d + 0.5 * eta2 * d * d;
        let dde = -beta_eta * d - beta * de + eta * d * d + eta2 * d * de;
        let ddr = -beta_rho * d - beta * dr + eta2 * d * dr;
        let lin = eta2 * d - beta;
        let f1 = lin * y[7] - I * xi * cg.v12_eps * d * d - xi * xi * cg.v21_eps * d + cg.v03_eps * d * d * d;
        let s1 = (cg.v01_eta_delta * d - I * xi * cg.v10_eta_delta) * de
            + (cg.v01_rho_delta * d - I * xi * cg.v10_rho_delta) * dr;
        let s0 = -I * xi * cg.v10_eta_delta * ce - I * xi * cg.v10_rho_delta * cr
            + cg.v01_eta_delta * (de + d * ce)
            + cg.v01_rho_delta * (dr + d * cr);
        let g2 = 2.0 * lin * y[10] + s1;
        let g1 = lin * y[9] + (2.0 * km + eta2) * y[10] + s0;
        vec![km * d, dd, km * de, dde, km * dr, ddr, km * y[7], f1, km * y[9], g1, g2]
    };
    rk45(rhs, vec![Complex64::new(0.0, 0.0); 11], tau, 1e-13)
}

/// Reference CIR state `[A, B, A_eta, B_eta, h0, h1, h2]` at moment variable `u`.
pub fn cir_reference(tau: f64, u: Complex64, p: &HestonParams, cg: &CorrectionGroups) -> Vec<Complex64> {
    let (kappa, eta) = (p.kappa, p.eta_bar);
    let km = kappa * p.m;
    let eta2 = eta * eta;
    let (v3, v1) = (cg.v03_eps, cg.v01_eta_delta);
    let rhs = move |_t: f64, y: &[Complex64]| {
        let b = y[1];
        let be = y[3];
        let ae = y[2];
        let db = -kappa * b + 0.5 * eta2 * b * b;
        let dbe = -kappa * be + eta * b * b + eta2 * b * be;
        let lin = -kappa + eta2 * b;
        let h2 = 2.0 * lin * y[6] + v1 * b * be;
        let h1 = lin * y[5] + (2.0 * km + eta2) * y[6] + v3 * b * b * b + v1 * (be + b * ae);
        vec![km * b, db, km * be, dbe, km * y[5], h1, h2]
    };
    let mut y0 = vec![Complex64::new(0.0, 0.0); 7];
    y0[1] = u;
    rk45(rhs, y0, tau, 1e-13)
}

/// Relative distance with a unit floor on the scale.
pub fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// 40-digit reference values of the Faddeeva function: (x, y, Re w, Im w).
pub const FADDEEVA_REFERENCE: [(f64, f64, f64, f64); 20] = [
    (0.1, 0.1, 0.888_478_562_475_643_677_9, 0.094_331_651_057_285_106_04),
    (0.5, 0.0, 0.778_800_783_071_404_868_25, 0.478_925_172_901_043_472_54),
    (1.0, 1.0, 0.304_744_205_256_912_592_46, 0.208_218_938_202_831_627_29),
    (-2.5, 0.3, 0.038_226_506_260_685_208_947, -0.243_042_008_530_977_581_2),
    (3.0, -0.5, -0.037_440_117_100_424_259_571, 0.193_028_479_427_317_112_5),
    (0.02, 4.0, 0.136_996_471_511_018_712_76, 0.000_647_656_672_699_519_063_96),
    (6.0, 0.001, 0.000_016_375_340_027_605_325_398, 0.095_396_206_113_276_620_863),
    (5.5, 5.5, 0.051_702_929_133_946_016_624, 0.050_856_026_018_576_832_758),
    (10.0, 20.0, 0.022_563_018_746_209_279_925, 0.011_259_022_882_550_729_071),
    (0.3, -0.9, 3.083_555_705_470_785_877_6, 2.201_960_238_799_806_507_4),
    (-1.2, -0.4, 0.035_476_416_411_907_631_584, -0.841_943_923_717_728_960_74),
    (2.2, 0.0022, 0.008_313_461_733_962_951_284_1, 0.298_391_367_506_850_893_99),
    (0.0, 0.001, 0.998_872_620_081_151_408_6, 0.0),
    (15.0, 0.5, 0.001_260_784_200_718_206_706_1, 0.037_654_475_507_312_516_96),
    (0.6, 6.0, 0.091_915_061_535_129_184_816, 0.008_954_318_148_481_405_254_8),
    (-0.01, 0.05, 0.945_900_617_757_941_374_54, -0.010_337_142_276_172_546_724),
    (1.5, 3.0, 0.148_618_186_900_229_301_73, 0.068_585_263_022_747_286_408),
    (4.0, 0.9, 0.033_121_803_930_560_405_703, 0.137_630_779_257_787_955_37),
    (-7.0, 2.0, 0.021_853_396_687_438_291_323, -0.075_009_635_935_424_815_468),
    (0.9, 0.45, 0.398_954_915_873_869_968_75, 0.350_943_567_533_170_815_51),
];

/// Reference values of the complex error function: (x, y, Re erf, Im erf).
pub const ERF_REFERENCE: [(f64, f64, f64, f64); 6] = [
    (0.1, 0.2, 0.117_021_486_303_904_301_45, 0.226_384_457_181_450_918_44),
    (1.0, 1.0, 1.316_151_281_697_947_644_9, 0.190_453_469_237_834_686_28),
    (-0.5, 2.0, -13.839_985_667_741_278_683, -1.042_992_500_831_420_258_6),
    (2.0, -0.3, 0.998_763_089_217_122_470_48, -0.004_930_619_809_302_623_855),
    (0.05, -0.02, 0.056_394_493_527_206_731_429, -0.022_514_221_695_625_041_196),
    (3.0, 0.5, 1.000_028_065_361_476_404_9, -2.628_489_722_258_823_139_6e-7),
];

/// Adaptive Simpson quadrature of a complex integrand on `[a, b]`.
pub fn simpson<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, tol: f64) -> Complex64 {
    #[allow(clippy::too_many_arguments)]
    fn step<F: Fn(f64) -> Complex64>(
        f: &F,
        a: f64,
        b: f64,
        fa: Complex64,
        fm: Complex64,
        fb: Complex64,
        whole: Complex64,
        tol: f64,
        depth: u32,
    ) -> Complex64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let diff = left + right - whole;
        if depth == 0 || diff.norm() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Simpson over consecutive unit-ish panels, which keeps oscillatory integrands resolved.
pub fn simpson_panels<F: Fn(f64) -> Complex64>(f: &F, a: f64, b: f64, width: f64, tol: f64) -> Complex64 {
    let n = ((b - a) / width).ceil().max(1.0) as usize;
    let h = (b - a) / n as f64;
    (0..n).map(|i| simpson(f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / n as f64)).sum()
}

/// Lanczos log-gamma for positive arguments (g = 7, n = 9), about 15 digits.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `E[g(V_T)]` for the CIR variance with `V_0 = p.v0`, using the exact law
/// `V_T = c X`, `X` noncentral chi-square, as a Poisson mixture of gammas.
///
/// `kink` is an optional point in variance units where `g` is not smooth.
pub fn cir_expectation<G: Fn(f64) -> f64>(g: G, tau: f64, p: &HestonParams, kink: Option<f64>) -> f64 {
    let (kappa, eta2) = (p.kappa, p.eta_bar * p.eta_bar);
    let decay = (-kappa * tau).exp();
    let c = eta2 * (1.0 - decay) / (4.0 * kappa);
    let dof = 4.0 * kappa * p.m / eta2;
    let half_lambda = 0.5 * p.v0 * decay / c;
    let mut total = 0.0;
    let mut j = 0usize;
    loop {
        let log_w = -half_lambda + j as f64 * half_lambda.max(1e-300).ln() - ln_gamma(j as f64 + 1.0);
        let w = if half_lambda == 0.0 {
            if j == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            log_w.exp()
        };
        let alpha = 0.5 * dof + j as f64;
        let x_max = 2.0 * alpha + 60.0 * (2.0 * alpha).sqrt() + 120.0;
        let norm = -(alpha * 2f64.ln() + ln_gamma(alpha));
        let xk = kink.map(|k| k / c).filter(|&x| x > 0.0 && x < x_max);
        let value = if alpha < 1.0 {
            // x = y^{1/alpha} absorbs the x^{alpha - 1} singularity
            let f = |y: f64| {
                let x = y.powf(1.0 / alpha);
                Complex64::new((-0.5 * x + norm).exp() * g(c * x) / alpha, 0.0)
            };
            let y_max = x_max.powf(alpha);
            match xk {
                Some(x) => {
                    let yk = x.powf(alpha);
                    simpson(&f, 0.0, yk, 1e-15).re + simpson(&f, yk, y_max, 1e-15).re
                }
                None => simpson(&f, 0.0, y_max, 1e-15).re,
            }
        } else {
            let f = |x: f64| {
                let lx = if x > 0.0 {
                    (alpha - 1.0) * x.ln()
                } else if alpha == 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                Complex64::new((lx - 0.5 * x + norm).exp() * g(c * x), 0.0)
            };
            match xk {
                Some(x) => simpson(&f, 0.0, x, 1e-15).re + simpson(&f, x, x_max, 1e-15).re,
                None => simpson(&f, 0.0, x_max, 1e-15).re,
            }
        };
        total += w * value;
        j += 1;
        if (j as f64) > half_lambda && w < 1e-17 || j > 2000 {
            break;
        }
    }
    total
}
