//! Faddeeva function `w(z) = exp(-z^2) erfc(-i z)` and the complex error functions.
//!
//! Follows the Poppe-Wijers algorithm: a Taylor series near the origin, a
//! Laplace continued fraction (Gautschi's recurrence) elsewhere, and the
//! reflection `w(-z) = 2 exp(-z^2) - w(z)` for the lower half plane.

use num_complex::Complex64;

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Faddeeva function; accurate to roughly 14 significant digits.
///
/// Returns non-finite values when the lower-half-plane reflection overflows.
pub fn faddeeva_w(z: Complex64) -> Complex64 {
    let xabs = z.re.abs();
    let yabs = z.im.abs();
    let x = xabs / 6.3;
    let y = yabs / 4.4;
    let mut qrho = x * x + y * y;
    let xquad = xabs * xabs - yabs * yabs;
    let yquad = 2.0 * xabs * yabs;
    let series = qrho < 0.085_264;

    let (mut u, mut v);
    let (mut u2, mut v2) = (0.0, 0.0);
    if series {
        qrho = (1.0 - 0.85 * y) * qrho.sqrt();
        let n = (6.0 + 72.0 * qrho).round() as i64;
        let mut j = 2 * n + 1;
        let mut xsum = 1.0 / j as f64;
        let mut ysum = 0.0;
        for i in (1..=n).rev() {
            j -= 2;
            let xaux = (xsum * xquad - ysum * yquad) / i as f64;
            ysum = (xsum * yquad + ysum * xquad) / i as f64;
            xsum = xaux + 1.0 / j as f64;
        }
        let u1 = -TWO_OVER_SQRT_PI * (xsum * yabs + ysum * xabs) + 1.0;
        let v1 = TWO_OVER_SQRT_PI * (xsum * xabs - ysum * yabs);
        let daux = (-xquad).exp();
        u2 = daux * yquad.cos();
        v2 = -daux * yquad.sin();
        u = u1 * u2 - v1 * v2;
        v = u1 * v2 + v1 * u2;
    } else {
        let (h, kapn, nu);
        if qrho > 1.0 {
            h = 0.0;
            kapn = 0;
            qrho = qrho.sqrt();
            nu = (3.0 + 1442.0 / (26.0 * qrho + 77.0)) as i64;
        } else {
            qrho = (1.0 - y) * (1.0 - qrho).sqrt();
            h = 1.88 * qrho;
            kapn = (7.0 + 34.0 * qrho).round() as i64;
            nu = (16.0 + 26.0 * qrho).round() as i64;
        }
        let h2 = 2.0 * h;
        let use_h = h > 0.0;
        let mut qlambda = if use_h { h2.powi(kapn as i32) } else { 0.0 };
        let (mut rx, mut ry, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for n in (0..=nu).rev() {
            let np1 = (n + 1) as f64;
            let tx = yabs + h + np1 * rx;
            let ty = xabs - np1 * ry;
            let c = 0.5 / (tx * tx + ty * ty);
            rx = c * tx;
            ry = c * ty;
            if use_h && n <= kapn {
                let tx = qlambda + sx;
                sx = rx * tx - ry * sy;
                sy = ry * tx + rx * sy;
                qlambda /= h2;
            }
        }
        if use_h {
            u = TWO_OVER_SQRT_PI * sx;
            v = TWO_OVER_SQRT_PI * sy;
        } else {
            u = TWO_OVER_SQRT_PI * rx;
            v = TWO_OVER_SQRT_PI * ry;
        }
        if yabs == 0.0 {
            u = (-xabs * xabs).exp();
        }
    }

    if z.im < 0.0 {
        if series {
            u2 *= 2.0;
            v2 *= 2.0;
        } else {
            let w1 = 2.0 * (-xquad).exp();
            u2 = w1 * yquad.cos();
            v2 = -w1 * yquad.sin();
        }
        u = u2 - u;
        v = v2 - v;
        if z.re > 0.0 {
            v = -v;
        }
    } else if z.re < 0.0 {
        v = -v;
    }
    Complex64::new(u, v)
}

/// Complementary error function `erfc(z) = exp(-z^2) w(i z)`.
pub fn erfc(z: Complex64) -> Complex64 {
    if z.re >= 0.0 {
        (-z * z).exp() * faddeeva_w(Complex64::new(-z.im, z.re))
    } else {
        // Reflect so that w is evaluated in the upper half plane.
        2.0 - erfc(-z)
    }
}

/// Real complementary error function.
pub fn erfc_real(x: f64) -> f64 {
    if x >= 0.0 {
        (-x * x).exp() * faddeeva_w(Complex64::new(0.0, x)).re
    } else {
        2.0 - erfc_real(-x)
    }
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc_real(-x / std::f64::consts::SQRT_2)
}

/// Complex error function `erf(z) = 1 - erfc(z)`, with a series near zero
/// to keep relative accuracy where `erf` is small.
pub fn erf(z: Complex64) -> Complex64 {
    if z.norm() < 0.1 {
        let z2 = z * z;
        let mut term = z;
        let mut sum = z;
        for k in 1..20 {
            term *= -z2 / k as f64;
            sum += term / (2 * k + 1) as f64;
        }
        TWO_OVER_SQRT_PI * sum
    } else {
        1.0 - erfc(z)
    }
}
