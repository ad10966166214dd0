//! The modulated-sinc reflector model
//! v(z) = A * sinc(sigma * (z - mu)) * exp(-j (omega z - phi))
//! and its partial derivatives.
//!
//! sinc(t) = sin(pi t) / (pi t), with a series expansion near t = 0 so that
//! the removable singularity and its derivative stay exact as mu sweeps
//! continuously through sample positions.

use num_complex::Complex64;
use std::f64::consts::PI;

const SERIES_CUTOFF: f64 = 1e-4;

/// Normalized sinc, sin(pi t)/(pi t).
#[inline]
pub fn sinc(t: f64) -> f64 {
    let x = PI * t;
    if x.abs() < SERIES_CUTOFF {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// d sinc(t) / d t.
#[inline]
pub fn sinc_deriv(t: f64) -> f64 {
    let x = PI * t;
    if x.abs() < SERIES_CUTOFF {
        let x2 = x * x;
        PI * (-x / 3.0 + x * x2 / 30.0 - x * x2 * x2 / 840.0)
    } else {
        PI * (x * x.cos() - x.sin()) / (x * x)
    }
}

/// Evaluate the complex model at position z.
#[inline]
pub fn eval(z: f64, a: f64, mu: f64, sigma: f64, phi: f64, omega: f64) -> Complex64 {
    let envelope = a * sinc(sigma * (z - mu));
    let angle = -(omega * z - phi);
    Complex64::from_polar(envelope.abs(), if envelope >= 0.0 { angle } else { angle + PI })
}

/// Same, expressed without branch on the envelope sign (for Jacobians).
#[inline]
pub fn eval_parts(z: f64, a: f64, mu: f64, sigma: f64, phi: f64, omega: f64) -> (f64, f64) {
    let s = sinc(sigma * (z - mu));
    let c = (omega * z - phi).cos();
    let q = (omega * z - phi).sin();
    (a * s * c, -a * s * q)
}

/// Partial derivatives of (re, im) with respect to (A, mu, sigma, phi).
#[inline]
pub fn jacobian_row(
    z: f64,
    a: f64,
    mu: f64,
    sigma: f64,
    phi: f64,
    omega: f64,
) -> ([f64; 4], [f64; 4]) {
    let t = sigma * (z - mu);
    let s = sinc(t);
    let sd = sinc_deriv(t);
    let c = (omega * z - phi).cos();
    let q = (omega * z - phi).sin();
    // re = A s c, im = -A s q
    let d_re = [
        s * c,                    // dA
        -a * c * sd * sigma,      // dmu
        a * c * sd * (z - mu),    // dsigma
        a * s * q,                // dphi
    ];
    let d_im = [
        -s * q,
        a * q * sd * sigma,
        -a * q * sd * (z - mu),
        a * s * c,
    ];
    (d_re, d_im)
}

/// Wrap an angle into [-pi, pi).
#[inline]
pub fn wrap_angle(phi: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = (phi + PI).rem_euclid(two_pi) - PI;
    if w >= PI {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sinc_basic_values() {
        assert_eq!(sinc(0.0), 1.0);
        assert!(sinc(1.0).abs() < 1e-15);
        assert!(sinc(2.0).abs() < 1e-15);
        assert_relative_eq!(sinc(0.5), 2.0 / PI, max_relative = 1e-14);
    }

    #[test]
    fn sinc_series_matches_formula_at_cutoff() {
        for &t in &[2.9e-5, 3.2e-5, -3.1e-5, 3.5e-5 / PI] {
            let x = PI * t;
            let direct = x.sin() / x;
            assert_relative_eq!(sinc(t), direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn sinc_deriv_matches_finite_difference() {
        for &t in &[-2.3, -0.7, -1e-5, 0.0, 1e-6, 0.3, 1.5, 4.2] {
            let h = 1e-6;
            let fd = (sinc(t + h) - sinc(t - h)) / (2.0 * h);
            assert!(
                (sinc_deriv(t) - fd).abs() < 1e-8,
                "t={t}: {} vs {}",
                sinc_deriv(t),
                fd
            );
        }
    }

    #[test]
    fn eval_parts_agrees_with_polar_eval() {
        let (a, mu, sigma, phi, omega) = (1.5, 100.3, 0.11, 0.7, 0.3489);
        for z in 80..120 {
            let z = z as f64;
            let v = eval(z, a, mu, sigma, phi, omega);
            let (re, im) = eval_parts(z, a, mu, sigma, phi, omega);
            assert_relative_eq!(v.re, re, epsilon = 1e-12);
            assert_relative_eq!(v.im, im, epsilon = 1e-12);
        }
    }

    #[test]
    fn wrap_angle_canonical_interval() {
        for &phi in &[-10.0, -PI, -0.1, 0.0, 1.0, PI, 7.5, 100.0] {
            let w = wrap_angle(phi);
            assert!((-PI..PI).contains(&w), "{phi} -> {w}");
            // same angle modulo 2 pi
            assert!(((phi - w) / (2.0 * PI) - ((phi - w) / (2.0 * PI)).round()).abs() < 1e-12);
        }
    }
}
